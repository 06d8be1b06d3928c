#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occ/params.hpp"
#include "occ/text.hpp"

namespace occ::lm {

struct LmConfig {
    int layers = 2;
    int heads = 2;
    int d_model = 64;
    int mlp_hidden = 256;
    int max_len = 128;
    int vocab = 0;
    bool length_normalize_beam = false;  // rank by summed log-probability when off

    void validate() const;
};

// Visual token block (row-major n_visual x d_model) followed by text token ids.
struct LmInput {
    std::vector<double> visual;
    int n_visual = 0;
    text::TokenSeq text;

    int total_len() const { return n_visual + static_cast<int>(text.size()); }
};

struct LmModel {
    LmConfig cfg;
    ParamMap params;  // lm.tok_embed, lm.L<i>.*, lm.ln_f.*, lm.head.*

    static LmModel init(const LmConfig& cfg, uint64_t seed);
};

// Sinusoidal position table rows [t0, t0+count).
std::vector<double> positional_rows(const LmConfig& cfg, int t0, int count);

// Causal transformer over the embedded input; h_t depends only on positions <= t.
// The visual block may be a tape tensor (trainable path through the fusion map).
num::Tensor build_hidden(num::Tape& tape, Binder& bind, const LmConfig& cfg, const LmInput& input);
num::Tensor build_hidden(num::Tape& tape, Binder& bind, const LmConfig& cfg, num::Tensor visual_tokens,
                         const text::TokenSeq& ids);
num::Tensor build_logits(num::Tape& tape, Binder& bind, const LmConfig& cfg, num::Tensor hidden);

// Inference wrappers over an immutable model.
std::vector<double> forward_hidden(const LmModel& m, const LmInput& input);  // T x d_model
std::vector<double> next_token_dist(const LmModel& m, const std::vector<double>& h_t);
std::vector<double> last_position_log_probs(const LmModel& m, const LmInput& input, double temperature = 1.0);

struct BeamHypothesis {
    text::TokenSeq tokens;  // generated tokens, EOS included when emitted
    double cum_logprob = 0.0;
    bool finished = false;
};

// Greedy decoding; ties broken toward the lowest token id. Stops on EOS (which is
// not included in the returned sequence's trailing position rule: EOS is kept).
text::TokenSeq greedy_decode(const LmModel& m, const LmInput& prefix, int max_new);

// Keeps the top-`width` hypotheses per step by cumulative log-probability;
// finished hypotheses are frozen and compete in the final ranking. Ties break
// lexicographically on token ids.
BeamHypothesis beam_search_best(const LmModel& m, const LmInput& prefix, int width, int max_new);
text::TokenSeq beam_search(const LmModel& m, const LmInput& prefix, int width, int max_new);

struct SampleResult {
    text::TokenSeq tokens;
    double logprob = 0.0;  // under the temperature-applied distribution
};

// Ancestral sampling at the given temperature; reproducible per seed.
// Temperatures below 1e-6 fall back to greedy with logprob 0.
SampleResult sample_decode(const LmModel& m, const LmInput& prefix, int max_new, double temperature,
                           uint64_t seed);

// Re-scores a generated continuation: sum of log p(token_t | prefix, tokens_<t).
double score_tokens(const LmModel& m, const LmInput& prefix, const text::TokenSeq& generated,
                    double temperature = 1.0);

}  // namespace occ::lm
