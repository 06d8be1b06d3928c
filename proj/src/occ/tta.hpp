#pragma once

#include <cstdint>
#include <vector>

#include "occ/clip_tower.hpp"
#include "occ/decoder_lm.hpp"
#include "occ/fusion.hpp"
#include "occ/image.hpp"

namespace occ::tta {

enum class Scope { LmHeadOnly, LmAll, LmPlusFusion };

Scope scope_from_name(const std::string& name);
std::string scope_name(Scope s);

struct TtaConfig {
    int k = 8;                     // candidates per step
    int steps = 4;                 // adaptation steps per test sample
    double learning_rate = 2e-5;
    double temperature = 1.0;
    Scope scope = Scope::LmPlusFusion;
    bool leave_one_out = false;    // baseline estimator variant
    bool cumulative = false;       // keep adapted state across samples
    int max_new = 12;
    int beam_width = 4;

    void validate() const;
};

struct RewardSample {
    text::TokenSeq text;
    double logprob = 0.0;  // under the sampling distribution
    double clip_s = 0.0;
    double reward = 0.0;   // clip_s minus the batch expectation estimate
};

// Scores each candidate against the image with the frozen reward tower and
// centers by the sample-mean expectation estimate. Candidates with no content
// tokens score 0. Identical candidates yield exactly zero rewards.
std::vector<RewardSample> compute_rewards(const std::vector<lm::SampleResult>& candidates,
                                          const img::Image& image, const clip::ClipTower& reward_tower,
                                          bool leave_one_out = false);

// Centering alone: reward_i = score_i - baseline_i. All-equal scores (and the
// K = 1 case) produce exact zeros.
std::vector<double> center_rewards(const std::vector<double>& scores, bool leave_one_out = false);

// Adaptation state: generation-side parameters plus the sample's fixed visual
// embeddings. The fused prompt is rebuilt from current parameters every step.
struct AdaptState {
    lm::LmModel lm;
    fusion::FusionMap fmap;
    clip::Embedding xv1;
    clip::Embedding xv2;
    double alpha = 0.5;
};

lm::LmInput make_prompt(const AdaptState& s, const text::TokenSeq& instruction);

struct StepReport {
    double mean_clip_s = 0.0;
    double reward_variance = 0.0;
    double best_cum_logprob = 0.0;  // log-probability of the highest-scoring candidate
    bool skipped = false;           // all rewards zero: parameters untouched
};

// One ascent step on (1/K) sum_i reward_i * logprob_i over the configured scope.
// The reward tower is read-only throughout.
StepReport adapt_step(AdaptState& s, const img::Image& image, const text::TokenSeq& instruction,
                      const clip::ClipTower& reward_tower, const TtaConfig& cfg, uint64_t rng_seed);

struct AdaptResult {
    text::TokenSeq answer;
    std::vector<StepReport> trace;
};

// cfg.steps adapt_steps on a copy of `initial` (per-sample reset), then a beam
// decode of the final answer. steps = 0 reproduces the unadapted output.
AdaptResult test_time_adapt(const AdaptState& initial, const img::Image& image,
                            const text::TokenSeq& instruction, const clip::ClipTower& reward_tower,
                            const TtaConfig& cfg, uint64_t rng_seed);

// clip_score that tolerates content-free candidates (scores 0).
double clip_score_or_zero(const clip::ClipTower& tower, const text::TokenSeq& tokens,
                          const img::Image& image);

}  // namespace occ::tta
