#include "occ/decoder_lm.hpp"

#include <algorithm>
#include <cmath>

namespace occ::lm {

using num::Tape;
using num::Tensor;

namespace {
constexpr double kMaskValue = -1e30;
}

void LmConfig::validate() const {
    if (d_model % heads != 0) throw DomainError("d_model must be divisible by heads");
    if (layers < 1 || heads < 1 || d_model < 1 || max_len < 1) throw DomainError("invalid model size");
    if (vocab <= text::kEos) throw DomainError("vocabulary must at least cover the reserved ids");
}

LmModel LmModel::init(const LmConfig& cfg, uint64_t seed) {
    cfg.validate();
    LmModel m;
    m.cfg = cfg;
    Rng rng(seed);
    auto& p = m.params;
    Rng re = rng.fork(21);
    p["lm.tok_embed"] = dense_init(cfg.vocab, cfg.d_model, re);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string pre = "lm.L" + std::to_string(l) + ".";
        Rng rl = rng.fork(100 + static_cast<uint64_t>(l));
        p[pre + "ln1.g"] = full({cfg.d_model}, 1.0);
        p[pre + "ln1.b"] = zeros({cfg.d_model});
        p[pre + "wq"] = dense_init(cfg.d_model, cfg.d_model, rl);
        p[pre + "bq"] = zeros({cfg.d_model});
        p[pre + "wk"] = dense_init(cfg.d_model, cfg.d_model, rl);
        p[pre + "bk"] = zeros({cfg.d_model});
        p[pre + "wv"] = dense_init(cfg.d_model, cfg.d_model, rl);
        p[pre + "bv"] = zeros({cfg.d_model});
        p[pre + "wo"] = dense_init(cfg.d_model, cfg.d_model, rl);
        p[pre + "bo"] = zeros({cfg.d_model});
        p[pre + "ln2.g"] = full({cfg.d_model}, 1.0);
        p[pre + "ln2.b"] = zeros({cfg.d_model});
        p[pre + "mlp.w1"] = dense_init(cfg.d_model, cfg.mlp_hidden, rl);
        p[pre + "mlp.b1"] = zeros({cfg.mlp_hidden});
        p[pre + "mlp.w2"] = dense_init(cfg.mlp_hidden, cfg.d_model, rl);
        p[pre + "mlp.b2"] = zeros({cfg.d_model});
    }
    p["lm.ln_f.g"] = full({cfg.d_model}, 1.0);
    p["lm.ln_f.b"] = zeros({cfg.d_model});
    // zero head: a fresh model predicts the uniform distribution
    p["lm.head.w"] = zeros({cfg.d_model, cfg.vocab});
    p["lm.head.b"] = zeros({cfg.vocab});
    return m;
}

std::vector<double> positional_rows(const LmConfig& cfg, int t0, int count) {
    std::vector<double> out(static_cast<size_t>(count) * cfg.d_model);
    for (int t = 0; t < count; ++t) {
        int pos = t0 + t;
        for (int i = 0; i < cfg.d_model / 2; ++i) {
            double angle = pos / std::pow(10000.0, 2.0 * i / cfg.d_model);
            out[static_cast<size_t>(t) * cfg.d_model + 2 * static_cast<size_t>(i)] = std::sin(angle);
            out[static_cast<size_t>(t) * cfg.d_model + 2 * static_cast<size_t>(i) + 1] = std::cos(angle);
        }
    }
    return out;
}

namespace {

Tensor transformer_stack(Tape& tape, Binder& bind, const LmConfig& cfg, Tensor x, int T) {
    // additive causal mask; masked logits absorb into -1e30 and underflow to
    // exactly zero after the max-subtracted softmax
    std::vector<double> maskv(static_cast<size_t>(T) * T, 0.0);
    for (int i = 0; i < T; ++i)
        for (int j = i + 1; j < T; ++j) maskv[static_cast<size_t>(i) * T + j] = kMaskValue;
    Tensor mask = tape.input({T, T}, std::move(maskv));

    Tensor pos = tape.input({T, cfg.d_model}, positional_rows(cfg, 0, T));
    x = tape.add(x, pos);

    int dh = cfg.d_model / cfg.heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string pre = "lm.L" + std::to_string(l) + ".";
        Tensor xin = tape.layer_norm(x, bind(pre + "ln1.g"), bind(pre + "ln1.b"));
        Tensor q = tape.add_row_broadcast(tape.matmul(xin, bind(pre + "wq")), bind(pre + "bq"));
        Tensor k = tape.add_row_broadcast(tape.matmul(xin, bind(pre + "wk")), bind(pre + "bk"));
        Tensor v = tape.add_row_broadcast(tape.matmul(xin, bind(pre + "wv")), bind(pre + "bv"));
        Tensor heads_out{};
        for (int h = 0; h < cfg.heads; ++h) {
            Tensor qh = tape.slice_cols(q, h * dh, dh);
            Tensor kh = tape.slice_cols(k, h * dh, dh);
            Tensor vh = tape.slice_cols(v, h * dh, dh);
            Tensor scores = tape.add(tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale), mask);
            Tensor attn = tape.softmax(scores);
            Tensor oh = tape.matmul(attn, vh);
            heads_out = h == 0 ? oh : tape.concat_cols(heads_out, oh);
        }
        Tensor att_out = tape.add_row_broadcast(tape.matmul(heads_out, bind(pre + "wo")), bind(pre + "bo"));
        x = tape.add(x, att_out);
        Tensor xin2 = tape.layer_norm(x, bind(pre + "ln2.g"), bind(pre + "ln2.b"));
        Tensor h1 = tape.relu(
            tape.add_row_broadcast(tape.matmul(xin2, bind(pre + "mlp.w1")), bind(pre + "mlp.b1")));
        Tensor h2 = tape.add_row_broadcast(tape.matmul(h1, bind(pre + "mlp.w2")), bind(pre + "mlp.b2"));
        x = tape.add(x, h2);
    }
    return tape.layer_norm(x, bind("lm.ln_f.g"), bind("lm.ln_f.b"));
}

}  // namespace

Tensor build_hidden(Tape& tape, Binder& bind, const LmConfig& cfg, Tensor visual_tokens,
                    const text::TokenSeq& ids) {
    int n_vis = visual_tokens.tape ? visual_tokens.rows() : 0;
    int T = n_vis + static_cast<int>(ids.size());
    if (T < 1) throw DomainError("empty model input");
    if (T > cfg.max_len)
        throw DomainError("sequence of " + std::to_string(T) + " exceeds max length " +
                          std::to_string(cfg.max_len));
    Tensor x{};
    if (n_vis > 0 && !ids.empty()) {
        Tensor emb = tape.embed_gather(bind("lm.tok_embed"), ids);
        x = tape.concat_rows(visual_tokens, emb);
    } else if (n_vis > 0) {
        x = visual_tokens;
    } else {
        x = tape.embed_gather(bind("lm.tok_embed"), ids);
    }
    return transformer_stack(tape, bind, cfg, x, T);
}

Tensor build_hidden(Tape& tape, Binder& bind, const LmConfig& cfg, const LmInput& input) {
    Tensor visual{};
    if (input.n_visual > 0) {
        if (input.visual.size() != static_cast<size_t>(input.n_visual) * cfg.d_model)
            throw DimensionError("visual block of " + std::to_string(input.visual.size()) +
                                 " values for " + std::to_string(input.n_visual) + " tokens");
        visual = tape.input({input.n_visual, cfg.d_model}, input.visual);
    }
    return build_hidden(tape, bind, cfg, visual, input.text);
}

Tensor build_logits(Tape& tape, Binder& bind, const LmConfig& cfg, Tensor hidden) {
    (void)cfg;
    return tape.add_row_broadcast(tape.matmul(hidden, bind("lm.head.w")), bind("lm.head.b"));
}

std::vector<double> forward_hidden(const LmModel& m, const LmInput& input) {
    Tape tape;
    Binder bind(tape, m.params, [](const std::string&) { return false; });
    return build_hidden(tape, bind, m.cfg, input).values();
}

std::vector<double> next_token_dist(const LmModel& m, const std::vector<double>& h_t) {
    if (static_cast<int>(h_t.size()) != m.cfg.d_model)
        throw DimensionError("hidden state of " + std::to_string(h_t.size()) + " values, expected " +
                             std::to_string(m.cfg.d_model));
    Tape tape;
    Binder bind(tape, m.params, [](const std::string&) { return false; });
    Tensor h = tape.input({1, m.cfg.d_model}, h_t);
    return tape.softmax(build_logits(tape, bind, m.cfg, h)).values();
}

std::vector<double> last_position_log_probs(const LmModel& m, const LmInput& input, double temperature) {
    if (temperature <= 0.0) throw DomainError("temperature must be positive");
    Tape tape;
    Binder bind(tape, m.params, [](const std::string&) { return false; });
    Tensor h = build_hidden(tape, bind, m.cfg, input);
    int T = input.total_len();
    Tensor last = tape.slice_rows(h, T - 1, 1);
    Tensor logits = build_logits(tape, bind, m.cfg, last);
    if (temperature != 1.0) logits = tape.scale(logits, 1.0 / temperature);
    return tape.log_softmax(logits).values();
}

text::TokenSeq greedy_decode(const LmModel& m, const LmInput& prefix, int max_new) {
    LmInput cur = prefix;
    text::TokenSeq out;
    for (int step = 0; step < max_new; ++step) {
        std::vector<double> lp = last_position_log_probs(m, cur, 1.0);
        int best = 0;
        for (int v = 1; v < m.cfg.vocab; ++v)
            if (lp[static_cast<size_t>(v)] > lp[static_cast<size_t>(best)]) best = v;
        out.push_back(best);
        cur.text.push_back(best);
        if (best == text::kEos) break;
    }
    return out;
}

namespace {

// (-cum, tokens) ordering: higher score first, then lexicographically smaller tokens
bool hyp_before(const BeamHypothesis& a, const BeamHypothesis& b, bool length_norm) {
    double sa = a.cum_logprob, sb = b.cum_logprob;
    if (length_norm) {
        sa /= std::max<size_t>(1, a.tokens.size());
        sb /= std::max<size_t>(1, b.tokens.size());
    }
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
}

}  // namespace

BeamHypothesis beam_search_best(const LmModel& m, const LmInput& prefix, int width, int max_new) {
    if (width < 1) throw DomainError("beam width must be at least 1");
    std::vector<BeamHypothesis> beams{{{}, 0.0, false}};
    for (int step = 0; step < max_new; ++step) {
        bool all_finished = true;
        for (const auto& h : beams) all_finished = all_finished && h.finished;
        if (all_finished) break;

        std::vector<BeamHypothesis> candidates;
        for (const auto& h : beams) {
            if (h.finished) {
                candidates.push_back(h);  // frozen, competes as-is
                continue;
            }
            LmInput cur = prefix;
            cur.text.insert(cur.text.end(), h.tokens.begin(), h.tokens.end());
            std::vector<double> lp = last_position_log_probs(m, cur, 1.0);
            for (int v = 0; v < m.cfg.vocab; ++v) {
                BeamHypothesis c = h;
                c.tokens.push_back(v);
                c.cum_logprob += lp[static_cast<size_t>(v)];
                c.finished = (v == text::kEos) || (step + 1 == max_new);
                candidates.push_back(std::move(c));
            }
        }
        std::sort(candidates.begin(), candidates.end(), [&](const auto& a, const auto& b) {
            return hyp_before(a, b, m.cfg.length_normalize_beam);
        });
        if (static_cast<int>(candidates.size()) > width) candidates.resize(static_cast<size_t>(width));
        beams = std::move(candidates);
    }
    for (auto& h : beams) h.finished = true;  // max length reached
    std::sort(beams.begin(), beams.end(), [&](const auto& a, const auto& b) {
        return hyp_before(a, b, m.cfg.length_normalize_beam);
    });
    return beams.front();
}

text::TokenSeq beam_search(const LmModel& m, const LmInput& prefix, int width, int max_new) {
    return beam_search_best(m, prefix, width, max_new).tokens;
}

SampleResult sample_decode(const LmModel& m, const LmInput& prefix, int max_new, double temperature,
                           uint64_t seed) {
    if (temperature <= 0.0) throw DomainError("temperature must be positive");
    if (temperature < 1e-6) return {greedy_decode(m, prefix, max_new), 0.0};

    Rng rng = Rng(seed).fork(0x5A3D);
    LmInput cur = prefix;
    SampleResult out;
    for (int step = 0; step < max_new; ++step) {
        std::vector<double> lp = last_position_log_probs(m, cur, temperature);
        double u = rng.uniform();
        double cum = 0.0;
        int pick = m.cfg.vocab - 1;
        for (int v = 0; v < m.cfg.vocab; ++v) {
            cum += std::exp(lp[static_cast<size_t>(v)]);
            if (u < cum) {
                pick = v;
                break;
            }
        }
        out.tokens.push_back(pick);
        out.logprob += lp[static_cast<size_t>(pick)];
        cur.text.push_back(pick);
        if (pick == text::kEos) break;
    }
    return out;
}

double score_tokens(const LmModel& m, const LmInput& prefix, const text::TokenSeq& generated,
                    double temperature) {
    LmInput cur = prefix;
    double total = 0.0;
    for (int tok : generated) {
        std::vector<double> lp = last_position_log_probs(m, cur, temperature);
        total += lp[static_cast<size_t>(tok)];
        cur.text.push_back(tok);
    }
    return total;
}

}  // namespace occ::lm
