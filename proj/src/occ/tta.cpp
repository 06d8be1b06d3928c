#include "occ/tta.hpp"

#include <algorithm>
#include <cmath>

namespace occ::tta {

using num::Tape;
using num::Tensor;

Scope scope_from_name(const std::string& name) {
    if (name == "lm_head_only") return Scope::LmHeadOnly;
    if (name == "lm_all") return Scope::LmAll;
    if (name == "lm_plus_fusion") return Scope::LmPlusFusion;
    throw ConfigError("unknown tta scope: " + name);
}

std::string scope_name(Scope s) {
    switch (s) {
        case Scope::LmHeadOnly: return "lm_head_only";
        case Scope::LmAll: return "lm_all";
        case Scope::LmPlusFusion: return "lm_plus_fusion";
    }
    return "lm_plus_fusion";
}

void TtaConfig::validate() const {
    if (k < 1) throw DomainError("tta.k must be at least 1");
    if (steps < 0) throw DomainError("tta.steps must be non-negative");
    if (temperature <= 0.0) throw DomainError("tta.temperature must be positive");
    if (max_new < 1 || beam_width < 1) throw DomainError("invalid tta decode settings");
}

double clip_score_or_zero(const clip::ClipTower& tower, const text::TokenSeq& tokens,
                          const img::Image& image) {
    bool has_content = false;
    for (int id : tokens)
        if (id != text::kPad && id != text::kBos && id != text::kEos) has_content = true;
    if (!has_content) return 0.0;
    return tower.clip_score(tokens, image);
}

std::vector<double> center_rewards(const std::vector<double>& scores, bool leave_one_out) {
    int k = static_cast<int>(scores.size());
    if (k < 1) throw DomainError("center_rewards needs at least one score");
    std::vector<double> out(static_cast<size_t>(k), 0.0);
    bool all_equal = true;
    for (int i = 1; i < k; ++i) all_equal = all_equal && scores[static_cast<size_t>(i)] == scores[0];
    if (all_equal || k == 1) return out;  // the expectation estimate equals every score

    double sum = 0.0;
    for (double s : scores) sum += s;
    for (int i = 0; i < k; ++i) {
        double baseline = leave_one_out ? (sum - scores[static_cast<size_t>(i)]) / (k - 1) : sum / k;
        out[static_cast<size_t>(i)] = scores[static_cast<size_t>(i)] - baseline;
    }
    return out;
}

std::vector<RewardSample> compute_rewards(const std::vector<lm::SampleResult>& candidates,
                                          const img::Image& image, const clip::ClipTower& reward_tower,
                                          bool leave_one_out) {
    int k = static_cast<int>(candidates.size());
    if (k < 1) throw DomainError("compute_rewards needs at least one candidate");

    std::vector<RewardSample> out(static_cast<size_t>(k));
    std::vector<double> scores(static_cast<size_t>(k));
    clip::Embedding img_emb = reward_tower.encode_image(image);
    for (int i = 0; i < k; ++i) {
        out[static_cast<size_t>(i)].text = candidates[static_cast<size_t>(i)].tokens;
        out[static_cast<size_t>(i)].logprob = candidates[static_cast<size_t>(i)].logprob;
        bool has_content = false;
        for (int id : candidates[static_cast<size_t>(i)].tokens)
            if (id != text::kPad && id != text::kBos && id != text::kEos) has_content = true;
        scores[static_cast<size_t>(i)] =
            has_content
                ? std::clamp(clip::dot(reward_tower.encode_text(candidates[static_cast<size_t>(i)].tokens),
                                       img_emb),
                             -1.0, 1.0)
                : 0.0;
        out[static_cast<size_t>(i)].clip_s = scores[static_cast<size_t>(i)];
    }
    std::vector<double> rewards = center_rewards(scores, leave_one_out);
    for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)].reward = rewards[static_cast<size_t>(i)];
    return out;
}

lm::LmInput make_prompt(const AdaptState& s, const text::TokenSeq& instruction) {
    if (instruction.empty()) throw DomainError("empty instruction");
    clip::Embedding xv = fusion::blend(s.xv1, s.xv2, s.alpha);
    std::vector<double> tokens = fusion::map_to_tokens(s.fmap, xv);
    text::TokenSeq ids;
    ids.push_back(text::kBos);
    ids.insert(ids.end(), instruction.begin(), instruction.end());
    return fusion::fuse_inputs(std::move(tokens), s.fmap.cfg, ids);
}

StepReport adapt_step(AdaptState& s, const img::Image& image, const text::TokenSeq& instruction,
                      const clip::ClipTower& reward_tower, const TtaConfig& cfg, uint64_t rng_seed) {
    cfg.validate();
    lm::LmInput prompt = make_prompt(s, instruction);

    std::vector<lm::SampleResult> candidates;
    candidates.reserve(static_cast<size_t>(cfg.k));
    Rng seeder = Rng(rng_seed).fork(0xADA7);
    for (int i = 0; i < cfg.k; ++i)
        candidates.push_back(lm::sample_decode(s.lm, prompt, cfg.max_new, cfg.temperature, seeder.u64()));

    std::vector<RewardSample> rewards = compute_rewards(candidates, image, reward_tower, cfg.leave_one_out);

    StepReport rep;
    double best_clip = -2.0;
    for (const auto& r : rewards) {
        rep.mean_clip_s += r.clip_s;
        if (r.clip_s > best_clip) {
            best_clip = r.clip_s;
            rep.best_cum_logprob = r.logprob;
        }
    }
    rep.mean_clip_s /= cfg.k;
    for (const auto& r : rewards) {
        double d = r.clip_s - rep.mean_clip_s;
        rep.reward_variance += d * d;
    }
    rep.reward_variance /= cfg.k;

    bool all_zero = true;
    for (const auto& r : rewards) all_zero = all_zero && r.reward == 0.0;
    if (all_zero) {
        rep.skipped = true;
        return rep;
    }

    // surrogate objective on one tape across all candidates
    auto lm_trainable = [&](const std::string& name) {
        if (cfg.scope == Scope::LmHeadOnly) return name.rfind("lm.head.", 0) == 0;
        return true;
    };
    Tape tape;
    Binder lm_bind(tape, s.lm.params, lm_trainable);
    Binder fu_bind(tape, s.fmap.params,
                   [&](const std::string&) { return cfg.scope == Scope::LmPlusFusion; });

    clip::Embedding xv = fusion::blend(s.xv1, s.xv2, s.alpha);
    Tensor xv_t = tape.input({1, s.fmap.cfg.embed_dim}, xv.v);
    Tensor visual = fusion::build_tokens(tape, fu_bind, s.fmap.cfg, xv_t);

    int n_vis = s.fmap.cfg.n_tokens;
    int m_ins = 1 + static_cast<int>(instruction.size());  // BOS + instruction
    Tensor objective{};
    bool first = true;
    for (int i = 0; i < cfg.k; ++i) {
        const auto& cand = rewards[static_cast<size_t>(i)];
        if (cand.text.empty() || cand.reward == 0.0) continue;
        text::TokenSeq ids;
        ids.push_back(text::kBos);
        ids.insert(ids.end(), instruction.begin(), instruction.end());
        ids.insert(ids.end(), cand.text.begin(), cand.text.end());
        Tensor hidden = lm::build_hidden(tape, lm_bind, s.lm.cfg, visual, ids);
        Tensor logits = lm::build_logits(tape, lm_bind, s.lm.cfg, hidden);
        if (cfg.temperature != 1.0) logits = tape.scale(logits, 1.0 / cfg.temperature);
        Tensor logp = tape.log_softmax(logits);
        int L = static_cast<int>(cand.text.size());
        std::vector<int> rows(static_cast<size_t>(L)), cols(static_cast<size_t>(L));
        for (int j = 0; j < L; ++j) {
            rows[static_cast<size_t>(j)] = n_vis + m_ins - 1 + j;
            cols[static_cast<size_t>(j)] = cand.text[static_cast<size_t>(j)];
        }
        Tensor lp_sum = tape.sum_all(tape.gather_elems(logp, rows, cols));
        Tensor term = tape.scale(lp_sum, cand.reward);
        objective = first ? term : tape.add(objective, term);
        first = false;
    }
    if (first) {
        rep.skipped = true;
        return rep;
    }
    Tensor loss = tape.neg(tape.scale(objective, 1.0 / cfg.k));
    tape.backward_scalar(loss);

    GradMap lm_grads, fu_grads;
    lm_bind.accumulate_grads(lm_grads);
    fu_bind.accumulate_grads(fu_grads);
    sgd_step(s.lm.params, lm_grads, cfg.learning_rate, 0.0);
    if (cfg.scope == Scope::LmPlusFusion) sgd_step(s.fmap.params, fu_grads, cfg.learning_rate, 0.0);
    return rep;
}

AdaptResult test_time_adapt(const AdaptState& initial, const img::Image& image,
                            const text::TokenSeq& instruction, const clip::ClipTower& reward_tower,
                            const TtaConfig& cfg, uint64_t rng_seed) {
    cfg.validate();
    AdaptState state = initial;  // copy-on-adapt
    AdaptResult out;
    out.trace.reserve(static_cast<size_t>(cfg.steps));
    Rng seeder = Rng(rng_seed).fork(0x77A);
    for (int step = 0; step < cfg.steps; ++step)
        out.trace.push_back(adapt_step(state, image, instruction, reward_tower, cfg, seeder.u64()));
    out.answer = lm::beam_search(state.lm, make_prompt(state, instruction), cfg.beam_width, cfg.max_new);
    return out;
}

}  // namespace occ::tta
