#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "occ/synthdata.hpp"
#include "occ/tta.hpp"

using namespace occ;
using namespace occ::tta;

namespace {

struct Fixture {
    text::Vocab vocab;
    clip::ClipTower tower;
    AdaptState state;
    img::Image image;
    text::TokenSeq instruction;

    Fixture()
        : vocab(text::Vocab::build({"Describe the object in the hand.", "a small red sphere",
                                    "a long green cylinder", "yes no box torus capsule"})),
          tower(clip::ClipTower::init({}, vocab.size(), 3)) {
        fusion::FusionConfig fcfg;
        fcfg.n_tokens = 4;
        fcfg.d_model = 16;
        fcfg.embed_dim = 64;
        lm::LmConfig lcfg;
        lcfg.layers = 1;
        lcfg.heads = 2;
        lcfg.d_model = 16;
        lcfg.mlp_hidden = 32;
        lcfg.max_len = 64;
        lcfg.vocab = vocab.size();
        state.lm = lm::LmModel::init(lcfg, 11);
        Rng rng = Rng(11).fork(7);
        for (auto& v : state.lm.params["lm.head.w"].value) v = 0.3 * rng.normal();
        state.fmap = fusion::FusionMap::init(fcfg, 11);
        state.alpha = 0.5;

        synth::GenSpec spec;
        spec.scenes = 1;
        spec.views = 1;
        synth::SceneRecord rec = synth::generate_scene(13, spec, 0, 0);
        image = synth::render(rec, 0, true);
        state.xv1 = tower.encode_image(image);
        state.xv2 = tower.encode_image(synth::render(rec, 0, false));
        instruction = vocab.tokenize("Describe the object in the hand.");
    }
};

}  // namespace

TEST_CASE("center_rewards: singleton, mean subtraction, zero-sum") {
    CHECK(center_rewards({0.37}) == std::vector<double>{0.0});

    auto r = center_rewards({0.6, 0.4});
    CHECK(r[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(-0.1).epsilon(1e-12));

    Rng rng(5);
    for (int k : {2, 3, 5, 8, 13}) {
        std::vector<double> scores(static_cast<size_t>(k));
        for (auto& s : scores) s = rng.uniform(-1, 1);
        for (bool loo : {false, true}) {
            auto rw = center_rewards(scores, loo);
            double sum = 0;
            for (double v : rw) sum += v;
            CHECK(std::fabs(sum) < 1e-9);
        }
    }

    // identical scores center to exact zeros for any k
    for (int k : {3, 6, 7})
        for (double v : center_rewards(std::vector<double>(static_cast<size_t>(k), 1.0 / 3.0)))
            CHECK(v == 0.0);

    CHECK_THROWS_AS(center_rewards({}), DomainError);
}

TEST_CASE("compute_rewards scores candidates and centers them") {
    Fixture f;
    std::vector<lm::SampleResult> cands;
    cands.push_back({f.vocab.tokenize("a small red sphere"), -1.0});
    cands.push_back({f.vocab.tokenize("a long green cylinder"), -2.0});
    cands.push_back({{text::kEos}, -0.1});  // content-free: scores zero

    auto rewards = compute_rewards(cands, f.image, f.tower);
    REQUIRE(rewards.size() == 3);
    CHECK(rewards[2].clip_s == 0.0);
    double sum = 0;
    double mean = (rewards[0].clip_s + rewards[1].clip_s + rewards[2].clip_s) / 3.0;
    for (const auto& r : rewards) {
        sum += r.reward;
        CHECK(r.reward == doctest::Approx(r.clip_s - mean).epsilon(1e-12));
    }
    CHECK(std::fabs(sum) < 1e-9);
    CHECK_THROWS_AS(compute_rewards({}, f.image, f.tower), DomainError);

    // K = 1: reward exactly zero
    auto single = compute_rewards({cands[0]}, f.image, f.tower);
    CHECK(single[0].reward == 0.0);
}

TEST_CASE("identical candidates make adapt_step a parameter no-op") {
    Fixture f;
    TtaConfig cfg;
    cfg.k = 5;
    cfg.temperature = 1e-9;  // greedy fallback: all candidates identical
    cfg.learning_rate = 0.5;
    uint64_t before_lm = param_checksum(f.state.lm.params);
    uint64_t before_fu = param_checksum(f.state.fmap.params);
    StepReport rep = adapt_step(f.state, f.image, f.instruction, f.tower, cfg, 99);
    CHECK(rep.skipped);
    CHECK(param_checksum(f.state.lm.params) == before_lm);
    CHECK(param_checksum(f.state.fmap.params) == before_fu);
    CHECK(rep.reward_variance == doctest::Approx(0.0));
}

TEST_CASE("adapt_step updates the configured scope and freezes the reward tower") {
    Fixture f;
    TtaConfig cfg;
    cfg.k = 4;
    cfg.learning_rate = 0.1;
    cfg.scope = Scope::LmHeadOnly;
    uint64_t tower_before = param_checksum(f.tower.params);
    ParamMap lm_before = f.state.lm.params;
    ParamMap fu_before = f.state.fmap.params;
    StepReport rep = adapt_step(f.state, f.image, f.instruction, f.tower, cfg, 7);
    CHECK(param_checksum(f.tower.params) == tower_before);
    if (!rep.skipped) {
        // only head parameters moved
        CHECK(f.state.lm.params["lm.head.w"].value != lm_before["lm.head.w"].value);
        CHECK(f.state.lm.params["lm.tok_embed"].value == lm_before["lm.tok_embed"].value);
        CHECK(param_checksum(f.state.fmap.params) == param_checksum(fu_before));
    }

    // lm_plus_fusion moves the fusion map too
    Fixture g;
    TtaConfig cfg2;
    cfg2.k = 4;
    cfg2.learning_rate = 0.1;
    cfg2.scope = Scope::LmPlusFusion;
    StepReport rep2 = adapt_step(g.state, g.image, g.instruction, g.tower, cfg2, 7);
    if (!rep2.skipped) CHECK(g.state.fmap.params["fusion.map.w"].value != fu_before["fusion.map.w"].value);
}

TEST_CASE("surrogate objective gradient matches finite differences on frozen samples") {
    Fixture f;
    TtaConfig cfg;
    cfg.k = 3;
    // frozen candidates and rewards
    lm::LmInput prompt = make_prompt(f.state, f.instruction);
    std::vector<text::TokenSeq> cands;
    for (uint64_t s = 0; s < 3; ++s)
        cands.push_back(lm::sample_decode(f.state.lm, prompt, 4, 1.0, s).tokens);
    std::vector<double> rewards{0.2, -0.15, -0.05};

    clip::Embedding xv = fusion::blend(f.state.xv1, f.state.xv2, f.state.alpha);
    int n_vis = f.state.fmap.cfg.n_tokens;
    int m_ins = 1 + static_cast<int>(f.instruction.size());

    auto build = [&](num::Tape& t, Binder& lm_b, Binder& fu_b) {
        num::Tensor xv_t = t.input({1, f.state.fmap.cfg.embed_dim}, xv.v);
        num::Tensor visual = fusion::build_tokens(t, fu_b, f.state.fmap.cfg, xv_t);
        num::Tensor obj{};
        bool first = true;
        for (size_t i = 0; i < cands.size(); ++i) {
            if (cands[i].empty()) continue;
            text::TokenSeq ids;
            ids.push_back(text::kBos);
            ids.insert(ids.end(), f.instruction.begin(), f.instruction.end());
            ids.insert(ids.end(), cands[i].begin(), cands[i].end());
            num::Tensor h = lm::build_hidden(t, lm_b, f.state.lm.cfg, visual, ids);
            num::Tensor logp = t.log_softmax(lm::build_logits(t, lm_b, f.state.lm.cfg, h));
            int L = static_cast<int>(cands[i].size());
            std::vector<int> rows(static_cast<size_t>(L)), cols(static_cast<size_t>(L));
            for (int j = 0; j < L; ++j) {
                rows[static_cast<size_t>(j)] = n_vis + m_ins - 1 + j;
                cols[static_cast<size_t>(j)] = cands[i][static_cast<size_t>(j)];
            }
            num::Tensor term = t.scale(t.sum_all(t.gather_elems(logp, rows, cols)), rewards[i]);
            obj = first ? term : t.add(obj, term);
            first = false;
        }
        return t.neg(t.scale(obj, 1.0 / static_cast<double>(cands.size())));
    };

    // merge both param maps for the finite-difference driver
    ParamMap merged = f.state.lm.params;
    for (const auto& [k, v] : f.state.fmap.params) merged[k] = v;

    auto fn = [&](const ParamMap& pm) {
        ParamMap lm_p, fu_p;
        for (const auto& [k, v] : pm) (k.rfind("fusion.", 0) == 0 ? fu_p : lm_p)[k] = v;
        num::Tape t;
        Binder lm_b(t, lm_p);
        Binder fu_b(t, fu_p);
        return build(t, lm_b, fu_b).scalar();
    };
    auto gr = [&](const ParamMap& pm) {
        ParamMap lm_p, fu_p;
        for (const auto& [k, v] : pm) (k.rfind("fusion.", 0) == 0 ? fu_p : lm_p)[k] = v;
        num::Tape t;
        Binder lm_b(t, lm_p);
        Binder fu_b(t, fu_p);
        auto loss = build(t, lm_b, fu_b);
        t.backward_scalar(loss);
        GradMap g;
        lm_b.accumulate_grads(g);
        fu_b.accumulate_grads(g);
        return g;
    };
    auto res = gradcheck::check(fn, gr, merged, 1e-3, 4);
    CHECK_MESSAGE(res.ok, "worst ", res.worst_rel, " at ", res.worst_at);
}

TEST_CASE("test_time_adapt: zero steps reproduce the unadapted output, trace bookkeeping") {
    Fixture f;
    TtaConfig cfg;
    cfg.steps = 0;
    cfg.beam_width = 3;
    cfg.max_new = 6;
    lm::LmInput prompt = make_prompt(f.state, f.instruction);
    text::TokenSeq unadapted = lm::beam_search(f.state.lm, prompt, 3, 6);
    AdaptResult res = test_time_adapt(f.state, f.image, f.instruction, f.tower, cfg, 5);
    CHECK(res.answer == unadapted);
    CHECK(res.trace.empty());

    cfg.steps = 2;
    cfg.k = 3;
    cfg.learning_rate = 0.05;
    AdaptResult res2 = test_time_adapt(f.state, f.image, f.instruction, f.tower, cfg, 5);
    CHECK(res2.trace.size() == 2);
}

TEST_CASE("per-sample isolation: adaptation leaves the shared state untouched") {
    Fixture f;
    TtaConfig cfg;
    cfg.steps = 2;
    cfg.k = 3;
    cfg.learning_rate = 0.2;
    uint64_t lm_before = param_checksum(f.state.lm.params);
    lm::LmInput prompt_b = make_prompt(f.state, f.vocab.tokenize("Describe the object in the hand."));
    text::TokenSeq b_before = lm::beam_search(f.state.lm, prompt_b, 2, 5);

    (void)test_time_adapt(f.state, f.image, f.instruction, f.tower, cfg, 123);

    CHECK(param_checksum(f.state.lm.params) == lm_before);
    text::TokenSeq b_after = lm::beam_search(f.state.lm, prompt_b, 2, 5);
    CHECK(b_after == b_before);
}
