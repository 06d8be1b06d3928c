#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "occ/fusion.hpp"

using namespace occ;
using namespace occ::fusion;

namespace {
clip::Embedding emb(std::vector<double> v) { return {std::move(v), false}; }
}  // namespace

TEST_CASE("blend endpoints are bitwise pass-through") {
    clip::Embedding a = emb({0.1, -0.2, 0.3});
    clip::Embedding b = emb({-0.5, 0.4, 0.9});
    CHECK(blend(a, b, 1.0).v == a.v);
    CHECK(blend(a, b, 0.0).v == b.v);
}

TEST_CASE("blend midpoint") {
    clip::Embedding a = emb({1, 0});
    clip::Embedding b = emb({0, 1});
    auto m = blend(a, b, 0.5);
    CHECK(m.v[0] == doctest::Approx(0.5));
    CHECK(m.v[1] == doctest::Approx(0.5));
}

TEST_CASE("blend validates alpha and dims") {
    clip::Embedding a = emb({1, 0});
    clip::Embedding b = emb({0, 1, 2});
    CHECK_THROWS_AS(blend(a, a, 1.5), DomainError);
    CHECK_THROWS_AS(blend(a, a, -0.1), DomainError);
    CHECK_THROWS_AS(blend(a, b, 0.5), DimensionError);
}

TEST_CASE("blend is affine in alpha") {
    Rng rng(8);
    clip::Embedding a = emb({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    clip::Embedding b = emb({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    for (int i = 0; i < 10; ++i) {
        double a1 = rng.uniform(), a2 = rng.uniform();
        auto lhs1 = blend(a, b, a1), lhs2 = blend(a, b, a2);
        auto rhs = blend(a, b, (a1 + a2) / 2.0);
        for (int k = 0; k < 4; ++k)
            CHECK(std::fabs(lhs1.v[k] + lhs2.v[k] - 2.0 * rhs.v[k]) < 1e-12);
    }
}

TEST_CASE("map_to_tokens is linear and shape-correct") {
    FusionConfig cfg;
    cfg.n_tokens = 4;
    cfg.d_model = 8;
    cfg.embed_dim = 6;
    FusionMap map = FusionMap::init(cfg, 42);

    clip::Embedding zero = emb(std::vector<double>(6, 0.0));
    auto z = map_to_tokens(map, zero);
    REQUIRE(z.size() == 32);
    for (double v : z) CHECK(v == 0.0);

    Rng rng(3);
    clip::Embedding x = emb({rng.normal(), rng.normal(), rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    clip::Embedding ax = x;
    double a = 2.75;
    for (double& v : ax.v) v *= a;
    auto tx = map_to_tokens(map, x);
    auto tax = map_to_tokens(map, ax);
    for (size_t i = 0; i < tx.size(); ++i) CHECK(tax[i] == doctest::Approx(a * tx[i]).epsilon(1e-12));

    clip::Embedding wrong = emb({1, 2, 3});
    CHECK_THROWS_AS(map_to_tokens(map, wrong), DimensionError);
}

TEST_CASE("map gradient matches finite differences") {
    FusionConfig cfg;
    cfg.n_tokens = 3;
    cfg.d_model = 4;
    cfg.embed_dim = 5;
    FusionMap map = FusionMap::init(cfg, 7);
    Rng rng(9);
    std::vector<double> xv(5);
    for (auto& v : xv) v = rng.normal();

    auto build = [&](num::Tape& t, Binder& b) {
        num::Tensor x = t.input({1, 5}, xv);
        num::Tensor tok = build_tokens(t, b, cfg, x);
        return t.mean_all(t.mul(tok, tok));
    };
    auto fn = [&](const ParamMap& pm) {
        num::Tape t;
        Binder b(t, pm);
        return build(t, b).scalar();
    };
    auto gr = [&](const ParamMap& pm) {
        num::Tape t;
        Binder b(t, pm);
        auto loss = build(t, b);
        t.backward_scalar(loss);
        GradMap g;
        b.accumulate_grads(g);
        return g;
    };
    auto res = gradcheck::check(fn, gr, map.params, 1e-4);
    CHECK_MESSAGE(res.ok, "worst ", res.worst_rel, " at ", res.worst_at);
}

TEST_CASE("fuse_inputs concatenates visual block then text") {
    FusionConfig cfg;
    cfg.n_tokens = 16;
    cfg.d_model = 4;
    std::vector<double> vt(static_cast<size_t>(16) * 4, 0.25);
    text::TokenSeq txt{text::kBos, 4, 5, 6, 7, 8, 9};
    lm::LmInput in = fuse_inputs(vt, cfg, txt);
    CHECK(in.total_len() == 16 + 7);
    CHECK(in.n_visual == 16);
    CHECK(in.visual == vt);
    CHECK(in.text == txt);

    // permuting text leaves the visual block untouched
    text::TokenSeq perm{text::kBos, 9, 8, 7, 6, 5, 4};
    lm::LmInput in2 = fuse_inputs(vt, cfg, perm);
    CHECK(in2.visual == in.visual);
    CHECK(in2.text != in.text);

    CHECK_THROWS_AS(fuse_inputs(vt, cfg, {}), DomainError);
    CHECK_THROWS_AS(fuse_inputs(std::vector<double>(3, 0.0), cfg, txt), DimensionError);
}
