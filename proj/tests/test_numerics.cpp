#include <doctest.h>

#include <cmath>
#include <fstream>

#include "grad_check.hpp"
#include "occ/rng.hpp"
#include "occ/tensor.hpp"

using namespace occ;
using num::Shape;
using num::Tape;
using num::Tensor;

TEST_CASE("matmul identity and hand arithmetic") {
    Tape t;
    Tensor I = t.input({2, 2}, {1, 0, 0, 1});
    Tensor M = t.input({2, 2}, {3, -1, 2, 7});
    CHECK(t.matmul(I, M).values() == M.values());

    Tensor A = t.input({2, 2}, {1, 2, 3, 4});
    Tensor ones = t.input({2, 1}, {1, 1});
    auto v = t.matmul(A, ones).values();
    CHECK(v[0] == doctest::Approx(3.0));
    CHECK(v[1] == doctest::Approx(7.0));
}

TEST_CASE("matmul matches triple-loop reference") {
    Rng rng(7);
    std::vector<double> a(12), b(8);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    Tape t;
    auto got = t.matmul(t.input({3, 4}, a), t.input({4, 2}, b)).values();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            double want = 0;
            for (int k = 0; k < 4; ++k) want += a[i * 4 + k] * b[k * 2 + j];
            CHECK(std::fabs(got[i * 2 + j] - want) < 1e-12);
        }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape t;
    Tensor a = t.input({2, 3}, std::vector<double>(6, 0.0));
    Tensor b = t.input({2, 2}, std::vector<double>(4, 0.0));
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("softmax basics") {
    Tape t;
    auto v = t.softmax(t.input({2}, {0, 0})).values();
    CHECK(v[0] == 0.5);
    CHECK(v[1] == 0.5);

    auto u = t.softmax(t.input({4}, {3.7, 3.7, 3.7, 3.7})).values();
    for (double x : u) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));

    // reference values via direct evaluation of exp(x)/sum
    auto w = t.softmax(t.input({3}, {1, 2, 3})).values();
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(std::fabs(w[0] - std::exp(1.0) / z) < 1e-12);
    CHECK(std::fabs(w[1] - std::exp(2.0) / z) < 1e-12);
    CHECK(std::fabs(w[2] - std::exp(3.0) / z) < 1e-12);

    double sum = w[0] + w[1] + w[2];
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("softmax shift invariance after max subtraction") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x(6), y(6);
        double c = rng.uniform(-50, 50);
        for (int i = 0; i < 6; ++i) {
            x[i] = rng.uniform(-5, 5);
            y[i] = x[i] + c;
        }
        Tape t;
        auto a = t.softmax(t.input({6}, x)).values();
        auto b = t.softmax(t.input({6}, y)).values();
        for (int i = 0; i < 6; ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
    }
}

TEST_CASE("softmax of empty input is a domain error") {
    Tape t;
    CHECK_THROWS_AS(t.softmax(t.input({0}, {})), DomainError);
}

TEST_CASE("backward identity and square") {
    {
        Tape t;
        Tensor x = t.leaf({1}, {4.0}, "x");
        t.backward(x, {1.0});
        CHECK(t.grad(x)[0] == 1.0);
    }
    {
        Tape t;
        Tensor x = t.leaf({1}, {3.0}, "x");
        Tensor y = t.mul(x, x);
        t.backward_scalar(y);
        CHECK(t.grad(x)[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("backward seed shape mismatch") {
    Tape t;
    Tensor x = t.leaf({2}, {1.0, 2.0}, "x");
    CHECK_THROWS_AS(t.backward(x, {1.0}), DimensionError);
}

TEST_CASE("three-layer MLP with cross-entropy matches finite differences") {
    Rng rng(11);
    ParamMap p;
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
    p["w1"] = dense_init(5, 8, r1);
    p["b1"] = vector_init(8, 0.3, r1);
    p["w2"] = dense_init(8, 8, r2);
    p["b2"] = vector_init(8, 0.3, r2);
    p["w3"] = dense_init(8, 4, r3);
    p["x"] = dense_init(2, 5, r3);

    auto build = [](Tape& t, Binder& b) {
        Tensor h1 = t.relu(t.add_row_broadcast(t.matmul(b("x"), b("w1")), b("b1")));
        Tensor h2 = t.tanh(t.add_row_broadcast(t.matmul(h1, b("w2")), b("b2")));
        Tensor logits = t.matmul(h2, b("w3"));
        Tensor logp = t.log_softmax(logits);
        return t.neg(t.mean_all(t.gather_elems(logp, {0, 1}, {2, 1})));
    };
    auto fn = [&](const ParamMap& pm) {
        Tape t;
        Binder b(t, pm);
        return build(t, b).scalar();
    };
    auto gr = [&](const ParamMap& pm) {
        Tape t;
        Binder b(t, pm);
        Tensor loss = build(t, b);
        t.backward_scalar(loss);
        GradMap g;
        b.accumulate_grads(g);
        return g;
    };
    auto res = gradcheck::check(fn, gr, p, 1e-4);
    CHECK_MESSAGE(res.ok, "worst ", res.worst_rel, " at ", res.worst_at);
}

namespace {

// random composite graphs over the primitive set
double random_graph(Tape& t, Binder& b, Rng& rng, int variant) {
    Tensor x = b("x");  // [3,4]
    Tensor w = b("w");  // [4,6]
    Tensor u = b("u");  // [6]
    Tensor h = t.add_row_broadcast(t.matmul(x, w), u);
    switch (variant % 7) {
        case 0: h = t.relu(h); break;
        case 1: h = t.tanh(h); break;
        case 2: h = t.softmax(h); break;
        case 3: h = t.log_softmax(h); break;
        case 4: h = t.l2_normalize_rows(h); break;
        case 5: h = t.layer_norm(h, b("g"), b("be")); break;
        case 6: h = t.sigmoid(h); break;
    }
    switch (variant % 3) {
        case 0: h = t.concat_cols(h, t.abs(h)); break;
        case 1: h = t.mul(h, h); break;
        case 2: h = t.slice_cols(h, 1, 4); break;
    }
    if (variant % 2 == 0) h = t.transpose(h);
    Tensor s = t.mean_all(h);
    Tensor s2 = t.sum_all(t.mul_scalar_t(h, t.exp(b("s"))));
    (void)rng;
    return t.add(s, t.scale(s2, 0.01)).scalar();
}

}  // namespace

TEST_CASE("gradient property: 100 random graphs vs finite differences") {
    Rng master(2024);
    int failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng = master.fork(static_cast<uint64_t>(trial));
        ParamMap p;
        Rng r1 = rng.fork(1), r2 = rng.fork(2);
        p["x"] = dense_init(3, 4, r1);
        p["w"] = dense_init(4, 6, r1);
        p["u"] = vector_init(6, 0.5, r2);
        p["g"] = full({6}, 1.0);
        for (auto& v : p["g"].value) v += 0.1 * r2.normal();
        p["be"] = vector_init(6, 0.2, r2);
        p["s"] = full({1}, 0.1 * r2.normal());

        auto fn = [&](const ParamMap& pm) {
            Tape t;
            Binder b(t, pm);
            Rng local = rng.fork(9);
            return random_graph(t, b, local, trial);
        };
        auto gr = [&](const ParamMap& pm) {
            Tape t;
            Binder b(t, pm);
            Rng local = rng.fork(9);
            double v = random_graph(t, b, local, trial);
            (void)v;
            Tensor root{&t, static_cast<int>(t.size()) - 1};
            t.backward_scalar(root);
            GradMap g;
            b.accumulate_grads(g);
            return g;
        };
        auto res = gradcheck::check(fn, gr, p, 1e-4);
        if (!res.ok) {
            ++failures;
            MESSAGE("trial ", trial, " worst ", res.worst_rel, " at ", res.worst_at);
        }
    }
    CHECK(failures == 0);
}

TEST_CASE("tape replay is bit-exact") {
    Rng rng(5);
    ParamMap p;
    Rng r = rng.fork(0);
    p["x"] = dense_init(4, 4, r);
    p["w"] = dense_init(4, 4, r);
    Tape t;
    Binder b(t, p);
    Tensor h = t.softmax(t.matmul(b("x"), b("w")));
    Tensor out = t.mean_all(t.layer_norm(h, t.input({4}, {1, 1, 1, 1}), t.input({4}, {0, 0, 0, 0})));
    (void)out;
    CHECK(t.replay_check());
}

TEST_CASE("embedding gather and scatter gradient") {
    ParamMap p;
    p["table"] = zeros({5, 3});
    for (size_t i = 0; i < p["table"].value.size(); ++i) p["table"].value[i] = 0.1 * static_cast<double>(i);
    Tape t;
    Binder b(t, p);
    Tensor e = t.embed_gather(b("table"), {1, 1, 4});
    Tensor s = t.sum_all(e);
    t.backward_scalar(s);
    GradMap g;
    b.accumulate_grads(g);
    // row 1 referenced twice, row 4 once
    for (int c = 0; c < 3; ++c) {
        CHECK(g["table"][3 + c] == 2.0);
        CHECK(g["table"][12 + c] == 1.0);
        CHECK(g["table"][0 + c] == 0.0);
    }
    CHECK_THROWS_AS(t.embed_gather(b("table"), {5}), DomainError);
}

TEST_CASE("checkpoint round trip preserves values bit-exactly") {
    Rng rng(99);
    ParamMap p;
    Rng r = rng.fork(0);
    p["a.w"] = dense_init(3, 7, r);
    p["b.v"] = vector_init(11, 2.0, r);
    std::string path = "/tmp/occ_test_ckpt.json";
    save_checkpoint(p, path);
    ParamMap q = load_checkpoint(path);
    REQUIRE(q.size() == p.size());
    CHECK(q["a.w"].shape == p["a.w"].shape);
    CHECK(q["a.w"].value == p["a.w"].value);
    CHECK(q["b.v"].value == p["b.v"].value);
    CHECK(param_checksum(p) == param_checksum(q));
}

TEST_CASE("checkpoint rejects missing version") {
    std::string path = "/tmp/occ_bad_ckpt.json";
    {
        std::ofstream out(path);
        out << "{\"params\": {}}";
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
}
