#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "occ/clip_tower.hpp"
#include "occ/synthdata.hpp"

using namespace occ;
using namespace occ::clip;

namespace {

text::Vocab toy_vocab() {
    return text::Vocab::build({"a small red sphere", "a long green cylinder", "a blue box",
                               "a yellow torus", "a purple capsule", "large medium"});
}

double norm(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("embeddings are unit-norm and deterministic") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 7);

    img::Image zero;  // all-zeros image is valid input
    Embedding e1 = tower.encode_image(zero);
    Embedding e2 = tower.encode_image(zero);
    CHECK(e1.v == e2.v);
    CHECK(std::fabs(norm(e1.v) - 1.0) < 1e-9);
    for (double v : e1.v) CHECK(std::isfinite(v));

    text::TokenSeq t = vocab.tokenize("a red sphere");
    Embedding te1 = tower.encode_text(t);
    Embedding te2 = tower.encode_text(t);
    CHECK(te1.v == te2.v);
    CHECK(std::fabs(norm(te1.v) - 1.0) < 1e-9);
}

TEST_CASE("encode_text rejects empty and content-free input") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 7);
    CHECK_THROWS_AS(tower.encode_text({}), DomainError);
    CHECK_THROWS_AS(tower.encode_text({text::kPad, text::kPad}), DomainError);
}

TEST_CASE("PAD extension does not change the text embedding or score") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 7);
    text::TokenSeq t = vocab.tokenize("red sphere");
    text::TokenSeq padded = t;
    padded.push_back(text::kPad);
    padded.insert(padded.begin(), text::kPad);
    CHECK(tower.encode_text(t).v == tower.encode_text(padded).v);

    img::Image im;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) im.set(y, x, 0.3, 0.5, 0.7);
    CHECK(tower.clip_score(t, im) == tower.clip_score(padded, im));
}

TEST_CASE("clip_score is the dot of the two unit embeddings, bounded") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 3);
    img::Image im;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) im.set(y, x, 0.8, 0.1, 0.2);
    text::TokenSeq t = vocab.tokenize("a long green cylinder");
    double s = tower.clip_score(t, im);
    CHECK(s == doctest::Approx(dot(tower.encode_text(t), tower.encode_image(im))));
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);

    // cosine contract on hand-built unit embeddings
    Embedding a{{1, 0}, true}, b{{0, 1}, true};
    CHECK(dot(a, a) == 1.0);
    CHECK(dot(a, b) == 0.0);
    CHECK_THROWS_AS(dot(a, Embedding{{1, 0, 0}, true}), DimensionError);
}

TEST_CASE("out-of-range pixels are rejected before encoding") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 3);
    img::Image im;
    im.at(0, 0, 0) = 1.25;  // poke past construction-time validation
    CHECK_THROWS_AS(tower.encode_image(im), DomainError);
}

TEST_CASE("two identical pairs sit at the ln(2) fixed point") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 11);
    img::Image im;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) im.set(y, x, 0.2, 0.6, 0.4);
    text::TokenSeq t = vocab.tokenize("red sphere");
    double loss = contrastive_loss(tower, {{im, t}, {im, t}});
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK_THROWS_AS(contrastive_loss(tower, {{im, t}}), DomainError);
}

TEST_CASE("contrastive training: loss decreases and separates classes on a seeded run") {
    // two visually distinct classes with matching captions
    synth::GenSpec spec;
    spec.scenes = 12;
    spec.views = 1;
    spec.class_weights = {1, 1, 0, 0, 0};  // spheres and cylinders only
    std::vector<std::pair<img::Image, text::TokenSeq>> pairs;
    std::vector<std::string> corpus;
    std::vector<synth::SceneRecord> records;
    for (int i = 0; i < 12; ++i) {
        synth::SceneRecord r = synth::generate_scene(31, spec, i, 0);
        records.push_back(r);
        corpus.push_back(r.qa[4].answer);
    }
    text::Vocab vocab = text::Vocab::build(corpus);
    for (const auto& r : records)
        pairs.emplace_back(synth::render(r, 0, true), vocab.tokenize(r.qa[4].answer));

    ClipTower tower = ClipTower::init({}, vocab.size(), 5);
    ContrastiveTrace trace = train_contrastive(tower, pairs, 80, 8, 0.05, 5);
    REQUIRE(trace.loss_per_step.size() == 80);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += trace.loss_per_step[static_cast<size_t>(i)];
        tail += trace.loss_per_step[trace.loss_per_step.size() - 1 - static_cast<size_t>(i)];
    }
    CHECK(tail < head);

    // same-class renders score closer than cross-class ones
    int sphere_a = -1, sphere_b = -1, cyl = -1;
    for (int i = 0; i < 12; ++i) {
        bool is_sphere = records[static_cast<size_t>(i)].object.cls == synth::ObjectClass::Sphere;
        if (is_sphere && sphere_a < 0)
            sphere_a = i;
        else if (is_sphere && sphere_b < 0)
            sphere_b = i;
        else if (!is_sphere && cyl < 0)
            cyl = i;
    }
    REQUIRE(sphere_a >= 0);
    REQUIRE(sphere_b >= 0);
    REQUIRE(cyl >= 0);
    Embedding ea = tower.encode_image(pairs[static_cast<size_t>(sphere_a)].first);
    Embedding eb = tower.encode_image(pairs[static_cast<size_t>(sphere_b)].first);
    Embedding ec = tower.encode_image(pairs[static_cast<size_t>(cyl)].first);
    CHECK(dot(ea, eb) > dot(ea, ec));

    // distinct captions map to distinct embeddings
    Embedding t1 = tower.encode_text(vocab.tokenize("a small red sphere"));
    Embedding t2 = tower.encode_text(vocab.tokenize("a large green cylinder"));
    CHECK(dot(t1, t2) < 1.0 - 1e-6);
}

TEST_CASE("contrastive loss gradient matches finite differences") {
    text::Vocab vocab = toy_vocab();
    ClipTower tower = ClipTower::init({}, vocab.size(), 2);
    Rng rng(6);
    std::vector<std::vector<double>> pooled(3, std::vector<double>(img::kPatchFeatures));
    for (auto& row : pooled)
        for (auto& v : row) v = rng.uniform();
    std::vector<text::TokenSeq> texts = {vocab.tokenize("red sphere"), vocab.tokenize("green cylinder"),
                                         vocab.tokenize("blue box")};

    auto build = [&](num::Tape& t, Binder& b) {
        return build_contrastive_loss(t, b, tower.cfg, pooled, texts);
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
    auto res = gradcheck::check(fn, gr, tower.params, 1e-4, 4);
    CHECK_MESSAGE(res.ok, "worst ", res.worst_rel, " at ", res.worst_at);
}
