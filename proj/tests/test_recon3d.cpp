#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "grad_check.hpp"
#include "occ/recon3d.hpp"

using namespace occ;
using namespace occ::recon;

namespace {

SdfGrid sphere_grid(int res, double radius) {
    return SdfGrid::sample(res, [radius](const Vec3& p) {
        return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - radius;
    });
}

img::Image noise_image(uint64_t seed) {
    Rng rng(seed);
    img::Image im;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) im.set(y, x, rng.uniform(), rng.uniform(), rng.uniform());
    return im;
}

bool background(const img::Image& im, int y, int x) {
    return std::fabs(im.at(y, x, 0) - 0.5) < 1e-9 && std::fabs(im.at(y, x, 1) - 0.5) < 1e-9 &&
           std::fabs(im.at(y, x, 2) - 0.5) < 1e-9;
}

}  // namespace

TEST_CASE("positional encoding layout and extent check") {
    ReconConfig cfg;
    CHECK(pe_dim(cfg) == 51);
    auto enc = positional_encoding(cfg, {0.5, -0.25, 0.0});
    CHECK(enc.size() == 51);
    CHECK(enc[0] == 0.5);
    CHECK(enc[1] == -0.25);
    CHECK_THROWS_AS(positional_encoding(cfg, {1.5, 0, 0}), DomainError);
}

TEST_CASE("extract_features is deterministic and definitionally consistent") {
    ReconModel model = ReconModel::init({}, 17);
    img::Image im = noise_image(4);
    FeatureBundle a = model.extract_features(im);
    FeatureBundle b = model.extract_features(im);
    CHECK(a.combined == b.combined);
    CHECK(a.cues == b.cues);

    // combined equals the accumulation function applied to the three parts
    std::vector<double> re = model.combine_features(a.cues, a.hand, a.color);
    CHECK(re == a.combined);
}

TEST_CASE("extract_features honors a supplied occluder mask") {
    ReconModel model = ReconModel::init({}, 17);
    img::Image im = noise_image(4);
    std::vector<double> zero_mask(196, 0.0), one_mask(196, 1.0);
    FeatureBundle z = model.extract_features(im, zero_mask);
    FeatureBundle o = model.extract_features(im, one_mask);
    CHECK(z.hand != o.hand);
    CHECK(z.cues == o.cues);  // mask only touches the hand path
    CHECK_THROWS_AS(model.extract_features(im, std::vector<double>(5, 0.0)), DimensionError);
}

TEST_CASE("sdf_query is deterministic and batched queries agree") {
    ReconModel model = ReconModel::init({}, 8);
    img::Image im = noise_image(5);
    FeatureBundle fb = model.extract_features(im);
    Vec3 p{0.25, -0.5, 0.125};
    double a = model.sdf_query(fb.combined, p);
    double b = model.sdf_query(fb.combined, p);
    CHECK(a == b);
    auto batch = model.sdf_query_batch(fb.combined, {p, {0, 0, 0}});
    CHECK(batch[0] == a);
    CHECK_THROWS_AS(model.sdf_query(fb.combined, {0, 0, 1.5}), DomainError);
}

TEST_CASE("feature and SDF gradients match finite differences") {
    ReconConfig cfg;
    cfg.feature_dim = 16;
    cfg.sdf_hidden = 24;
    cfg.pe_frequencies = 4;
    ReconModel model = ReconModel::init(cfg, 3);
    img::Image im = noise_image(6);
    ImageFeed feed = make_feed(im);
    std::vector<Vec3> pts{{0.1, 0.2, -0.3}, {-0.5, 0.25, 0.75}};

    auto build = [&](num::Tape& t, Binder& b) {
        num::Tensor combined = build_combined(t, b, cfg, feed, nullptr);
        num::Tensor pred = build_sdf(t, b, cfg, combined, pts);
        return t.mean_all(t.abs(pred));
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
    auto res = gradcheck::check(fn, gr, model.params, 1e-4, 4);
    CHECK_MESSAGE(res.ok, "worst ", res.worst_rel, " at ", res.worst_at);
}

TEST_CASE("mesh from the analytic sphere hits the radius and topology oracles") {
    SdfGrid g = sphere_grid(64, 0.5);
    Mesh m = reconstruct_mesh(g);
    REQUIRE(!m.empty());
    double cell = 2.0 / 63.0;
    for (const auto& v : m.vertices) {
        double r = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        CHECK(std::fabs(r - 0.5) < 2.0 * cell);
    }
    CHECK(euler_characteristic(m) == 2);

    // outward orientation: vertex normals point away from the center
    for (size_t i = 0; i < m.vertices.size(); i += 97) {
        const auto& v = m.vertices[i];
        const auto& n = m.normals[i];
        CHECK(v[0] * n[0] + v[1] * n[1] + v[2] * n[2] > 0.0);
    }

    // no degenerate triangles survive cleanup
    for (const auto& t : m.triangles) {
        CHECK(t[0] != t[1]);
        CHECK(t[1] != t[2]);
        CHECK(t[0] != t[2]);
    }
}

TEST_CASE("all-positive and all-negative grids produce empty meshes") {
    SdfGrid pos = SdfGrid::sample(16, [](const Vec3&) { return 1.0; });
    CHECK(reconstruct_mesh(pos).empty());
    SdfGrid neg = SdfGrid::sample(16, [](const Vec3&) { return -1.0; });
    CHECK(reconstruct_mesh(neg).empty());
    CHECK_THROWS_AS(reconstruct_mesh(sphere_grid(4, 0.5)), DomainError);
}

TEST_CASE("torus topology") {
    SdfGrid g = SdfGrid::sample(48, [](const Vec3& p) {
        double qx = std::sqrt(p[0] * p[0] + p[2] * p[2]) - 0.5;
        return std::sqrt(qx * qx + p[1] * p[1]) - 0.2;
    });
    CHECK(euler_characteristic(reconstruct_mesh(g)) == 0);
}

TEST_CASE("grid save/load round trip") {
    SdfGrid g = sphere_grid(16, 0.4);
    std::string path = "/tmp/occ_grid_test.bin";
    g.save(path);
    SdfGrid back = SdfGrid::load(path);
    CHECK(back.resolution == 16);
    CHECK(back.values == g.values);
    CHECK_THROWS_AS(SdfGrid::load("/tmp/nonexistent_grid.bin"), IoError);
}

TEST_CASE("projection: silhouette, background, determinism") {
    Mesh m = reconstruct_mesh(sphere_grid(64, 0.5));
    img::Image a = project(m);
    img::Image b = project(m);
    CHECK(a == b);
    a.validate();

    CHECK(!background(a, 112, 112));  // center of the silhouette
    CHECK(background(a, 0, 0));       // corner outside it

    int fg = 0;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x)
            if (!background(a, y, x)) ++fg;
    double frac = static_cast<double>(fg) / (img::kSize * img::kSize);
    double expect = 3.14159265358979323846 * 0.5 * 0.5 / 4.0;
    CHECK(std::fabs(frac - expect) / expect < 0.05);

    img::Image empty = project(Mesh{});
    for (int y = 0; y < img::kSize; y += 37)
        for (int x = 0; x < img::kSize; x += 37) CHECK(background(empty, y, x));
}

TEST_CASE("mesh OBJ export") {
    Mesh m = reconstruct_mesh(sphere_grid(12, 0.5));
    std::string path = "/tmp/occ_mesh_test.obj";
    m.save_obj(path);
    CHECK(std::filesystem::file_size(path) > 0);
}

TEST_CASE("embed_occluded is deterministic, unit-norm, and survives empty meshes") {
    ReconConfig cfg;
    cfg.feature_dim = 16;
    cfg.sdf_hidden = 24;
    cfg.pe_frequencies = 4;
    cfg.grid_resolution = 16;
    ReconModel model = ReconModel::init(cfg, 21);
    text::Vocab vocab = text::Vocab::build({"a red sphere in the hand"});
    clip::ClipTower tower = clip::ClipTower::init({}, vocab.size(), 2);
    img::Image im = noise_image(9);

    OccludedEmbedding a = embed_occluded(model, tower, im);
    OccludedEmbedding b = embed_occluded(model, tower, im);
    CHECK(a.embedding.v == b.embedding.v);
    double n = 0;
    for (double v : a.embedding.v) n += v * v;
    CHECK(std::fabs(std::sqrt(n) - 1.0) < 1e-9);

    // force an all-positive field: flagged, but still a valid embedding
    model.params["recon.sdf.b3"].value[0] = 100.0;
    OccludedEmbedding e = embed_occluded(model, tower, im);
    CHECK(e.empty_mesh);
    double n2 = 0;
    for (double v : e.embedding.v) n2 += v * v;
    CHECK(std::fabs(std::sqrt(n2) - 1.0) < 1e-9);
}
