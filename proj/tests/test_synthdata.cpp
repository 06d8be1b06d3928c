#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "occ/synthdata.hpp"

using namespace occ;
using namespace occ::synth;
namespace fs = std::filesystem;

TEST_CASE("analytic sphere SDF at canonical points") {
    ObjectParams o;
    o.cls = ObjectClass::Sphere;
    o.size = {0.5, 0, 0};
    CHECK(analytic_sdf(o, {0, 0, 0}) == doctest::Approx(-0.5));
    CHECK(analytic_sdf(o, {0.5, 0, 0}) == doctest::Approx(0.0));
    CHECK(analytic_sdf(o, {1.0, 0, 0}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(analytic_sdf(o, {1.5, 0, 0}), DomainError);
}

TEST_CASE("analytic SDFs have correct sign at center and far field") {
    for (ObjectClass cls : {ObjectClass::Sphere, ObjectClass::Cylinder, ObjectClass::Box,
                            ObjectClass::Capsule}) {
        ObjectParams o;
        o.cls = cls;
        o.size = {0.3, 0.5, 0.3};
        CHECK(analytic_sdf(o, {0, 0, 0}) < 0.0);
        CHECK(analytic_sdf(o, {1, 1, 1}) > 0.0);
    }
    // torus is outside at its own center
    ObjectParams t;
    t.cls = ObjectClass::Torus;
    t.size = {0.4, 0.1, 0};
    CHECK(analytic_sdf(t, {0, 0, 0}) > 0.0);
    CHECK(analytic_sdf(t, {0.4, 0, 0}) < 0.0);
}

TEST_CASE("rigid pose preserves distances") {
    ObjectParams o;
    o.cls = ObjectClass::Sphere;
    o.size = {0.4, 0, 0};
    o.euler = {0.3, -1.2, 2.0};
    o.center = {0.1, -0.05, 0.12};
    // distance from the shifted center must still be -r at the center
    CHECK(analytic_sdf(o, {0.1, -0.05, 0.12}) == doctest::Approx(-0.4));
}

TEST_CASE("generate_scene is deterministic") {
    GenSpec spec;
    spec.scenes = 4;
    spec.views = 2;
    SceneRecord a = generate_scene(77, spec, 3, 1);
    SceneRecord b = generate_scene(77, spec, 3, 1);
    CHECK(record_to_json(a) == record_to_json(b));
}

TEST_CASE("zero occlusion target places occluder off-silhouette") {
    GenSpec spec;
    spec.scenes = 1;
    spec.views = 1;
    spec.occlusion_lo = 0.0;
    spec.occlusion_hi = 0.0;
    SceneRecord r = generate_scene(5, spec, 0, 0);
    CHECK(r.occlusion_ratio == 0.0);
    CHECK(r.occlusion_target_met);
}

TEST_CASE("renders differ across views and contain the object") {
    GenSpec spec;
    spec.scenes = 1;
    spec.views = 2;
    SceneRecord r = generate_scene(21, spec, 0, 0);
    img::Image v0 = render(r, 0, false);
    img::Image v1 = render(r, 1, false);
    double l1 = 0;
    for (size_t i = 0; i < v0.data().size(); ++i) l1 += std::fabs(v0.data()[i] - v1.data()[i]);
    CHECK(l1 > 0.0);

    RenderResult rr = render_full(r, 0, false);
    CHECK(rr.object_pixels > 0);
}

TEST_CASE("stored ratio matches pixel-diff recomputation") {
    GenSpec spec;
    spec.scenes = 3;
    spec.views = 1;
    for (int i = 0; i < 3; ++i) {
        SceneRecord r = generate_scene(1234, spec, i, 0);
        double re = recompute_occlusion_ratio(render(r, 0, true), render(r, 0, false));
        CHECK(std::fabs(re - r.occlusion_ratio) <= 0.02);
    }
}

TEST_CASE("instruction set follows the attribute table") {
    ObjectParams sphere;
    sphere.cls = ObjectClass::Sphere;
    sphere.size = {0.4, 0, 0};
    auto qa = instruction_set(sphere);
    REQUIRE(qa.size() == 5);
    CHECK(qa[0].instruction == "What's the object in the hand?");
    CHECK(qa[0].answer == "sphere");
    CHECK(qa[1].instruction == "Is the object in the hand round?");
    CHECK(qa[1].answer == "yes");
    CHECK(qa[2].answer == "no");
    CHECK(qa[3].answer == "no");
    CHECK(qa[4].instruction == "Describe the object in the hand.");

    ObjectParams box;
    box.cls = ObjectClass::Box;
    box.size = {0.3, 0.3, 0.3};
    auto qb = instruction_set(box);
    CHECK(qb[1].answer == "no");

    // thin cylinder: radius/height below a quarter
    ObjectParams cyl;
    cyl.cls = ObjectClass::Cylinder;
    cyl.size = {0.1, 0.9, 0};
    auto qc = instruction_set(cyl);
    CHECK(qc[2].answer == "yes");
    CHECK(qc[3].answer == "yes");
}

TEST_CASE("manifest write/read round trip with images") {
    std::string dir = "/tmp/occ_manifest_test";
    fs::remove_all(dir);
    GenSpec spec;
    spec.scenes = 2;
    spec.views = 1;
    DatasetManifest m;
    m.split = "train";
    m.seed = 9;
    for (int i = 0; i < 2; ++i) {
        SceneRecord r = generate_scene(9, spec, i, 0);
        r.image = "images/" + r.scene_id + "_occ.png";
        r.image_free = "images/" + r.scene_id + "_free.png";
        fs::create_directories(fs::path(dir) / "images");
        img::write_png(render(r, 0, true), (fs::path(dir) / r.image).string());
        img::write_png(render(r, 0, false), (fs::path(dir) / r.image_free).string());
        m.records.push_back(r);
    }
    write_manifest(m, dir);
    DatasetManifest back = read_manifest(dir);
    CHECK(back.split == "train");
    CHECK(back.seed == 9);
    REQUIRE(back.records.size() == 2);
    CHECK(record_to_json(back.records[0]) == record_to_json(m.records[0]));

    // byte-identical re-serialization
    std::ifstream in(fs::path(dir) / "manifest.jsonl", std::ios::binary);
    std::string original((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    write_manifest(back, dir + "_2");
    for (const auto& r : back.records) {
        fs::create_directories(fs::path(dir + "_2") / "images");
        fs::copy_file(fs::path(dir) / r.image, fs::path(dir + "_2") / r.image,
                      fs::copy_options::overwrite_existing);
        fs::copy_file(fs::path(dir) / r.image_free, fs::path(dir + "_2") / r.image_free,
                      fs::copy_options::overwrite_existing);
    }
    std::ifstream in2(fs::path(dir + "_2") / "manifest.jsonl", std::ios::binary);
    std::string rewritten((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(original == rewritten);
}

TEST_CASE("manifest read failures") {
    std::string dir = "/tmp/occ_manifest_bad";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream meta(fs::path(dir) / "manifest.meta.json");
        meta << "{\"seed\": 1, \"version\": 1, \"split\": \"train\"}";
    }
    {
        std::ofstream out(fs::path(dir) / "manifest.jsonl");
        out << "{\"truncated\": \n";
    }
    CHECK_THROWS_WITH_AS(read_manifest(dir), doctest::Contains("line 1"), FormatError);

    // referential integrity: record pointing at a missing image
    GenSpec spec;
    spec.scenes = 1;
    spec.views = 1;
    SceneRecord r = generate_scene(3, spec, 0, 0);
    r.image = "images/missing.png";
    r.image_free = "";
    {
        std::ofstream out(fs::path(dir) / "manifest.jsonl");
        out << record_to_json(r) << "\n";
    }
    CHECK_THROWS_WITH_AS(read_manifest(dir), doctest::Contains(r.scene_id.c_str()), FormatError);
}

TEST_CASE("duplicate scene ids are rejected at write time") {
    GenSpec spec;
    spec.scenes = 1;
    spec.views = 1;
    SceneRecord r = generate_scene(3, spec, 0, 0);
    r.image.clear();
    r.image_free.clear();
    DatasetManifest m;
    m.split = "test";
    m.records = {r, r};
    CHECK_THROWS_AS(write_manifest(m, "/tmp/occ_manifest_dup"), DomainError);
}

TEST_CASE("occluder patch mask marks occluder patches only") {
    GenSpec spec;
    spec.scenes = 1;
    spec.views = 1;
    spec.occlusion_lo = 0.2;
    spec.occlusion_hi = 0.3;
    SceneRecord r = generate_scene(12, spec, 0, 0);
    auto mask = occluder_patch_mask(r, 0);
    REQUIRE(mask.size() == 196);
    double total = 0;
    for (double v : mask) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        total += v;
    }
    CHECK(total > 0.0);  // the occluder is visible somewhere
}
