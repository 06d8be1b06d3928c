#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "occ/image.hpp"
#include "occ/rng.hpp"

namespace occ::synth {

inline constexpr int kGeneratorVersion = 1;
inline constexpr int kQaPairs = 5;

enum class ObjectClass { Sphere, Cylinder, Box, Torus, Capsule };
inline constexpr int kNumClasses = 5;

const std::string& class_name(ObjectClass c);
std::optional<ObjectClass> class_from_name(const std::string& name);
std::array<double, 3> class_color(ObjectClass c);

using Vec3 = std::array<double, 3>;

struct ObjectParams {
    ObjectClass cls = ObjectClass::Sphere;
    Vec3 size{0.5, 0.0, 0.0};  // sphere r | cylinder r,h | box half-extents | torus R,r | capsule r,h
    Vec3 euler{0, 0, 0};
    Vec3 center{0, 0, 0};
};

// Articulated blob standing in for a hand: palm sphere plus a fan of finger
// capsules, positioned in the camera frame.
struct OccluderParams {
    Vec3 center{2.5, 0, 0.9};  // off-silhouette by default
    double palm_radius = 0.16;
    int fingers = 4;
    double finger_length = 0.3;
    double finger_radius = 0.07;
    double spread = 0.35;      // radians between adjacent fingers
    double base_angle = 1.57;  // fan direction in the view plane
};

struct QaPair {
    std::string instruction;
    std::string answer;
};

struct SceneRecord {
    std::string scene_id;     // unique per (scene, view)
    std::string instance_id;  // shared by all views of one scene
    ObjectParams object;      // also the analytic SDF parameters
    OccluderParams occluder;
    int view_id = 0;
    int views_total = 1;
    double view_azimuth = 0.0;
    double occlusion_ratio = 0.0;
    bool occlusion_target_met = true;
    std::string image;       // relative path of the occluded render
    std::string image_free;  // relative path of the occlusion-free render
    std::vector<QaPair> qa;  // exactly kQaPairs
};

struct GenSpec {
    int scenes = 500;
    int views = 2;
    double occlusion_lo = 0.04;  // per-record target drawn uniform in [lo, hi]
    double occlusion_hi = 0.40;
    std::vector<double> class_weights{1, 1, 1, 1, 1};
    std::string id_prefix = "scene";
};

struct DatasetManifest {
    std::string split;  // "train" | "test"
    uint64_t seed = 0;
    int version = kGeneratorVersion;
    std::vector<SceneRecord> records;
};

// Exact signed distance of the primitive in its local frame composed with pose;
// negative inside. `p` in the world frame of the record's own view.
double analytic_sdf(const ObjectParams& obj, const Vec3& p);
double analytic_sdf_viewed(const ObjectParams& obj, double view_azimuth, const Vec3& p);
double occluder_sdf(const OccluderParams& occ, const Vec3& p);

// Object + five QA pairs + occluder placed to hit a target occlusion ratio for
// the given view. Pure function of its arguments.
SceneRecord generate_scene(uint64_t seed, const GenSpec& spec, int scene_index, int view_id);

struct RenderResult {
    img::Image image;
    std::vector<uint8_t> ids;  // per pixel: 0 background, 1 object, 2 occluder
    int object_pixels = 0;     // pixels where the object is the nearest hit
};

RenderResult render_full(const SceneRecord& scene, int view_id, bool occluded);
img::Image render(const SceneRecord& scene, int view_id, bool occluded);

// occluded-object-pixels / object-pixels from id buffers at full resolution.
double measure_occlusion_ratio(const SceneRecord& scene, int view_id);

// Fraction of each 16x16 patch covered by occluder pixels (196 values, patch-major).
std::vector<double> occluder_patch_mask(const SceneRecord& scene, int view_id);

// Recomputation of the occlusion ratio from rendered images alone (no id buffer):
// object pixels = non-background in the free render; occluded = those that differ
// from the occluded render by more than a small per-channel threshold.
double recompute_occlusion_ratio(const img::Image& occluded, const img::Image& free_view);

std::vector<QaPair> instruction_set(const ObjectParams& obj);

// Directory layout: <dir>/manifest.jsonl, <dir>/manifest.meta.json, <dir>/images/*.png.
// Reading validates per-line format, unique scene ids, and image existence.
void write_manifest(const DatasetManifest& m, const std::string& dir);
DatasetManifest read_manifest(const std::string& dir);

// Generates both splits (disjoint object instances), renders and stores PNGs,
// writes manifests under out_dir/train and out_dir/test.
void generate_dataset(uint64_t seed, const GenSpec& train_spec, const GenSpec& test_spec,
                      const std::string& out_dir);

std::string record_to_json(const SceneRecord& r);
SceneRecord record_from_json(const std::string& line);

}  // namespace occ::synth
