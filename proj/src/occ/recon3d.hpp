#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "occ/clip_tower.hpp"
#include "occ/image.hpp"
#include "occ/params.hpp"
#include "occ/synthdata.hpp"

namespace occ::recon {

using Vec3 = synth::Vec3;

struct ReconConfig {
    int feature_dim = 64;
    int sdf_hidden = 128;
    int pe_frequencies = 8;   // sin/cos per axis, plus the raw coordinates
    int grid_resolution = 64;
};

int pe_dim(const ReconConfig& cfg);                       // 3 + 6 * pe_frequencies
std::vector<double> positional_encoding(const ReconConfig& cfg, const Vec3& p);

struct FeatureBundle {
    std::vector<double> cues;
    std::vector<double> hand;
    std::vector<double> color;
    std::vector<double> combined;
};

// Signed distances sampled on a regular grid over [-1,1]^3, x fastest.
struct SdfGrid {
    int resolution = 0;
    std::vector<double> values;

    double at(int ix, int iy, int iz) const {
        return values[(static_cast<size_t>(iz) * resolution + static_cast<size_t>(iy)) * resolution +
                      static_cast<size_t>(ix)];
    }
    double coord(int i) const { return -1.0 + 2.0 * i / (resolution - 1); }

    template <typename F>
    static SdfGrid sample(int resolution, F&& f) {
        if (resolution < 2) throw DomainError("grid resolution must be at least 2");
        SdfGrid g;
        g.resolution = resolution;
        g.values.resize(static_cast<size_t>(resolution) * resolution * resolution);
        const double bound = 2.0 * 1.7320508075688772;  // grid diameter
        size_t k = 0;
        for (int iz = 0; iz < resolution; ++iz)
            for (int iy = 0; iy < resolution; ++iy)
                for (int ix = 0; ix < resolution; ++ix, ++k) {
                    double v = f(Vec3{g.coord(ix), g.coord(iy), g.coord(iz)});
                    g.values[k] = std::clamp(v, -bound, bound);
                }
        return g;
    }

    // binary: magic "OCCSDF01", int32 resolution, doubles x-fastest
    void save(const std::string& path) const;
    static SdfGrid load(const std::string& path);
};

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<Vec3> normals;                 // per-vertex, unit, outward
    std::vector<std::array<int, 3>> triangles;

    bool empty() const { return triangles.empty(); }
    void save_obj(const std::string& path) const;
};

// Zero level set by tetrahedral decomposition of each grid cell; vertices by
// linear interpolation on sign-changing edges, welded across cells, triangles
// oriented outward (negative side is inside). All-positive or all-negative
// grids produce an empty mesh.
Mesh reconstruct_mesh(const SdfGrid& grid);

// Counts for topology checks: V - E + F.
int euler_characteristic(const Mesh& m);

// Orthographic rasterization along -z with z-buffer and Lambertian shading;
// background mid-gray. Empty meshes produce an all-background image.
img::Image project(const Mesh& m);

struct ReconModel {
    ReconConfig cfg;
    ParamMap params;  // recon.cues.*, recon.hand.*, recon.color.*, recon.mask.*, recon.fs.*, recon.sdf.*

    static ReconModel init(const ReconConfig& cfg, uint64_t seed);

    // Occluder mask: 196 per-patch coverage fractions. Supplied during training
    // (generator ground truth), predicted by the mask head otherwise.
    FeatureBundle extract_features(const img::Image& image,
                                   const std::optional<std::vector<double>>& occluder_mask = std::nullopt) const;
    std::vector<double> predict_patch_mask(const img::Image& image) const;

    // Accumulation half of extract_features: combined = f_s(cues + hand + color).
    std::vector<double> combine_features(const std::vector<double>& cues, const std::vector<double>& hand,
                                         const std::vector<double>& color) const;

    double sdf_query(const std::vector<double>& f_combined, const Vec3& p) const;
    std::vector<double> sdf_query_batch(const std::vector<double>& f_combined,
                                        const std::vector<Vec3>& pts) const;
    SdfGrid sample_grid(const std::vector<double>& f_combined, int resolution) const;
};

// Precomputed per-image inputs; enough to run the extractors without the pixels.
struct ImageFeed {
    std::vector<double> pooled;     // patch_pool output
    std::vector<double> histogram;  // rgb_histogram output
};
ImageFeed make_feed(const img::Image& image);

// Tape builders for training.
num::Tensor build_combined(num::Tape& tape, Binder& bind, const ReconConfig& cfg,
                           const ImageFeed& feed, const std::vector<double>* occluder_mask);
num::Tensor build_sdf(num::Tape& tape, Binder& bind, const ReconConfig& cfg, num::Tensor f_combined,
                      const std::vector<Vec3>& pts);  // [P,1]
num::Tensor build_patch_mask(num::Tape& tape, Binder& bind, const std::vector<double>& pooled);  // [196,1]

struct OccludedEmbedding {
    clip::Embedding embedding;
    bool empty_mesh = false;
};

// extract -> decode SDF on a grid -> mesh -> 2D projection -> CLIP image embedding.
OccludedEmbedding embed_occluded(const ReconModel& model, const clip::ClipTower& tower,
                                 const img::Image& image, int grid_resolution = 0);

}  // namespace occ::recon
