#include "occ/recon3d.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>

namespace occ::recon {

using num::Tape;
using num::Tensor;

int pe_dim(const ReconConfig& cfg) { return 3 + 6 * cfg.pe_frequencies; }

std::vector<double> positional_encoding(const ReconConfig& cfg, const Vec3& p) {
    for (double v : p)
        if (std::fabs(v) > 1.0 + 1e-9) throw DomainError("SDF query point outside [-1,1]^3");
    std::vector<double> out;
    out.reserve(static_cast<size_t>(pe_dim(cfg)));
    out.push_back(p[0]);
    out.push_back(p[1]);
    out.push_back(p[2]);
    constexpr double kPi = 3.14159265358979323846;
    // octave ladder capped low: smooth primitive fields gain nothing past ~8 pi,
    // and plain gradient descent stalls on higher bands
    for (int k = 0; k < cfg.pe_frequencies; ++k) {
        double f = kPi * static_cast<double>(1 << k) / 16.0;
        for (int a = 0; a < 3; ++a) {
            out.push_back(std::sin(f * p[a]));
            out.push_back(std::cos(f * p[a]));
        }
    }
    return out;
}

void SdfGrid::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write SDF grid: " + path);
    out.write("OCCSDF01", 8);
    int32_t r = resolution;
    out.write(reinterpret_cast<const char*>(&r), sizeof(r));
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!out) throw IoError("failed writing SDF grid: " + path);
}

SdfGrid SdfGrid::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open SDF grid: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "OCCSDF01", 8) != 0)
        throw FormatError("not an SDF grid file: " + path);
    int32_t r = 0;
    in.read(reinterpret_cast<char*>(&r), sizeof(r));
    if (!in || r < 2) throw FormatError("SDF grid with invalid resolution in " + path);
    SdfGrid g;
    g.resolution = r;
    g.values.resize(static_cast<size_t>(r) * r * r);
    in.read(reinterpret_cast<char*>(g.values.data()),
            static_cast<std::streamsize>(g.values.size() * sizeof(double)));
    if (!in) throw FormatError("truncated SDF grid: " + path);
    return g;
}

void Mesh::save_obj(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write mesh: " + path);
    out.precision(12);
    for (const auto& v : vertices) out << "v " << v[0] << " " << v[1] << " " << v[2] << "\n";
    for (const auto& n : normals) out << "vn " << n[0] << " " << n[1] << " " << n[2] << "\n";
    for (const auto& t : triangles)
        out << "f " << t[0] + 1 << "//" << t[0] + 1 << " " << t[1] + 1 << "//" << t[1] + 1 << " "
            << t[2] + 1 << "//" << t[2] + 1 << "\n";
    if (!out) throw IoError("failed writing mesh: " + path);
}

namespace {

inline Vec3 vsub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 vcross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double vdot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double vlen(const Vec3& a) { return std::sqrt(vdot(a, a)); }

// Cube corner offsets in the conventional order.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};

// Six tetrahedra around the 0-6 diagonal; translation-invariant, so shared cube
// faces get matching diagonals and the surface is watertight across cells.
constexpr int kTets[6][4] = {{0, 5, 1, 6}, {0, 1, 2, 6}, {0, 2, 3, 6},
                             {0, 3, 7, 6}, {0, 7, 4, 6}, {0, 4, 5, 6}};

struct MeshBuilder {
    const SdfGrid& grid;
    std::map<std::pair<int64_t, int64_t>, int> edge_vertex;
    Mesh mesh;

    explicit MeshBuilder(const SdfGrid& g) : grid(g) {}

    int64_t point_id(int ix, int iy, int iz) const {
        return (static_cast<int64_t>(iz) * grid.resolution + iy) * grid.resolution + ix;
    }

    Vec3 point(int64_t id) const {
        int r = grid.resolution;
        int ix = static_cast<int>(id % r);
        int iy = static_cast<int>((id / r) % r);
        int iz = static_cast<int>(id / (static_cast<int64_t>(r) * r));
        return {grid.coord(ix), grid.coord(iy), grid.coord(iz)};
    }

    int edge_point(int64_t a, int64_t b, double va, double vb) {
        if (a > b) {
            std::swap(a, b);
            std::swap(va, vb);
        }
        auto it = edge_vertex.find({a, b});
        if (it != edge_vertex.end()) return it->second;
        double denom = va - vb;
        double t = denom != 0.0 ? va / denom : 0.5;
        t = std::clamp(t, 0.0, 1.0);
        Vec3 pa = point(a), pb = point(b);
        Vec3 pos{pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1]), pa[2] + t * (pb[2] - pa[2])};
        int idx = static_cast<int>(mesh.vertices.size());
        mesh.vertices.push_back(pos);
        edge_vertex.emplace(std::make_pair(a, b), idx);
        return idx;
    }

    void emit_triangle(int i0, int i1, int i2, const Vec3& outward) {
        if (i0 == i1 || i1 == i2 || i0 == i2) return;
        Vec3 n = vcross(vsub(mesh.vertices[static_cast<size_t>(i1)], mesh.vertices[static_cast<size_t>(i0)]),
                        vsub(mesh.vertices[static_cast<size_t>(i2)], mesh.vertices[static_cast<size_t>(i0)]));
        double area2 = vlen(n);
        if (area2 < 1e-14) return;  // degenerate after welding
        if (vdot(n, outward) < 0.0) std::swap(i1, i2);
        mesh.triangles.push_back({i0, i1, i2});
    }

    void handle_tet(const int64_t pid[4], const double val[4]) {
        bool inside[4];
        int n_inside = 0;
        for (int i = 0; i < 4; ++i) {
            inside[i] = val[i] < 0.0;
            n_inside += inside[i] ? 1 : 0;
        }
        if (n_inside == 0 || n_inside == 4) return;

        // direction from the inside corners toward the outside corners
        Vec3 in_c{0, 0, 0}, out_c{0, 0, 0};
        for (int i = 0; i < 4; ++i) {
            Vec3 p = point(pid[i]);
            auto& acc = inside[i] ? in_c : out_c;
            for (int a = 0; a < 3; ++a) acc[a] += p[a];
        }
        for (int a = 0; a < 3; ++a) {
            in_c[a] /= n_inside;
            out_c[a] /= 4 - n_inside;
        }
        Vec3 outward = vsub(out_c, in_c);

        int lone = -1;
        if (n_inside == 1 || n_inside == 3) {
            bool look = n_inside == 1;
            for (int i = 0; i < 4; ++i)
                if (inside[i] == look) lone = i;
            int others[3];
            int k = 0;
            for (int i = 0; i < 4; ++i)
                if (i != lone) others[k++] = i;
            int a = edge_point(pid[lone], pid[others[0]], val[lone], val[others[0]]);
            int b = edge_point(pid[lone], pid[others[1]], val[lone], val[others[1]]);
            int c = edge_point(pid[lone], pid[others[2]], val[lone], val[others[2]]);
            emit_triangle(a, b, c, outward);
            return;
        }

        // two in, two out: a quad split into two triangles
        int in_i[2], out_i[2];
        int ki = 0, ko = 0;
        for (int i = 0; i < 4; ++i)
            (inside[i] ? in_i[ki++] : out_i[ko++]) = i;
        int v00 = edge_point(pid[in_i[0]], pid[out_i[0]], val[in_i[0]], val[out_i[0]]);
        int v01 = edge_point(pid[in_i[0]], pid[out_i[1]], val[in_i[0]], val[out_i[1]]);
        int v10 = edge_point(pid[in_i[1]], pid[out_i[0]], val[in_i[1]], val[out_i[0]]);
        int v11 = edge_point(pid[in_i[1]], pid[out_i[1]], val[in_i[1]], val[out_i[1]]);
        emit_triangle(v00, v01, v11, outward);
        emit_triangle(v00, v11, v10, outward);
    }
};

}  // namespace

Mesh reconstruct_mesh(const SdfGrid& grid) {
    if (grid.resolution < 8) throw DomainError("grid resolution below 8");
    MeshBuilder mb(grid);
    int r = grid.resolution;
    for (int iz = 0; iz + 1 < r; ++iz)
        for (int iy = 0; iy + 1 < r; ++iy)
            for (int ix = 0; ix + 1 < r; ++ix) {
                int64_t pid[8];
                double val[8];
                bool any_neg = false, any_pos = false;
                for (int c = 0; c < 8; ++c) {
                    int cx = ix + kCorner[c][0], cy = iy + kCorner[c][1], cz = iz + kCorner[c][2];
                    pid[c] = mb.point_id(cx, cy, cz);
                    val[c] = grid.at(cx, cy, cz);
                    (val[c] < 0.0 ? any_neg : any_pos) = true;
                }
                if (!any_neg || !any_pos) continue;
                for (const auto& tet : kTets) {
                    int64_t tp[4];
                    double tv[4];
                    for (int i = 0; i < 4; ++i) {
                        tp[i] = pid[tet[i]];
                        tv[i] = val[tet[i]];
                    }
                    mb.handle_tet(tp, tv);
                }
            }

    Mesh m = std::move(mb.mesh);
    // drop vertices never referenced by a surviving triangle
    std::vector<int> remap(m.vertices.size(), -1);
    Mesh out;
    for (auto& t : m.triangles) {
        for (int& vi : t) {
            if (remap[static_cast<size_t>(vi)] < 0) {
                remap[static_cast<size_t>(vi)] = static_cast<int>(out.vertices.size());
                out.vertices.push_back(m.vertices[static_cast<size_t>(vi)]);
            }
            vi = remap[static_cast<size_t>(vi)];
        }
        out.triangles.push_back(t);
    }

    // area-weighted vertex normals from oriented faces
    out.normals.assign(out.vertices.size(), Vec3{0, 0, 0});
    for (const auto& t : out.triangles) {
        Vec3 n = vcross(vsub(out.vertices[static_cast<size_t>(t[1])], out.vertices[static_cast<size_t>(t[0])]),
                        vsub(out.vertices[static_cast<size_t>(t[2])], out.vertices[static_cast<size_t>(t[0])]));
        for (int vi : t)
            for (int a = 0; a < 3; ++a) out.normals[static_cast<size_t>(vi)][a] += n[a];
    }
    for (auto& n : out.normals) {
        double l = vlen(n);
        if (l > 0)
            for (double& v : n) v /= l;
        else
            n = {0, 0, 1};
    }
    return out;
}

int euler_characteristic(const Mesh& m) {
    std::set<std::pair<int, int>> edges;
    for (const auto& t : m.triangles) {
        for (int e = 0; e < 3; ++e) {
            int a = t[static_cast<size_t>(e)], b = t[static_cast<size_t>((e + 1) % 3)];
            edges.emplace(std::min(a, b), std::max(a, b));
        }
    }
    return static_cast<int>(m.vertices.size()) - static_cast<int>(edges.size()) +
           static_cast<int>(m.triangles.size());
}

img::Image project(const Mesh& m) {
    img::Image out;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) out.set(y, x, 0.5, 0.5, 0.5);
    if (m.empty()) return out;

    static const Vec3 kLight = [] {
        Vec3 l{0.35, 0.5, 0.8};
        double n = vlen(l);
        return Vec3{l[0] / n, l[1] / n, l[2] / n};
    }();
    const Vec3 kBase{0.80, 0.75, 0.68};

    std::vector<double> zbuf(static_cast<size_t>(img::kSize) * img::kSize,
                             -std::numeric_limits<double>::infinity());

    auto to_px = [](double v) { return (v + 1.0) * (img::kSize / 2.0) - 0.5; };

    for (const auto& t : m.triangles) {
        const Vec3& a = m.vertices[static_cast<size_t>(t[0])];
        const Vec3& b = m.vertices[static_cast<size_t>(t[1])];
        const Vec3& c = m.vertices[static_cast<size_t>(t[2])];
        double ax = to_px(a[0]), ay = to_px(-a[1]);
        double bx = to_px(b[0]), by = to_px(-b[1]);
        double cx = to_px(c[0]), cy = to_px(-c[1]);
        int x0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cx}))));
        int x1 = std::min(img::kSize - 1, static_cast<int>(std::ceil(std::max({ax, bx, cx}))));
        int y0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cy}))));
        int y1 = std::min(img::kSize - 1, static_cast<int>(std::ceil(std::max({ay, by, cy}))));
        if (x0 > x1 || y0 > y1) continue;
        double det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
        if (std::fabs(det) < 1e-12) continue;
        for (int py = y0; py <= y1; ++py)
            for (int px = x0; px <= x1; ++px) {
                double l1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det;
                double l2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det;
                double l0 = 1.0 - l1 - l2;
                if (l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9) continue;
                double z = l0 * a[2] + l1 * b[2] + l2 * c[2];
                size_t pi = static_cast<size_t>(py) * img::kSize + static_cast<size_t>(px);
                if (z <= zbuf[pi]) continue;
                zbuf[pi] = z;
                Vec3 n{};
                for (int ax3 = 0; ax3 < 3; ++ax3)
                    n[ax3] = l0 * m.normals[static_cast<size_t>(t[0])][ax3] +
                             l1 * m.normals[static_cast<size_t>(t[1])][ax3] +
                             l2 * m.normals[static_cast<size_t>(t[2])][ax3];
                double nl = vlen(n);
                if (nl > 0)
                    for (double& v : n) v /= nl;
                if (n[2] < 0.0)
                    for (double& v : n) v = -v;  // two-sided
                double lambert = std::max(0.0, vdot(n, kLight));
                double f = 0.25 + 0.75 * lambert;
                out.set(py, px, std::clamp(kBase[0] * f, 0.0, 1.0), std::clamp(kBase[1] * f, 0.0, 1.0),
                        std::clamp(kBase[2] * f, 0.0, 1.0));
            }
    }
    return out;
}

ReconModel ReconModel::init(const ReconConfig& cfg, uint64_t seed) {
    ReconModel m;
    m.cfg = cfg;
    Rng rng(seed);
    auto& p = m.params;
    Rng r1 = rng.fork(11), r2 = rng.fork(12), r3 = rng.fork(13), r4 = rng.fork(14), r5 = rng.fork(15);
    int d = cfg.feature_dim;
    p["recon.cues.w1"] = dense_init(img::kPatchFeatures, d, r1);
    p["recon.cues.b1"] = zeros({d});
    p["recon.cues.w2"] = dense_init(d, d, r1);
    p["recon.cues.b2"] = zeros({d});
    p["recon.hand.w1"] = dense_init(img::kPatchFeatures, d, r2);
    p["recon.hand.b1"] = zeros({d});
    p["recon.hand.w2"] = dense_init(d, d, r2);
    p["recon.hand.b2"] = zeros({d});
    p["recon.color.w"] = dense_init(64, d, r3);
    p["recon.color.b"] = zeros({d});
    p["recon.mask.w"] = dense_init(3, 1, r4);
    p["recon.mask.b"] = zeros({1});
    p["recon.fs.w1"] = dense_init(d, d, r5);
    p["recon.fs.b1"] = zeros({d});
    p["recon.fs.w2"] = dense_init(d, d, r5);
    p["recon.fs.b2"] = zeros({d});
    p["recon.sdf.ln.g"] = full({d}, 1.0);
    p["recon.sdf.ln.b"] = zeros({d});
    int in = d + pe_dim(cfg);
    p["recon.sdf.w1"] = dense_init(in, cfg.sdf_hidden, r5);
    p["recon.sdf.b1"] = zeros({cfg.sdf_hidden});
    p["recon.sdf.w2"] = dense_init(cfg.sdf_hidden, cfg.sdf_hidden, r5);
    p["recon.sdf.b2"] = zeros({cfg.sdf_hidden});
    p["recon.sdf.w3"] = dense_init(cfg.sdf_hidden, 1, r5);
    p["recon.sdf.b3"] = zeros({1});
    return m;
}

ImageFeed make_feed(const img::Image& image) {
    return {img::patch_pool(image), img::rgb_histogram(image)};
}

namespace {

Tensor patch_mask_from_pooled(Tape& tape, Binder& bind, const std::vector<double>& pooled) {
    int n = img::kPatchGrid * img::kPatchGrid;
    Tensor rgb = tape.input({n, 3}, pooled);
    return tape.sigmoid(tape.add_row_broadcast(tape.matmul(rgb, bind("recon.mask.w")), bind("recon.mask.b")));
}

Tensor mlp2(Tape& tape, Binder& bind, Tensor x, const std::string& prefix) {
    Tensor h = tape.relu(tape.add_row_broadcast(tape.matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
    return tape.add_row_broadcast(tape.matmul(h, bind(prefix + ".w2")), bind(prefix + ".b2"));
}

struct FeatureTensors {
    Tensor cues, hand, color, combined;
};

FeatureTensors build_features(Tape& tape, Binder& bind, const ReconConfig& cfg, const ImageFeed& feed,
                              const std::vector<double>* occluder_mask) {
    if (feed.pooled.size() != static_cast<size_t>(img::kPatchFeatures) || feed.histogram.size() != 64)
        throw DimensionError("image feed has unexpected sizes");
    Tensor full = tape.input({1, img::kPatchFeatures}, feed.pooled);
    Tensor cues = mlp2(tape, bind, full, "recon.cues");

    Tensor mask;  // [196,1]
    if (occluder_mask) {
        if (occluder_mask->size() != static_cast<size_t>(img::kPatchGrid) * img::kPatchGrid)
            throw DimensionError("occluder mask must carry one value per patch");
        mask = tape.input({img::kPatchGrid * img::kPatchGrid, 1}, *occluder_mask);
    } else {
        mask = patch_mask_from_pooled(tape, bind, feed.pooled);
    }
    // zero out non-occluder patches before the hand-feature extractor
    Tensor pooled_rows = tape.input({img::kPatchGrid * img::kPatchGrid, 3}, feed.pooled);
    Tensor mask3 = tape.concat_cols(tape.concat_cols(mask, mask), mask);
    Tensor masked = tape.reshape(tape.mul(pooled_rows, mask3), {1, img::kPatchFeatures});
    Tensor hand = mlp2(tape, bind, masked, "recon.hand");

    Tensor hist = tape.input({1, 64}, feed.histogram);
    Tensor color = tape.add_row_broadcast(tape.matmul(hist, bind("recon.color.w")), bind("recon.color.b"));

    Tensor sum = tape.add(tape.add(cues, hand), color);
    Tensor combined = mlp2(tape, bind, sum, "recon.fs");
    (void)cfg;
    return {cues, hand, color, combined};
}

}  // namespace

num::Tensor build_combined(Tape& tape, Binder& bind, const ReconConfig& cfg, const ImageFeed& feed,
                           const std::vector<double>* occluder_mask) {
    return build_features(tape, bind, cfg, feed, occluder_mask).combined;
}

num::Tensor build_patch_mask(Tape& tape, Binder& bind, const std::vector<double>& pooled) {
    return patch_mask_from_pooled(tape, bind, pooled);
}

num::Tensor build_sdf(Tape& tape, Binder& bind, const ReconConfig& cfg, Tensor f_combined,
                      const std::vector<Vec3>& pts) {
    if (pts.empty()) throw DomainError("no query points");
    int P = static_cast<int>(pts.size());
    std::vector<double> pe;
    pe.reserve(static_cast<size_t>(P) * static_cast<size_t>(pe_dim(cfg)));
    for (const auto& p : pts) {
        auto enc = positional_encoding(cfg, p);
        pe.insert(pe.end(), enc.begin(), enc.end());
    }
    // normalize the conditioning block; raw combined features have uncontrolled
    // scale and throttle the stable learning-rate range
    Tensor cond = tape.layer_norm(f_combined, bind("recon.sdf.ln.g"), bind("recon.sdf.ln.b"));
    Tensor feat = tape.repeat_rows(cond, P);
    Tensor enc = tape.input({P, pe_dim(cfg)}, std::move(pe));
    Tensor x = tape.concat_cols(feat, enc);
    // tanh keeps the regressed field smooth; the encoding carries the detail
    Tensor h1 = tape.tanh(tape.add_row_broadcast(tape.matmul(x, bind("recon.sdf.w1")), bind("recon.sdf.b1")));
    Tensor h2 = tape.tanh(tape.add_row_broadcast(tape.matmul(h1, bind("recon.sdf.w2")), bind("recon.sdf.b2")));
    Tensor res = tape.add_row_broadcast(tape.matmul(h2, bind("recon.sdf.w3")), bind("recon.sdf.b3"));
    // residual over a unit-ball prior: every target object lives inside the ball,
    // so the network only fits a bounded correction and the far field starts sane
    std::vector<double> prior(static_cast<size_t>(P));
    for (int i = 0; i < P; ++i) {
        const Vec3& p = pts[static_cast<size_t>(i)];
        prior[static_cast<size_t>(i)] = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - 0.5;
    }
    return tape.add(res, tape.input({P, 1}, std::move(prior)));
}

FeatureBundle ReconModel::extract_features(const img::Image& image,
                                           const std::optional<std::vector<double>>& occluder_mask) const {
    image.validate();
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    FeatureTensors t =
        build_features(tape, bind, cfg, make_feed(image), occluder_mask ? &*occluder_mask : nullptr);
    return {t.cues.values(), t.hand.values(), t.color.values(), t.combined.values()};
}

std::vector<double> ReconModel::predict_patch_mask(const img::Image& image) const {
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    return patch_mask_from_pooled(tape, bind, img::patch_pool(image)).values();
}

std::vector<double> ReconModel::combine_features(const std::vector<double>& cues,
                                                 const std::vector<double>& hand,
                                                 const std::vector<double>& color) const {
    if (cues.size() != hand.size() || cues.size() != color.size())
        throw DimensionError("feature parts have different sizes");
    std::vector<double> sum(cues.size());
    for (size_t i = 0; i < sum.size(); ++i) sum[i] = cues[i] + hand[i] + color[i];
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    Tensor s = tape.input({1, static_cast<int>(sum.size())}, sum);
    return mlp2(tape, bind, s, "recon.fs").values();
}

std::vector<double> ReconModel::sdf_query_batch(const std::vector<double>& f_combined,
                                                const std::vector<Vec3>& pts) const {
    if (static_cast<int>(f_combined.size()) != cfg.feature_dim)
        throw DimensionError("combined feature of " + std::to_string(f_combined.size()) + " values");
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    Tensor f = tape.input({1, cfg.feature_dim}, f_combined);
    return build_sdf(tape, bind, cfg, f, pts).values();
}

double ReconModel::sdf_query(const std::vector<double>& f_combined, const Vec3& p) const {
    return sdf_query_batch(f_combined, {p})[0];
}

SdfGrid ReconModel::sample_grid(const std::vector<double>& f_combined, int resolution) const {
    if (resolution < 2) throw DomainError("grid resolution must be at least 2");
    SdfGrid g;
    g.resolution = resolution;
    g.values.resize(static_cast<size_t>(resolution) * resolution * resolution);
    // chunked batch queries; one tape per slab keeps peak memory flat
    std::vector<Vec3> pts;
    pts.reserve(static_cast<size_t>(resolution) * resolution);
    const double bound = 2.0 * 1.7320508075688772;
    size_t base = 0;
    for (int iz = 0; iz < resolution; ++iz) {
        pts.clear();
        for (int iy = 0; iy < resolution; ++iy)
            for (int ix = 0; ix < resolution; ++ix)
                pts.push_back({g.coord(ix), g.coord(iy), g.coord(iz)});
        std::vector<double> vals = sdf_query_batch(f_combined, pts);
        for (size_t i = 0; i < vals.size(); ++i) g.values[base + i] = std::clamp(vals[i], -bound, bound);
        base += vals.size();
    }
    return g;
}

OccludedEmbedding embed_occluded(const ReconModel& model, const clip::ClipTower& tower,
                                 const img::Image& image, int grid_resolution) {
    int res = grid_resolution > 0 ? grid_resolution : model.cfg.grid_resolution;
    FeatureBundle fb = model.extract_features(image);
    SdfGrid grid = model.sample_grid(fb.combined, res);
    Mesh mesh = reconstruct_mesh(grid);
    img::Image proj = project(mesh);
    OccludedEmbedding out;
    out.empty_mesh = mesh.empty();
    out.embedding = tower.encode_image(proj);
    return out;
}

}  // namespace occ::recon
