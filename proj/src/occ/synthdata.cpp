#include "occ/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "occ/error.hpp"
#include "occ/parallel.hpp"

namespace occ::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBackground = 0.5;
constexpr Vec3 kSkinTone{0.87, 0.66, 0.50};
constexpr double kRayStartZ = 1.3;
constexpr double kRayMaxT = 2.8;
constexpr double kHitEps = 8e-4;
constexpr int kMaxSteps = 96;
constexpr int kSearchRes = 64;
constexpr int kMaxPlacementAttempts = 100;

const std::string kClassNames[kNumClasses] = {"sphere", "cylinder", "box", "torus", "capsule"};

const std::array<double, 3> kClassColors[kNumClasses] = {
    {0.85, 0.20, 0.20},  // sphere: red
    {0.20, 0.75, 0.25},  // cylinder: green
    {0.20, 0.35, 0.85},  // box: blue
    {0.90, 0.85, 0.25},  // torus: yellow
    {0.65, 0.30, 0.80},  // capsule: purple
};

struct Mat3 {
    double m[3][3];
    Vec3 apply(const Vec3& v) const {
        return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
                m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
                m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
    }
    Vec3 apply_transposed(const Vec3& v) const {
        return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
                m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
                m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
    }
};

Mat3 rot_euler(const Vec3& e) {
    double ca = std::cos(e[0]), sa = std::sin(e[0]);
    double cb = std::cos(e[1]), sb = std::sin(e[1]);
    double cc = std::cos(e[2]), sc = std::sin(e[2]);
    // Rz(c) * Ry(b) * Rx(a)
    Mat3 r;
    r.m[0][0] = cc * cb;
    r.m[0][1] = cc * sb * sa - sc * ca;
    r.m[0][2] = cc * sb * ca + sc * sa;
    r.m[1][0] = sc * cb;
    r.m[1][1] = sc * sb * sa + cc * ca;
    r.m[1][2] = sc * sb * ca - cc * sa;
    r.m[2][0] = -sb;
    r.m[2][1] = cb * sa;
    r.m[2][2] = cb * ca;
    return r;
}

Mat3 rot_y(double a) {
    Mat3 r{};
    double c = std::cos(a), s = std::sin(a);
    r.m[0][0] = c;  r.m[0][1] = 0; r.m[0][2] = s;
    r.m[1][0] = 0;  r.m[1][1] = 1; r.m[1][2] = 0;
    r.m[2][0] = -s; r.m[2][1] = 0; r.m[2][2] = c;
    return r;
}

double vlen(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }
Vec3 vsub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 vadd(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 vscale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

double sdf_local(ObjectClass cls, const Vec3& size, const Vec3& p) {
    switch (cls) {
        case ObjectClass::Sphere:
            return vlen(p) - size[0];
        case ObjectClass::Cylinder: {
            double r = size[0], h = size[1];
            double dx = std::sqrt(p[0] * p[0] + p[2] * p[2]) - r;
            double dy = std::fabs(p[1]) - 0.5 * h;
            double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
            return std::min(std::max(dx, dy), 0.0) + std::sqrt(ox * ox + oy * oy);
        }
        case ObjectClass::Box: {
            Vec3 q{std::fabs(p[0]) - size[0], std::fabs(p[1]) - size[1], std::fabs(p[2]) - size[2]};
            Vec3 o{std::max(q[0], 0.0), std::max(q[1], 0.0), std::max(q[2], 0.0)};
            return vlen(o) + std::min(std::max(q[0], std::max(q[1], q[2])), 0.0);
        }
        case ObjectClass::Torus: {
            double R = size[0], r = size[1];
            double qx = std::sqrt(p[0] * p[0] + p[2] * p[2]) - R;
            return std::sqrt(qx * qx + p[1] * p[1]) - r;
        }
        case ObjectClass::Capsule: {
            double r = size[0], h = size[1];
            double half = 0.5 * h;
            double y = p[1] - std::clamp(p[1], -half, half);
            return std::sqrt(p[0] * p[0] + y * y + p[2] * p[2]) - r;
        }
    }
    throw DomainError("unknown object class");
}

double segment_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
    Vec3 pa = vsub(p, a), ba = vsub(b, a);
    double denom = ba[0] * ba[0] + ba[1] * ba[1] + ba[2] * ba[2];
    double h = denom > 0 ? std::clamp((pa[0] * ba[0] + pa[1] * ba[1] + pa[2] * ba[2]) / denom, 0.0, 1.0) : 0.0;
    return vlen(vsub(pa, vscale(ba, h))) - r;
}

struct OccluderShape {
    Vec3 palm;
    double palm_radius;
    std::vector<std::pair<Vec3, Vec3>> fingers;  // segment endpoints
    double finger_radius;
    double bound_radius;  // xy bounding circle around bound_center
    Vec3 bound_center;

    double sdf(const Vec3& p) const {
        double d = vlen(vsub(p, palm)) - palm_radius;
        for (const auto& [a, b] : fingers) d = std::min(d, segment_sdf(p, a, b, finger_radius));
        return d;
    }
};

OccluderShape make_occluder(const OccluderParams& o) {
    OccluderShape s;
    s.palm = o.center;
    s.palm_radius = o.palm_radius;
    s.finger_radius = o.finger_radius;
    double mid = (o.fingers - 1) * 0.5;
    for (int i = 0; i < o.fingers; ++i) {
        double ang = o.base_angle + o.spread * (i - mid);
        Vec3 dir{std::cos(ang), std::sin(ang), -0.25};
        double dl = vlen(dir);
        dir = vscale(dir, 1.0 / dl);
        Vec3 a = vadd(o.center, vscale(dir, o.palm_radius * 0.6));
        Vec3 b = vadd(o.center, vscale(dir, o.palm_radius * 0.6 + o.finger_length));
        s.fingers.emplace_back(a, b);
    }
    s.bound_center = o.center;
    s.bound_radius = o.palm_radius + o.finger_length + o.finger_radius + 0.05;
    return s;
}

struct ViewedObject {
    ObjectClass cls;
    Vec3 size;
    Mat3 rot;      // combined view * pose rotation
    Vec3 center;   // view-rotated center
    double bound_radius;

    double sdf(const Vec3& p) const {
        return sdf_local(cls, size, rot.apply_transposed(vsub(p, center)));
    }
};

double object_bound_radius(const ObjectParams& o) {
    switch (o.cls) {
        case ObjectClass::Sphere: return o.size[0];
        case ObjectClass::Cylinder: return std::sqrt(o.size[0] * o.size[0] + 0.25 * o.size[1] * o.size[1]);
        case ObjectClass::Box: return vlen(o.size);
        case ObjectClass::Torus: return o.size[0] + o.size[1];
        case ObjectClass::Capsule: return 0.5 * o.size[1] + o.size[0];
    }
    return 1.0;
}

ViewedObject make_viewed(const ObjectParams& o, double azimuth) {
    ViewedObject v;
    v.cls = o.cls;
    v.size = o.size;
    Mat3 rv = rot_y(azimuth);
    Mat3 rp = rot_euler(o.euler);
    Mat3 c;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            c.m[i][j] = 0;
            for (int k = 0; k < 3; ++k) c.m[i][j] += rv.m[i][k] * rp.m[k][j];
        }
    v.rot = c;
    v.center = rv.apply(o.center);
    v.bound_radius = object_bound_radius(o) + 0.02;
    return v;
}

struct TraceHit {
    int id = 0;  // 0 none, 1 object, 2 occluder
    Vec3 pos{};
};

TraceHit trace_ray(const ViewedObject& obj, const OccluderShape* occ, double x, double y) {
    // orthographic ray along -z
    double obr = obj.bound_radius;
    bool may_obj = (x - obj.center[0]) * (x - obj.center[0]) + (y - obj.center[1]) * (y - obj.center[1]) <=
                   obr * obr;
    bool may_occ = false;
    if (occ) {
        double dr = occ->bound_radius;
        may_occ = (x - occ->bound_center[0]) * (x - occ->bound_center[0]) +
                      (y - occ->bound_center[1]) * (y - occ->bound_center[1]) <=
                  dr * dr;
    }
    if (!may_obj && !may_occ) return {};

    double t = 0.0;
    for (int step = 0; step < kMaxSteps && t < kRayMaxT; ++step) {
        Vec3 p{x, y, kRayStartZ - t};
        double so = may_obj ? obj.sdf(p) : 1e9;
        double sh = may_occ ? occ->sdf(p) : 1e9;
        double s = std::min(so, sh);
        if (s < kHitEps) {
            TraceHit hit;
            hit.id = so <= sh ? 1 : 2;
            hit.pos = p;
            return hit;
        }
        t += s;
    }
    return {};
}

template <typename F>
Vec3 surface_normal(F&& f, const Vec3& p) {
    const double h = 1e-4;
    Vec3 n{f({p[0] + h, p[1], p[2]}) - f({p[0] - h, p[1], p[2]}),
           f({p[0], p[1] + h, p[2]}) - f({p[0], p[1] - h, p[2]}),
           f({p[0], p[1], p[2] + h}) - f({p[0], p[1], p[2] - h})};
    double l = vlen(n);
    if (l <= 0) return {0, 0, 1};
    return vscale(n, 1.0 / l);
}

std::array<double, 3> shade(const Vec3& base, const Vec3& n) {
    static const Vec3 kLight = [] {
        Vec3 l{0.35, 0.5, 0.8};
        return vscale(l, 1.0 / vlen(l));
    }();
    double lambert = std::max(0.0, n[0] * kLight[0] + n[1] * kLight[1] + n[2] * kLight[2]);
    double f = 0.25 + 0.75 * lambert;
    return {std::clamp(base[0] * f, 0.0, 1.0), std::clamp(base[1] * f, 0.0, 1.0),
            std::clamp(base[2] * f, 0.0, 1.0)};
}

// Low-resolution free-view silhouette, reused across placement attempts.
struct Silhouette {
    int res = 0;
    std::vector<std::pair<double, double>> pixels;  // viewport coordinates of object hits
};

Silhouette free_silhouette(const ViewedObject& obj, int res) {
    Silhouette s;
    s.res = res;
    for (int iy = 0; iy < res; ++iy)
        for (int ix = 0; ix < res; ++ix) {
            double x = -1.0 + 2.0 * (ix + 0.5) / res;
            double y = 1.0 - 2.0 * (iy + 0.5) / res;
            if (trace_ray(obj, nullptr, x, y).id == 1) s.pixels.emplace_back(x, y);
        }
    return s;
}

// Fraction of silhouette pixels the occluder hides from this view.
double hidden_fraction(const ViewedObject& obj, const OccluderShape& occ, const Silhouette& s) {
    if (s.pixels.empty()) return 0.0;
    int visible = 0;
    for (const auto& [x, y] : s.pixels)
        if (trace_ray(obj, &occ, x, y).id == 1) ++visible;
    return 1.0 - static_cast<double>(visible) / static_cast<double>(s.pixels.size());
}

}  // namespace

const std::string& class_name(ObjectClass c) { return kClassNames[static_cast<int>(c)]; }

std::optional<ObjectClass> class_from_name(const std::string& name) {
    for (int i = 0; i < kNumClasses; ++i)
        if (kClassNames[i] == name) return static_cast<ObjectClass>(i);
    return std::nullopt;
}

std::array<double, 3> class_color(ObjectClass c) { return kClassColors[static_cast<int>(c)]; }

double analytic_sdf(const ObjectParams& obj, const Vec3& p) {
    for (double v : p)
        if (std::fabs(v) > 1.0 + 1e-9)
            throw DomainError("SDF query point outside [-1,1]^3");
    Mat3 r = rot_euler(obj.euler);
    return sdf_local(obj.cls, obj.size, r.apply_transposed(vsub(p, obj.center)));
}

double analytic_sdf_viewed(const ObjectParams& obj, double view_azimuth, const Vec3& p) {
    for (double v : p)
        if (std::fabs(v) > 1.0 + 1e-9)
            throw DomainError("SDF query point outside [-1,1]^3");
    return make_viewed(obj, view_azimuth).sdf(p);
}

double occluder_sdf(const OccluderParams& occ, const Vec3& p) {
    return make_occluder(occ).sdf(p);
}

std::vector<QaPair> instruction_set(const ObjectParams& obj) {
    bool round = false, long_ = false, thin = false;
    switch (obj.cls) {
        case ObjectClass::Sphere:
            round = true;
            break;
        case ObjectClass::Cylinder:
            long_ = true;
            thin = obj.size[0] / obj.size[1] < 0.25;
            break;
        case ObjectClass::Box: {
            double mn = std::min({obj.size[0], obj.size[1], obj.size[2]});
            double mx = std::max({obj.size[0], obj.size[1], obj.size[2]});
            long_ = mx / mn >= 2.5;
            thin = mn / mx <= 0.4;
            break;
        }
        case ObjectClass::Torus:
            round = true;
            thin = true;
            break;
        case ObjectClass::Capsule:
            long_ = true;
            thin = obj.size[0] / (obj.size[1] + 2.0 * obj.size[0]) < 0.25;
            break;
    }
    double br = object_bound_radius(obj);
    const char* size_word = br < 0.42 ? "small" : (br < 0.55 ? "medium" : "large");
    const char* color_word[kNumClasses] = {"red", "green", "blue", "yellow", "purple"};
    std::string cname = class_name(obj.cls);

    std::vector<QaPair> qa;
    qa.push_back({"What's the object in the hand?", cname});
    qa.push_back({"Is the object in the hand round?", round ? "yes" : "no"});
    qa.push_back({"Is the object in the hand long?", long_ ? "yes" : "no"});
    qa.push_back({"Is the object in the hand thin?", thin ? "yes" : "no"});
    qa.push_back({"Describe the object in the hand.",
                  "a " + std::string(size_word) + " " + color_word[static_cast<int>(obj.cls)] + " " + cname});
    return qa;
}

namespace {
SceneRecord generate_scene_impl(uint64_t seed, const GenSpec& spec, int scene_index, int view_id,
                                bool fullres_ratio);
}

SceneRecord generate_scene(uint64_t seed, const GenSpec& spec, int scene_index, int view_id) {
    return generate_scene_impl(seed, spec, scene_index, view_id, true);
}

namespace {
SceneRecord generate_scene_impl(uint64_t seed, const GenSpec& spec, int scene_index, int view_id,
                                bool fullres_ratio) {
    if (view_id < 0 || view_id >= spec.views)
        throw DomainError("view_id " + std::to_string(view_id) + " outside 0.." +
                          std::to_string(spec.views - 1));
    // object parameters depend on (seed, scene) only; the occluder solve on (seed, scene, view)
    Rng obj_rng = Rng(seed).fork(0x0B1ECC00 + static_cast<uint64_t>(scene_index));

    SceneRecord rec;
    {
        std::ostringstream os;
        os << spec.id_prefix << std::setw(5) << std::setfill('0') << scene_index;
        rec.instance_id = os.str();
        os << "_v" << view_id;
        rec.scene_id = os.str();
    }
    rec.view_id = view_id;
    rec.views_total = spec.views;
    rec.view_azimuth = 2.0 * kPi * view_id / spec.views;

    // class by weight
    double wsum = 0.0;
    for (double w : spec.class_weights) wsum += w;
    double pick = obj_rng.uniform() * wsum;
    int cls = 0;
    for (; cls < kNumClasses - 1; ++cls) {
        pick -= spec.class_weights[static_cast<size_t>(cls)];
        if (pick < 0) break;
    }
    ObjectParams& o = rec.object;
    o.cls = static_cast<ObjectClass>(cls);
    switch (o.cls) {
        case ObjectClass::Sphere:
            o.size = {obj_rng.uniform(0.30, 0.55), 0, 0};
            break;
        case ObjectClass::Cylinder:
            o.size = {obj_rng.uniform(0.12, 0.30), obj_rng.uniform(0.5, 1.1), 0};
            break;
        case ObjectClass::Box:
            o.size = {obj_rng.uniform(0.15, 0.45), obj_rng.uniform(0.15, 0.45), obj_rng.uniform(0.15, 0.45)};
            break;
        case ObjectClass::Torus:
            o.size = {obj_rng.uniform(0.30, 0.45), obj_rng.uniform(0.08, 0.15), 0};
            break;
        case ObjectClass::Capsule:
            o.size = {obj_rng.uniform(0.10, 0.22), obj_rng.uniform(0.4, 0.9), 0};
            break;
    }
    o.euler = {obj_rng.uniform(0, 2 * kPi), obj_rng.uniform(0, 2 * kPi), obj_rng.uniform(0, 2 * kPi)};
    // translation stays in the viewing plane: depth along the orthographic axis
    // is unobservable from a single view and would put a floor under stage-2
    o.center = {obj_rng.uniform(-0.15, 0.15), obj_rng.uniform(-0.15, 0.15), 0.0};

    rec.qa = instruction_set(o);

    // occluder solve, view-specific stream
    Rng occ_rng = Rng(seed).fork(0x0CC10000 + static_cast<uint64_t>(scene_index) * 64 +
                                 static_cast<uint64_t>(view_id));
    double target = occ_rng.uniform(spec.occlusion_lo, spec.occlusion_hi);

    OccluderParams& h = rec.occluder;
    h.palm_radius = occ_rng.uniform(0.13, 0.20);
    h.fingers = 3 + occ_rng.uniform_int(3);
    h.finger_length = occ_rng.uniform(0.25, 0.40);
    h.finger_radius = occ_rng.uniform(0.05, 0.09);
    h.spread = occ_rng.uniform(0.25, 0.45);
    h.base_angle = occ_rng.uniform(0, 2 * kPi);
    double depth = occ_rng.uniform(0.85, 1.0);

    ViewedObject vo = make_viewed(o, rec.view_azimuth);

    if (target < 0.005) {
        h.center = {2.5, 2.5, depth};  // far off-silhouette
        rec.occlusion_ratio = 0.0;
        rec.occlusion_target_met = true;
        return rec;
    }
    (void)fullres_ratio;

    Silhouette sil = free_silhouette(vo, kSearchRes);
    double approach = occ_rng.uniform(0, 2 * kPi);
    Vec3 outside{vo.center[0] + 2.2 * std::cos(approach), vo.center[1] + 2.2 * std::sin(approach), depth};
    Vec3 centered{vo.center[0], vo.center[1], depth};

    int attempts = 0;
    auto ratio_at = [&](double u) {
        ++attempts;
        OccluderParams cand = h;
        cand.center = {outside[0] + u * (centered[0] - outside[0]),
                       outside[1] + u * (centered[1] - outside[1]), depth};
        return std::make_pair(hidden_fraction(vo, make_occluder(cand), sil), cand);
    };

    // ratio grows as the occluder slides from outside the silhouette to its center;
    // bisect the slide parameter, enlarging the blob when even full overlap is short
    double best_err = 2.0;
    OccluderParams best = h;
    for (int growth = 0; growth < 5 && attempts < kMaxPlacementAttempts; ++growth) {
        auto [full, cand_full] = ratio_at(1.0);
        if (std::fabs(full - target) < best_err) {
            best_err = std::fabs(full - target);
            best = cand_full;
        }
        if (full < target) {
            h.palm_radius *= 1.3;
            h.finger_length *= 1.3;
            h.finger_radius *= 1.3;
            continue;
        }
        double lo = 0.0, hi = 1.0;
        while (attempts < kMaxPlacementAttempts) {
            double mid = 0.5 * (lo + hi);
            auto [r, cand] = ratio_at(mid);
            if (std::fabs(r - target) < best_err) {
                best_err = std::fabs(r - target);
                best = cand;
            }
            if (best_err < 0.015) break;
            if (r < target) lo = mid; else hi = mid;
        }
        break;
    }
    rec.occluder = best;
    rec.occlusion_target_met = best_err <= 0.05;
    // authoritative stored ratio comes from the full-resolution id buffers; the
    // dataset writer defers this to its own renders
    rec.occlusion_ratio = fullres_ratio ? measure_occlusion_ratio(rec, view_id)
                                        : hidden_fraction(vo, make_occluder(best), sil);
    return rec;
}
}  // namespace

RenderResult render_full(const SceneRecord& scene, int view_id, bool occluded) {
    if (view_id < 0 || view_id >= scene.views_total)
        throw DomainError("view_id " + std::to_string(view_id) + " outside 0.." +
                          std::to_string(scene.views_total - 1));
    double azimuth = 2.0 * kPi * view_id / scene.views_total;
    ViewedObject vo = make_viewed(scene.object, azimuth);
    OccluderShape shape = make_occluder(scene.occluder);
    const OccluderShape* occ = occluded ? &shape : nullptr;

    RenderResult out;
    out.ids.assign(static_cast<size_t>(img::kSize) * img::kSize, 0);

    auto obj_sdf = [&](const Vec3& p) { return vo.sdf(p); };
    auto occ_sdf = [&](const Vec3& p) { return shape.sdf(p); };

    for (int iy = 0; iy < img::kSize; ++iy) {
        for (int ix = 0; ix < img::kSize; ++ix) {
            double x = -1.0 + 2.0 * (ix + 0.5) / img::kSize;
            double y = 1.0 - 2.0 * (iy + 0.5) / img::kSize;
            TraceHit hit = trace_ray(vo, occ, x, y);
            if (hit.id == 0) {
                out.image.set(iy, ix, kBackground, kBackground, kBackground);
                continue;
            }
            out.ids[static_cast<size_t>(iy) * img::kSize + ix] = static_cast<uint8_t>(hit.id);
            Vec3 base = hit.id == 1 ? Vec3(class_color(vo.cls)) : kSkinTone;
            Vec3 n = hit.id == 1 ? surface_normal(obj_sdf, hit.pos) : surface_normal(occ_sdf, hit.pos);
            auto c = shade(base, n);
            out.image.set(iy, ix, c[0], c[1], c[2]);
            if (hit.id == 1) ++out.object_pixels;
        }
    }
    return out;
}

img::Image render(const SceneRecord& scene, int view_id, bool occluded) {
    return render_full(scene, view_id, occluded).image;
}

double measure_occlusion_ratio(const SceneRecord& scene, int view_id) {
    RenderResult free_view = render_full(scene, view_id, false);
    if (free_view.object_pixels == 0) return 0.0;
    RenderResult occ_view = render_full(scene, view_id, true);
    int visible = occ_view.object_pixels;
    double ratio = 1.0 - static_cast<double>(visible) / free_view.object_pixels;
    return std::clamp(ratio, 0.0, 1.0);
}

std::vector<double> occluder_patch_mask(const SceneRecord& scene, int view_id) {
    RenderResult r = render_full(scene, view_id, true);
    std::vector<double> mask(static_cast<size_t>(img::kPatchGrid) * img::kPatchGrid, 0.0);
    constexpr int P = img::kSize / img::kPatchGrid;
    for (int py = 0; py < img::kPatchGrid; ++py)
        for (int px = 0; px < img::kPatchGrid; ++px) {
            int cnt = 0;
            for (int y = py * P; y < (py + 1) * P; ++y)
                for (int x = px * P; x < (px + 1) * P; ++x)
                    if (r.ids[static_cast<size_t>(y) * img::kSize + x] == 2) ++cnt;
            mask[static_cast<size_t>(py) * img::kPatchGrid + px] = static_cast<double>(cnt) / (P * P);
        }
    return mask;
}

double recompute_occlusion_ratio(const img::Image& occluded, const img::Image& free_view) {
    const double bg_tol = 2.5 / 255.0;
    const double diff_tol = 2.5 / 255.0;
    int object_pixels = 0, hidden = 0;
    for (int y = 0; y < img::kSize; ++y)
        for (int x = 0; x < img::kSize; ++x) {
            bool is_object = false;
            for (int c = 0; c < 3; ++c)
                if (std::fabs(free_view.at(y, x, c) - kBackground) > bg_tol) is_object = true;
            if (!is_object) continue;
            ++object_pixels;
            bool differs = false;
            for (int c = 0; c < 3; ++c)
                if (std::fabs(free_view.at(y, x, c) - occluded.at(y, x, c)) > diff_tol) differs = true;
            if (differs) ++hidden;
        }
    if (object_pixels == 0) return 0.0;
    return static_cast<double>(hidden) / object_pixels;
}

namespace {

json vec3_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }
Vec3 vec3_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

std::string record_to_json(const SceneRecord& r) {
    json j;
    j["scene_id"] = r.scene_id;
    j["instance_id"] = r.instance_id;
    j["object_class"] = class_name(r.object.cls);
    j["object"] = {{"size", vec3_json(r.object.size)},
                   {"euler", vec3_json(r.object.euler)},
                   {"center", vec3_json(r.object.center)}};
    j["occluder"] = {{"center", vec3_json(r.occluder.center)},
                     {"palm_radius", r.occluder.palm_radius},
                     {"fingers", r.occluder.fingers},
                     {"finger_length", r.occluder.finger_length},
                     {"finger_radius", r.occluder.finger_radius},
                     {"spread", r.occluder.spread},
                     {"base_angle", r.occluder.base_angle}};
    j["view_id"] = r.view_id;
    j["views_total"] = r.views_total;
    j["view_azimuth"] = r.view_azimuth;
    j["occlusion_ratio"] = r.occlusion_ratio;
    j["occlusion_target_met"] = r.occlusion_target_met;
    j["image"] = r.image;
    j["image_free"] = r.image_free;
    json qa = json::array();
    for (const auto& p : r.qa) qa.push_back({{"instruction", p.instruction}, {"answer", p.answer}});
    j["qa"] = qa;
    return j.dump();
}

SceneRecord record_from_json(const std::string& line) {
    json j = json::parse(line);
    SceneRecord r;
    r.scene_id = j.at("scene_id").get<std::string>();
    r.instance_id = j.at("instance_id").get<std::string>();
    auto cls = class_from_name(j.at("object_class").get<std::string>());
    if (!cls) throw FormatError("unknown object_class in record " + r.scene_id);
    r.object.cls = *cls;
    r.object.size = vec3_from(j.at("object").at("size"));
    r.object.euler = vec3_from(j.at("object").at("euler"));
    r.object.center = vec3_from(j.at("object").at("center"));
    const auto& oc = j.at("occluder");
    r.occluder.center = vec3_from(oc.at("center"));
    r.occluder.palm_radius = oc.at("palm_radius").get<double>();
    r.occluder.fingers = oc.at("fingers").get<int>();
    r.occluder.finger_length = oc.at("finger_length").get<double>();
    r.occluder.finger_radius = oc.at("finger_radius").get<double>();
    r.occluder.spread = oc.at("spread").get<double>();
    r.occluder.base_angle = oc.at("base_angle").get<double>();
    r.view_id = j.at("view_id").get<int>();
    r.views_total = j.at("views_total").get<int>();
    r.view_azimuth = j.at("view_azimuth").get<double>();
    r.occlusion_ratio = j.at("occlusion_ratio").get<double>();
    r.occlusion_target_met = j.at("occlusion_target_met").get<bool>();
    r.image = j.at("image").get<std::string>();
    r.image_free = j.at("image_free").get<std::string>();
    for (const auto& p : j.at("qa")) {
        r.qa.push_back({p.at("instruction").get<std::string>(), p.at("answer").get<std::string>()});
    }
    if (r.qa.size() != kQaPairs)
        throw FormatError("record " + r.scene_id + " has " + std::to_string(r.qa.size()) +
                          " qa pairs, expected 5");
    return r;
}

void write_manifest(const DatasetManifest& m, const std::string& dir) {
    std::set<std::string> ids;
    for (const auto& r : m.records) {
        if (!ids.insert(r.scene_id).second)
            throw DomainError("duplicate scene_id " + r.scene_id);
        if (r.qa.size() != kQaPairs)
            throw DomainError("record " + r.scene_id + " must carry exactly 5 qa pairs");
    }
    fs::create_directories(dir);
    {
        std::ofstream meta(fs::path(dir) / "manifest.meta.json", std::ios::binary);
        if (!meta) throw IoError("cannot write manifest meta in " + dir);
        json j;
        j["seed"] = m.seed;
        j["version"] = m.version;
        j["split"] = m.split;
        j["counts"] = {{"records", m.records.size()}};
        meta << j.dump(2) << "\n";
    }
    std::ofstream out(fs::path(dir) / "manifest.jsonl", std::ios::binary);
    if (!out) throw IoError("cannot write manifest in " + dir);
    for (const auto& r : m.records) out << record_to_json(r) << "\n";
    if (!out) throw IoError("failed writing manifest in " + dir);
}

DatasetManifest read_manifest(const std::string& dir) {
    fs::path meta_path = fs::path(dir) / "manifest.meta.json";
    std::ifstream meta(meta_path, std::ios::binary);
    if (!meta) throw IoError("missing manifest.meta.json in " + dir);
    DatasetManifest m;
    try {
        json j;
        meta >> j;
        m.seed = j.at("seed").get<uint64_t>();
        m.version = j.at("version").get<int>();
        m.split = j.at("split").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError("manifest.meta.json: " + std::string(e.what()));
    }

    std::ifstream in(fs::path(dir) / "manifest.jsonl", std::ios::binary);
    if (!in) throw IoError("missing manifest.jsonl in " + dir);
    std::string line;
    int line_no = 0;
    std::set<std::string> ids;
    std::vector<SceneRecord> records;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(line));
        } catch (const json::exception& e) {
            throw FormatError("manifest.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!ids.insert(records.back().scene_id).second)
            throw FormatError("manifest.jsonl line " + std::to_string(line_no) + ": duplicate scene_id " +
                              records.back().scene_id);
    }
    // referential integrity before handing the manifest out
    for (const auto& r : records) {
        for (const std::string& rel : {r.image, r.image_free}) {
            if (rel.empty()) continue;
            if (!fs::exists(fs::path(dir) / rel))
                throw FormatError("manifest references missing image " + rel + " for scene " + r.scene_id);
        }
    }
    m.records = std::move(records);
    return m;
}

namespace {

DatasetManifest build_split(uint64_t seed, const GenSpec& spec, const std::string& split,
                            const std::string& dir) {
    DatasetManifest m;
    m.split = split;
    m.seed = seed;
    m.version = kGeneratorVersion;
    int total = spec.scenes * spec.views;
    m.records.resize(static_cast<size_t>(total));
    fs::create_directories(fs::path(dir) / "images");

    parallel_for(total, [&](int i) {
        int scene_index = i / spec.views;
        int view_id = i % spec.views;
        SceneRecord rec = generate_scene_impl(seed, spec, scene_index, view_id, false);
        rec.image = "images/" + rec.scene_id + "_occ.png";
        rec.image_free = "images/" + rec.scene_id + "_free.png";
        RenderResult occ_r = render_full(rec, view_id, true);
        RenderResult free_r = render_full(rec, view_id, false);
        if (free_r.object_pixels > 0)
            rec.occlusion_ratio = std::clamp(
                1.0 - static_cast<double>(occ_r.object_pixels) / free_r.object_pixels, 0.0, 1.0);
        else
            rec.occlusion_ratio = 0.0;
        img::write_png(occ_r.image, (fs::path(dir) / rec.image).string());
        img::write_png(free_r.image, (fs::path(dir) / rec.image_free).string());
        m.records[static_cast<size_t>(i)] = std::move(rec);
    });
    return m;
}

}  // namespace

void generate_dataset(uint64_t seed, const GenSpec& train_spec, const GenSpec& test_spec,
                      const std::string& out_dir) {
    GenSpec train = train_spec;
    train.id_prefix = "train";
    GenSpec test = test_spec;
    test.id_prefix = "test";

    DatasetManifest train_m = build_split(seed, train, "train", (fs::path(out_dir) / "train").string());
    // disjoint instance streams: the test split draws from a different seed lane
    DatasetManifest test_m =
        build_split(Rng(seed).fork(0x7E57).u64(), test, "test", (fs::path(out_dir) / "test").string());

    std::set<std::string> train_ids, test_ids;
    for (const auto& r : train_m.records) train_ids.insert(r.instance_id);
    for (const auto& r : test_m.records) test_ids.insert(r.instance_id);
    for (const auto& id : test_ids)
        if (train_ids.count(id)) throw DomainError("train/test share object instance " + id);

    write_manifest(train_m, (fs::path(out_dir) / "train").string());
    write_manifest(test_m, (fs::path(out_dir) / "test").string());
}

}  // namespace occ::synth
