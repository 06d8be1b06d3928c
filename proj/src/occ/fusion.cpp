#include "occ/fusion.hpp"

namespace occ::fusion {

using num::Tape;
using num::Tensor;

void FusionConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw DomainError("alpha " + std::to_string(alpha) + " outside [0,1]");
    if (n_tokens < 1 || d_model < 1 || embed_dim < 1) throw DomainError("invalid fusion dimensions");
}

clip::Embedding blend(const clip::Embedding& v1, const clip::Embedding& v2, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw DomainError("alpha " + std::to_string(alpha) + " outside [0,1]");
    if (v1.dim() != v2.dim())
        throw DimensionError("blend dims differ: " + std::to_string(v1.dim()) + " vs " +
                             std::to_string(v2.dim()));
    if (alpha == 1.0) return v1;
    if (alpha == 0.0) return v2;
    clip::Embedding out;
    out.v.resize(v1.v.size());
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = alpha * v1.v[i] + (1.0 - alpha) * v2.v[i];
    out.normalized = false;
    return out;
}

FusionMap FusionMap::init(const FusionConfig& cfg, uint64_t seed) {
    cfg.validate();
    FusionMap m;
    m.cfg = cfg;
    Rng rng = Rng(seed).fork(31);
    m.params["fusion.map.w"] = dense_init(cfg.embed_dim, cfg.n_tokens * cfg.d_model, rng);
    return m;
}

Tensor build_tokens(Tape& tape, Binder& bind, const FusionConfig& cfg, Tensor xv) {
    if (xv.cols() != cfg.embed_dim || xv.rows() != 1)
        throw DimensionError("fusion input of shape " + num::shape_str(xv.shape()) + ", expected [1x" +
                             std::to_string(cfg.embed_dim) + "]");
    Tensor flat = tape.matmul(xv, bind("fusion.map.w"));  // [1, n*d]
    return tape.reshape(flat, {cfg.n_tokens, cfg.d_model});
}

std::vector<double> map_to_tokens(const FusionMap& map, const clip::Embedding& xv) {
    if (xv.dim() != map.cfg.embed_dim)
        throw DimensionError("embedding of " + std::to_string(xv.dim()) + " values, map expects " +
                             std::to_string(map.cfg.embed_dim));
    Tape tape;
    Binder bind(tape, map.params, [](const std::string&) { return false; });
    Tensor x = tape.input({1, map.cfg.embed_dim}, xv.v);
    return build_tokens(tape, bind, map.cfg, x).values();
}

lm::LmInput fuse_inputs(std::vector<double> visual_tokens, const FusionConfig& cfg,
                        const text::TokenSeq& text) {
    if (text.empty()) throw DomainError("fuse_inputs requires at least one text token");
    if (visual_tokens.size() != static_cast<size_t>(cfg.n_tokens) * cfg.d_model)
        throw DimensionError("visual token block of " + std::to_string(visual_tokens.size()) +
                             " values, expected " + std::to_string(cfg.n_tokens * cfg.d_model));
    lm::LmInput in;
    in.visual = std::move(visual_tokens);
    in.n_visual = cfg.n_tokens;
    in.text = text;
    return in;
}

}  // namespace occ::fusion
