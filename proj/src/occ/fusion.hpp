#pragma once

#include "occ/clip_tower.hpp"
#include "occ/decoder_lm.hpp"
#include "occ/params.hpp"

namespace occ::fusion {

struct FusionConfig {
    double alpha = 0.5;     // 1.0 is the single-encoder baseline
    int n_tokens = 16;
    int d_model = 64;
    int embed_dim = 64;

    void validate() const;
};

// Convex combination alpha*v1 + (1-alpha)*v2, exact pass-through at the endpoints.
// Not re-normalized.
clip::Embedding blend(const clip::Embedding& v1, const clip::Embedding& v2, double alpha);

struct FusionMap {
    FusionConfig cfg;
    ParamMap params;  // fusion.map.w (bias-free)

    static FusionMap init(const FusionConfig& cfg, uint64_t seed);
};

// Linear map embed_dim -> n_tokens * d_model, reshaped to one vector per token.
num::Tensor build_tokens(num::Tape& tape, Binder& bind, const FusionConfig& cfg, num::Tensor xv);
std::vector<double> map_to_tokens(const FusionMap& map, const clip::Embedding& xv);

// Visual tokens first, then text ids; the language model embeds the text side.
lm::LmInput fuse_inputs(std::vector<double> visual_tokens, const FusionConfig& cfg,
                        const text::TokenSeq& text);

}  // namespace occ::fusion
