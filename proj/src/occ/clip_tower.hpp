#pragma once

#include <utility>
#include <vector>

#include "occ/image.hpp"
#include "occ/params.hpp"
#include "occ/text.hpp"

namespace occ::clip {

struct Embedding {
    std::vector<double> v;
    bool normalized = false;

    int dim() const { return static_cast<int>(v.size()); }
};

double dot(const Embedding& a, const Embedding& b);

struct ClipConfig {
    int embed_dim = 64;
    int hidden = 64;
    double temperature_init = 0.07;
};

// Dual-tower encoder. Image side: 16x16 patch pooling, linear patch embedding,
// layer norm, two-layer MLP. Text side: mean of token embeddings, two-layer MLP.
// Both towers emit unit-norm embeddings; similarity is their dot product.
struct ClipTower {
    ClipConfig cfg;
    int vocab_size = 0;
    ParamMap params;  // clip.image.*, clip.text.*, clip.logit_scale

    static ClipTower init(const ClipConfig& cfg, int vocab_size, uint64_t seed);

    Embedding encode_image(const img::Image& image) const;
    Embedding encode_pooled(const std::vector<double>& pooled) const;  // pre-pooled patches
    Embedding encode_text(const text::TokenSeq& tokens) const;
    double clip_score(const text::TokenSeq& tokens, const img::Image& image) const;
};

// Tape builders shared by inference and training. Images enter as patch-pooled
// feature rows; token sequences are embedded and mean-pooled per row.
num::Tensor build_image_embed(num::Tape& tape, Binder& bind, const ClipConfig& cfg,
                              const std::vector<std::vector<double>>& pooled_rows);
num::Tensor build_text_embed(num::Tape& tape, Binder& bind, const ClipConfig& cfg,
                             const std::vector<text::TokenSeq>& rows);

// Drops reserved ids (PAD/BOS/EOS); DomainError when nothing remains.
text::TokenSeq content_tokens(const text::TokenSeq& tokens);

struct ContrastiveTrace {
    std::vector<double> loss_per_step;
};

// Symmetric InfoNCE over in-batch similarities with a learnable temperature.
// Updates tower.params in place; needs at least two pairs for negatives.
ContrastiveTrace train_contrastive(ClipTower& tower,
                                   const std::vector<std::pair<img::Image, text::TokenSeq>>& pairs,
                                   int steps, int batch_size, double learning_rate, uint64_t seed);

// Single-batch loss value (no update); exposed for fixed-point checks.
double contrastive_loss(const ClipTower& tower,
                        const std::vector<std::pair<img::Image, text::TokenSeq>>& batch);

// Loss over pre-pooled image rows; the builder behind both training entry points.
num::Tensor build_contrastive_loss(num::Tape& tape, Binder& bind, const ClipConfig& cfg,
                                   const std::vector<std::vector<double>>& pooled_rows,
                                   const std::vector<text::TokenSeq>& texts);

}  // namespace occ::clip
