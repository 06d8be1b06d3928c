#include "occ/clip_tower.hpp"

#include <algorithm>
#include <cmath>

namespace occ::clip {

using num::Tape;
using num::Tensor;

double dot(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim())
        throw DimensionError("embedding dims differ: " + std::to_string(a.dim()) + " vs " +
                             std::to_string(b.dim()));
    double s = 0.0;
    for (int i = 0; i < a.dim(); ++i) s += a.v[static_cast<size_t>(i)] * b.v[static_cast<size_t>(i)];
    return s;
}

ClipTower ClipTower::init(const ClipConfig& cfg, int vocab_size, uint64_t seed) {
    if (vocab_size < 5) throw DomainError("vocabulary too small for a text tower");
    Rng rng(seed);
    ClipTower t;
    t.cfg = cfg;
    t.vocab_size = vocab_size;
    auto& p = t.params;
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3), r4 = rng.fork(4);
    // small random biases keep degenerate inputs (all-zero images) off the
    // exact-zero ray, so normalization always has a direction to work with
    p["clip.image.embed.w"] = dense_init(img::kPatchFeatures, cfg.embed_dim, r1);
    p["clip.image.embed.b"] = vector_init(cfg.embed_dim, 0.02, r1);
    p["clip.image.ln.g"] = full({cfg.embed_dim}, 1.0);
    p["clip.image.ln.b"] = vector_init(cfg.embed_dim, 0.02, r1);
    p["clip.image.mlp.w1"] = dense_init(cfg.embed_dim, cfg.hidden, r2);
    p["clip.image.mlp.b1"] = vector_init(cfg.hidden, 0.02, r2);
    p["clip.image.mlp.w2"] = dense_init(cfg.hidden, cfg.embed_dim, r1);
    p["clip.image.mlp.b2"] = vector_init(cfg.embed_dim, 0.02, r2);
    p["clip.text.embed"] = dense_init(vocab_size, cfg.embed_dim, r3);
    p["clip.text.mlp.w1"] = dense_init(cfg.embed_dim, cfg.hidden, r4);
    p["clip.text.mlp.b1"] = vector_init(cfg.hidden, 0.02, r4);
    p["clip.text.mlp.w2"] = dense_init(cfg.hidden, cfg.embed_dim, r4);
    p["clip.text.mlp.b2"] = vector_init(cfg.embed_dim, 0.02, r4);
    p["clip.logit_scale"] = full({1}, std::log(1.0 / cfg.temperature_init));
    return t;
}

Tensor build_image_embed(Tape& tape, Binder& bind, const ClipConfig& cfg,
                         const std::vector<std::vector<double>>& pooled_rows) {
    int b = static_cast<int>(pooled_rows.size());
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(b) * img::kPatchFeatures);
    for (const auto& row : pooled_rows) {
        if (static_cast<int>(row.size()) != img::kPatchFeatures)
            throw DimensionError("pooled image row of " + std::to_string(row.size()) + " values");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    Tensor x = tape.input({b, img::kPatchFeatures}, std::move(flat));
    Tensor e = tape.add_row_broadcast(tape.matmul(x, bind("clip.image.embed.w")), bind("clip.image.embed.b"));
    e = tape.layer_norm(e, bind("clip.image.ln.g"), bind("clip.image.ln.b"));
    Tensor h = tape.relu(tape.add_row_broadcast(tape.matmul(e, bind("clip.image.mlp.w1")),
                                                bind("clip.image.mlp.b1")));
    Tensor out = tape.add_row_broadcast(tape.matmul(h, bind("clip.image.mlp.w2")), bind("clip.image.mlp.b2"));
    (void)cfg;
    return tape.l2_normalize_rows(out);
}

text::TokenSeq content_tokens(const text::TokenSeq& tokens) {
    text::TokenSeq out;
    for (int id : tokens)
        if (id != text::kPad && id != text::kBos && id != text::kEos) out.push_back(id);
    if (out.empty()) throw DomainError("token sequence has no content tokens");
    return out;
}

Tensor build_text_embed(Tape& tape, Binder& bind, const ClipConfig& cfg,
                        const std::vector<text::TokenSeq>& rows) {
    if (rows.empty()) throw DomainError("no token sequences to encode");
    Tensor pooled{};
    bool first = true;
    for (const auto& seq : rows) {
        text::TokenSeq content = content_tokens(seq);
        Tensor emb = tape.embed_gather(bind("clip.text.embed"), content);
        Tensor mean = tape.mean_rows(emb);  // [1, d]
        pooled = first ? mean : tape.concat_rows(pooled, mean);
        first = false;
    }
    Tensor h = tape.relu(tape.add_row_broadcast(tape.matmul(pooled, bind("clip.text.mlp.w1")),
                                                bind("clip.text.mlp.b1")));
    Tensor out = tape.add_row_broadcast(tape.matmul(h, bind("clip.text.mlp.w2")), bind("clip.text.mlp.b2"));
    (void)cfg;
    return tape.l2_normalize_rows(out);
}

Embedding ClipTower::encode_image(const img::Image& image) const {
    image.validate();
    return encode_pooled(img::patch_pool(image));
}

Embedding ClipTower::encode_pooled(const std::vector<double>& pooled) const {
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    Tensor e = build_image_embed(tape, bind, cfg, {pooled});
    return Embedding{e.values(), true};
}

Embedding ClipTower::encode_text(const text::TokenSeq& tokens) const {
    if (tokens.empty()) throw DomainError("encode_text on empty sequence");
    Tape tape;
    Binder bind(tape, params, [](const std::string&) { return false; });
    Tensor e = build_text_embed(tape, bind, cfg, {tokens});
    return Embedding{e.values(), true};
}

double ClipTower::clip_score(const text::TokenSeq& tokens, const img::Image& image) const {
    double s = dot(encode_text(tokens), encode_image(image));
    return std::clamp(s, -1.0, 1.0);
}

Tensor build_contrastive_loss(Tape& tape, Binder& bind, const ClipConfig& cfg,
                              const std::vector<std::vector<double>>& pooled_rows,
                              const std::vector<text::TokenSeq>& texts) {
    if (pooled_rows.size() != texts.size() || pooled_rows.size() < 2)
        throw DomainError("contrastive loss needs at least 2 matched pairs");
    int b = static_cast<int>(pooled_rows.size());
    Tensor ie = build_image_embed(tape, bind, cfg, pooled_rows);
    Tensor te = build_text_embed(tape, bind, cfg, texts);
    Tensor sim = tape.matmul(te, tape.transpose(ie));  // [b,b], rows text, cols image
    Tensor scaled = tape.mul_scalar_t(sim, tape.exp(bind("clip.logit_scale")));

    std::vector<int> diag(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i;
    Tensor row_ce = tape.neg(tape.mean_all(tape.gather_elems(tape.log_softmax(scaled), diag, diag)));
    Tensor col_ce =
        tape.neg(tape.mean_all(tape.gather_elems(tape.log_softmax(tape.transpose(scaled)), diag, diag)));
    return tape.scale(tape.add(row_ce, col_ce), 0.5);
}

double contrastive_loss(const ClipTower& tower,
                        const std::vector<std::pair<img::Image, text::TokenSeq>>& batch) {
    if (batch.size() < 2) throw DomainError("contrastive loss needs at least 2 pairs");
    std::vector<std::vector<double>> pooled;
    std::vector<text::TokenSeq> texts;
    for (const auto& [im, tk] : batch) {
        pooled.push_back(img::patch_pool(im));
        texts.push_back(tk);
    }
    Tape tape;
    Binder bind(tape, tower.params, [](const std::string&) { return false; });
    return build_contrastive_loss(tape, bind, tower.cfg, pooled, texts).scalar();
}

ContrastiveTrace train_contrastive(ClipTower& tower,
                                   const std::vector<std::pair<img::Image, text::TokenSeq>>& pairs,
                                   int steps, int batch_size, double learning_rate, uint64_t seed) {
    if (pairs.size() < 2) throw DomainError("contrastive training needs at least 2 pairs");
    if (steps < 0) throw DomainError("negative step count");
    int bs = std::min<int>(batch_size, static_cast<int>(pairs.size()));
    bs = std::max(bs, 2);

    ContrastiveTrace trace;
    trace.loss_per_step.reserve(static_cast<size_t>(steps));
    Rng rng = Rng(seed).fork(0xC11F);
    for (int step = 0; step < steps; ++step) {
        // sample a batch without replacement
        std::vector<int> idx(pairs.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        for (int i = 0; i < bs; ++i) {
            int j = i + rng.uniform_int(static_cast<int>(idx.size()) - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        std::vector<std::vector<double>> pooled;
        std::vector<text::TokenSeq> texts;
        for (int i = 0; i < bs; ++i) {
            const auto& [im, tk] = pairs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            pooled.push_back(img::patch_pool(im));
            texts.push_back(tk);
        }

        Tape tape;
        Binder bind(tape, tower.params);
        Tensor loss = build_contrastive_loss(tape, bind, tower.cfg, pooled, texts);
        trace.loss_per_step.push_back(loss.scalar());
        tape.backward_scalar(loss);
        GradMap grads;
        bind.accumulate_grads(grads);
        sgd_step(tower.params, grads, learning_rate, 0.0);
    }
    return trace;
}

}  // namespace occ::clip
