#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "occ/clip_tower.hpp"
#include "occ/decoder_lm.hpp"
#include "occ/fusion.hpp"
#include "occ/recon3d.hpp"
#include "occ/synthdata.hpp"
#include "occ/tta.hpp"

namespace occ::harness {

struct DecodeConfig {
    std::string strategy = "beam";  // greedy | beam | sample
    int beam_width = 4;
    int max_new = 16;
    double temperature = 1.0;
    uint64_t seed = 0;
    bool length_normalize = false;
};

struct ClipTrainConfig {
    int steps = 300;
    int batch_size = 16;
    double learning_rate = 0.05;
};

struct Stage1Config {
    std::optional<double> learning_rate;  // top-level learning_rate when absent
    int epochs = 1;
};

struct Stage2Config {
    std::optional<double> learning_rate;
    int steps = 2000;
    int points_per_scene = 256;
    int scenes_per_batch = 4;
    double near_surface_fraction = 0.5;
    double mask_loss_weight = 0.5;
    // gradients reach the extractors summed over every sample point, so their
    // group runs at learning_rate * extractor_lr_scale
    double extractor_lr_scale = 1.0 / 64.0;
    // linear decay to final_lr_fraction * learning_rate across the step budget;
    // 1.0 keeps the rate constant
    double final_lr_fraction = 1.0;
};

struct EvalConfig {
    std::string mode = "fused";  // baseline | fused | recon-describe
    bool grade_substring = false;
    std::optional<double> rescue_reference_increment;
};

struct RunConfig {
    uint64_t seed = 1234;
    std::string dataset_root;
    std::string checkpoint_dir;
    std::vector<int> stages{1, 2, 3};
    int batch_size = 16;          // fine-tuning defaults
    double learning_rate = 2e-5;
    double weight_decay = 0.0;
    int threads = 0;              // 0: hardware, still capped by OCC_VLM_THREADS

    ClipTrainConfig clip_train;
    clip::ClipConfig clip;
    fusion::FusionConfig fusion;
    lm::LmConfig lm;  // vocab filled after the vocabulary is built
    recon::ReconConfig recon;
    Stage1Config stage1;
    Stage2Config stage2;
    DecodeConfig decode;
    tta::TtaConfig tta;
    EvalConfig eval;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
    std::string to_json() const;      // canonical (sorted keys)
    std::string fingerprint() const;  // FNV-1a hex of the canonical form
};

struct TrainTrace {
    std::vector<double> loss;
};

struct InstructionStats {
    int instruction = 0;  // 1..4
    int total = 0;
    int correct = 0;
    double accuracy = 0.0;
};

struct PerSample {
    std::string scene_id;
    int instruction = 0;
    std::string expected;
    std::string answer;
    bool correct = false;
};

struct RescueBlock {
    int total = 0;
    int baseline_correct = 0;
    int baseline_failures = 0;
    int rescued = 0;
    double increment = 0.0;
    std::string increment_formatted;  // sign prefix, 4 decimals
    std::optional<double> reference_increment;
    std::string note;  // set when the computed increment differs from the reference
};

struct EvalReport {
    std::string mode;
    std::string config_fingerprint;
    int total_samples = 0;
    std::vector<InstructionStats> per_instruction;
    std::vector<PerSample> per_sample;
    std::optional<RescueBlock> rescue;
    double wall_clock_seconds = 0.0;  // in-memory only; not part of the serialized report
};

bool grade_answer(int instruction, const std::string& expected, const std::string& answer,
                  bool substring);
EvalReport assemble_report(const std::string& mode, const std::string& fingerprint,
                           std::vector<PerSample> samples);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
std::string report_to_csv(const EvalReport& r);
EvalReport report_from_csv(const std::string& text);  // per-instruction + rescue values
void emit_report(const EvalReport& r, const std::string& format, const std::string& path);

std::string format_signed_4dp(double v);

RescueBlock rescue_from_counts(int total, int baseline_correct, int rescued,
                               std::optional<double> reference_increment = std::nullopt);
// Instruction-1 outcomes of two runs over the same sample ids.
RescueBlock rescue_analysis(const std::vector<PerSample>& baseline,
                            const std::vector<PerSample>& recon_pipeline,
                            std::optional<double> reference_increment = std::nullopt);

// Stage 1: contrastive pretraining of the toy towers, then one-epoch supervised
// fine-tuning of the LM + fusion map on the five instruction tasks.
TrainTrace stage1_finetune(const RunConfig& cfg);
// Stage 2: SDF regression against the analytic ground truth plus the mask head.
TrainTrace stage2_train_sdf(const RunConfig& cfg);
// Instruction 1-4 accuracy over the test split in the given mode.
EvalReport evaluate(const RunConfig& cfg, const std::string& mode,
                    const std::optional<std::string>& baseline_report_path = std::nullopt);
// Stage 3 over the test split (instruction 5): per-sample adaptation, trace and
// summary written next to the checkpoints.
struct AdaptSummary {
    int samples = 0;
    double mean_clip_s_before = 0.0;
    double mean_clip_s_after = 0.0;
    int improved = 0;
};
AdaptSummary adapt_test_set(const RunConfig& cfg, const std::string& checkpoint_dir);
// Selected stages in order, with dependency checks.
void run_pipeline(const RunConfig& cfg);

void generate_data(uint64_t seed, int train_scenes, int test_scenes, int views, const std::string& out);

// Loaded checkpoint bundle.
struct Checkpoints {
    text::Vocab vocab;
    clip::ClipTower tower;
    lm::LmModel lm;
    fusion::FusionMap fmap;
    std::optional<recon::ReconModel> recon_model;
};
Checkpoints load_checkpoints(const RunConfig& cfg, bool need_recon);

// Cross-entropy over the target span of one training sample; n_targets == 0
// contributes nothing (constant zero).
num::Tensor build_caption_loss(num::Tape& tape, Binder& lm_bind, const lm::LmConfig& cfg,
                               num::Tensor visual, const text::TokenSeq& ids, int first_target,
                               int n_targets);

}  // namespace occ::harness
