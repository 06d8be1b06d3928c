// occvlm command line: dataset generation, staged training, adaptation,
// evaluation and report conversion over the shared library's C interface.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "occvlm.h"

namespace {

int fail(occvlm_status st, const char* what) {
    std::fprintf(stderr, "error: %s failed (%s): %s\n", what, occvlm_status_name(st),
                 occvlm_last_error());
    return 1;
}

struct SessionHolder {
    occvlm_session* s = nullptr;
    ~SessionHolder() { occvlm_session_close(s); }
};

int open_session(const std::string& config, SessionHolder& holder) {
    occvlm_status st = occvlm_session_open(config.c_str(), &holder.s);
    if (st != OCCVLM_OK) return fail(st, "loading config");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occlusion-aware vision-language pipeline"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic hand-object dataset");
    uint64_t seed = 1234;
    int scenes = 500, test_scenes = 100, views = 2;
    std::string out_dir;
    gen->add_option("--seed", seed, "generator seed");
    gen->add_option("--scenes", scenes, "training scenes")->required();
    gen->add_option("--test-scenes", test_scenes, "test scenes (default 100)");
    gen->add_option("--views", views, "views per scene");
    gen->add_option("--out", out_dir, "output directory")->required();

    // train-vlm / train-sdf / adapt
    std::string config;
    auto* tv = app.add_subcommand("train-vlm", "stage 1: tower pretraining + supervised fine-tune");
    tv->add_option("--config", config, "run config JSON")->required();
    auto* ts = app.add_subcommand("train-sdf", "stage 2: train the 3D reconstruction module");
    ts->add_option("--config", config, "run config JSON")->required();
    auto* ad = app.add_subcommand("adapt", "stage 3: per-sample test-time adaptation");
    std::string checkpoint_dir;
    ad->add_option("--config", config, "run config JSON")->required();
    ad->add_option("--checkpoint-dir", checkpoint_dir, "checkpoint directory override");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate instructions 1-4 on the test split");
    std::string mode = "fused", report_out, rescue_baseline;
    ev->add_option("--config", config, "run config JSON")->required();
    ev->add_option("--mode", mode, "baseline | fused | recon-describe");
    ev->add_option("--report-out", report_out, "report JSON output path")->required();
    ev->add_option("--rescue-baseline", rescue_baseline, "baseline report for rescue analysis");

    // report
    auto* rp = app.add_subcommand("report", "convert a report between json and csv");
    std::string in_path, format = "csv", out_path;
    rp->add_option("--in", in_path, "input report (json or csv)")->required();
    rp->add_option("--format", format, "output format: csv | json");
    rp->add_option("--out", out_path, "output path")->required();

    // pipeline
    auto* pl = app.add_subcommand("pipeline", "run the configured stages in order");
    pl->add_option("--config", config, "run config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        occvlm_status st = occvlm_generate_dataset(seed, scenes, test_scenes, views, out_dir.c_str());
        if (st != OCCVLM_OK) return fail(st, "gen-data");
        std::printf("dataset written to %s\n", out_dir.c_str());
        return 0;
    }

    SessionHolder session;
    if (tv->parsed()) {
        if (int rc = open_session(config, session)) return rc;
        occvlm_status st = occvlm_train_vlm(session.s);
        if (st != OCCVLM_OK) return fail(st, "train-vlm");
        std::printf("stage 1 complete\n");
        return 0;
    }
    if (ts->parsed()) {
        if (int rc = open_session(config, session)) return rc;
        occvlm_status st = occvlm_train_sdf(session.s);
        if (st != OCCVLM_OK) return fail(st, "train-sdf");
        std::printf("stage 2 complete\n");
        return 0;
    }
    if (ad->parsed()) {
        if (int rc = open_session(config, session)) return rc;
        occvlm_status st = occvlm_adapt(session.s, checkpoint_dir.empty() ? nullptr : checkpoint_dir.c_str());
        if (st != OCCVLM_OK) return fail(st, "adapt");
        std::printf("adaptation complete\n");
        return 0;
    }
    if (ev->parsed()) {
        if (int rc = open_session(config, session)) return rc;
        occvlm_status st = occvlm_evaluate(session.s, mode.c_str(),
                                           rescue_baseline.empty() ? nullptr : rescue_baseline.c_str(),
                                           report_out.c_str());
        if (st != OCCVLM_OK) return fail(st, "eval");
        std::printf("report written to %s\n", report_out.c_str());
        return 0;
    }
    if (rp->parsed()) {
        occvlm_status st = occvlm_report_convert(in_path.c_str(), format.c_str(), out_path.c_str());
        if (st != OCCVLM_OK) return fail(st, "report");
        std::printf("report written to %s\n", out_path.c_str());
        return 0;
    }
    if (pl->parsed()) {
        if (int rc = open_session(config, session)) return rc;
        char* fp = nullptr;
        occvlm_session_fingerprint(session.s, &fp);
        if (fp) {
            std::printf("config fingerprint %s\n", fp);
            occvlm_string_free(fp);
        }
        occvlm_status st = occvlm_run_pipeline(session.s);
        if (st != OCCVLM_OK) return fail(st, "pipeline");
        std::printf("pipeline complete\n");
        return 0;
    }
    return 0;
}
