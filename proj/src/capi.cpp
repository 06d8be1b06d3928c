#include "occvlm.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "occ/error.hpp"
#include "occ/harness.hpp"

namespace {

thread_local std::string t_last_error;

struct StatusCatch {
    occvlm_status status = OCCVLM_OK;
};

template <typename Fn>
occvlm_status guarded(Fn&& fn) {
    try {
        fn();
        t_last_error.clear();
        return OCCVLM_OK;
    } catch (const occ::DimensionError& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_DIMENSION;
    } catch (const occ::DomainError& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_DOMAIN;
    } catch (const occ::ConfigError& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_CONFIG;
    } catch (const occ::IoError& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_IO;
    } catch (const occ::FormatError& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_FORMAT;
    } catch (const std::exception& e) {
        t_last_error = e.what();
        return OCCVLM_ERR_INTERNAL;
    } catch (...) {
        t_last_error = "unknown error";
        return OCCVLM_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

occvlm_status invalid(const char* what) {
    t_last_error = what;
    return OCCVLM_ERR_INVALID_ARGUMENT;
}

}  // namespace

struct occvlm_session {
    occ::harness::RunConfig cfg;
};

extern "C" {

const char* occvlm_version(void) { return "0.1.0"; }

const char* occvlm_status_name(occvlm_status status) {
    switch (status) {
        case OCCVLM_OK: return "ok";
        case OCCVLM_ERR_INVALID_ARGUMENT: return "invalid_argument";
        case OCCVLM_ERR_DOMAIN: return "domain_error";
        case OCCVLM_ERR_DIMENSION: return "dimension_error";
        case OCCVLM_ERR_CONFIG: return "config_error";
        case OCCVLM_ERR_IO: return "io_error";
        case OCCVLM_ERR_FORMAT: return "format_error";
        case OCCVLM_ERR_INTERNAL: return "internal_error";
    }
    return "unknown";
}

const char* occvlm_last_error(void) { return t_last_error.c_str(); }

occvlm_status occvlm_session_open(const char* config_json_path, occvlm_session** out_session) {
    if (!config_json_path || !out_session) return invalid("null argument");
    *out_session = nullptr;
    return guarded([&] {
        auto* s = new occvlm_session{occ::harness::RunConfig::from_json_file(config_json_path)};
        *out_session = s;
    });
}

occvlm_status occvlm_session_open_text(const char* config_json_text, occvlm_session** out_session) {
    if (!config_json_text || !out_session) return invalid("null argument");
    *out_session = nullptr;
    return guarded([&] {
        auto* s = new occvlm_session{occ::harness::RunConfig::from_json_text(config_json_text)};
        *out_session = s;
    });
}

void occvlm_session_close(occvlm_session* session) { delete session; }

occvlm_status occvlm_session_config(const occvlm_session* session, char** out_json) {
    if (!session || !out_json) return invalid("null argument");
    return guarded([&] { *out_json = dup_string(session->cfg.to_json()); });
}

occvlm_status occvlm_session_fingerprint(const occvlm_session* session, char** out_hex) {
    if (!session || !out_hex) return invalid("null argument");
    return guarded([&] { *out_hex = dup_string(session->cfg.fingerprint()); });
}

void occvlm_string_free(char* s) { delete[] s; }

occvlm_status occvlm_generate_dataset(uint64_t seed, int train_scenes, int test_scenes, int views,
                                      const char* out_dir) {
    if (!out_dir) return invalid("null out_dir");
    return guarded([&] { occ::harness::generate_data(seed, train_scenes, test_scenes, views, out_dir); });
}

occvlm_status occvlm_train_vlm(occvlm_session* session) {
    if (!session) return invalid("null session");
    return guarded([&] { occ::harness::stage1_finetune(session->cfg); });
}

occvlm_status occvlm_train_sdf(occvlm_session* session) {
    if (!session) return invalid("null session");
    return guarded([&] { occ::harness::stage2_train_sdf(session->cfg); });
}

occvlm_status occvlm_run_pipeline(occvlm_session* session) {
    if (!session) return invalid("null session");
    return guarded([&] { occ::harness::run_pipeline(session->cfg); });
}

occvlm_status occvlm_adapt(occvlm_session* session, const char* checkpoint_dir) {
    if (!session) return invalid("null session");
    return guarded([&] {
        occ::harness::adapt_test_set(session->cfg, checkpoint_dir ? checkpoint_dir : "");
    });
}

occvlm_status occvlm_evaluate(occvlm_session* session, const char* mode, const char* baseline_report,
                              const char* report_out_path) {
    if (!session || !mode || !report_out_path) return invalid("null argument");
    return guarded([&] {
        std::optional<std::string> base;
        if (baseline_report && baseline_report[0]) base = baseline_report;
        occ::harness::EvalReport rep = occ::harness::evaluate(session->cfg, mode, base);
        occ::harness::emit_report(rep, "json", report_out_path);
        std::fprintf(stderr, "eval %s: %d samples, wall clock %.1fs\n", mode, rep.total_samples,
                     rep.wall_clock_seconds);
    });
}

occvlm_status occvlm_report_convert(const char* in_path, const char* out_format, const char* out_path) {
    if (!in_path || !out_format || !out_path) return invalid("null argument");
    return guarded([&] {
        std::ifstream in(in_path, std::ios::binary);
        if (!in) throw occ::IoError(std::string("cannot open ") + in_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        std::string content = ss.str();
        occ::harness::EvalReport rep;
        // accept either serialization on input
        if (!content.empty() && (content[0] == '{' || content[0] == '['))
            rep = occ::harness::report_from_json(content);
        else
            rep = occ::harness::report_from_csv(content);
        occ::harness::emit_report(rep, out_format, out_path);
    });
}

occvlm_status occvlm_rescue_from_counts(int total, int baseline_correct, int rescued,
                                        double reference_increment, char** out_json) {
    if (!out_json) return invalid("null out_json");
    return guarded([&] {
        std::optional<double> ref;
        if (!std::isnan(reference_increment)) ref = reference_increment;
        occ::harness::RescueBlock b = occ::harness::rescue_from_counts(total, baseline_correct, rescued, ref);
        nlohmann::json j;
        j["total"] = b.total;
        j["baseline_correct"] = b.baseline_correct;
        j["baseline_failures"] = b.baseline_failures;
        j["rescued"] = b.rescued;
        j["increment"] = b.increment;
        j["increment_formatted"] = b.increment_formatted;
        if (b.reference_increment) j["reference_increment"] = *b.reference_increment;
        if (!b.note.empty()) j["note"] = b.note;
        *out_json = dup_string(j.dump());
    });
}

}  // extern "C"
