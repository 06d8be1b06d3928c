/* occvlm — occlusion-aware vision-language pipeline, C interface.
 *
 * All functions return occvlm_status; OCCVLM_OK is 0. On failure a thread-local
 * message is available via occvlm_last_error(). Handles are opaque and must be
 * released with their matching close/free function.
 */
#ifndef OCCVLM_H
#define OCCVLM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum occvlm_status {
    OCCVLM_OK = 0,
    OCCVLM_ERR_INVALID_ARGUMENT = 1,
    OCCVLM_ERR_DOMAIN = 2,
    OCCVLM_ERR_DIMENSION = 3,
    OCCVLM_ERR_CONFIG = 4,
    OCCVLM_ERR_IO = 5,
    OCCVLM_ERR_FORMAT = 6,
    OCCVLM_ERR_INTERNAL = 7
} occvlm_status;

const char* occvlm_version(void);
const char* occvlm_status_name(occvlm_status status);
/* Message from the most recent failing call on this thread; empty string if none. */
const char* occvlm_last_error(void);

/* A session wraps one run configuration (JSON file or literal JSON text). */
typedef struct occvlm_session occvlm_session;

occvlm_status occvlm_session_open(const char* config_json_path, occvlm_session** out_session);
occvlm_status occvlm_session_open_text(const char* config_json_text, occvlm_session** out_session);
void occvlm_session_close(occvlm_session* session);

/* Resolved configuration as canonical JSON; free with occvlm_string_free. */
occvlm_status occvlm_session_config(const occvlm_session* session, char** out_json);
occvlm_status occvlm_session_fingerprint(const occvlm_session* session, char** out_hex);
void occvlm_string_free(char* s);

/* Synthetic dataset generation (train + test splits under out_dir). */
occvlm_status occvlm_generate_dataset(uint64_t seed, int train_scenes, int test_scenes, int views,
                                      const char* out_dir);

/* Training stages. Checkpoints are written into the session's checkpoint_dir. */
occvlm_status occvlm_train_vlm(occvlm_session* session);
occvlm_status occvlm_train_sdf(occvlm_session* session);

/* Runs the config's selected stages in order with dependency checks; stage 3
 * finishes with an evaluation report next to the checkpoints. */
occvlm_status occvlm_run_pipeline(occvlm_session* session);

/* Test-time adaptation over the test split; trace and summary are written next
 * to the checkpoints. checkpoint_dir may be NULL to use the session's own. */
occvlm_status occvlm_adapt(occvlm_session* session, const char* checkpoint_dir);

/* Instruction 1-4 evaluation. mode: "baseline" | "fused" | "recon-describe".
 * baseline_report may name a previous report to attach a rescue analysis. */
occvlm_status occvlm_evaluate(occvlm_session* session, const char* mode, const char* baseline_report,
                              const char* report_out_path);

/* Report conversion between "json" and "csv". */
occvlm_status occvlm_report_convert(const char* in_path, const char* out_format, const char* out_path);

/* Rescue arithmetic on raw counts; the JSON block is returned via out_json.
 * reference_increment may be NaN to omit the reference comparison. */
occvlm_status occvlm_rescue_from_counts(int total, int baseline_correct, int rescued,
                                        double reference_increment, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* OCCVLM_H */
