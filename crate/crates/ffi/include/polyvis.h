#ifndef POLYVIS_H
#define POLYVIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PolyvisGroup {
  POLYVIS_GROUP_EXPERT = 0,
  POLYVIS_GROUP_FUSION = 1,
  POLYVIS_GROUP_PE = 2,
  POLYVIS_GROUP_LM = 3,
} PolyvisGroup;

typedef enum PolyvisPeScheme {
  POLYVIS_PE_SCHEME_ORIGINAL = 0,
  POLYVIS_PE_SCHEME_SHARE_ALL = 1,
  POLYVIS_PE_SCHEME_SHARE_BY_ROW = 2,
  POLYVIS_PE_SCHEME_SHARE_BY_ROW_COL = 3,
} PolyvisPeScheme;

/**
 * Result code of every fallible call.
 */
typedef enum PolyvisStatus {
  POLYVIS_STATUS_OK = 0,
  POLYVIS_STATUS_NULL_POINTER = 1,
  POLYVIS_STATUS_INVALID_UTF8 = 2,
  POLYVIS_STATUS_INVALID_CONFIG = 3,
  POLYVIS_STATUS_INVALID_ARGUMENT = 4,
  POLYVIS_STATUS_IO = 5,
  POLYVIS_STATUS_CHECKPOINT = 6,
  POLYVIS_STATUS_COMPUTE = 7,
  POLYVIS_STATUS_PANIC = 8,
} PolyvisStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct PolyvisConfig PolyvisConfig;

/**
 * Opaque result of a finished experiment.
 */
typedef struct PolyvisRun PolyvisRun;

/**
 * Token and position accounting for one image and its prompt.
 */
typedef struct PolyvisBudget {
  size_t distinct_pe;
  size_t vision_tokens;
  size_t text_tokens;
  size_t total_length;
  size_t max_len;
  bool overflow;
  double ratio;
} PolyvisBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *polyvis_last_error(void);

/**
 * # Safety
 * `s` must come from this library or be NULL.
 */
void polyvis_string_free(char *s);

/**
 * Default configuration with the given seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PolyvisStatus polyvis_config_default(uint64_t seed, struct PolyvisConfig **out);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_config_from_toml(const char *toml, struct PolyvisConfig **out);

/**
 * Canonical TOML of `config`; release with `polyvis_string_free`.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_config_to_toml(const struct PolyvisConfig *config, char **out);

/**
 * # Safety
 * `config` must come from this library or be NULL.
 */
void polyvis_config_free(struct PolyvisConfig *config);

/**
 * Token budget of one image under `config`.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_budget(const struct PolyvisConfig *config, struct PolyvisBudget *out);

/**
 * Distinct position vectors needed for segments with the given grids.
 *
 * # Safety
 * `rows` and `cols` must each point to `n` values; `out` must be valid.
 */
enum PolyvisStatus polyvis_position_budget(enum PolyvisPeScheme scheme,
                                           const size_t *rows,
                                           const size_t *cols,
                                           size_t n,
                                           size_t *out);

/**
 * Trains, evaluates and analyses one experiment, writing its files under
 * `out_dir`.
 *
 * # Safety
 * `config` must be a live handle, `out_dir` a NUL-terminated path and `out`
 * a valid pointer.
 */
enum PolyvisStatus polyvis_run_experiment(const struct PolyvisConfig *config,
                                          const char *out_dir,
                                          struct PolyvisRun **out);

/**
 * Overall eval accuracy of a finished run.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_run_accuracy(const struct PolyvisRun *run, double *out);

/**
 * Mean of the last losses of the given phase (1 or 2).
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_run_final_loss(const struct PolyvisRun *run,
                                          uint32_t phase,
                                          double *out);

/**
 * # Safety
 * `run` must come from this library or be NULL.
 */
void polyvis_run_free(struct PolyvisRun *run);

/**
 * Hex SHA-256 of one parameter group stored in a checkpoint file; release
 * with `polyvis_string_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated path and `out` a valid pointer.
 */
enum PolyvisStatus polyvis_checkpoint_digest(const char *path, enum PolyvisGroup group, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYVIS_H */
