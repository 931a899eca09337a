#ifndef FEDLP_H
#define FEDLP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedlpStatus {
  FEDLP_STATUS_OK = 0,
  FEDLP_STATUS_NULL_POINTER = 1,
  FEDLP_STATUS_INVALID_UTF8 = 2,
  FEDLP_STATUS_CONFIG = 3,
  FEDLP_STATUS_IO = 4,
  FEDLP_STATUS_RUNTIME = 5,
  /**
   * The simulation has already run all its rounds.
   */
  FEDLP_STATUS_FINISHED = 6,
  FEDLP_STATUS_PANIC = 7,
} FedlpStatus;

/**
 * Opaque simulation handle.
 */
typedef struct FedlpSimulation FedlpSimulation;

/**
 * Metrics of one completed round. `evaluated` is 0 when the global model
 * was not tested that round, in which case `test_accuracy` is NaN.
 */
typedef struct FedlpRoundMetrics {
  uint32_t round;
  uint64_t participants;
  uint8_t evaluated;
  double test_accuracy;
  uint64_t upload_params;
  uint64_t download_params;
  double mean_flops;
} FedlpRoundMetrics;

typedef struct FedlpProp1Report {
  uint64_t k;
  double p;
  uint64_t trials;
  double empirical_ratio;
  double closed_form;
  double abs_error;
  double std_error;
  uint8_t within_three_sigma;
} FedlpProp1Report;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a simulation from config-file text. On success `*out` receives
 * a handle owned by the caller.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FedlpStatus fedlp_simulation_new(const char *config_text, struct FedlpSimulation **out);

/**
 * Creates a simulation from a config file path.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FedlpStatus fedlp_simulation_from_file(const char *path, struct FedlpSimulation **out);

/**
 * Runs one global round. `out` may be null.
 *
 * # Safety
 * `sim` must be a live handle; `out`, if non-null, must be valid for writes.
 */
enum FedlpStatus fedlp_simulation_step(struct FedlpSimulation *sim, struct FedlpRoundMetrics *out);

/**
 * Runs all remaining rounds.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum FedlpStatus fedlp_simulation_run(struct FedlpSimulation *sim);

/**
 * Rounds completed so far; 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
uint32_t fedlp_simulation_round(const struct FedlpSimulation *sim);

/**
 * Writes the metrics CSV for the rounds run so far.
 *
 * # Safety
 * `sim` must be a live handle and `path` a NUL-terminated string.
 */
enum FedlpStatus fedlp_simulation_write_csv(const struct FedlpSimulation *sim, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sim` must be null or a handle not yet freed.
 */
void fedlp_simulation_free(struct FedlpSimulation *sim);

/**
 * Monte-Carlo estimate of the expected aggregate scaling for `k`
 * participants keeping a layer with probability `p`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FedlpStatus fedlp_verify_prop1(uint64_t k,
                                    double p,
                                    uint64_t trials,
                                    uint64_t seed,
                                    struct FedlpProp1Report *out);

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *fedlp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedlp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLP_H */
