#ifndef KVWAIT_H
#define KVWAIT_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KvwaitStatus {
  KVWAIT_STATUS_OK = 0,
  KVWAIT_STATUS_NULL_POINTER = 1,
  KVWAIT_STATUS_INVALID_ARGUMENT = 2,
  KVWAIT_STATUS_UNSTABLE = 3,
  KVWAIT_STATUS_INFEASIBLE = 4,
  KVWAIT_STATUS_CONFIG = 5,
  KVWAIT_STATUS_IO = 6,
  KVWAIT_STATUS_UNSATISFIABLE = 7,
  KVWAIT_STATUS_INTERNAL = 8,
  KVWAIT_STATUS_PANIC = 9,
} KvwaitStatus;

/**
 * Opaque scenario handle.
 */
typedef struct KvwaitScenario KvwaitScenario;

typedef struct KvwaitEquilibrium {
  /**
   * Seconds per iteration.
   */
  double delta_t;
  /**
   * Tokens.
   */
  double memory;
  /**
   * Tokens per second.
   */
  double throughput;
  double margin;
} KvwaitEquilibrium;

/**
 * Summary of one run. Means are NaN when no prompt completed.
 */
typedef struct KvwaitMetrics {
  double throughput_tps;
  double mean_latency_s;
  double mean_ttft_s;
  double gap_tps;
  double horizon_s;
  uint64_t completions;
  uint64_t evictions;
  uint64_t iterations;
  uint64_t invariant_violations;
} KvwaitMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null after a successful call. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *kvwait_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *kvwait_version(void);

/**
 * Parses a TOML scenario. Relative paths inside resolve against `base_dir`,
 * which may be null for the current directory.
 *
 * # Safety
 * `toml` must be a NUL-terminated string, `base_dir` null or one, and `out`
 * a valid pointer.
 */
enum KvwaitStatus kvwait_scenario_from_toml(const char *toml,
                                            const char *base_dir,
                                            struct KvwaitScenario **out);

/**
 * Loads a TOML scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KvwaitStatus kvwait_scenario_from_path(const char *path, struct KvwaitScenario **out);

/**
 * Releases a scenario. Null is ignored.
 *
 * # Safety
 * `scenario` must come from `kvwait_scenario_from_*` and not be used again.
 */
void kvwait_scenario_free(struct KvwaitScenario *scenario);

/**
 * Number of prompt types in the scenario, 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t kvwait_scenario_num_types(const struct KvwaitScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum KvwaitStatus kvwait_scenario_equilibrium(const struct KvwaitScenario *scenario,
                                              struct KvwaitEquilibrium *out);

/**
 * Simulates one seed of the scenario.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum KvwaitStatus kvwait_scenario_run(const struct KvwaitScenario *scenario,
                                      uint64_t seed,
                                      struct KvwaitMetrics *out);

/**
 * Fluid equilibrium of `m` types given as parallel arrays.
 *
 * # Safety
 * Each array must hold `m` elements and `out` must be a valid pointer.
 */
enum KvwaitStatus kvwait_fluid_solve(const uint32_t *prefill_len,
                                     const uint32_t *decode_len,
                                     const double *rate,
                                     size_t m,
                                     double d0,
                                     double d1,
                                     struct KvwaitEquilibrium *out);

/**
 * Positive root theta of `-theta n_k + n_prev ln(1 - p + p e^theta) = 0`.
 *
 * # Safety
 * `theta` must be a valid pointer.
 */
enum KvwaitStatus kvwait_solve_theta(uint32_t n_prev, uint32_t n_k, double p, double *theta);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVWAIT_H */
