#ifndef ICBF_SWARM_H
#define ICBF_SWARM_H

/* Generated by cbindgen; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Dynamics model selector.
 */
typedef enum IcbfModelKind {
  ICBF_MODEL_KIND_DOUBLE_INTEGRATOR2D = 0,
  ICBF_MODEL_KIND_DOUBLE_INTEGRATOR3D = 1,
  ICBF_MODEL_KIND_PLANAR_UNICYCLE = 2,
} IcbfModelKind;

/**
 * Result codes.
 */
typedef enum IcbfStatus {
  ICBF_STATUS_OK = 0,
  ICBF_STATUS_NULL_POINTER = 1,
  ICBF_STATUS_INVALID_ARGUMENT = 2,
  ICBF_STATUS_PARSE = 3,
  ICBF_STATUS_DIMENSION = 4,
  ICBF_STATUS_IO = 5,
  ICBF_STATUS_NUMERICAL = 6,
  ICBF_STATUS_CHECKPOINT = 7,
  ICBF_STATUS_PANIC = 8,
  ICBF_STATUS_OTHER = 9,
} IcbfStatus;

/**
 * Single-agent safety filter.
 */
typedef struct IcbfFilter IcbfFilter;

/**
 * Trained or random policy network.
 */
typedef struct IcbfPolicy IcbfPolicy;

/**
 * Episode summary returned by [`icbf_run_episode`].
 */
typedef struct IcbfMetrics {
  size_t steps;
  double collision_avoidance_pct;
  size_t deadlock_count;
  size_t input_violation_count;
  double goal_reach_pct;
  size_t mpc_trigger_count;
  size_t safety_fault_count;
  double min_separation;
} IcbfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, without the NUL.
 */
size_t icbf_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len - 1` bytes). Returns the number of bytes written without the NUL.
 */
size_t icbf_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *icbf_version(void);

/**
 * `−log Σ e^{−β vₖ}` over `len` values.
 */
enum IcbfStatus icbf_combined_barrier(const double *values, size_t len, double beta, double *out);

/**
 * Creates a filter with default settings for the given model.
 * `kind` is an [`IcbfModelKind`] value; `u_max` holds one bound per
 * control axis.
 */
enum IcbfStatus icbf_filter_new(uint32_t kind,
                                double dt,
                                const double *u_max,
                                size_t m,
                                double r,
                                struct IcbfFilter **out);

/**
 * Creates a filter from a scenario TOML document (model, `r` and
 * `[episode.filter]` are used).
 */
enum IcbfStatus icbf_filter_from_toml(const char *toml, struct IcbfFilter **out);

void icbf_filter_free(struct IcbfFilter *filter);

/**
 * Sets the log-sum-exp sharpness and class-K gain.
 */
enum IcbfStatus icbf_filter_set_gains(struct IcbfFilter *filter, double beta, double lambda);

/**
 * State and control dimensions of the filter's model.
 */
enum IcbfStatus icbf_filter_dims(const struct IcbfFilter *filter, size_t *n, size_t *m);

/**
 * Filters `target` for one agent.
 *
 * `x` has `n` entries; `neighbors` holds `k` neighbor states row-major
 * (`k·n`); `wall_points` and `wall_normals` hold `w` obstacle half-planes
 * (`w·d` each, normals pointing away from the obstacle). `u_prev`,
 * `target` and `out_u` have `m` entries. `fault` is set to 1 when the
 * ICBF condition could not be met and the fallback control was used.
 */
enum IcbfStatus icbf_filter_apply(const struct IcbfFilter *filter,
                                  const double *x,
                                  const double *neighbors,
                                  size_t k,
                                  const double *wall_points,
                                  const double *wall_normals,
                                  size_t w,
                                  const double *u_prev,
                                  const double *target,
                                  double *out_u,
                                  uint8_t *fault);

/**
 * Loads the policy from a checkpoint file.
 */
enum IcbfStatus icbf_policy_load(const char *path, struct IcbfPolicy **out);

/**
 * Untrained policy for the filter's model, initialized from `seed`.
 */
enum IcbfStatus icbf_policy_random(const struct IcbfFilter *filter,
                                   uint64_t seed,
                                   struct IcbfPolicy **out);

void icbf_policy_free(struct IcbfPolicy *policy);

/**
 * Policy control for one agent, in the layout of [`icbf_filter_apply`].
 * `goal` has `d` entries. The filter supplies the model.
 */
enum IcbfStatus icbf_policy_act(const struct IcbfPolicy *policy,
                                const struct IcbfFilter *filter,
                                const double *x,
                                const double *neighbors,
                                size_t k,
                                const double *goal,
                                double *out_u);

/**
 * Runs one episode described by a scenario TOML document.
 * `policy` may be null, in which case `[policy]` seeds a random policy.
 */
enum IcbfStatus icbf_run_episode(const char *toml,
                                 const struct IcbfPolicy *policy,
                                 struct IcbfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICBF_SWARM_H */
