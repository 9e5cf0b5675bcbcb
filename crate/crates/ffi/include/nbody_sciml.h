#ifndef NBODY_SCIML_H
#define NBODY_SCIML_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  NB_STATUS_OK = 0,
  NB_STATUS_NULL_POINTER = 1,
  NB_STATUS_INVALID_ARGUMENT = 2,
  NB_STATUS_INTEGRATION = 3,
  NB_STATUS_DIVERGED = 4,
  NB_STATUS_MISMATCH = 5,
  NB_STATUS_IO = 6,
  NB_STATUS_PANIC = 7,
} NbStatus;

typedef enum {
  NB_MODEL_KIND_NEURAL_ODE = 0,
  NB_MODEL_KIND_UDE = 1,
} NbModelKind;

typedef enum {
  NB_ACTIVATION_TANH = 0,
  NB_ACTIVATION_RELU = 1,
  NB_ACTIVATION_SWISH = 2,
} NbActivation;

typedef enum {
  NB_OPTIMIZER_ADAM = 0,
  NB_OPTIMIZER_ADAM_W = 1,
} NbOptimizer;

/**
 * A model together with its current parameters.
 */
typedef struct NbModel NbModel;

/**
 * A sampled trajectory.
 */
typedef struct NbTrajectory NbTrajectory;

/**
 * Training schedule. Fill with `nb_train_options_default`.
 */
typedef struct {
  NbOptimizer optimizer;
  double lr;
  size_t epochs;
  double weight_decay;
  /**
   * L-BFGS iterations after the first-order stage; 0 skips it.
   */
  size_t bfgs_iters;
  /**
   * RK4 steps per grid interval.
   */
  size_t substeps;
  /**
   * Nonzero grows the fitted window from a short prefix.
   */
  uint8_t grow_horizon;
} NbTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *nb_last_error_message(void);

/**
 * The equal-mass figure-eight sampled at `n_points` times spaced
 * `(t1 - t0) / n_points` from `t0`, in three dimensions.
 */
NbStatus nb_generate_figure_eight(double t0, double t1, size_t n_points, NbTrajectory **out);

/**
 * Adaptive high-accuracy integration of an arbitrary system.
 *
 * # Safety
 * `masses` holds `n_bodies` values and `state0` holds `2 * dim * n_bodies`.
 */
NbStatus nb_generate_ground_truth(const double *masses,
                                  size_t n_bodies,
                                  double g,
                                  size_t dim,
                                  const double *state0,
                                  double t0,
                                  double t1,
                                  size_t n_points,
                                  NbTrajectory **out);

/**
 * Gaussian noise with standard deviation `fraction` times each
 * component's range.
 *
 * # Safety
 * `traj` is a live handle and `out` is writable.
 */
NbStatus nb_add_noise(const NbTrajectory *traj, double fraction, uint64_t seed, NbTrajectory **out);

/**
 * Leading `train_fraction` of the samples and the remainder. `test_out`
 * receives null when nothing remains.
 *
 * # Safety
 * `traj` is a live handle; both outputs are writable.
 */
NbStatus nb_split_prefix(const NbTrajectory *traj,
                         double train_fraction,
                         NbTrajectory **train_out,
                         NbTrajectory **test_out);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `traj` is null or a live handle.
 */
size_t nb_trajectory_len(const NbTrajectory *traj);

/**
 * Components per sample, or 0 for a null handle.
 *
 * # Safety
 * `traj` is null or a live handle.
 */
size_t nb_trajectory_state_len(const NbTrajectory *traj);

/**
 * Copies the sample times into `out`, which holds `capacity` values.
 *
 * # Safety
 * `out` is writable for `capacity` doubles.
 */
NbStatus nb_trajectory_times(const NbTrajectory *traj, double *out, size_t capacity);

/**
 * Copies all states, sample-major, into `out`.
 *
 * # Safety
 * `out` is writable for `capacity` doubles.
 */
NbStatus nb_trajectory_states(const NbTrajectory *traj, double *out, size_t capacity);

/**
 * Writes the trajectory as CSV with `dim` spatial dimensions per body.
 *
 * # Safety
 * `path` is a nul-terminated UTF-8 string.
 */
NbStatus nb_trajectory_write_csv(const NbTrajectory *traj, size_t dim, const char *path);

/**
 * # Safety
 * `traj` is null or a handle not yet freed.
 */
void nb_trajectory_free(NbTrajectory *traj);

/**
 * Newtonian right-hand side of `state` into `out` (both `2 * dim * n_bodies`).
 *
 * # Safety
 * Pointers are valid for the stated lengths.
 */
NbStatus nb_gravitational_rhs(const double *state,
                              const double *masses,
                              size_t n_bodies,
                              double g,
                              size_t dim,
                              double *out);

/**
 * Builds a model with hidden widths `hidden[0..n_hidden]`; input and
 * output sizes follow from the kind and the system.
 *
 * # Safety
 * `hidden` holds `n_hidden` values and `masses` holds `n_bodies`.
 */
NbStatus nb_model_new(NbModelKind kind,
                      const size_t *hidden,
                      size_t n_hidden,
                      NbActivation activation,
                      uint64_t seed,
                      const double *masses,
                      size_t n_bodies,
                      double g,
                      size_t dim,
                      NbModel **out);

/**
 * # Safety
 * `model` is null or a live handle.
 */
size_t nb_model_param_count(const NbModel *model);

/**
 * # Safety
 * `out` is writable for `capacity` doubles.
 */
NbStatus nb_model_params(const NbModel *model, double *out, size_t capacity);

/**
 * Table defaults for `kind`.
 *
 * # Safety
 * `out` is writable.
 */
NbStatus nb_train_options_default(NbModelKind kind, NbTrainOptions *out);

/**
 * Trains from the model's current parameters on `data`, integrating from
 * `state0`. `options` may be null for the defaults of the model kind. On
 * `Diverged` the model keeps the best parameters seen.
 *
 * # Safety
 * `state0` holds the system's state length; `final_loss` is null or writable.
 */
NbStatus nb_model_train(NbModel *model,
                        const NbTrajectory *data,
                        const double *state0,
                        const NbTrainOptions *options,
                        double *final_loss);

/**
 * Integrates the model from `state0` over the sample times of `grid`.
 *
 * # Safety
 * `state0` holds the system's state length.
 */
NbStatus nb_model_predict(const NbModel *model,
                          const double *state0,
                          const NbTrajectory *grid,
                          size_t substeps,
                          NbTrajectory **out);

/**
 * # Safety
 * `path` is a nul-terminated UTF-8 string.
 */
NbStatus nb_model_save(const NbModel *model, const char *path);

/**
 * # Safety
 * `path` is a nul-terminated UTF-8 string; `out` is writable.
 */
NbStatus nb_model_load(const char *path, NbModel **out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void nb_model_free(NbModel *model);

/**
 * Aggregate nRMSE of `pred` against `truth`, normalized by the component
 * ranges of `reference` (normally the clean full-length trajectory).
 *
 * # Safety
 * Handles are live; `aggregate` is writable.
 */
NbStatus nb_nrmse(const NbTrajectory *pred,
                  const NbTrajectory *truth,
                  const NbTrajectory *reference,
                  double *aggregate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NBODY_SCIML_H */
