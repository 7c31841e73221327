#ifndef ENERGS_H
#define ENERGS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EnergsStatus {
  ENERGS_STATUS_OK = 0,
  ENERGS_STATUS_NULL_POINTER = 1,
  ENERGS_STATUS_INVALID_ARGUMENT = 2,
  ENERGS_STATUS_CONFIG = 3,
  ENERGS_STATUS_IO = 4,
  ENERGS_STATUS_FORMAT = 5,
  ENERGS_STATUS_EMPTY_INPUT = 6,
  ENERGS_STATUS_INTERNAL = 7,
} EnergsStatus;

/**
 * Voxel partition plus its precomputed distance and gradient grids.
 */
typedef struct EnergsField EnergsField;

/**
 * Particle positions with alive flags.
 */
typedef struct EnergsParticles EnergsParticles;

typedef struct EnergsParams {
  double w_occ;
  double sigma_occ;
  double w_unk;
  double sigma_unk;
  double lambda_free;
  double delta;
  double tau;
} EnergsParams;

typedef struct EnergsWell {
  double center[3];
  double amplitude;
  double sigma;
} EnergsWell;

typedef struct EnergsRelaxConfig {
  double eta_mu;
  double max_step_factor;
  /**
   * Prune period in iterations; 0 disables pruning.
   */
  size_t prune_every;
  double tau_margin;
  size_t iterations;
  /**
   * 0 = decoupled, 1 = joint.
   */
  uint32_t mode;
  double joint_lambda;
  /**
   * Photometric wells for joint mode; may be null when `n_wells` is 0.
   */
  const struct EnergsWell *wells;
  size_t n_wells;
} EnergsRelaxConfig;

/**
 * Interpolated field values at a position. Labels: 1 = OCC, 2 = FREE, 3 = UNK.
 */
typedef struct EnergsQuery {
  uint8_t label;
  bool clamped;
  double d_occ;
  double d_trust;
  double d_unk;
  double grad_occ[3];
  double grad_trust[3];
  double grad_unk[3];
} EnergsQuery;

typedef struct EnergsSample {
  uint8_t label;
  double e_occ;
  double e_unk;
  double e_free;
  double e_total;
  double force[3];
} EnergsSample;

typedef struct EnergsMetrics {
  double leak_pct;
  double occcov_pct;
  double margin_m;
  double thick_m;
  size_t num_alive;
  double force_mean;
  double force_p50;
  double force_p95;
  double force_max;
  bool empty;
} EnergsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *energs_last_error(void);

/**
 * Static description of a status code.
 */
const char *energs_status_str(enum EnergsStatus status);

struct EnergsParams energs_params_default(void);

struct EnergsRelaxConfig energs_relax_config_default(void);

/**
 * Build the field of the default street canyon with seed 0 and 0.25 m voxels.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum EnergsStatus energs_field_canonical(struct EnergsField **out);

/**
 * Load a field from a grid dump file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EnergsStatus energs_field_load(const char *path, struct EnergsField **out);

/**
 * Write a field as a grid dump file.
 *
 * # Safety
 * `field` must be a live handle; `path` a NUL-terminated string.
 */
enum EnergsStatus energs_field_save(const struct EnergsField *field, const char *path);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void energs_field_free(struct EnergsField *field);

/**
 * Grid dimensions, voxel size and origin.
 *
 * # Safety
 * `field` must be a live handle; `dims` and `origin` must point to 3
 * writable elements, `voxel_size` to one.
 */
enum EnergsStatus energs_field_geometry(const struct EnergsField *field,
                                        size_t *dims,
                                        double *voxel_size,
                                        double *origin);

/**
 * Voxel counts as OCC, FREE, UNK.
 *
 * # Safety
 * `field` must be a live handle; `counts` must point to 3 writable elements.
 */
enum EnergsStatus energs_field_label_counts(const struct EnergsField *field, size_t *counts);

/**
 * # Safety
 * `field` must be a live handle, `pos` must point to 3 readable elements and
 * `out` must be writable.
 */
enum EnergsStatus energs_field_query(const struct EnergsField *field,
                                     const double *pos,
                                     struct EnergsQuery *out);

/**
 * Energy terms and geometric force at a position.
 *
 * # Safety
 * `field` and `params` must be valid, `pos` must point to 3 readable
 * elements and `out` must be writable.
 */
enum EnergsStatus energs_total_force(const struct EnergsField *field,
                                     const struct EnergsParams *params,
                                     const double *pos,
                                     struct EnergsSample *out);

/**
 * Create a particle set from `n` packed `x y z` triples.
 *
 * # Safety
 * `positions` must point to `3 * n` readable elements (may be null when
 * `n` is 0); `out` must be writable.
 */
enum EnergsStatus energs_particles_new(const double *positions,
                                       size_t n,
                                       struct EnergsParticles **out);

/**
 * # Safety
 * `particles` must be null or a handle not yet freed.
 */
void energs_particles_free(struct EnergsParticles *particles);

/**
 * Total particle count, dead ones included; 0 for a null handle.
 *
 * # Safety
 * `particles` must be null or a live handle.
 */
size_t energs_particles_len(const struct EnergsParticles *particles);

/**
 * # Safety
 * `particles` must be null or a live handle.
 */
size_t energs_particles_alive_count(const struct EnergsParticles *particles);

/**
 * Copy positions (`3 * len` values) and alive flags (`len` values, 1 =
 * alive) out of the set. Either output may be null.
 *
 * # Safety
 * `particles` must be a live handle and each non-null output must have room
 * for the number of elements given above.
 */
enum EnergsStatus energs_particles_read(const struct EnergsParticles *particles,
                                        double *positions,
                                        uint8_t *alive);

/**
 * Relax the particle set in place. `final_energy` (may be null) receives
 * the total energy of the alive particles after the last iteration.
 *
 * # Safety
 * All handles and pointers must be valid; `cfg.wells` must point to
 * `cfg.n_wells` readable wells when `n_wells` is nonzero.
 */
enum EnergsStatus energs_relax(const struct EnergsField *field,
                               const struct EnergsParams *params,
                               const struct EnergsRelaxConfig *cfg,
                               struct EnergsParticles *particles,
                               double *final_energy);

/**
 * Geometric metrics of the alive particles.
 *
 * # Safety
 * All handles and pointers must be valid.
 */
enum EnergsStatus energs_metrics(const struct EnergsField *field,
                                 const struct EnergsParams *params,
                                 const struct EnergsParticles *particles,
                                 struct EnergsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENERGS_H */
