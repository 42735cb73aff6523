#ifndef BULKDIFF_H
#define BULKDIFF_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BdDeltaMethod {
  BD_DELTA_METHOD_DEFINITION = 0,
  BD_DELTA_METHOD_REPRESENTATION = 1,
} BdDeltaMethod;

/**
 * How the exterior of the box is integrated.
 */
typedef enum BdExterior {
  BD_EXTERIOR_SAMPLED = 0,
  BD_EXTERIOR_QUADRATURE = 1,
  BD_EXTERIOR_EMPTY = 2,
} BdExterior;

/**
 * Result code of every fallible call.
 */
typedef enum BdStatus {
  BD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BD_STATUS_NULL_ARGUMENT = 1,
  BD_STATUS_INVALID_INPUT = 2,
  BD_STATUS_INVARIANT_VIOLATION = 3,
  /**
   * Solver, truncation or extrapolation did not converge.
   */
  BD_STATUS_UNCONVERGED = 4,
  /**
   * The grid exceeds the unknown budget.
   */
  BD_STATUS_BUDGET = 5,
  BD_STATUS_IO = 6,
  /**
   * An internal panic was caught.
   */
  BD_STATUS_INTERNAL = 7,
} BdStatus;

/**
 * Opaque corrector cache; safe to share between threads.
 */
typedef struct BdCache BdCache;

/**
 * Opaque conductance field.
 */
typedef struct BdField BdField;

/**
 * Estimation settings; start from [`bd_settings_default`].
 */
typedef struct BdSettings {
  size_t n_outer;
  /**
   * Particle-count truncation; 0 picks it from `tail_tol`.
   */
  size_t n_max;
  double h;
  double tol;
  uint64_t seed;
  double tail_tol;
  /**
   * Nonzero enables Richardson extrapolation in `h`.
   */
  int32_t richardson;
  enum BdExterior exterior;
  /**
   * Quadrature nodes per collar side (quadrature exteriors only).
   */
  size_t nodes_per_side;
  /**
   * Largest exterior point count (quadrature exteriors only).
   */
  size_t max_count;
  size_t unknown_budget;
  size_t collar_nodes;
} BdSettings;

typedef struct BdCacheStats {
  uint64_t hits;
  uint64_t misses;
  uint64_t bytes;
  uint64_t entries;
} BdCacheStats;

/**
 * A scalar estimate with provenance.
 */
typedef struct BdEstimate {
  double value;
  double stderr;
  size_t n_outer;
  size_t n_max;
  double tail;
  double h;
  uint64_t seed;
} BdEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bd_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, 0 if none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t bd_last_error_message(char *buf, size_t len);

/**
 * Fills `out` with the library defaults.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum BdStatus bd_settings_default(struct BdSettings *out);

/**
 * `a = c Id` with ellipticity bound `lambda`.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum BdStatus bd_field_constant(double c, double lambda, struct BdField **out);

/**
 * Conductance `lambda` when another particle is within `r`, else 1.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum BdStatus bd_field_crowding(double lambda, double r, struct BdField **out);

/**
 * Smooth pair-interaction field with bound `lambda`.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum BdStatus bd_field_smooth_pair(double lambda, struct BdField **out);

/**
 * # Safety
 * `field` must be null or a handle from a `bd_field_*` constructor, freed once.
 */
void bd_field_free(struct BdField *field);

/**
 * In-memory cache with an LRU byte budget.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum BdStatus bd_cache_new(size_t budget_bytes, struct BdCache **out);

/**
 * Cache persisted under directory `dir` (UTF-8 path).
 *
 * # Safety
 * `dir` must be null or a NUL-terminated string; `out` null or writable.
 */
enum BdStatus bd_cache_open(const char *dir, size_t budget_bytes, struct BdCache **out);

/**
 * # Safety
 * `cache` must be null or a handle from `bd_cache_new`/`bd_cache_open`, freed once.
 */
void bd_cache_free(struct BdCache *cache);

/**
 * # Safety
 * `cache` must be a live handle; `out` null or writable.
 */
enum BdStatus bd_cache_stats(const struct BdCache *cache, struct BdCacheStats *out);

/**
 * Dual quantity `ν*(q)` on the cube of level `m`; `q` has `d` entries.
 *
 * # Safety
 * Handles must be live; `q` must point to `d` doubles; `out` writable.
 */
enum BdStatus bd_nu_star(const struct BdField *field,
                         const struct BdCache *cache,
                         uint32_t m,
                         const double *q,
                         size_t d,
                         double rho0,
                         const struct BdSettings *settings_ptr,
                         struct BdEstimate *out);

/**
 * Primal quantity `ν(p)`.
 *
 * # Safety
 * As for [`bd_nu_star`].
 */
enum BdStatus bd_nu(const struct BdField *field,
                    const struct BdCache *cache,
                    uint32_t m,
                    const double *p,
                    size_t d,
                    double rho0,
                    const struct BdSettings *settings_ptr,
                    struct BdEstimate *out);

/**
 * `ā` and `ā*` as row-major `d × d` matrices, with standard errors.
 *
 * # Safety
 * Handles must be live; each output must hold `d * d` doubles.
 */
enum BdStatus bd_abar(const struct BdField *field,
                      const struct BdCache *cache,
                      size_t d,
                      uint32_t m,
                      double rho0,
                      const struct BdSettings *settings_ptr,
                      double *abar,
                      double *abar_star,
                      double *abar_err,
                      double *abar_star_err);

/**
 * `Δ^ρ_m = q·((ā*_{ρ₀+ρ})⁻¹ - (ā*_{ρ₀})⁻¹)q` (d = 1).
 *
 * # Safety
 * As for [`bd_nu_star`].
 */
enum BdStatus bd_delta_rho(const struct BdField *field,
                           const struct BdCache *cache,
                           uint32_t m,
                           const double *q,
                           size_t d,
                           double rho0,
                           double rho,
                           enum BdDeltaMethod method,
                           const struct BdSettings *settings_ptr,
                           struct BdEstimate *out);

/**
 * Expansion coefficient `c_{k,m}` for `1 ≤ k ≤ 3` (d = 1).
 *
 * # Safety
 * As for [`bd_nu_star`].
 */
enum BdStatus bd_c_km(const struct BdField *field,
                      const struct BdCache *cache,
                      uint32_t m,
                      const double *q,
                      size_t d,
                      double rho0,
                      size_t k,
                      const struct BdSettings *settings_ptr,
                      struct BdEstimate *out);

/**
 * Runs a TOML run config and returns the CSV report in `*csv_out`, to be
 * released with [`bd_string_free`].
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `cache` live; `csv_out` writable.
 */
enum BdStatus bd_run_config(const char *config_toml, const struct BdCache *cache, char **csv_out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void bd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BULKDIFF_H */
