#ifndef SHADOWPREC_H
#define SHADOWPREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_ARGUMENT = 2,
  SP_STATUS_CONFIG_ERROR = 3,
  SP_STATUS_AUDIT_FAILURE = 4,
  SP_STATUS_NOT_FOUND = 5,
  SP_STATUS_CAPACITY_EXHAUSTED = 6,
  SP_STATUS_BUFFER_TOO_SMALL = 7,
  SP_STATUS_RUNTIME_ERROR = 8,
  SP_STATUS_PANIC = 9,
} SpStatus;

typedef enum SpTier {
  SP_TIER_HOT = 0,
  SP_TIER_HOST = 1,
  SP_TIER_COLD = 2,
} SpTier;

/*
 Opaque run configuration.
 */
typedef struct SpConfig SpConfig;

/*
 Opaque result of a finished training run.
 */
typedef struct SpRun SpRun;

/*
 Opaque three-tier tensor store.
 */
typedef struct SpStore SpStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message into `buf`. `written`
 receives the size needed including the terminator. An empty message
 means the last call succeeded.

 # Safety
 `buf` must be null or valid for `len` bytes; `written` must be null or
 valid for one write.
 */
enum SpStatus sp_last_error_message(char *buf, size_t len, size_t *written);

/*
 Creates a config with every field at its default.

 # Safety
 `out` must be valid for one write.
 */
enum SpStatus sp_config_default(struct SpConfig **out);

/*
 Parses and validates a JSON run config. Missing fields take defaults.

 # Safety
 `json` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum SpStatus sp_config_from_json(const char *json, struct SpConfig **out);

/*
 Serializes the config as JSON.

 # Safety
 `cfg` must be a live config handle; see [`sp_last_error_message`] for the
 buffer contract.
 */
enum SpStatus sp_config_to_json(const struct SpConfig *cfg, char *buf, size_t len, size_t *written);

/*
 Sets the number of training steps.

 # Safety
 `cfg` must be a live config handle.
 */
enum SpStatus sp_config_set_steps(struct SpConfig *cfg, uint64_t steps);

/*
 Sets the staleness budget S.

 # Safety
 `cfg` must be a live config handle.
 */
enum SpStatus sp_config_set_staleness(struct SpConfig *cfg, uint64_t staleness);

/*
 Sets the seed used for weights and data.

 # Safety
 `cfg` must be a live config handle.
 */
enum SpStatus sp_config_set_seed(struct SpConfig *cfg, uint64_t seed);

/*
 # Safety
 `cfg` must be null or a handle not yet freed.
 */
void sp_config_free(struct SpConfig *cfg);

/*
 Runs training to completion.

 # Safety
 `cfg` must be a live config handle; `out` must be valid for one write.
 */
enum SpStatus sp_run_training(const struct SpConfig *cfg, struct SpRun **out);

/*
 Number of logged steps.

 # Safety
 `run` must be a live run handle; `out` must be valid for one write.
 */
enum SpStatus sp_run_steps(const struct SpRun *run, uint64_t *out);

/*
 Training loss of step `step`.

 # Safety
 `run` must be a live run handle; `out` must be valid for one write.
 */
enum SpStatus sp_run_loss_at(const struct SpRun *run, uint64_t step, double *out);

/*
 Held-out loss after the last step.

 # Safety
 `run` must be a live run handle; `out` must be valid for one write.
 */
enum SpStatus sp_run_final_eval_loss(const struct SpRun *run, double *out);

/*
 Run summary as JSON.

 # Safety
 `run` must be a live run handle; see [`sp_last_error_message`] for the
 buffer contract.
 */
enum SpStatus sp_run_summary_json(const struct SpRun *run, char *buf, size_t len, size_t *written);

/*
 Writes config, loss, series, trace and summary files into `dir`.

 # Safety
 `run` must be a live run handle; `dir` must be a NUL-terminated string.
 */
enum SpStatus sp_run_write_outputs(const struct SpRun *run, const char *dir);

/*
 # Safety
 `run` must be null or a handle not yet freed.
 */
void sp_run_free(struct SpRun *run);

/*
 Writes `(m + damping·I)^(-1/p)` of the symmetric `dim`×`dim` row-major
 matrix `m` into `out`.

 # Safety
 `m` and `out` must each be valid for `dim*dim` doubles.
 */
enum SpStatus sp_inv_root(const double *m, size_t dim, uint32_t p, double damping, double *out);

/*
 Normalized loss-reduction efficiency `(l_init - l_final) / e_ratio`.

 # Safety
 `out` must be valid for one write.
 */
enum SpStatus sp_compute_eta(double l_final, double l_init, double e_ratio, double *out);

/*
 Creates a store with the given tier capacities. `cold_path` may be null
 for an anonymous temporary file.

 # Safety
 `cold_path` must be null or a NUL-terminated string; `out` must be valid
 for one write.
 */
enum SpStatus sp_store_new(uint64_t hot_bytes,
                           uint64_t host_bytes,
                           const char *cold_path,
                           struct SpStore **out);

/*
 Stores `len` bytes under `(block, role)` in `tier`, replacing any
 previous value. `role` indexes FactorL, FactorR, InvL, InvR, BasisL,
 BasisR, MomentM, MomentV in that order.

 # Safety
 `store` must be a live store handle; `data` must be valid for `len` bytes.
 */
enum SpStatus sp_store_put(const struct SpStore *store,
                           uint32_t block,
                           uint8_t role,
                           const uint8_t *data,
                           size_t len,
                           enum SpTier tier);

/*
 Copies the value under `(block, role)` into `buf`. `written` receives
 the value's length, also when `buf` is too small; `tier` receives the
 tier the entry resides in afterwards. Cold entries are paged into Host.

 # Safety
 `store` must be a live store handle; `buf` must be null or valid for
 `len` bytes; `written` and `tier` must be null or valid for one write.
 */
enum SpStatus sp_store_get(const struct SpStore *store,
                           uint32_t block,
                           uint8_t role,
                           uint8_t *buf,
                           size_t len,
                           size_t *written,
                           enum SpTier *tier);

/*
 Bytes currently resident in `tier`.

 # Safety
 `store` must be a live store handle; `out` must be valid for one write.
 */
enum SpStatus sp_store_resident_bytes(const struct SpStore *store, enum SpTier tier, uint64_t *out);

/*
 # Safety
 `store` must be null or a handle not yet freed.
 */
void sp_store_free(struct SpStore *store);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHADOWPREC_H */
