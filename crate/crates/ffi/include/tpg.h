#ifndef TPG_H
#define TPG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpgStatus {
  TPG_STATUS_OK = 0,
  TPG_STATUS_INVALID_ARGUMENT = 1,
  TPG_STATUS_DATA = 2,
  TPG_STATUS_NUMERIC = 3,
  TPG_STATUS_CHECKPOINT = 4,
  /**
   * Output buffer too small; nothing was written.
   */
  TPG_STATUS_BUFFER_TOO_SMALL = 5,
  TPG_STATUS_PANIC = 6,
} TpgStatus;

/**
 * Loaded checkpoint: vocabulary, architecture and parameters.
 */
typedef struct TpgModel TpgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *tpg_last_error(void);

/**
 * Writes the quadkey of a point at `level` (1..=23) into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes.
 */
enum TpgStatus tpg_quadkey_of(double lat, double lon, uint8_t level, char *buf, size_t cap);

/**
 * Hour-of-week slot of a Unix timestamp, Monday 00:00 UTC = 0.
 */
uint32_t tpg_time_slot(int64_t unix_seconds);

/**
 * Great-circle distance in kilometres; NaN for invalid coordinates.
 */
double tpg_haversine_km(double lat1, double lon1, double lat2, double lon2);

/**
 * # Safety
 * `ranks` must point to `n` values and `out` must be writable.
 */
enum TpgStatus tpg_recall_at_k(const size_t *ranks, size_t n, size_t k, double *out);

/**
 * # Safety
 * `ranks` must point to `n` values and `out` must be writable.
 */
enum TpgStatus tpg_ndcg_at_k(const size_t *ranks, size_t n, size_t k, double *out);

/**
 * Loads a checkpoint directory written by `tpg train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum TpgStatus tpg_model_load(const char *dir, struct TpgModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from `tpg_model_load` and not be used afterwards.
 */
void tpg_model_free(struct TpgModel *model);

/**
 * Number of POIs in the model's vocabulary; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tpg_model_num_pois(const struct TpgModel *model);

/**
 * Number of users in the model's vocabulary; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tpg_model_num_users(const struct TpgModel *model);

/**
 * Dense index of an original POI id.
 *
 * # Safety
 * `model` must be a live handle, `poi_id` NUL-terminated, `out` writable.
 */
enum TpgStatus tpg_model_poi_index(const struct TpgModel *model, const char *poi_id, size_t *out);

/**
 * Dense index of an original user id.
 *
 * # Safety
 * `model` must be a live handle, `user_id` NUL-terminated, `out` writable.
 */
enum TpgStatus tpg_model_user_index(const struct TpgModel *model, const char *user_id, size_t *out);

/**
 * Writes the original id of dense POI `index` into `buf`.
 *
 * # Safety
 * `model` must be a live handle and `buf` point to `cap` writable bytes.
 */
enum TpgStatus tpg_model_poi_id(const struct TpgModel *model, size_t index, char *buf, size_t cap);

/**
 * Ranks every POI for `user` at time `prompt` given a time-ordered history
 * of dense POI indices and Unix timestamps. The best `k` are written to
 * `out_pois`/`out_scores` (each of capacity `k`), best first, and their
 * count to `out_len`.
 *
 * # Safety
 * Pointers must reference `n` history entries, `k` output slots each and a
 * writable `out_len`; `model` must be a live handle.
 */
enum TpgStatus tpg_model_predict(const struct TpgModel *model,
                                 size_t user,
                                 const size_t *history_pois,
                                 const int64_t *history_times,
                                 size_t n,
                                 int64_t prompt,
                                 size_t k,
                                 size_t *out_pois,
                                 double *out_scores,
                                 size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TPG_H */
