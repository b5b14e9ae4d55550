#ifndef DNODE_H
#define DNODE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DnodeStatus {
  DNODE_STATUS_OK = 0,
  DNODE_STATUS_NULL_POINTER = 1,
  DNODE_STATUS_INVALID_UTF8 = 2,
  DNODE_STATUS_IO = 3,
  DNODE_STATUS_DATA = 4,
  DNODE_STATUS_MODEL = 5,
  DNODE_STATUS_SOLVER = 6,
  DNODE_STATUS_INVALID_ARGUMENT = 7,
  DNODE_STATUS_BUFFER_TOO_SMALL = 8,
  DNODE_STATUS_PANIC = 9,
} DnodeStatus;

/**
 * A trained model with its stored metadata.
 */
typedef struct DnodeModel DnodeModel;

/**
 * A validated indicator panel.
 */
typedef struct DnodePanel DnodePanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dnode_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next `dnode_*` call on the same thread.
 */
const char *dnode_last_error(void);

/**
 * Normalized model time of a calendar year (2007 ↦ 0, 2020 ↦ 1).
 */
double dnode_normalize_year(double year);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DnodeStatus dnode_panel_load(const char *path, struct DnodePanel **out);

/**
 * The synthetic logistic panel with `n_districts` districts.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DnodeStatus dnode_panel_synthetic(size_t n_districts, uint64_t seed, struct DnodePanel **out);

/**
 * # Safety
 * `panel` must come from a `dnode_panel_*` constructor and not be freed
 * twice. Null is ignored.
 */
void dnode_panel_free(struct DnodePanel *panel);

/**
 * # Safety
 * `panel` must be a live handle; the out pointers must be valid.
 */
enum DnodeStatus dnode_panel_shape(const struct DnodePanel *panel,
                                   size_t *districts,
                                   size_t *times,
                                   size_t *indicators);

/**
 * Copies the name of district `index` into `buf` with a trailing NUL.
 * `needed` receives the required size including the NUL.
 *
 * # Safety
 * `panel` must be a live handle, `buf` valid for `buf_len` bytes (or null
 * with `buf_len` 0) and `needed` valid or null.
 */
enum DnodeStatus dnode_panel_district_name(const struct DnodePanel *panel,
                                           size_t index,
                                           char *buf,
                                           size_t buf_len,
                                           size_t *needed);

/**
 * Loads a checkpoint and its `.config.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DnodeStatus dnode_model_load(const char *path, struct DnodeModel **out);

/**
 * # Safety
 * `model` must come from [`dnode_model_load`] and not be freed twice.
 * Null is ignored.
 */
void dnode_model_free(struct DnodeModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum DnodeStatus dnode_model_n_districts(const struct DnodeModel *model, size_t *out);

/**
 * Forecasts every district of `panel` at calendar `year`, writing
 * `districts × indicators` values row-major into `out`.
 *
 * # Safety
 * `model` and `panel` must be live handles and `out` valid for `out_len`
 * doubles.
 */
enum DnodeStatus dnode_forecast(const struct DnodeModel *model,
                                const struct DnodePanel *panel,
                                uint32_t year,
                                double *out,
                                size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DNODE_H */
