/* Regenerate with `cbindgen --config cbindgen.toml --output include/pdl.h`. */

#ifndef PDL_FFI_H
#define PDL_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PDL_OK 0

/* A required pointer argument was NULL. */
#define PDL_ERR_NULL 1

/* Bad configuration, arguments or file contents. */
#define PDL_ERR_INVALID 2

#define PDL_ERR_IO 3

/* Training produced a non-finite loss or gradient. */
#define PDL_ERR_NUMERICAL 4

/* Checkpoint architecture or dataset shape does not match the configuration. */
#define PDL_ERR_MISMATCH 5

/* Output buffer too small; the required length was written. */
#define PDL_ERR_BUFFER 6

#define PDL_ERR_PANIC 7

/* A generated or loaded dataset. */
typedef struct PdlDataset PdlDataset;

/* Trained parameters with the configuration they were trained under. */
typedef struct PdlModel PdlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or NULL. Valid until
 the next `pdl_*` call on the same thread.
 */
const char *pdl_last_error(void);

/* Library version as a static NUL-terminated string. */
const char *pdl_version(void);

/*
 Renders the synthetic dataset described by `config`.

 # Safety
 `config` is NULL or a NUL-terminated string; `out` points to writable storage.
 */
int32_t pdl_dataset_generate(const char *config, PdlDataset **out);

/*
 Loads a dataset directory written by `pdl generate` or `pdl_dataset_save`.

 # Safety
 `path` is a NUL-terminated string; `out` points to writable storage.
 */
int32_t pdl_dataset_load(const char *path, PdlDataset **out);

/*
 Writes `dataset` to the directory `path`.

 # Safety
 `dataset` is a live handle; `path` is a NUL-terminated string.
 */
int32_t pdl_dataset_save(const PdlDataset *dataset, const char *path);

/*
 Number of samples, or 0 for NULL.

 # Safety
 `dataset` is NULL or a live handle.
 */
size_t pdl_dataset_len(const PdlDataset *dataset);

/*
 Number of generator domains, or 0 for NULL.

 # Safety
 `dataset` is NULL or a live handle.
 */
size_t pdl_dataset_domains(const PdlDataset *dataset);

/*
 # Safety
 `dataset` is NULL or a handle not yet freed.
 */
void pdl_dataset_free(PdlDataset *dataset);

/*
 Trains on every domain except `held_out_domain` from `config`. When
 `out_dir` is non-NULL the run logs and checkpoints are written there.

 # Safety
 `dataset` is a live handle; `config` and `out_dir` are NULL or
 NUL-terminated; `out` points to writable storage.
 */
int32_t pdl_train(const PdlDataset *dataset, const char *config, const char *out_dir, PdlModel **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` is a NUL-terminated string; `out` points to writable storage.
 */
int32_t pdl_model_load(const char *path, PdlModel **out);

/*
 Writes `model` as a checkpoint file.

 # Safety
 `model` is a live handle; `path` is a NUL-terminated string.
 */
int32_t pdl_model_save(const PdlModel *model, const char *path);

/*
 # Safety
 `model` is NULL or a handle not yet freed.
 */
void pdl_model_free(PdlModel *model);

/*
 Live-class probabilities and labels (1 = live) for every sample of `domain`.

 With `capacity` below the sample count nothing is scored: the count is
 stored in `written` and `PDL_ERR_BUFFER` is returned, so a first call with
 `capacity = 0` and NULL buffers queries the size.

 # Safety
 `model` and `dataset` are live handles; `scores` and `labels` hold at least
 `capacity` doubles; `written` points to writable storage.
 */
int32_t pdl_model_score(const PdlModel *model,
                        const PdlDataset *dataset,
                        size_t domain,
                        double *scores,
                        double *labels,
                        size_t capacity,
                        size_t *written);

/*
 ROC AUC of `model` on every sample of `domain`.

 # Safety
 `model` and `dataset` are live handles; `auc` points to writable storage.
 */
int32_t pdl_model_auc(const PdlModel *model, const PdlDataset *dataset, size_t domain, double *auc);

/*
 ROC AUC of `n` scores against 0/1 labels (1 = positive), ties at half weight.

 # Safety
 `scores` and `labels` hold `n` doubles; `out` points to writable storage.
 */
int32_t pdl_auc(const double *scores, const double *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDL_FFI_H */
