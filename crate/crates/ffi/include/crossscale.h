#ifndef CROSSSCALE_H
#define CROSSSCALE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsnStatus {
  CSN_STATUS_OK = 0,
  CSN_STATUS_NULL_POINTER = 1,
  CSN_STATUS_INVALID_ARGUMENT = 2,
  CSN_STATUS_IO = 3,
  CSN_STATUS_CHECKPOINT = 4,
  CSN_STATUS_SHAPE = 5,
  CSN_STATUS_NUMERIC = 6,
  CSN_STATUS_BUFFER_TOO_SMALL = 7,
  CSN_STATUS_PANIC = 8,
} CsnStatus;

// A generated synthetic dataset: features plus the target as last column.
typedef struct CsnDataset CsnDataset;

// A trained or freshly initialized model.
typedef struct CsnModel CsnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *csn_last_error(void);

// Builds a model from a JSON `ModelConfig` with seeded initialization.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum CsnStatus csn_model_new(const char *config_json, uint64_t seed, struct CsnModel **out);

// Loads a checkpoint written by the training tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CsnStatus csn_model_load(const char *path, struct CsnModel **out);

// # Safety
// `model` must be a valid handle and `path` a NUL-terminated string.
enum CsnStatus csn_model_save(const struct CsnModel *model, const char *path);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from `csn_model_new`/`csn_model_load` and not be used
// afterwards.
void csn_model_free(struct CsnModel *model);

// Lookback, horizon and feature count of a model.
//
// # Safety
// All pointers must be valid.
enum CsnStatus csn_model_dims(const struct CsnModel *model,
                              size_t *lookback,
                              size_t *horizon,
                              size_t *n_features);

// Forecasts `batch` windows. `input` holds `batch * lookback * n_features`
// values; `output` receives `batch * horizon * n_features`.
//
// # Safety
// `input` must hold `input_len` readable values and `output` `output_len`
// writable ones.
enum CsnStatus csn_model_forward(const struct CsnModel *model,
                                 const double *input,
                                 size_t input_len,
                                 size_t batch,
                                 double *output,
                                 size_t output_len);

// Attention saliency over the lookback, averaged over `batch` windows and
// max-normalized; `output` receives `lookback` values.
//
// # Safety
// As for [`csn_model_forward`].
enum CsnStatus csn_model_saliency(const struct CsnModel *model,
                                  const double *input,
                                  size_t input_len,
                                  size_t batch,
                                  double *output,
                                  size_t output_len);

// Generates a built-in synthetic dataset (`"SYN1"` .. `"SYN8"`).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum CsnStatus csn_synth_generate(const char *name,
                                  size_t n_samples,
                                  uint64_t seed,
                                  struct CsnDataset **out);

// Rows and columns (features plus target) of a dataset.
//
// # Safety
// All pointers must be valid.
enum CsnStatus csn_dataset_shape(const struct CsnDataset *data, size_t *rows, size_t *cols);

// Copies the row-major table into `output`.
//
// # Safety
// `output` must hold `output_len` writable values.
enum CsnStatus csn_dataset_values(const struct CsnDataset *data, double *output, size_t output_len);

// Ground-truth mask `[lookback, n_features]` as 0/1 bytes.
//
// # Safety
// `output` must hold `output_len` writable bytes.
enum CsnStatus csn_dataset_mask(const struct CsnDataset *data,
                                size_t lookback,
                                uint8_t *output,
                                size_t output_len);

// # Safety
// `data` must come from `csn_synth_generate` and not be used afterwards.
void csn_dataset_free(struct CsnDataset *data);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROSSSCALE_H */
