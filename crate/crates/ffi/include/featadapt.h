#ifndef FEATADAPT_H
#define FEATADAPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum FaStatus {
  FA_STATUS_OK = 0,
  FA_STATUS_NULL_POINTER = 1,
  FA_STATUS_INVALID_ARGUMENT = 2,
  FA_STATUS_SHAPE = 3,
  FA_STATUS_ADAPTER = 4,
  FA_STATUS_IO = 5,
  FA_STATUS_FORMAT = 6,
  FA_STATUS_DIVERGED = 7,
  FA_STATUS_BUFFER_TOO_SMALL = 8,
  FA_STATUS_PANIC = 9,
} FaStatus;

typedef enum FaAdapterKind {
  FA_ADAPTER_KIND_FULL_FT = 0,
  FA_ADAPTER_KIND_LINEAR_PROBE = 1,
  FA_ADAPTER_KIND_LORA = 2,
  FA_ADAPTER_KIND_LORFA = 3,
  FA_ADAPTER_KIND_VEFA = 4,
  FA_ADAPTER_KIND_INPUT_SHIFT = 5,
} FaAdapterKind;

/**
 * Opaque model handle, with the adapter regime last attached.
 */
typedef struct FaModel FaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fa_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fa_version(void);

/**
 * Builds a seeded ReLU MLP classifier `input -> hidden[..] -> classes`.
 *
 * # Safety
 * `hidden` must point to `n_hidden` values; `out` must be writable.
 */
enum FaStatus fa_model_mlp(size_t input,
                           const size_t *hidden,
                           size_t n_hidden,
                           size_t classes,
                           uint64_t seed,
                           struct FaModel **out);

/**
 * Loads a model checkpoint written by `fa_model_save` or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FaStatus fa_model_load(const char *path, struct FaModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum FaStatus fa_model_save(const struct FaModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fa_model_free(struct FaModel *model);

/**
 * # Safety
 * `model` must be a live handle; `input`/`output` writable or null.
 */
enum FaStatus fa_model_dims(const struct FaModel *model, size_t *input, size_t *output);

/**
 * Freezes the model and attaches a fresh zero-initialized adapter
 * (`rank` is ignored for kinds without one).
 *
 * # Safety
 * `model` must be a live handle.
 */
enum FaStatus fa_model_attach(struct FaModel *model,
                              enum FaAdapterKind kind,
                              size_t rank,
                              uint64_t seed);

/**
 * Number of scalars the optimizer would update.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum FaStatus fa_model_trainable_count(const struct FaModel *model, size_t *out);

/**
 * Row-major forward pass: `x` is `rows x input_dim`, `out` receives
 * `rows x output_dim` values.
 *
 * # Safety
 * `x` must hold `rows * cols` values and `out` room for `out_len`.
 */
enum FaStatus fa_model_forward(const struct FaModel *model,
                               const double *x,
                               size_t rows,
                               size_t cols,
                               double *out,
                               size_t out_len);

/**
 * Cross-entropy fine-tuning of the attached regime with AdamW.
 * `final_loss` (optional) receives the last epoch's mean loss.
 *
 * # Safety
 * `x` must hold `rows * cols` values and `labels` `rows` values.
 */
enum FaStatus fa_model_fit(struct FaModel *model,
                           const double *x,
                           size_t rows,
                           size_t cols,
                           const size_t *labels,
                           size_t epochs,
                           double lr,
                           size_t batch_size,
                           uint64_t seed,
                           double *final_loss);

/**
 * Adapter parameter count over `n` target matrices of shape
 * `p[i] x q[i]`.
 *
 * # Safety
 * `p` and `q` must hold `n` values; `out` writable.
 */
enum FaStatus fa_param_count(enum FaAdapterKind kind,
                             size_t rank,
                             const size_t *p,
                             const size_t *q,
                             size_t n,
                             size_t *out);

/**
 * Robustness margin: fine-tuned minus zero-shot metric.
 */
double fa_r1(double metric_ft, double metric_zeroshot);

/**
 * Fits the 1-D reference problem (slope 5, four points) by gradient
 * descent; `feature_space` selects `5 (1 + d)` over `5 + d`. Writes the
 * fitted slope and the number of steps taken.
 *
 * # Safety
 * `slope` and `steps` must be writable or null.
 */
enum FaStatus fa_oned_fit(bool feature_space,
                          double lr,
                          size_t max_steps,
                          double *slope,
                          size_t *steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATADAPT_H */
