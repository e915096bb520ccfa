#ifndef SINC_H
#define SINC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SincStatus {
  SINC_STATUS_OK = 0,
  SINC_STATUS_NULL_POINTER = 1,
  SINC_STATUS_INVALID_INPUT = 2,
  SINC_STATUS_INVALID_BAND = 3,
  SINC_STATUS_CONFIG = 4,
  SINC_STATUS_INVALID_STATE = 5,
  SINC_STATUS_NUMERIC = 6,
  SINC_STATUS_FORMAT = 7,
  SINC_STATUS_IO = 8,
  SINC_STATUS_BUFFER_TOO_SMALL = 9,
  SINC_STATUS_PANIC = 10,
} SincStatus;

/**
 * Opaque model handle.
 */
typedef struct SincModel SincModel;

/**
 * Signal band `[a, b]` in Hz and sparsity half-width `delta_f`.
 */
typedef struct SincBand {
  double a;
  double b;
  double delta_f;
} SincBand;

typedef struct SincLossWeights {
  double bandwidth;
  double sparsity;
  double variance;
} SincLossWeights;

typedef struct SincLoss {
  double bandwidth;
  double sparsity;
  double variance;
  double total;
} SincLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sinc_last_error(void);

/**
 * Number of one-sided PSD bins for `nfft`, `nfft / 2 + 1`.
 */
size_t sinc_psd_len(size_t nfft);

/**
 * One-sided power spectrum of the mean-subtracted signal `y`.
 *
 * # Safety
 * `y` must hold `n` values and `out` room for `out_len`.
 */
enum SincStatus sinc_psd(const double *y,
                         size_t n,
                         double fs,
                         size_t nfft,
                         double *out,
                         size_t out_len);

/**
 * Rate (per minute) of the in-band PSD peak of `y`.
 *
 * # Safety
 * `y` must hold `n` values; `rate` must be writable.
 */
enum SincStatus sinc_peak_rate(const double *y,
                               size_t n,
                               double fs,
                               size_t nfft,
                               struct SincBand band_limits,
                               double *rate);

/**
 * Weighted loss of a batch of `n_signals` signals of `len` samples stored
 * row by row. When `grad` is not null it receives the gradient of the total
 * with respect to every sample, in the same layout.
 *
 * # Safety
 * `batch` must hold `n_signals * len` values, `grad` (if not null) room for
 * as many, and `loss` must be writable.
 */
enum SincStatus sinc_loss(const double *batch,
                          size_t n_signals,
                          size_t len,
                          double fs,
                          size_t nfft,
                          struct SincBand band_limits,
                          struct SincLossWeights weights,
                          struct SincLoss *loss,
                          double *grad);

/**
 * A freshly initialised default model for `width x height x channels` clips.
 *
 * # Safety
 * `model_out` must be writable; the handle is released with `sinc_model_free`.
 */
enum SincStatus sinc_model_init(size_t width,
                                size_t height,
                                size_t channels,
                                uint64_t seed,
                                struct SincModel **model_out);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `file` must be a nul-terminated UTF-8 path and `model_out` writable.
 */
enum SincStatus sinc_model_load(const char *file, struct SincModel **model_out);

/**
 * Writes a model checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `file` a nul-terminated UTF-8 path.
 */
enum SincStatus sinc_model_save(const struct SincModel *model, const char *file);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, which is invalid afterwards.
 */
void sinc_model_free(struct SincModel *model);

/**
 * Clip dimensions `(width, height, channels)` and parameter count of a model.
 *
 * # Safety
 * `model` must be a live handle; each output pointer may be null.
 */
enum SincStatus sinc_model_shape(const struct SincModel *model,
                                 size_t *width,
                                 size_t *height,
                                 size_t *channels,
                                 size_t *n_params);

/**
 * Waveform of a clip. Frames are stored one after another; within a frame
 * the layout is width-major, then height, then channel.
 *
 * # Safety
 * `frames` must hold `n_frames * width * height * channels` values and `out`
 * room for `out_len >= n_frames`.
 */
enum SincStatus sinc_model_forward(const struct SincModel *model,
                                   const float *frames,
                                   size_t n_frames,
                                   double fps,
                                   double *out_wave,
                                   size_t out_len);

/**
 * Rates (per minute) of `clip_len`-frame windows at `stride`, with their
 * centre times in seconds. `count` always receives the number of windows;
 * when that exceeds `capacity` no rates are written and the call fails with
 * `SINC_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `frames` as for `sinc_model_forward`; `times` and `rates` must have room
 * for `capacity` values; `count` must be writable.
 */
enum SincStatus sinc_model_predict_rates(const struct SincModel *model,
                                         const float *frames,
                                         size_t n_frames,
                                         double fps,
                                         size_t clip_len,
                                         size_t stride,
                                         size_t nfft,
                                         struct SincBand band_limits,
                                         double *times,
                                         double *rates,
                                         size_t capacity,
                                         size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SINC_H */
