#ifndef QLAB_H
#define QLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QlabStatus {
  QLAB_STATUS_OK = 0,
  QLAB_STATUS_NULL_ARGUMENT = 1,
  QLAB_STATUS_INVALID_ARGUMENT = 2,
  QLAB_STATUS_CONFIG_ERROR = 3,
  QLAB_STATUS_DATA_ERROR = 4,
  QLAB_STATUS_NUMERIC_ERROR = 5,
  QLAB_STATUS_IO_ERROR = 6,
  QLAB_STATUS_PANIC = 7,
} QlabStatus;

typedef struct QlabCalibration QlabCalibration;

/**
 * Full-precision model weights.
 */
typedef struct QlabModel QlabModel;

/**
 * Quantized model weights.
 */
typedef struct QlabQuantized QlabQuantized;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *qlab_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next `qlab_*` call on the same thread.
 */
const char *qlab_last_error(void);

/**
 * Random model. `config_json` holds `ModelConfig` fields (missing ones take
 * defaults) and may be NULL for the default configuration.
 */
enum QlabStatus qlab_model_init_random(const char *config_json,
                                       uint64_t seed,
                                       struct QlabModel **out);

enum QlabStatus qlab_model_load(const char *path, struct QlabModel **out);

enum QlabStatus qlab_model_save(const struct QlabModel *model, const char *path);

/**
 * Perplexity over non-overlapping context windows of `tokens`.
 */
enum QlabStatus qlab_model_perplexity(const struct QlabModel *model,
                                      const uint32_t *tokens,
                                      size_t n_tokens,
                                      double *out_ppl);

void qlab_model_free(struct QlabModel *model);

/**
 * Reads a calibration set written by `qlab calib build`.
 */
enum QlabStatus qlab_calibration_load(const char *path, struct QlabCalibration **out);

enum QlabStatus qlab_calibration_num_examples(const struct QlabCalibration *calib, size_t *out);

void qlab_calibration_free(struct QlabCalibration *calib);

/**
 * Quantizes every layer projection. `spec_json` is a quantization spec such
 * as `{"method":"gptq","bits":4,"group_size":128}`. `calib` may be NULL for
 * RTN only.
 */
enum QlabStatus qlab_quantize(const struct QlabModel *model,
                              const struct QlabCalibration *calib,
                              const char *spec_json,
                              struct QlabQuantized **out);

enum QlabStatus qlab_quantized_load(const char *path, struct QlabQuantized **out);

enum QlabStatus qlab_quantized_save(const struct QlabQuantized *q, const char *path);

enum QlabStatus qlab_quantized_perplexity(const struct QlabQuantized *q,
                                          const uint32_t *tokens,
                                          size_t n_tokens,
                                          double *out_ppl);

/**
 * Dequantized copy in the original parameterization.
 */
enum QlabStatus qlab_quantized_to_model(const struct QlabQuantized *q, struct QlabModel **out);

void qlab_quantized_free(struct QlabQuantized *q);

/**
 * `baseline - other`; both must be positive and finite.
 */
enum QlabStatus qlab_delta_ppl(double baseline, double other, double *out);

/**
 * Spearman rank correlation with average ranks for ties. `out_degenerate`
 * may be NULL; it is set when either input is constant (rho is then 0).
 */
enum QlabStatus qlab_spearman(const double *x,
                              const double *y,
                              size_t n,
                              double *out_rho,
                              bool *out_degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QLAB_H */
