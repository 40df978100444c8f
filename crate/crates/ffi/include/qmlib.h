#ifndef QMLIB_H
#define QMLIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QmlKlVariant {
  QML_KL_VARIANT_TIGHT = 0,
  QML_KL_VARIANT_LITERAL = 1,
} QmlKlVariant;

typedef enum QmlStatus {
  QML_STATUS_OK = 0,
  QML_STATUS_NULL_POINTER = 1,
  QML_STATUS_INVALID_ARGUMENT = 2,
  QML_STATUS_OUT_OF_DOMAIN = 3,
  QML_STATUS_IO = 4,
  QML_STATUS_CHECKPOINT = 5,
  QML_STATUS_NUMERICAL = 6,
  QML_STATUS_DATA = 7,
  QML_STATUS_PANIC = 8,
} QmlStatus;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct QmlModel QmlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. Valid until the next call into this library on the thread.
 */
const char *qml_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qml_version(void);

/**
 * `10^(-psnr_db / 10)` for unit peak power.
 */
double qml_psnr_to_sigma2(double psnr_db);

/**
 * Writes the `t + 1` output levels implied by `t` amplitudes.
 *
 * # Safety
 * `amplitudes` holds `t` values; `levels` has room for `t + 1`.
 */
enum QmlStatus qml_quantizer_levels(const double *amplitudes, size_t t, double *levels);

/**
 * Step quantizer applied to `n` values.
 *
 * # Safety
 * `amplitudes` and `breakpoints` hold `t` values; `z` and `out_values` hold `n`.
 */
enum QmlStatus qml_hard_quantize(const double *amplitudes,
                                 const double *breakpoints,
                                 size_t t,
                                 const double *z,
                                 size_t n,
                                 double *out_values);

/**
 * Level probabilities of `N(mu_i, theta_i²)` for `d` dimensions, row-major
 * `d × (t + 1)`.
 *
 * # Safety
 * `mu`, `theta` hold `d` values; `pmf` has room for `d * (t + 1)`.
 */
enum QmlStatus qml_conditional_pmf(const double *amplitudes,
                                   const double *breakpoints,
                                   size_t t,
                                   const double *mu,
                                   const double *theta,
                                   size_t d,
                                   double *pmf);

/**
 * Closed-form KL upper bound per dimension for a quantized link.
 *
 * # Safety
 * `mu`, `theta` and `per_dim` hold `d` values.
 */
enum QmlStatus qml_kl_bound(const double *amplitudes,
                            const double *breakpoints,
                            size_t t,
                            const double *mu,
                            const double *theta,
                            size_t d,
                            double sigma2,
                            enum QmlKlVariant variant,
                            double *per_dim);

/**
 * Quadrature KL of the received mixture per dimension.
 *
 * # Safety
 * `mu`, `theta` and `per_dim` hold `d` values.
 */
enum QmlStatus qml_true_kl(const double *amplitudes,
                           const double *breakpoints,
                           size_t t,
                           const double *mu,
                           const double *theta,
                           size_t d,
                           double sigma2,
                           double *per_dim);

/**
 * Cap on the total gap between the bound and the true KL of a link.
 * Requires `0 < sigma2 < 1`.
 *
 * # Safety
 * `mu` and `theta` hold `d` values.
 */
enum QmlStatus qml_gap_bound(const double *amplitudes,
                             const double *breakpoints,
                             size_t t,
                             const double *mu,
                             const double *theta,
                             size_t d,
                             double sigma2,
                             double *bound);

/**
 * System latency in milliseconds with one symbol per quantized value.
 */
enum QmlStatus qml_latency_ms(size_t d,
                              size_t t,
                              size_t devices,
                              double symbol_rate,
                              bool parallel_links,
                              double *latency);

/**
 * Loads a checkpoint written by `qmlib train`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `model` is a valid pointer.
 */
enum QmlStatus qml_model_load(const char *path, struct QmlModel **model);

/**
 * Releases a handle from [`qml_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` came from `qml_model_load` and is not used afterwards.
 */
void qml_model_free(struct QmlModel *model);

/**
 * Number of devices, feature dimension and class count.
 *
 * # Safety
 * `model` is a live handle; the outputs are valid pointers.
 */
enum QmlStatus qml_model_shape(const struct QmlModel *model,
                               size_t *devices,
                               size_t *feature_dim,
                               size_t *classes);

/**
 * Input length of device `k`'s view.
 *
 * # Safety
 * `model` is a live handle; `width` is a valid pointer.
 */
enum QmlStatus qml_model_input_dim(const struct QmlModel *model, size_t k, size_t *width);

/**
 * Class log-probabilities for `batch` samples sent over links at
 * `psnr_db`, with the hard quantizer and channel noise seeded by `seed`.
 * Each input row is the concatenation of all devices' views; the output
 * is row-major `batch × classes`.
 *
 * # Safety
 * `model` is a live handle; `inputs` holds `batch` rows of the summed view
 * widths; `log_probs` has room for `batch * classes`.
 */
enum QmlStatus qml_model_predict(const struct QmlModel *model,
                                 const double *inputs,
                                 size_t batch,
                                 double psnr_db,
                                 uint64_t seed,
                                 double *log_probs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QMLIB_H */
