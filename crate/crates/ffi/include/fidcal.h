#ifndef FIDCAL_H
#define FIDCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Per-pixel distance used for fidelity maps.
 */
typedef enum FidcalMetric {
  FIDCAL_METRIC_L1 = 0,
  FIDCAL_METRIC_L2 = 1,
  FIDCAL_METRIC_COSINE = 2,
} FidcalMetric;

/*
 Result code of every exported function.
 */
typedef enum FidcalStatus {
  FIDCAL_STATUS_OK = 0,
  FIDCAL_STATUS_NULL_POINTER = 1,
  FIDCAL_STATUS_INVALID_ARGUMENT = 2,
  FIDCAL_STATUS_SHAPE = 3,
  FIDCAL_STATUS_IO = 4,
  FIDCAL_STATUS_CHECKPOINT = 5,
  FIDCAL_STATUS_INTERNAL = 6,
} FidcalStatus;

/*
 Opaque classifier.
 */
typedef struct FidcalClassifier FidcalClassifier;

/*
 Opaque restoration model.
 */
typedef struct FidcalDenoiser FidcalDenoiser;

/*
 Normalization moments of a noise-level mixture.
 */
typedef struct FidcalMixtureStats {
  /*
   Variance used for normalization (halved when requested).
   */
  double sigma_sq;
  double post_restore_sigma_sq;
  double half_normal_mean;
  double half_normal_var;
  double gamma_mean;
  double gamma_var;
} FidcalMixtureStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *fidcal_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fidcal_version(void);

/*
 Additive white Gaussian noise with standard deviation `sigma`, clipped
 to `[0, 1]`. The same seed gives the same noise.

 # Safety
 `img` and `out` must point to `c * h * w` floats.
 */
enum FidcalStatus fidcal_awgn(const float *img,
                              size_t c,
                              size_t h,
                              size_t w,
                              double sigma,
                              uint64_t seed,
                              float *out);

/*
 Replaces each element by 0 or 1 with probability `p`.

 # Safety
 `img` and `out` must point to `c * h * w` floats.
 */
enum FidcalStatus fidcal_salt_pepper(const float *img,
                                     size_t c,
                                     size_t h,
                                     size_t w,
                                     double p,
                                     uint64_t seed,
                                     float *out);

/*
 Gaussian blur with a 13×13 kernel of standard deviation `sigma`.

 # Safety
 `img` and `out` must point to `c * h * w` floats.
 */
enum FidcalStatus fidcal_gaussian_blur(const float *img,
                                       size_t c,
                                       size_t h,
                                       size_t w,
                                       double sigma,
                                       float *out);

/*
 PSNR in dB of two `[0, 1]` images; identical images give `+inf`.

 # Safety
 `a` and `b` must point to `c * h * w` floats, `out` to one double.
 */
enum FidcalStatus fidcal_psnr(const float *a,
                              const float *b,
                              size_t c,
                              size_t h,
                              size_t w,
                              double *out);

/*
 Per-pixel fidelity map (`h * w` floats) of an RGB restored image
 against its clean reference. With `stats` non-null, ℓ1 and ℓ2 maps are
 normalized with the mixture moments.

 # Safety
 `restored` and `clean` must point to `3 * h * w` floats, `out` to
 `h * w` floats; `stats` may be null.
 */
enum FidcalStatus fidcal_fidelity(const float *restored,
                                  const float *clean,
                                  size_t h,
                                  size_t w,
                                  enum FidcalMetric metric,
                                  const struct FidcalMixtureStats *stats,
                                  float *out);

/*
 Moments for the mixture of `n` noise levels.

 # Safety
 `sigmas` must point to `n` doubles and `out` to one struct.
 */
enum FidcalStatus fidcal_mixture_stats(const double *sigmas,
                                       size_t n,
                                       bool restore_halving,
                                       struct FidcalMixtureStats *out);

/*
 Loads a restoration checkpoint into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FidcalStatus fidcal_denoiser_load(const char *path, struct FidcalDenoiser **out);

/*
 Restores one image: `clip(img − predicted noise, 0, 1)`.

 # Safety
 `handle` must come from [`fidcal_denoiser_load`]; `img` and `out` must
 point to `c * h * w` floats.
 */
enum FidcalStatus fidcal_denoiser_run(const struct FidcalDenoiser *handle,
                                      const float *img,
                                      size_t c,
                                      size_t h,
                                      size_t w,
                                      float *out);

/*
 # Safety
 `handle` must come from [`fidcal_denoiser_load`] or be null.
 */
void fidcal_denoiser_free(struct FidcalDenoiser *handle);

/*
 Loads a classifier checkpoint into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FidcalStatus fidcal_classifier_load(const char *path, struct FidcalClassifier **out);

/*
 Number of classes; 0 for a null handle.

 # Safety
 `handle` must come from [`fidcal_classifier_load`] or be null.
 */
size_t fidcal_classifier_num_classes(const struct FidcalClassifier *handle);

/*
 Square input side the classifier expects; 0 for a null handle.

 # Safety
 `handle` must come from [`fidcal_classifier_load`] or be null.
 */
size_t fidcal_classifier_input_size(const struct FidcalClassifier *handle);

/*
 Logits for `n` RGB images of the classifier's input size, given in
 `[0, 1]`; they are mean/std normalized here.

 # Safety
 `images` must point to `n * 3 * s * s` floats with `s` the input size,
 `logits` to `n * num_classes` floats.
 */
enum FidcalStatus fidcal_classifier_predict(const struct FidcalClassifier *handle,
                                            const float *images,
                                            size_t n,
                                            float *logits);

/*
 # Safety
 `handle` must come from [`fidcal_classifier_load`] or be null.
 */
void fidcal_classifier_free(struct FidcalClassifier *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIDCAL_H */
