#ifndef MCCSR_H
#define MCCSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum MccsrStatus {
  MCCSR_STATUS_OK = 0,
  MCCSR_STATUS_NULL_POINTER = 1,
  MCCSR_STATUS_INVALID_ARGUMENT = 2,
  MCCSR_STATUS_DIMENSION = 3,
  MCCSR_STATUS_FORMAT = 4,
  MCCSR_STATUS_IO = 5,
  MCCSR_STATUS_INSUFFICIENT_DATA = 6,
  MCCSR_STATUS_PANIC = 7,
} MccsrStatus;

/*
 A trained LR/HR dictionary pair.
 */
typedef struct MccsrDictionary MccsrDictionary;

/*
 An RGB image with samples in `[0, 255]`.
 */
typedef struct MccsrImage MccsrImage;

/*
 Dictionary training settings. Start from [`mccsr_train_options_default`].
 */
typedef struct MccsrTrainOptions {
  uint32_t scale;
  uint32_t atoms;
  uint32_t samples;
  uint32_t outer_iterations;
  double lambda;
  double tau;
  uint64_t seed;
} MccsrTrainOptions;

/*
 Super-resolution settings. Start from [`mccsr_sr_options_default`].
 */
typedef struct MccsrSrOptions {
  /*
   0 uses the dictionary's scale.
   */
  uint32_t scale;
  double lambda;
  double tau_max;
  /*
   Input noise σ; values ≤ 0 mean a clean input.
   */
  double noise_sigma;
  /*
   τ used for every patch; negative values keep the adaptive map.
   */
  double force_tau;
} MccsrSrOptions;

typedef struct MccsrMetrics {
  double psnr_db;
  double ssim;
  double scielab_total;
} MccsrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next `mccsr_*` call on the same thread.
 */
const char *mccsr_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *mccsr_version(void);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MccsrStatus mccsr_dictionary_load(const char *path, struct MccsrDictionary **out);

/*
 # Safety
 `dict` must come from this library; `path` must be NUL-terminated.
 */
enum MccsrStatus mccsr_dictionary_save(const struct MccsrDictionary *dict, const char *path);

/*
 Atoms per channel, or 0 for NULL.

 # Safety
 `dict` must be NULL or come from this library.
 */
uintptr_t mccsr_dictionary_atoms(const struct MccsrDictionary *dict);

/*
 Upscaling factor the dictionary was trained for, or 0 for NULL.

 # Safety
 `dict` must be NULL or come from this library.
 */
uint32_t mccsr_dictionary_scale(const struct MccsrDictionary *dict);

/*
 # Safety
 `dict` must be NULL or come from this library, and not be used again.
 */
void mccsr_dictionary_free(struct MccsrDictionary *dict);

struct MccsrTrainOptions mccsr_train_options_default(void);

/*
 Learns a dictionary from `count` high-resolution training images.

 # Safety
 `images` must point to `count` valid image handles; `options` may be NULL
 for the defaults; `out` must be a valid pointer.
 */
enum MccsrStatus mccsr_train(const struct MccsrImage *const *images,
                             uintptr_t count,
                             const struct MccsrTrainOptions *options,
                             struct MccsrDictionary **out);

/*
 Builds an image from interleaved 8-bit RGB, `width * height * 3` bytes.

 # Safety
 `data` must point to `len` readable bytes; `out` must be a valid pointer.
 */
enum MccsrStatus mccsr_image_from_rgb8(uintptr_t width,
                                       uintptr_t height,
                                       const uint8_t *data,
                                       uintptr_t len,
                                       struct MccsrImage **out);

/*
 Writes the image as interleaved 8-bit RGB (rounded and clamped) into
 `buf`, which must hold `width * height * 3` bytes.

 # Safety
 `img` must come from this library; `buf` must point to `len` writable
 bytes.
 */
enum MccsrStatus mccsr_image_to_rgb8(const struct MccsrImage *img, uint8_t *buf, uintptr_t len);

/*
 # Safety
 `path` must be NUL-terminated and `out` a valid pointer.
 */
enum MccsrStatus mccsr_image_read_png(const char *path, struct MccsrImage **out);

/*
 # Safety
 `img` must come from this library; `path` must be NUL-terminated.
 */
enum MccsrStatus mccsr_image_write_png(const struct MccsrImage *img, const char *path);

/*
 # Safety
 `img` must be NULL or come from this library.
 */
uintptr_t mccsr_image_width(const struct MccsrImage *img);

/*
 # Safety
 `img` must be NULL or come from this library.
 */
uintptr_t mccsr_image_height(const struct MccsrImage *img);

/*
 # Safety
 `img` must be NULL or come from this library, and not be used again.
 */
void mccsr_image_free(struct MccsrImage *img);

struct MccsrSrOptions mccsr_sr_options_default(void);

/*
 Super-resolves `lr` into a new image stored in `*out`.

 # Safety
 `dict` and `lr` must come from this library; `options` may be NULL for
 the defaults; `out` must be a valid pointer.
 */
enum MccsrStatus mccsr_super_resolve(const struct MccsrDictionary *dict,
                                     const struct MccsrImage *lr,
                                     const struct MccsrSrOptions *options,
                                     struct MccsrImage **out);

/*
 Bicubic downsampling by `scale`, then optional seeded Gaussian noise.

 # Safety
 `img` must come from this library; `out` must be a valid pointer.
 */
enum MccsrStatus mccsr_degrade(const struct MccsrImage *img,
                               uint32_t scale,
                               double noise_sigma,
                               uint64_t seed,
                               struct MccsrImage **out);

/*
 PSNR, SSIM and S-CIELAB of `test` against `reference`.

 # Safety
 Both images must come from this library; `out` must be a valid pointer.
 */
enum MccsrStatus mccsr_evaluate(const struct MccsrImage *reference,
                                const struct MccsrImage *test,
                                double samples_per_degree,
                                struct MccsrMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCCSR_H */
