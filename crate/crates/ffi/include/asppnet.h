#ifndef ASPPNET_H
#define ASPPNET_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AsppnetStatus {
  ASPPNET_STATUS_OK = 0,
  ASPPNET_STATUS_NULL_POINTER = 1,
  ASPPNET_STATUS_INVALID_ARGUMENT = 2,
  ASPPNET_STATUS_CONFIG = 3,
  ASPPNET_STATUS_IO = 4,
  ASPPNET_STATUS_PARSE = 5,
  ASPPNET_STATUS_SHAPE = 6,
  ASPPNET_STATUS_NON_FINITE = 7,
  ASPPNET_STATUS_PANIC = 8,
} AsppnetStatus;

/*
 Opaque network handle.
 */
typedef struct AsppnetNetwork AsppnetNetwork;

typedef struct AsppnetMetrics {
  double dsc;
  double miou;
  double iou_fg;
  double accuracy;
} AsppnetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length excluding the NUL.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t asppnet_last_error(char *buf, size_t len);

/*
 Library version, a static NUL-terminated string.
 */
const char *asppnet_version(void);

/*
 Builds a freshly initialised network.

 `variant` is one of "unet", "att_unet", "att_unet_spp", "att_unet_aspp".

 # Safety
 `variant` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AsppnetStatus asppnet_network_build(const char *variant,
                                         uint32_t depth,
                                         uint32_t base_channels,
                                         uint32_t image_size,
                                         uint64_t seed,
                                         struct AsppnetNetwork **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AsppnetStatus asppnet_network_load(const char *path, struct AsppnetNetwork **out);

/*
 Writes the network weights as a checkpoint file.

 # Safety
 `net` must come from this library; `path` must be NUL-terminated.
 */
enum AsppnetStatus asppnet_network_save(const struct AsppnetNetwork *net, const char *path);

/*
 Releases a handle. Null is ignored.

 # Safety
 `net` must come from this library and not be used afterwards.
 */
void asppnet_network_free(struct AsppnetNetwork *net);

/*
 # Safety
 `net` must come from this library and `out` be a valid pointer.
 */
enum AsppnetStatus asppnet_network_param_count(const struct AsppnetNetwork *net, size_t *out);

/*
 Number of attention gates.

 # Safety
 `net` must come from this library and `out` be a valid pointer.
 */
enum AsppnetStatus asppnet_network_gate_count(const struct AsppnetNetwork *net, size_t *out);

/*
 Input side length the network was built for.

 # Safety
 `net` must come from this library and `out` be a valid pointer.
 */
enum AsppnetStatus asppnet_network_image_size(const struct AsppnetNetwork *net, size_t *out);

/*
 Foreground probabilities for `n` single-channel `h`×`w` images, row-major.
 `images` and `probs` both hold `n*h*w` floats.

 # Safety
 `images` must point to `n*h*w` readable floats and `probs` to as many
 writable ones.
 */
enum AsppnetStatus asppnet_network_predict(const struct AsppnetNetwork *net,
                                           const float *images,
                                           size_t n,
                                           size_t h,
                                           size_t w,
                                           float *probs);

/*
 DSC, mIoU, foreground IoU and accuracy of two 0/1 masks of length `len`.

 # Safety
 `pred` and `target` must point to `len` readable bytes, `out` to a
 writable struct.
 */
enum AsppnetStatus asppnet_metrics(const uint8_t *pred,
                                   const uint8_t *target,
                                   size_t len,
                                   struct AsppnetMetrics *out);

/*
 Cosine-annealed learning rate at epoch `t_cur` of a cycle of `t_i` epochs.
 */
double asppnet_cosine_lr(double eta_min, double eta_max, double t_cur, double t_i);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASPPNET_H */
