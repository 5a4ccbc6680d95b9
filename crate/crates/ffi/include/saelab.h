/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef SAELAB_H
#define SAELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SaelabStatus {
  SAELAB_STATUS_OK = 0,
  SAELAB_STATUS_NULL_POINTER = 1,
  SAELAB_STATUS_INVALID_INPUT = 2,
  SAELAB_STATUS_SHAPE_MISMATCH = 3,
  SAELAB_STATUS_NON_FINITE = 4,
  SAELAB_STATUS_IO = 5,
  SAELAB_STATUS_FORMAT = 6,
  SAELAB_STATUS_CONFIG = 7,
  SAELAB_STATUS_DEGENERATE = 8,
  SAELAB_STATUS_DIVERGENCE = 9,
  /**
   * The output buffer is shorter than the result; nothing was written.
   */
  SAELAB_STATUS_BUFFER_TOO_SMALL = 10,
  SAELAB_STATUS_PANIC = 11,
} SaelabStatus;

/**
 * A trained language model.
 */
typedef struct SaelabLm SaelabLm;

/**
 * A trained sparse autoencoder.
 */
typedef struct SaelabSae SaelabSae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *saelab_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message
 * length excluding the terminator. Empty after a successful call.
 */
uintptr_t saelab_last_error_message(char *buf, uintptr_t len);

/**
 * Loads a model checkpoint written by `saelab train-lm`.
 */
enum SaelabStatus saelab_lm_load(const char *path, struct SaelabLm **out);

void saelab_lm_free(struct SaelabLm *lm);

/**
 * Writes vocabulary size, hidden width, layer count and context length.
 * Any output pointer may be null.
 */
enum SaelabStatus saelab_lm_dims(const struct SaelabLm *lm,
                                 uintptr_t *vocab_size,
                                 uintptr_t *hidden_dim,
                                 uintptr_t *num_layers,
                                 uintptr_t *max_seq_len);

/**
 * Next-token distribution after `tokens` (`vocab_size` values).
 */
enum SaelabStatus saelab_lm_next_token(const struct SaelabLm *lm,
                                       const uint32_t *tokens,
                                       uintptr_t num_tokens,
                                       double *out,
                                       uintptr_t out_len);

/**
 * Residual stream at `tap` (0 = embeddings, `num_layers` = final), row-major
 * `num_tokens × hidden_dim`.
 */
enum SaelabStatus saelab_lm_residual(const struct SaelabLm *lm,
                                     const uint32_t *tokens,
                                     uintptr_t num_tokens,
                                     uintptr_t tap,
                                     double *out,
                                     uintptr_t out_len);

/**
 * Loads an autoencoder checkpoint written by `saelab train-sae`.
 */
enum SaelabStatus saelab_sae_load(const char *path, struct SaelabSae **out);

void saelab_sae_free(struct SaelabSae *sae);

enum SaelabStatus saelab_sae_dims(const struct SaelabSae *sae,
                                  uintptr_t *input_dim,
                                  uintptr_t *latent_dim);

/**
 * Sparse code of one residual vector (`latent_dim` values).
 */
enum SaelabStatus saelab_sae_encode(const struct SaelabSae *sae,
                                    const double *x,
                                    uintptr_t x_len,
                                    double *out,
                                    uintptr_t out_len);

/**
 * Reconstruction of one code (`input_dim` values).
 */
enum SaelabStatus saelab_sae_decode(const struct SaelabSae *sae,
                                    const double *z,
                                    uintptr_t z_len,
                                    double *out,
                                    uintptr_t out_len);

/**
 * Next-token distribution with `strength` times decoder column `feature`
 * added to every position of the stream at `tap`.
 */
enum SaelabStatus saelab_steered_next_token(const struct SaelabLm *lm,
                                            const struct SaelabSae *sae,
                                            const uint32_t *tokens,
                                            uintptr_t num_tokens,
                                            uintptr_t feature,
                                            double strength,
                                            uintptr_t tap,
                                            double *out,
                                            uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAELAB_H */
