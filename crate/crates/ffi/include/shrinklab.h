#ifndef SHRINKLAB_H
#define SHRINKLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ShrinklabStatus {
  SHRINKLAB_STATUS_OK = 0,
  SHRINKLAB_STATUS_NULL_POINTER = 1,
  SHRINKLAB_STATUS_INVALID_ARGUMENT = 2,
  SHRINKLAB_STATUS_CONFIG = 3,
  SHRINKLAB_STATUS_TRAINING_FAULT = 4,
  SHRINKLAB_STATUS_NUMERIC = 5,
  SHRINKLAB_STATUS_BUFFER_TOO_SMALL = 6,
  SHRINKLAB_STATUS_INTERNAL = 7,
} ShrinklabStatus;

typedef struct ShrinklabCodebook ShrinklabCodebook;

// Standardized mixture sample with its component means.
typedef struct ShrinklabDataset ShrinklabDataset;

// Trained VQ model together with the config and data it was trained on.
typedef struct ShrinklabModel ShrinklabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *shrinklab_last_error_message(void);

// Samples a standardized Gaussian mixture with means on the diagonal.
enum ShrinklabStatus shrinklab_dataset_generate(size_t num_components,
                                                size_t points_per_component,
                                                size_t dim,
                                                double separation,
                                                double std,
                                                uint64_t seed,
                                                struct ShrinklabDataset **out_dataset);

enum ShrinklabStatus shrinklab_dataset_shape(const struct ShrinklabDataset *dataset,
                                             size_t *out_rows,
                                             size_t *out_cols);

// Copies the points (rows × cols) into `out_points`.
enum ShrinklabStatus shrinklab_dataset_points(const struct ShrinklabDataset *dataset,
                                              double *out_points,
                                              size_t len);

// Copies the component label of every point into `out_labels`.
enum ShrinklabStatus shrinklab_dataset_labels(const struct ShrinklabDataset *dataset,
                                              size_t *out_labels,
                                              size_t len);

// Copies the standardized component means (components × cols) into `out_means`.
enum ShrinklabStatus shrinklab_dataset_means(const struct ShrinklabDataset *dataset,
                                             double *out_means,
                                             size_t len);

void shrinklab_dataset_free(struct ShrinklabDataset *dataset);

// Codebook from explicit tokens.
enum ShrinklabStatus shrinklab_codebook_new(const double *tokens,
                                            size_t size,
                                            size_t dim,
                                            double decay,
                                            double beta,
                                            struct ShrinklabCodebook **out_codebook);

// Codebook of `size` k-means centers of `points`, with k-means++ seeding and
// the lowest-objective of `restarts` runs.
enum ShrinklabStatus shrinklab_codebook_kmeans(const double *points,
                                               size_t rows,
                                               size_t dim,
                                               size_t size,
                                               size_t restarts,
                                               uint64_t seed,
                                               struct ShrinklabCodebook **out_codebook);

enum ShrinklabStatus shrinklab_codebook_shape(const struct ShrinklabCodebook *codebook,
                                              size_t *out_size,
                                              size_t *out_dim);

// Copies the tokens (size × dim) into `out_tokens`.
enum ShrinklabStatus shrinklab_codebook_tokens(const struct ShrinklabCodebook *codebook,
                                               double *out_tokens,
                                               size_t len);

// Nearest token of every row of `z`; ties go to the lowest index.
enum ShrinklabStatus shrinklab_codebook_assign(const struct ShrinklabCodebook *codebook,
                                               const double *z,
                                               size_t rows,
                                               size_t dim,
                                               size_t *out_indices);

void shrinklab_codebook_free(struct ShrinklabCodebook *codebook);

// exp of the entropy of the normalized usage counts.
enum ShrinklabStatus shrinklab_perplexity(const uint64_t *counts, size_t len, double *out_value);

enum ShrinklabStatus shrinklab_mean_pairwise_distance(const double *tokens,
                                                      size_t size,
                                                      size_t dim,
                                                      double *out_value);

// Fréchet distance between Gaussians fitted to two point sets of equal width.
// `out_degenerate` reports a near-singular covariance product.
enum ShrinklabStatus shrinklab_frechet_distance(const double *a,
                                                size_t a_rows,
                                                const double *b,
                                                size_t b_rows,
                                                size_t dim,
                                                double *out_distance,
                                                bool *out_degenerate);

// Shannon entropy (nats) of a probability vector.
enum ShrinklabStatus shrinklab_mode_entropy(const double *p, size_t len, double *out_value);

// Trains a VQ regime (`baseline_vq` or `deferred_vq`) from a TOML config.
enum ShrinklabStatus shrinklab_model_train(const char *config_toml,
                                           struct ShrinklabModel **out_model);

// Copy of the trained codebook as a new handle.
enum ShrinklabStatus shrinklab_model_codebook(const struct ShrinklabModel *model,
                                              struct ShrinklabCodebook **out_codebook);

// Writes the diagnostics report as NUL-terminated JSON. `out_len` receives the
// byte length without the terminator; with a short buffer the call fails with
// `BUFFER_TOO_SMALL` and still sets `out_len`.
enum ShrinklabStatus shrinklab_model_diagnose_json(const struct ShrinklabModel *model,
                                                   char *buffer,
                                                   size_t capacity,
                                                   size_t *out_len);

void shrinklab_model_free(struct ShrinklabModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHRINKLAB_H */
