#ifndef SPLITLEAK_H
#define SPLITLEAK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_ARGUMENT = 2,
  SL_STATUS_SHAPE_MISMATCH = 3,
  SL_STATUS_NUMERIC = 4,
  SL_STATUS_IO = 5,
  SL_STATUS_CHECKPOINT = 6,
  SL_STATUS_BUFFER_TOO_SMALL = 7,
  SL_STATUS_PANIC = 8,
} SlStatus;

// Opaque model handle.
typedef struct SlModel SlModel;

// Model hyperparameters, mirrored field for field.
typedef struct SlModelConfig {
  size_t vocab_size;
  size_t hidden_dim;
  size_t num_blocks;
  size_t split_point;
  size_t num_heads;
  size_t ffn_dim;
  size_t max_seq_len;
  uint64_t seed;
} SlModelConfig;

// ActInv settings. `euclidean` selects the matching distance; projection
// uses the same distance.
typedef struct SlAttackConfig {
  size_t iterations;
  double lr;
  bool euclidean;
  size_t restarts;
} SlAttackConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *sl_last_error(void);

// Library version as a static NUL-terminated string.
const char *sl_version(void);

// Defaults used by the command-line tool.
struct SlModelConfig sl_model_config_default(void);

struct SlAttackConfig sl_attack_config_default(void);

// Randomly initialized model.
//
// # Safety
// `config` must be null or point to a valid config; `out` must be null or writable.
enum SlStatus sl_model_new(const struct SlModelConfig *config, struct SlModel **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SlStatus sl_model_load(const char *path, struct SlModel **out);

// Writes a checkpoint; `f32` selects compact 32-bit storage.
//
// # Safety
// `model` must come from this library; `path` must be a NUL-terminated string.
enum SlStatus sl_model_save(const struct SlModel *model, const char *path, bool f32);

// # Safety
// `model` must be null or a handle not yet freed.
void sl_model_free(struct SlModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum SlStatus sl_model_config(const struct SlModel *model, struct SlModelConfig *out);

// Client activations `h_Q1` of a prompt, `len * hidden_dim` values.
//
// # Safety
// `ids` must hold `len` values and `out` `out_len` values.
enum SlStatus sl_client_forward(const struct SlModel *model,
                                const size_t *ids,
                                size_t len,
                                double *out,
                                size_t out_len);

// Client activations of a prompt after a defense such as
// `"element-sparsify:0.5"` or `"pripert-l0:0.5"`.
//
// # Safety
// As for `sl_client_forward`; `spec` must be a NUL-terminated string.
enum SlStatus sl_defended_forward(const struct SlModel *model,
                                  const char *spec,
                                  const size_t *ids,
                                  size_t len,
                                  uint64_t seed,
                                  double *out,
                                  size_t out_len);

// ActInv on `rows` observed activation rows; writes `rows` token ids and,
// when `distance` is non-null, the final activation distance.
//
// # Safety
// `h` must hold `rows * hidden_dim` values and `out_ids` `rows` values.
enum SlStatus sl_actinv(const struct SlModel *model,
                        const double *h,
                        size_t rows,
                        const struct SlAttackConfig *config,
                        uint64_t seed,
                        size_t *out_ids,
                        double *distance);

// Monte Carlo PAF of a client layer such as `"block0.activation"` at the
// operating point of one prompt.
//
// # Safety
// `layer` must be a NUL-terminated string; `ids` must hold `len` values;
// `mean` and `max_paf` must be writable.
enum SlStatus sl_paf(const struct SlModel *model,
                     const char *layer,
                     const size_t *ids,
                     size_t len,
                     size_t draws,
                     uint64_t seed,
                     double *mean,
                     double *max_paf);

// ROUGE-L F1 in [0, 1].
//
// # Safety
// `recovered` and `truth` must hold `n` and `m` values; `out` must be writable.
enum SlStatus sl_rouge_l(const size_t *recovered,
                         size_t n,
                         const size_t *truth,
                         size_t m,
                         double *out);

// Bag-of-tokens precision and recall, in percent.
//
// # Safety
// As for `sl_rouge_l`.
enum SlStatus sl_precision_recall(const size_t *recovered,
                                  size_t n,
                                  const size_t *truth,
                                  size_t m,
                                  double *precision,
                                  double *recall);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SPLITLEAK_H */
