#ifndef SEQKD_H
#define SEQKD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeqkdStatus {
  SEQKD_STATUS_OK = 0,
  SEQKD_STATUS_NULL_POINTER = 1,
  SEQKD_STATUS_INVALID_UTF8 = 2,
  SEQKD_STATUS_INVALID_ARGUMENT = 3,
  SEQKD_STATUS_CONFIG = 4,
  SEQKD_STATUS_SHAPE = 5,
  SEQKD_STATUS_TOKEN_OUT_OF_RANGE = 6,
  SEQKD_STATUS_LENGTH_OVERFLOW = 7,
  SEQKD_STATUS_IO = 8,
  SEQKD_STATUS_PARSE = 9,
  SEQKD_STATUS_CHECKPOINT = 10,
  SEQKD_STATUS_NON_FINITE = 11,
  SEQKD_STATUS_BUFFER_TOO_SMALL = 12,
  SEQKD_STATUS_PANIC = 13,
  SEQKD_STATUS_OTHER = 14,
} SeqkdStatus;

typedef enum SeqkdOpKind {
  SEQKD_OP_KIND_MATCH = 0,
  SEQKD_OP_KIND_REPLACE = 1,
  SEQKD_OP_KIND_INSERT = 2,
  SEQKD_OP_KIND_DELETE = 3,
} SeqkdOpKind;

/**
 * Opaque model handle.
 */
typedef struct SeqkdModel SeqkdModel;

/**
 * One alignment step; absent sides are -1.
 */
typedef struct SeqkdAlignOp {
  enum SeqkdOpKind kind;
  int64_t teacher_index;
  int64_t student_index;
  bool is_prefix_match;
} SeqkdAlignOp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty if none). Valid
 * until the next failing call on the same thread.
 */
const char *seqkd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *seqkd_version(void);

/**
 * Creates a randomly initialized model. A decoder-only model ignores
 * `encoder_layers`.
 */
enum SeqkdStatus seqkd_model_new(size_t encoder_layers,
                                 size_t decoder_layers,
                                 size_t d_model,
                                 size_t heads,
                                 size_t vocab_size,
                                 size_t max_len,
                                 bool decoder_only,
                                 uint64_t seed,
                                 struct SeqkdModel **out);

enum SeqkdStatus seqkd_model_load(const char *path_utf8, struct SeqkdModel **out);

enum SeqkdStatus seqkd_model_save(const struct SeqkdModel *model, const char *path_utf8);

/**
 * Releases a handle; NULL is ignored.
 */
void seqkd_model_free(struct SeqkdModel *model);

enum SeqkdStatus seqkd_model_num_parameters(const struct SeqkdModel *model, size_t *out);

enum SeqkdStatus seqkd_model_vocab_size(const struct SeqkdModel *model, size_t *out);

/**
 * Teacher-forced logits for one example, `target_len * vocab_size` values in
 * row-major order (inference mode, no dropout).
 */
enum SeqkdStatus seqkd_forward_logits(const struct SeqkdModel *model,
                                      const uint32_t *source,
                                      size_t source_len,
                                      const uint32_t *target,
                                      size_t target_len,
                                      double *out,
                                      size_t cap,
                                      size_t *out_len);

/**
 * Greedy decoding; the output ends with EOS unless `max_len` was reached.
 */
enum SeqkdStatus seqkd_greedy(const struct SeqkdModel *model,
                              const uint32_t *source,
                              size_t source_len,
                              size_t max_len,
                              uint32_t *out,
                              size_t cap,
                              size_t *out_len);

/**
 * Best beam and its total log-probability.
 */
enum SeqkdStatus seqkd_beam_search(const struct SeqkdModel *model,
                                   const uint32_t *source,
                                   size_t source_len,
                                   size_t beam_k,
                                   size_t max_len,
                                   uint32_t *out,
                                   size_t cap,
                                   size_t *out_len,
                                   double *out_logprob);

/**
 * Attention cost in cell units: m²E + n(m+n)D for encoder-decoders,
 * m²D + n(m+n)D for decoder-only models.
 */
uint64_t seqkd_theoretical_cost(size_t encoder_layers,
                                size_t decoder_layers,
                                bool decoder_only,
                                uint64_t m,
                                uint64_t n);

/**
 * Corpus BLEU in [0, 1] over one hypothesis/reference pair.
 */
enum SeqkdStatus seqkd_bleu(const uint32_t *hyp,
                            size_t hyp_len,
                            const uint32_t *reference,
                            size_t ref_len,
                            double *out);

/**
 * `(kd - s) / (t - s)`; for `lower_is_better` metrics all three are negated first.
 */
enum SeqkdStatus seqkd_gap_closure(double s,
                                   double t,
                                   double kd,
                                   bool lower_is_better,
                                   double *out);

/**
 * Needleman-Wunsch alignment of two token-string sequences with the default
 * scoring (exact 2, prefix 1, mismatch -1, gap -1).
 */
enum SeqkdStatus seqkd_nw_align(const char *const *teacher,
                                size_t teacher_len,
                                const char *const *student,
                                size_t student_len,
                                struct SeqkdAlignOp *out,
                                size_t cap,
                                size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQKD_H */
