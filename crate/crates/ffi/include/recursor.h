#ifndef RECURSOR_H
#define RECURSOR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RecursorStatus {
  RECURSOR_STATUS_OK = 0,
  RECURSOR_STATUS_NULL_ARGUMENT = 1,
  RECURSOR_STATUS_INVALID_UTF8 = 2,
  RECURSOR_STATUS_INVALID_ARGUMENT = 3,
  RECURSOR_STATUS_IO = 4,
  RECURSOR_STATUS_NON_FINITE = 5,
  RECURSOR_STATUS_BUFFER_TOO_SMALL = 6,
  RECURSOR_STATUS_FAILED = 7,
  RECURSOR_STATUS_PANIC = 8,
} RecursorStatus;

/**
 * A loaded checkpoint. Create with [`recursor_model_load`], release with
 * [`recursor_model_free`].
 */
typedef struct RecursorModel RecursorModel;

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *recursor_last_error(void);

/**
 * Static name of a status code.
 */
const char *recursor_status_name(enum RecursorStatus status);

/**
 * Loads a checkpoint directory into `*out_model`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out_model` a valid pointer.
 */
enum RecursorStatus recursor_model_load(const char *dir, struct RecursorModel **out_model);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`recursor_model_load`] and not have been freed.
 */
void recursor_model_free(struct RecursorModel *model);

/**
 * Layer count, recursion count and vocabulary size.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum RecursorStatus recursor_model_info(const struct RecursorModel *model,
                                        size_t *out_n_layers,
                                        size_t *out_n_recursions,
                                        size_t *out_vocab);

/**
 * Generates up to `max_tokens` tokens after `prompt`. `policy` uses the
 * command-line syntax (`none`, `oracle`, `confidence:0.9`, `static:1`),
 * `sampler` likewise (`greedy`, `topk:k`, `nucleus:p`). Token ids and exit
 * depths go to `out_tokens` / `out_depths` (either may be null), each of
 * room `capacity`; `*out_len` receives the count. `out_depths[i]` is the
 * depth of the step that produced `out_tokens[i]`, the prompt pass being
 * full depth.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; strings nul-terminated.
 */
enum RecursorStatus recursor_decode(const struct RecursorModel *model,
                                    const char *policy,
                                    const char *sampler,
                                    uint64_t seed,
                                    const uint32_t *prompt,
                                    size_t prompt_len,
                                    size_t max_tokens,
                                    uint32_t *out_tokens,
                                    uint32_t *out_depths,
                                    size_t capacity,
                                    size_t *out_len);

/**
 * Runs one batching strategy (`vanilla`, `csb`, `cdb`) over a scenario
 * given as TOML text.
 *
 * # Safety
 * Strings must be nul-terminated; out pointers valid.
 */
enum RecursorStatus recursor_simulate(const char *scenario_toml,
                                      const char *strategy,
                                      double *out_finish,
                                      size_t *out_tokens);

/**
 * Forward FLOPs per token and non-embedding parameters for a run config
 * given as TOML text, at sequence length `seq_len`.
 *
 * # Safety
 * `config_toml` must be nul-terminated; out pointers valid.
 */
enum RecursorStatus recursor_flops(const char *config_toml,
                                   size_t seq_len,
                                   double *out_flops_per_token,
                                   uint64_t *out_non_embedding_params);

#endif  /* RECURSOR_H */
