#ifndef NEURAL_ASSISTANT_H
#define NEURAL_ASSISTANT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum NaStatus {
  NA_STATUS_OK = 0,
  NA_STATUS_NULL_ARGUMENT = 1,
  NA_STATUS_INVALID_UTF8 = 2,
  NA_STATUS_IO = 3,
  NA_STATUS_CHECKPOINT = 4,
  NA_STATUS_INVALID_ARGUMENT = 5,
  NA_STATUS_DECODE = 6,
  NA_STATUS_PANIC = 7,
} NaStatus;

/**
 * Loaded checkpoint, vocabulary, and KB.
 */
typedef struct NaModel NaModel;

/**
 * One conversation bound to a model.
 */
typedef struct NaSession NaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *na_last_error_message(void);

/**
 * Loads a checkpoint and an optional KB file (`kb` may be null).
 *
 * # Safety
 * `checkpoint` and a non-null `kb` must be NUL-terminated strings;
 * `out` must be a valid pointer.
 */
enum NaStatus na_model_load(const char *checkpoint, const char *kb, struct NaModel **out);

/**
 * # Safety
 * `model` must come from [`na_model_load`] and not be freed twice.
 * Sessions created from it remain usable.
 */
void na_model_free(struct NaModel *model);

/**
 * Starts a session with greedy decoding and the model's training KB mode.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum NaStatus na_session_new(const struct NaModel *model, uint64_t kb_seed, struct NaSession **out);

/**
 * # Safety
 * `session` must come from [`na_session_new`] and not be freed twice.
 */
void na_session_free(struct NaSession *session);

/**
 * Sends one user message. On success `*response` holds the reply text and
 * `*action` the generated action string, or null when there is none.
 *
 * # Safety
 * `session` must be a live handle used by one thread at a time; `text`
 * a NUL-terminated string; `response` and `action` valid pointers.
 */
enum NaStatus na_session_respond(struct NaSession *session,
                                 const char *text,
                                 char **response,
                                 char **action);

/**
 * Number of turns in the session transcript.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum NaStatus na_session_turn_count(const struct NaSession *session, size_t *out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void na_string_free(char *s);

/**
 * Corpus BLEU-4 (0 to 100) of `n` aligned reference/hypothesis strings.
 *
 * # Safety
 * `references` and `hypotheses` must each point to `n` NUL-terminated
 * strings; `out` must be a valid pointer.
 */
enum NaStatus na_bleu(const char *const *references,
                      const char *const *hypotheses,
                      size_t n,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEURAL_ASSISTANT_H */
