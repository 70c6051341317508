#ifndef PHONOLM_H
#define PHONOLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Tokenizer mode for [`phonolm_vocab_encode`].
 */
typedef enum PhonolmMode {
  PHONOLM_MODE_WORD = 0,
  PHONOLM_MODE_PHONEME = 1,
} PhonolmMode;

/**
 * Result of a call. Codes 3-8 match the command-line tool's exit codes.
 */
typedef enum PhonolmStatus {
  PHONOLM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PHONOLM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PHONOLM_STATUS_INVALID_UTF8 = 2,
  PHONOLM_STATUS_IO = 3,
  PHONOLM_STATUS_PARSE = 4,
  PHONOLM_STATUS_CONFIG = 5,
  PHONOLM_STATUS_INPUT = 6,
  PHONOLM_STATUS_NON_FINITE = 7,
  PHONOLM_STATUS_CHECKPOINT = 8,
  /**
   * The output buffer is too small; the required length was written.
   */
  PHONOLM_STATUS_BUFFER_TOO_SMALL = 9,
  /**
   * An internal panic was caught at the boundary.
   */
  PHONOLM_STATUS_PANIC = 10,
} PhonolmStatus;

/**
 * Fine-tuned checkpoint bundled with its vocabulary and lexicon.
 */
typedef struct PhonolmClassifier PhonolmClassifier;

/**
 * Joint word + phoneme vocabulary.
 */
typedef struct PhonolmVocab PhonolmVocab;

/**
 * Message describing the last failed call on this thread, or NULL after a
 * successful one. Valid until the next call into this library.
 */
const char *phonolm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *phonolm_version(void);

/**
 * Loads a vocabulary JSON file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PhonolmStatus phonolm_vocab_load(const char *path, struct PhonolmVocab **out);

/**
 * Releases a vocabulary. NULL is ignored.
 *
 * # Safety
 * `vocab` must come from [`phonolm_vocab_load`] and not have been freed.
 */
void phonolm_vocab_free(struct PhonolmVocab *vocab);

/**
 * Number of token ids, special tokens included. 0 for NULL.
 *
 * # Safety
 * `vocab` must be NULL or a live handle.
 */
size_t phonolm_vocab_size(const struct PhonolmVocab *vocab);

/**
 * Encodes `text` into `ids[0..capacity]` and writes the token count to
 * `*len`. When `capacity` is too small nothing is written to `ids`, `*len`
 * holds the required length and the status is `BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `vocab` must be a live handle, `text` NUL-terminated, `len` writable and
 * `ids` valid for `capacity` writes (it may be NULL when `capacity` is 0).
 */
enum PhonolmStatus phonolm_vocab_encode(const struct PhonolmVocab *vocab,
                                        const char *text,
                                        enum PhonolmMode mode,
                                        uint32_t *ids,
                                        size_t capacity,
                                        size_t *len);

/**
 * Word error rate of `hypothesis` against a non-empty `reference`.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` writable.
 */
enum PhonolmStatus phonolm_compute_wer(const char *reference, const char *hypothesis, double *out);

/**
 * Loads a fine-tuned checkpoint with its vocabulary. `lexicon_path` may be
 * NULL to use the built-in pronunciation lexicon.
 *
 * # Safety
 * Path arguments must be NUL-terminated (or NULL where allowed) and `out`
 * writable.
 */
enum PhonolmStatus phonolm_classifier_load(const char *checkpoint_path,
                                           const char *vocab_path,
                                           const char *lexicon_path,
                                           struct PhonolmClassifier **out);

/**
 * Releases a classifier. NULL is ignored.
 *
 * # Safety
 * `classifier` must come from [`phonolm_classifier_load`] and not have been freed.
 */
void phonolm_classifier_free(struct PhonolmClassifier *classifier);

/**
 * Number of output classes. 0 for NULL.
 *
 * # Safety
 * `classifier` must be NULL or a live handle.
 */
size_t phonolm_classifier_num_classes(const struct PhonolmClassifier *classifier);

/**
 * Predicts the class of one utterance. `transcript` is the (ASR) word
 * sequence; `phonemes` is a space-separated ARPAbet sequence, or NULL to
 * derive it from the transcript with the lexicon when the checkpoint's run
 * allows that.
 *
 * # Safety
 * `classifier` must be a live handle, strings NUL-terminated (or NULL where
 * allowed) and `label` writable.
 */
enum PhonolmStatus phonolm_classifier_predict(const struct PhonolmClassifier *classifier,
                                              const char *transcript,
                                              const char *phonemes,
                                              uint32_t *label);

#endif  /* PHONOLM_H */
