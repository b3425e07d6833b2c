/* C interface to the loramix metric and budget primitives.
 *
 * Conventions:
 *   - Every fallible function returns an LMX_* status code and writes its
 *     results through out-pointers; out-pointers are written only on LMX_OK.
 *   - Strings are NUL-terminated UTF-8. Strings returned by the library
 *     are owned by the caller and released with lmx_string_free().
 *   - Handles (lmx_bleu_t) are opaque; create/free in matched pairs.
 */

#ifndef LORAMIX_H
#define LORAMIX_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    LMX_OK = 0,
    LMX_ERR_DOMAIN = 1,    /* numeric argument outside the domain        */
    LMX_ERR_CONFIG = 2,    /* invalid configuration or unknown language  */
    LMX_ERR_DATA = 3,      /* malformed data                             */
    LMX_ERR_UNDEFINED = 4, /* metric undefined on this input             */
    LMX_ERR_UTF8 = 5,      /* string argument was not valid UTF-8        */
    LMX_ERR_NULL = 6       /* required pointer was NULL                  */
};

/* Version of the underlying crate; static storage, do not free. */
const char *lmx_version(void);

/* --- audio token budget ------------------------------------------------ */

/* Audio tokens produced from `frames` mel frames by the 8x subsampler. */
size_t lmx_subsampled_token_count(size_t frames);

/* Tokens consumed by `duration_s` seconds of audio at the 10 ms frame /
 * 80 ms token rate. `*out_fits` is 1 when they fit `context_tokens`
 * alongside `reserved_text`. Either out-pointer may be NULL to skip it. */
int lmx_audio_token_budget(double duration_s,
                           size_t context_tokens,
                           size_t reserved_text,
                           size_t *out_tokens,
                           int *out_fits);

/* Longest audio duration (seconds) whose tokens fit the context. */
double lmx_max_audio_duration_s(size_t context_tokens, size_t reserved_text);

/* Peak learning rate B * D^-0.32 for data size D (tokens). */
int lmx_peak_lr(double b, double d, double *out);

/* --- crop planning ------------------------------------------------------ */

typedef struct {
    size_t rows;
    size_t cols;
    size_t resize_h;
    size_t resize_w;
    int fallback_used; /* 1 when the aspect-preserving fallback grid ran */
} lmx_crop_plan_t;

/* Crop grid for an h x w image tiled into square crops of `crop_size`,
 * keeping at most `max_crops` tiles. */
int lmx_plan_crops(size_t h,
                   size_t w,
                   size_t crop_size,
                   size_t max_crops,
                   lmx_crop_plan_t *out);

/* --- error rates -------------------------------------------------------- */

/* Word error rate (edits / reference words) after text normalization. */
int lmx_wer(const char *hypothesis, const char *reference, double *out);

/* Character error rate over whitespace-stripped characters. */
int lmx_cer(const char *hypothesis, const char *reference, double *out);

/* WER, or CER when `lang` is ja/zh (any subtag spelling, e.g. "ja-JP"). */
int lmx_error_rate(const char *hypothesis,
                   const char *reference,
                   const char *lang,
                   double *out);

/* --- corpus BLEU -------------------------------------------------------- */

typedef struct lmx_bleu lmx_bleu_t;

/* New accumulator tokenizing by `lang`'s convention (character tokens for
 * ja/zh, mteval-13a otherwise). NULL `lang` means "en". Returns NULL on
 * invalid input. */
lmx_bleu_t *lmx_bleu_new(const char *lang);

/* Add one hypothesis/reference pair to the corpus. */
int lmx_bleu_push(lmx_bleu_t *acc, const char *hypothesis, const char *reference);

/* Corpus BLEU (0..100) over all pushed pairs. LMX_ERR_UNDEFINED when the
 * corpus is empty. */
int lmx_bleu_score(const lmx_bleu_t *acc, double *out);

/* Release an accumulator. NULL is a no-op. */
void lmx_bleu_free(lmx_bleu_t *acc);

/* --- chain-of-thought splitting ------------------------------------------ */

/* Translation side of a CoT "transcription <sep> translation" output: the
 * text after the marker, or the whole output when the marker is absent.
 * Returns a new string (release with lmx_string_free), NULL on invalid
 * input. */
char *lmx_cot_translation(const char *output);

/* Release a string returned by this library. NULL is a no-op. */
void lmx_string_free(char *s);

#ifdef __cplusplus
}
#endif

#endif /* LORAMIX_H */
