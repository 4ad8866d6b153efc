#ifndef GIST_GIST_H
#define GIST_GIST_H

/* C interface to the GIST library.
 *
 * Every fallible function returns a gist_status. On failure a description is
 * available from gist_last_error() on the same thread until the next call.
 * Strings returned through char** out-parameters are owned by the caller and
 * released with gist_string_free(). Matrices are dense row-major doubles.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(GIST_BUILDING_LIBRARY)
#    define GIST_API __declspec(dllexport)
#  else
#    define GIST_API __declspec(dllimport)
#  endif
#else
#  define GIST_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gist_status {
  GIST_OK = 0,
  GIST_E_INVALID_ARGUMENT = 1,
  GIST_E_PARSE = 2,
  GIST_E_IO = 3,
  GIST_E_NOT_FOUND = 4,
  GIST_E_DIMENSION_MISMATCH = 5,
  GIST_E_PRECONDITION = 6,
  GIST_E_PROVIDER = 7,
  GIST_E_NUMERIC = 8,
  GIST_E_CONFIG = 9,
  GIST_E_STAGE = 10,
  GIST_E_CONFLICT = 11,
  GIST_E_INTERNAL = 12
} gist_status;

GIST_API const char* gist_version(void);
GIST_API const char* gist_status_name(gist_status status);
/* Message for the last failure on this thread; "" when none. */
GIST_API const char* gist_last_error(void);
GIST_API void gist_string_free(char* s);

/* Warnings (clamped batch sizes, truncated texts, corrupted sidecars) go to
 * stderr unless a handler is installed. Pass NULL to restore stderr. */
typedef void (*gist_warning_fn)(const char* message, void* user);
GIST_API void gist_set_warning_handler(gist_warning_fn fn, void* user);

/* ---- dataset manifests --------------------------------------------------- */

typedef struct gist_manifest gist_manifest;

typedef enum gist_split { GIST_SPLIT_TRAIN = 0, GIST_SPLIT_VAL = 1, GIST_SPLIT_TEST = 2, GIST_SPLIT_ALL = 3 } gist_split;

GIST_API gist_status gist_manifest_load(const char* path, gist_manifest** out);
GIST_API gist_status gist_manifest_parse(const char* text, const char* base_dir, gist_manifest** out);
GIST_API void gist_manifest_free(gist_manifest* manifest);
GIST_API gist_status gist_manifest_save(const gist_manifest* manifest, const char* path);
GIST_API gist_status gist_manifest_count(const gist_manifest* manifest, gist_split split, size_t* out);
GIST_API gist_status gist_manifest_class_count(const gist_manifest* manifest, size_t* out);
GIST_API gist_status gist_manifest_class_name(const gist_manifest* manifest, size_t index, char** out);
/* Serialized manifest (header line + one JSON record per line). */
GIST_API gist_status gist_manifest_to_jsonl(const gist_manifest* manifest, char** out);
GIST_API gist_status gist_manifest_kshot(const gist_manifest* manifest, size_t k, uint64_t seed, int clamp,
                                         gist_manifest** out);

/* ---- embedding backends -------------------------------------------------- */

typedef struct gist_backend gist_backend;

/* spec_json: a model id string ("synthetic-16") or a backend object, see the
 * README. cache_root may be NULL for an uncached backend. */
GIST_API gist_status gist_backend_create(const char* spec_json, const char* cache_root, gist_backend** out);
/* Applies projection heads saved by fine-tuning on top of `base`. */
GIST_API gist_status gist_backend_with_heads(const gist_backend* base, const char* heads_path, gist_backend** out);
GIST_API void gist_backend_free(gist_backend* backend);
GIST_API gist_status gist_backend_dim(const gist_backend* backend, size_t* out);
GIST_API gist_status gist_backend_model_id(const gist_backend* backend, char** out);
/* out receives count x dim values (unnormalized). */
GIST_API gist_status gist_backend_encode_texts(const gist_backend* backend, const char* const* texts, size_t count,
                                               double* out);
/* Encodes the images of `split` in manifest order. out must hold
 * count(split) x dim values. */
GIST_API gist_status gist_backend_encode_manifest(const gist_backend* backend, const gist_manifest* manifest,
                                                  gist_split split, double* out);

/* ---- caption stores ------------------------------------------------------ */

typedef struct gist_caption_store gist_caption_store;

GIST_API gist_status gist_captions_load(const char* path, gist_caption_store** out);
GIST_API void gist_captions_free(gist_caption_store* store);
GIST_API gist_status gist_captions_save(const gist_caption_store* store, const char* path);
GIST_API gist_status gist_captions_count(const gist_caption_store* store, size_t* out);
/* Drops captions with a "discard" verdict in the sidecar. */
GIST_API gist_status gist_captions_apply_verdicts(gist_caption_store* store, const char* sidecar_path);

typedef enum gist_review_action { GIST_REVIEW_KEEP = 0, GIST_REVIEW_DISCARD = 1, GIST_REVIEW_QUIT = 2 } gist_review_action;

typedef gist_review_action (*gist_review_fn)(const char* caption_id, const char* label, const char* text,
                                             size_t index, size_t total, void* user);

/* Asks `decide` about every caption without a recorded verdict and appends
 * each answer to the sidecar immediately. progress_json (optional) receives
 * {"reviewed", "already_done", "remaining", "quit"}. */
GIST_API gist_status gist_review_captions(const gist_caption_store* store, const char* sidecar_path,
                                          gist_review_fn decide, void* user, char** progress_json);

/* ---- numerics ------------------------------------------------------------ */

GIST_API gist_status gist_l2_normalize(const double* in, size_t dim, double* out);
GIST_API gist_status gist_cosine_similarity(const double* a, const double* b, size_t dim, double* out);

/* Symmetric contrastive loss (sum over the batch) for B x d unit-norm rows.
 * Gradient outputs may be NULL. */
GIST_API gist_status gist_contrastive_loss(const double* image, const double* text, size_t batch, size_t dim,
                                           double logit_scale, double* loss, double* grad_image, double* grad_text,
                                           double* grad_logit_scale);

/* Top-n of `count` candidate rows by cosine similarity to `image`; ties go to
 * the lexicographically smaller id. Writes min(n, count) entries. */
GIST_API gist_status gist_match_top_n(const double* image, size_t dim, const double* candidates,
                                      const char* const* candidate_ids, size_t count, size_t n, size_t* out_indices,
                                      double* out_scores, size_t* out_count);

GIST_API gist_status gist_topk_accuracy(const double* scores, size_t rows, size_t classes, const int* labels,
                                        size_t k, double* out);
GIST_API gist_status gist_bootstrap_accuracy(const double* scores, size_t rows, size_t classes, const int* labels,
                                             size_t k, size_t resamples, uint64_t seed, size_t threads, double* mean,
                                             double* std_dev);
/* population != 0 selects the population std instead of the sample std. */
GIST_API gist_status gist_aggregate_kshot(const double* accuracies, size_t count, size_t expected_runs,
                                          int population, double* mean, double* std_dev);
/* "mean (std)" with two decimals. Needs buf_len >= required length + 1. */
GIST_API gist_status gist_format_cell(double mean, double std_dev, char* buf, size_t buf_len);

/* ---- file-level commands ------------------------------------------------- */

/* Runs a named command with JSON options and returns a JSON result. See the
 * README for the command list and their options. */
GIST_API gist_status gist_command(const char* name, const char* options_json, char** result_json);

/* Called after each pipeline stage with stage, setting and cache status. */
typedef void (*gist_stage_fn)(const char* stage, const char* setting, int cache_hit, void* user);

/* Runs a full experiment from a config file. report_json receives the report. */
GIST_API gist_status gist_run_pipeline(const char* config_path, gist_stage_fn on_stage, void* user,
                                       char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* GIST_GIST_H */
