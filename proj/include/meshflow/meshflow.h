/* meshflow C API.
 *
 * Every fallible call returns an mf_status; on failure mf_last_error() holds a
 * message for the calling thread until its next failing call. Objects are
 * opaque handles released with the matching *_free function. Strings returned
 * through char** are released with mf_string_free.
 *
 * Config documents are JSON text of the form {"synth": {...}, "train": {...}}
 * (see README); NULL selects the defaults. A non-negative `seed` overrides the
 * seeds in the config.
 */
#ifndef MESHFLOW_H
#define MESHFLOW_H

#include <stddef.h>
#include <stdint.h>

#if defined(MESHFLOW_BUILDING_LIBRARY)
#define MF_API __attribute__((visibility("default")))
#else
#define MF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mf_status {
  MF_OK = 0,
  MF_ERR_USAGE = 1,
  MF_ERR_DATA = 2,
  MF_ERR_NUMERIC = 3
} mf_status;

typedef struct mf_mesh mf_mesh;
typedef struct mf_image mf_image;
typedef struct mf_model mf_model;

/* Receives one progress line (no trailing newline). */
typedef void (*mf_log_fn)(const char* line, void* user);

MF_API const char* mf_version(void);
MF_API const char* mf_last_error(void);
MF_API void mf_string_free(char* s);

/* Resolved configuration as JSON (defaults merged with config_json). */
MF_API mf_status mf_config_resolve(const char* config_json, int64_t seed, char** out_json);

/* ---- meshes ---- */
MF_API mf_status mf_mesh_create(const double* xyz, size_t vertex_count, const uint32_t* facets, size_t facet_count,
                                mf_mesh** out);
MF_API mf_status mf_mesh_load_obj(const char* path, mf_mesh** out);
MF_API mf_status mf_mesh_save_obj(const mf_mesh* mesh, const char* path);
MF_API size_t mf_mesh_vertex_count(const mf_mesh* mesh);
MF_API size_t mf_mesh_facet_count(const mf_mesh* mesh);
/* Copies 3 * vertex_count doubles; capacity counts doubles. */
MF_API mf_status mf_mesh_vertices(const mf_mesh* mesh, double* out, size_t capacity);
/* Copies 3 * facet_count indices (0-based); capacity counts indices. */
MF_API mf_status mf_mesh_facets(const mf_mesh* mesh, uint32_t* out, size_t capacity);
/* Symmetric mean vertex-to-surface distance. */
MF_API mf_status mf_mesh_unsigned_distance(const mf_mesh* a, const mf_mesh* b, double* out);
MF_API void mf_mesh_free(mf_mesh* mesh);

/* ---- images ---- */
/* PGM (P5) or raw little-endian f64; sidecar may be NULL to search beside the image. */
MF_API mf_status mf_image_load(const char* path, const char* sidecar, mf_image** out);
MF_API mf_status mf_image_size(const mf_image* image, size_t* width, size_t* height);
MF_API void mf_image_free(mf_image* image);

/* ---- models ---- */
MF_API mf_status mf_model_create(const char* config_json, int64_t seed, size_t image_height, size_t image_width,
                                 mf_model** out);
MF_API mf_status mf_model_load(const char* path, mf_model** out);
MF_API mf_status mf_model_save(const mf_model* model, const char* path);
MF_API mf_status mf_model_infer(const mf_model* model, const mf_mesh* reference, const mf_image* image,
                                mf_mesh** out, double* seconds);
MF_API void mf_model_free(mf_model* model);

/* ---- pipeline ---- */
MF_API mf_status mf_generate_dataset(const char* config_json, int64_t seed, const char* out_dir);

/* Trains on every subject except the `holdout` ids and writes the checkpoint
 * and, when log_path is non-NULL, a per-step CSV log. */
MF_API mf_status mf_train(const char* dataset_dir, const char* config_json, int64_t seed, const int* holdout,
                          size_t holdout_count, const char* checkpoint_path, const char* log_path, mf_log_fn log,
                          void* user);

/* Evaluates on `subjects` (count 0: every subject the checkpoint was not
 * trained on). A NULL checkpoint evaluates the static reference baseline.
 * Writes per-frame CSV and summary JSON; summary_json may be NULL. */
MF_API mf_status mf_evaluate(const char* checkpoint_path, const char* dataset_dir, const int* subjects, size_t count,
                             const char* csv_path, const char* json_path, char** summary_json);

/* Subject-level k-fold cross-validation; writes folds.json, rows.csv and
 * summary.json into out_dir. */
MF_API mf_status mf_crossval(const char* dataset_dir, const char* config_json, int64_t seed, const char* out_dir,
                             mf_log_fn log, void* user, char** summary_json);

MF_API mf_status mf_export_viz(const mf_mesh* pred, const mf_mesh* truth, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* MESHFLOW_H */
