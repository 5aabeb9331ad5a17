#ifndef CALCQUANT_H
#define CALCQUANT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CQ_API __declspec(dllexport)
#else
#define CQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every call returns a status. On failure the message is available from
 * cq_last_error() on the calling thread until its next failing call.
 * Strings and buffers handed out through out-parameters are owned by the
 * caller and released with cq_free. Options are JSON objects (NULL or ""
 * means defaults); reports come back as JSON text. */
typedef enum cq_status {
    CQ_OK = 0,
    CQ_ERR_INVALID_ARGUMENT = 1,
    CQ_ERR_IO = 2,
    CQ_ERR_FORMAT = 3,
    CQ_ERR_DOMAIN = 4,
    CQ_ERR_NUMERIC = 5,
    CQ_ERR_STATE = 6,
    CQ_ERR_NOT_FOUND = 7,
    CQ_ERR_INTERNAL = 99
} cq_status;

CQ_API const char* cq_version(void);
CQ_API const char* cq_status_name(cq_status status);
CQ_API const char* cq_last_error(void);
CQ_API void cq_free(void* p);

/* Grids (volume, probability map or mask). */
typedef struct cq_grid cq_grid;

CQ_API cq_status cq_grid_read(const char* path, cq_grid** out);
CQ_API cq_status cq_grid_write(const cq_grid* grid, const char* path);
CQ_API void cq_grid_free(cq_grid* grid);
/* {"kind", "dims", "spacing", "origin", "voxel_volume_mm3"} plus
 * "foreground" and "volume_mm3" for masks. */
CQ_API cq_status cq_grid_describe(const cq_grid* grid, char** json);

/* Pipeline. */
/* Writes image.vgf, truth.vgf, manual.vgf, automated.vgf and member_<k>.vgf;
 * options: seed, dims, spacing, calcifications, members, noise_hu. */
CQ_API cq_status cq_phantom_write(const char* options_json, const char* out_dir, char** report_json);
/* Optional recentering, registration to the configured reference, resampling
 * to the canonical grid, optional smoothing (written to "smoothed_out").
 * options: recenter, smooth_sigma, smoothed_out, failure_threshold_hu, seed. */
CQ_API cq_status cq_preprocess(const char* image_path, const char* config_path, const char* options_json,
                               const char* out_path, char** report_json);
/* Mean of the member maps, thresholded inside the HU candidate mask.
 * options: threshold, hu_threshold, smoothed_image, fused_out. */
CQ_API cq_status cq_fuse(const char* const* member_paths, size_t member_count, const char* image_path,
                         const char* options_json, const char* out_path, char** report_json);

/* Evaluation. */
/* Segmentation metrics and PRC/FROC sweep over a CSV with columns
 * scan_id, image, probability, reference. options: threshold, hu_threshold,
 * curve_points. The curve CSV may be NULL when not wanted. */
CQ_API cq_status cq_eval_segmentation(const char* scans_csv_path, const char* options_json, char** report_json,
                                      char** curve_csv);
/* ICC(2,1), Spearman and Bland-Altman with bootstrap CIs from CSV text with
 * columns id, manual_mm3, auto_mm3. options: replications, seed, jobs. */
CQ_API cq_status cq_eval_agreement(const char* pairs_csv, const char* options_json, char** report_json);
/* Wilcoxon signed-rank from CSV text with columns region_id, grade. */
CQ_API cq_status cq_eval_wilcoxon(const char* grades_csv, char** report_json);
/* Same, from counts of grades +2, +1, 0, -1, -2. */
CQ_API cq_status cq_eval_wilcoxon_counts(const size_t counts[5], char** report_json);

/* Lesions. */
CQ_API cq_status cq_lesions_extract(const char* participant_id, const char* image_path, const char* manual_path,
                                    const char* automated_path, int connectivity, char** lesion_csv);
/* Volume-adjusted percentile bins and the 2D volume-fraction histogram of a
 * lesion table. options: source, class, percentiles. */
CQ_API cq_status cq_lesions_histogram(const char* lesion_csv, const char* options_json, char** report_json);

/* Survival. */
/* options: exposure, mode (presence|volume_per_sd), ties, adjust,
 * bootstrap (replications), seed, jobs, compare (second exposure). */
CQ_API cq_status cq_cox_fit(const char* cohort_csv_path, const char* options_json, char** report_json);
/* Exclusion or inclusion HR grid. options: grid (exclusion|inclusion),
 * source, percentiles, mode, ties, replications, seed, jobs,
 * exclude_either, bootstrap. */
CQ_API cq_status cq_cox_grid(const char* cohort_csv_path, const char* lesion_csv_path, const char* options_json,
                             char** report_json);

/* Loss demonstration: toy logistic fit trace as CSV plus a JSON summary.
 * options: loss, patches, steps, learning_rate, seed. */
CQ_API cq_status cq_losses_demo(const char* options_json, char** trace_csv, char** report_json);

/* Reader study. */
typedef struct cq_session cq_session;

/* Samples regions from a CSV with columns participant_id, image, manual,
 * automated and writes a new session directory. */
CQ_API cq_status cq_session_create(const char* dir, const char* scans_csv_path, size_t regions, uint64_t seed,
                                   char** report_json);
CQ_API cq_status cq_session_open(const char* dir, cq_session** out);
CQ_API void cq_session_free(cq_session* session);
/* Routes one request through the grading API without a socket. The body is
 * binary for PNG frames, hence the explicit length. */
CQ_API cq_status cq_session_request(cq_session* session, const char* method, const char* path,
                                    const char* query_string, const char* body, int is_local, int* http_status,
                                    char** content_type, char** response_body, size_t* response_length);
/* Unblinded summary; needs the session's key file. */
CQ_API cq_status cq_session_summary(cq_session* session, char** report_json);
/* Serves the grading API until the process ends. static_dir may be NULL.
 * When ready_fd >= 0 the bound port is written to it as a decimal line. */
CQ_API cq_status cq_session_serve(cq_session* session, const char* host, int port, const char* static_dir,
                                  int ready_fd);

#ifdef __cplusplus
}
#endif

#endif
