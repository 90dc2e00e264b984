#ifndef DPSCT_H
#define DPSCT_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum DpsctStatus {
  DPSCT_STATUS_OK = 0,
  DPSCT_STATUS_NULL_POINTER = 1,
  DPSCT_STATUS_INVALID_ARGUMENT = 2,
  DPSCT_STATUS_SHAPE_MISMATCH = 3,
  DPSCT_STATUS_NON_FINITE = 4,
  DPSCT_STATUS_DIVERGED = 5,
  DPSCT_STATUS_NOT_CONVERGED = 6,
  DPSCT_STATUS_FORMAT = 7,
  DPSCT_STATUS_IO = 8,
  DPSCT_STATUS_UNSUPPORTED = 9,
  DPSCT_STATUS_PANIC = 10,
} DpsctStatus;

// Scenario configuration.
typedef struct DpsctConfig DpsctConfig;

// Ensemble of reconstructions of one measurement.
typedef struct DpsctEnsemble DpsctEnsemble;

// Attenuation image in mm⁻¹.
typedef struct DpsctImage DpsctImage;

// Measured counts with their forward model.
typedef struct DpsctMeasurement DpsctMeasurement;

// Ensemble summary. Needs a truth image and at least two runs.
typedef struct DpsctSummary {
  double std;
  double bias;
  double psnr;
  double ssim;
} DpsctSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. Valid
// until the next failing call on the same thread.
const char *dpsct_last_error(void);

// Library version as a static NUL-terminated string.
const char *dpsct_version(void);

// Built-in preset, `"low-mas"` or `"sparse"`.
//
// # Safety
// `name` must be a NUL-terminated string; `out_cfg` must be writable.
enum DpsctStatus dpsct_config_preset(const char *name, struct DpsctConfig **out_cfg);

// Parses TOML config text layered over the preset it names.
//
// # Safety
// `text` must be a NUL-terminated string; `out_cfg` must be writable.
enum DpsctStatus dpsct_config_from_toml(const char *text, struct DpsctConfig **out_cfg);

// Sets the output directory used by file-writing operations.
//
// # Safety
// `cfg` must be a live handle; `dir` a NUL-terminated string.
enum DpsctStatus dpsct_config_set_output_dir(struct DpsctConfig *cfg, const char *dir);

// Overrides the sampler's mode (`"baseline"`/`"stable"`), `T′`, `η`,
// subset count, seed and ensemble size.
//
// # Safety
// `cfg` must be a live handle; `mode` a NUL-terminated string.
enum DpsctStatus dpsct_config_set_sampler(struct DpsctConfig *cfg,
                                          const char *mode,
                                          size_t t_prime,
                                          double eta,
                                          size_t n_subsets,
                                          uint64_t seed,
                                          size_t n_runs);

// # Safety
// `cfg` must be null or a handle not yet freed.
void dpsct_config_free(struct DpsctConfig *cfg);

// Rasterizes the configured phantom and simulates a measurement in memory.
// `out_truth` may be null.
//
// # Safety
// `cfg` must be a live handle; `out_measurement` writable.
enum DpsctStatus dpsct_simulate(const struct DpsctConfig *cfg,
                                struct DpsctMeasurement **out_measurement,
                                struct DpsctImage **out_truth);

// Reads a measurement file, attaching the config's grid and detector.
//
// # Safety
// `cfg` must be a live handle; `path` a NUL-terminated string.
enum DpsctStatus dpsct_measurement_load(const struct DpsctConfig *cfg,
                                        const char *path,
                                        struct DpsctMeasurement **out_measurement);

// # Safety
// `m` must be a live handle; `path` a NUL-terminated string.
enum DpsctStatus dpsct_measurement_save(const struct DpsctMeasurement *m, const char *path);

// Number of readings, `views · bins`.
//
// # Safety
// `m` must be a live handle.
size_t dpsct_measurement_len(const struct DpsctMeasurement *m);

// Copies the counts into `buf`, which must hold `len` values.
//
// # Safety
// `m` must be a live handle; `buf` valid for `len` writes.
enum DpsctStatus dpsct_measurement_counts(const struct DpsctMeasurement *m,
                                          double *buf,
                                          size_t len);

// Negative log-likelihood of an image under the measurement.
//
// # Safety
// `m` and `img` must be live handles; `out_value` writable.
enum DpsctStatus dpsct_measurement_nll(const struct DpsctMeasurement *m,
                                       const struct DpsctImage *img,
                                       double *out_value);

// # Safety
// `m` must be null or a handle not yet freed.
void dpsct_measurement_free(struct DpsctMeasurement *m);

// Image from `width · height` row-major values, row 0 at the top.
//
// # Safety
// `data` must be valid for `width · height` reads; `out_image` writable.
enum DpsctStatus dpsct_image_new(size_t width,
                                 size_t height,
                                 double pixel_size,
                                 const double *data,
                                 struct DpsctImage **out_image);

// # Safety
// `path` must be a NUL-terminated string; `out_image` writable.
enum DpsctStatus dpsct_image_read(const char *path, struct DpsctImage **out_image);

// # Safety
// `img` must be a live handle; `path` a NUL-terminated string.
enum DpsctStatus dpsct_image_write(const struct DpsctImage *img, const char *path);

// # Safety
// `img` must be a live handle or null (returns 0).
size_t dpsct_image_width(const struct DpsctImage *img);

// # Safety
// `img` must be a live handle or null (returns 0).
size_t dpsct_image_height(const struct DpsctImage *img);

// # Safety
// `img` must be a live handle or null (returns 0).
double dpsct_image_pixel_size(const struct DpsctImage *img);

// Copies the pixels into `buf`, which must hold `width · height` values.
//
// # Safety
// `img` must be a live handle; `buf` valid for `len` writes.
enum DpsctStatus dpsct_image_data(const struct DpsctImage *img, double *buf, size_t len);

// # Safety
// `img` must be null or a handle not yet freed.
void dpsct_image_free(struct DpsctImage *img);

// Filtered backprojection of a measurement.
//
// # Safety
// `m` must be a live handle; `out_image` writable.
enum DpsctStatus dpsct_fbp(const struct DpsctMeasurement *m, struct DpsctImage **out_image);

// Runs the configured sampler ensemble. Stable mode starts from the FBP of
// `m` unless `init` is given. `truth` may be null; with it, bias and
// PSNR/SSIM become available. Diverged runs are counted and skipped; if
// fewer than one run survives the call fails with `Diverged`.
//
// # Safety
// `cfg` and `m` must be live handles; `init`, `truth` live or null;
// `out_ensemble` writable.
enum DpsctStatus dpsct_reconstruct(const struct DpsctConfig *cfg,
                                   const struct DpsctMeasurement *m,
                                   const struct DpsctImage *init,
                                   const struct DpsctImage *truth,
                                   struct DpsctEnsemble **out_ensemble);

// # Safety
// `e` must be a live handle or null (returns 0).
size_t dpsct_ensemble_len(const struct DpsctEnsemble *e);

// # Safety
// `e` must be a live handle or null (returns 0).
size_t dpsct_ensemble_diverged(const struct DpsctEnsemble *e);

// Total score-model evaluations across the ensemble.
//
// # Safety
// `e` must be a live handle or null (returns 0).
uint64_t dpsct_ensemble_score_evaluations(const struct DpsctEnsemble *e);

// Copy of run `index`.
//
// # Safety
// `e` must be a live handle; `out_image` writable.
enum DpsctStatus dpsct_ensemble_run(const struct DpsctEnsemble *e,
                                    size_t index,
                                    struct DpsctImage **out_image);

// # Safety
// `e` must be a live handle; `out_image` writable.
enum DpsctStatus dpsct_ensemble_mean(const struct DpsctEnsemble *e, struct DpsctImage **out_image);

// Pixelwise standard deviation; needs at least two runs.
//
// # Safety
// `e` must be a live handle; `out_image` writable.
enum DpsctStatus dpsct_ensemble_std(const struct DpsctEnsemble *e, struct DpsctImage **out_image);

// # Safety
// `e` must be a live handle; `out_summary` writable.
enum DpsctStatus dpsct_ensemble_summary(const struct DpsctEnsemble *e,
                                        struct DpsctSummary *out_summary);

// # Safety
// `e` must be null or a handle not yet freed.
void dpsct_ensemble_free(struct DpsctEnsemble *e);

// PSNR in dB with the truth maximum as peak; identical images give +∞.
//
// # Safety
// `recon`, `truth` must be live handles; `out_value` writable.
enum DpsctStatus dpsct_psnr(const struct DpsctImage *recon,
                            const struct DpsctImage *truth,
                            double *out_value);

// # Safety
// `recon`, `truth` must be live handles; `out_value` writable.
enum DpsctStatus dpsct_ssim(const struct DpsctImage *recon,
                            const struct DpsctImage *truth,
                            double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPSCT_H */
