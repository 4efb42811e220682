#ifndef CGSNET_H
#define CGSNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CgsStatus {
  CGS_STATUS_OK = 0,
  CGS_STATUS_NULL_POINTER = 1,
  CGS_STATUS_INVALID_ARGUMENT = 2,
  CGS_STATUS_CONFIG = 3,
  CGS_STATUS_IO = 4,
  CGS_STATUS_FORMAT = 5,
  CGS_STATUS_NUMERIC = 6,
  CGS_STATUS_CONTRACT = 7,
  CGS_STATUS_PANIC = 8,
} CgsStatus;

// Opaque image set.
typedef struct CgsDataset CgsDataset;

// Opaque loaded model.
typedef struct CgsModel CgsModel;

// Opaque simulation result.
typedef struct CgsReport CgsReport;

// Accelerator parameters; `mac_parallelism == 0` means one MAC per output.
typedef struct CgsHwConfig {
  size_t mac_parallelism;
  size_t sram_row_width;
  uint8_t shift_mac_max_bits;
  bool pipeline_enabled;
  bool zero_skipping;
  uint64_t layer_overhead;
  uint32_t acc_bits;
  // Negative keeps the folded batch-norm constants at full precision.
  int32_t bn_frac_bits;
} CgsHwConfig;

// Aggregate figures of a simulation.
typedef struct CgsReportSummary {
  size_t images;
  size_t correct;
  double accuracy;
  double mean_cycles;
  double mean_dense_cycles;
  double mean_speedup;
  uint64_t shifts;
  uint64_t multiplies;
  uint64_t adds;
  uint64_t row_reads;
} CgsReportSummary;

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length, or 0 if
// there is none.
size_t cgs_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *cgs_version(void);

struct CgsHwConfig cgs_hw_config_default(void);

enum CgsStatus cgs_model_load(const char *path, struct CgsModel **model);

enum CgsStatus cgs_model_save(const struct CgsModel *model, const char *path);

void cgs_model_free(struct CgsModel *model);

// Input width, number of classes and layer count.
enum CgsStatus cgs_model_shape(const struct CgsModel *model,
                               size_t *inputs,
                               size_t *classes,
                               size_t *layers);

// Test accuracy stored when the model was trained.
enum CgsStatus cgs_model_final_accuracy(const struct CgsModel *model, double *accuracy);

// Weight plus index memory in bits, and the reduction factor against dense
// 8-bit weights.
enum CgsStatus cgs_model_memory(const struct CgsModel *model,
                                uint64_t *total_bits,
                                double *reduction);

// Simulates one image of `len` raw pixels; writes the class and the
// per-image cycle count (pipelined or summed per `hw`).
enum CgsStatus cgs_classify(const struct CgsModel *model,
                            const uint8_t *pixels,
                            size_t len,
                            const struct CgsHwConfig *hw,
                            uint8_t *class_,
                            uint64_t *cycles);

// Loads an MNIST split (`"train"` or `"t10k"`) from `dir`.
enum CgsStatus cgs_dataset_load(const char *dir, const char *split, struct CgsDataset **dataset);

enum CgsStatus cgs_dataset_len(const struct CgsDataset *dataset, size_t *len);

// Keeps only the first `n` images.
enum CgsStatus cgs_dataset_truncate(struct CgsDataset *dataset, size_t n);

void cgs_dataset_free(struct CgsDataset *dataset);

// Runs the simulator over every image of `dataset`.
enum CgsStatus cgs_simulate(const struct CgsModel *model,
                            const struct CgsDataset *dataset,
                            const struct CgsHwConfig *hw,
                            struct CgsReport **report);

enum CgsStatus cgs_report_summary(const struct CgsReport *report, struct CgsReportSummary *summary);

// Predicted class of image `index`.
enum CgsStatus cgs_report_prediction(const struct CgsReport *report, size_t index, uint8_t *class_);

void cgs_report_free(struct CgsReport *report);

#endif  /* CGSNET_H */
