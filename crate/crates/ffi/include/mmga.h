#ifndef MMGA_H
#define MMGA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmgaStatus {
  MMGA_STATUS_OK = 0,
  MMGA_STATUS_NULL_POINTER = 1,
  MMGA_STATUS_INVALID_ARGUMENT = 2,
  MMGA_STATUS_INVALID_INPUT = 3,
  MMGA_STATUS_PARSE = 4,
  MMGA_STATUS_IO = 5,
  MMGA_STATUS_VALIDATION = 6,
  MMGA_STATUS_CONFIG = 7,
  MMGA_STATUS_NO_FEASIBLE_POINT = 8,
  MMGA_STATUS_MODEL_LOAD = 9,
  MMGA_STATUS_STAGE = 10,
  MMGA_STATUS_UTF8 = 11,
  MMGA_STATUS_PANIC = 12,
} MmgaStatus;

// Scan graph.
typedef struct MmgaGraph MmgaGraph;

// Trained graph classifier.
typedef struct MmgaModel MmgaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from this thread.
const char *mmga_last_error(void);

// Area under the ROC curve of `n` scores; `labels[i]` is nonzero for positives.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements; `auc` must be writable.
enum MmgaStatus mmga_auc(const double *scores, const uint8_t *labels, size_t n, double *auc);

// IoU of two boxes given as `[x_tl, y_tl, x_br, y_br]`.
//
// # Safety
// `a` and `b` must point to 4 readable values; `iou` must be writable.
enum MmgaStatus mmga_iou_2d(const double *a, const double *b, double *iou);

// Centered moving average with an odd `window`, truncated at the edges.
//
// # Safety
// `signal` must point to `n` readable values and `smoothed` to `n` writable ones.
enum MmgaStatus mmga_moving_average(const double *signal,
                                    size_t n,
                                    size_t window,
                                    double *smoothed);

// Slices of interest of a probability signal. `found` is set to 0 when no
// smoothed value exceeds `threshold`, in which case `first` and `last` are
// left untouched.
//
// # Safety
// `probs` must point to `n` readable values; the out pointers must be writable.
enum MmgaStatus mmga_extract_segment(const double *probs,
                                     size_t n,
                                     double threshold,
                                     size_t window,
                                     uint8_t *found,
                                     size_t *first,
                                     size_t *last);

// `[ppv, npv, recall, f1]` from confusion counts; undefined ratios are NaN.
//
// # Safety
// `metrics` must point to 4 writable values.
enum MmgaStatus mmga_confusion_metrics(uint64_t tp,
                                       uint64_t fn_,
                                       uint64_t tn,
                                       uint64_t fp,
                                       double *metrics);

// Load a model file written by the `train` stage.
//
// # Safety
// `path` must be a NUL-terminated string; `model` must be writable.
enum MmgaStatus mmga_model_load(const char *path, struct MmgaModel **model);

// Parse a model from its JSON text.
//
// # Safety
// `json` must be a NUL-terminated string; `model` must be writable.
enum MmgaStatus mmga_model_from_json(const char *json, struct MmgaModel **model);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void mmga_model_free(struct MmgaModel *model);

// Parse one graph from its JSON text, as written by the `graphs` stage.
//
// # Safety
// `json` must be a NUL-terminated string; `graph` must be writable.
enum MmgaStatus mmga_graph_from_json(const char *json, struct MmgaGraph **graph);

// # Safety
// `graph` must be a live handle; `nodes` must be writable.
enum MmgaStatus mmga_graph_num_nodes(const struct MmgaGraph *graph, size_t *nodes);

// # Safety
// `graph` must be null or a handle from this library not yet freed.
void mmga_graph_free(struct MmgaGraph *graph);

// Eval-mode abnormality probability of one graph.
//
// # Safety
// `model` and `graph` must be live handles; `probability` must be writable.
enum MmgaStatus mmga_model_predict(const struct MmgaModel *model,
                                   const struct MmgaGraph *graph,
                                   double *probability);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMGA_H */
