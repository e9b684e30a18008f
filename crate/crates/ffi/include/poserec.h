/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef POSEREC_H
#define POSEREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Doubles per frame: 33 landmarks × 4 channels.
#define POSEREC_FRAME_LEN 132

typedef enum PoserecStatus {
  POSEREC_STATUS_OK = 0,
  // A required pointer was null.
  POSEREC_STATUS_NULL_ARGUMENT = 1,
  // Bad argument value, e.g. zero `top` or non-UTF-8 text.
  POSEREC_STATUS_INVALID_ARGUMENT = 2,
  // The output buffer is too small; the needed size was reported.
  POSEREC_STATUS_BUFFER_TOO_SMALL = 3,
  // File could not be read.
  POSEREC_STATUS_IO = 4,
  // Malformed checkpoint or item file.
  POSEREC_STATUS_FORMAT = 5,
  // Valid syntax but inconsistent content (shape mismatch, unknown id, too few frames).
  POSEREC_STATUS_DATA = 6,
  // Degenerate vectors or other numerical failure.
  POSEREC_STATUS_NUMERICAL = 7,
  // A Rust panic was caught at the boundary.
  POSEREC_STATUS_INTERNAL = 8,
} PoserecStatus;

// Opaque model plus item index.
typedef struct PoserecEngine PoserecEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *poserec_last_error(void);

// Load a checkpoint and an item file and build the item index.
//
// # Safety
// `checkpoint_path` and `items_path` must be nul-terminated strings; `out`
// must be a valid place to store the handle.
enum PoserecStatus poserec_engine_open(const char *checkpoint_path,
                                       const char *items_path,
                                       struct PoserecEngine **out);

// Release an engine. Null is ignored.
//
// # Safety
// `engine` must come from [`poserec_engine_open`] and not be freed twice.
void poserec_engine_free(struct PoserecEngine *engine);

// Number of indexed items (degenerate items are left out of the index).
//
// # Safety
// `engine` must be a live handle or null (which yields 0).
size_t poserec_engine_item_count(const struct PoserecEngine *engine);

// Width of a window embedding.
//
// # Safety
// `engine` must be a live handle or null (which yields 0).
size_t poserec_engine_embed_dim(const struct PoserecEngine *engine);

// Frames per window; shorter videos cannot be scored.
//
// # Safety
// `engine` must be a live handle or null (which yields 0).
size_t poserec_engine_window_len(const struct PoserecEngine *engine);

// Copy the id of indexed item `index` into `buf` with a trailing nul.
// `needed` (optional) receives the buffer size required, nul included.
//
// # Safety
// `buf` must hold `buf_len` writable bytes; `needed` must be null or valid.
enum PoserecStatus poserec_item_id(const struct PoserecEngine *engine,
                                   size_t index,
                                   char *buf,
                                   size_t buf_len,
                                   size_t *needed);

// Position of item `id` in the index.
//
// # Safety
// `id` must be a nul-terminated string and `out_index` valid.
enum PoserecStatus poserec_find_item(const struct PoserecEngine *engine,
                                     const char *id,
                                     size_t *out_index);

// Embed every window of a video. Writes `n_windows × embed_dim` doubles to
// `out` when `out_len` is large enough; `n_windows` is always reported.
//
// # Safety
// `frames` must hold `n_frames × POSEREC_FRAME_LEN` doubles, `out` must hold
// `out_len` doubles, `n_windows` must be valid.
enum PoserecStatus poserec_encode_video(const struct PoserecEngine *engine,
                                        const double *frames,
                                        size_t n_frames,
                                        double *out,
                                        size_t out_len,
                                        size_t *n_windows);

// Score every indexed item for a video (mean over its windows). `out`
// receives one score per item in index order.
//
// # Safety
// `frames` must hold `n_frames × POSEREC_FRAME_LEN` doubles and `out`
// `out_len` doubles.
enum PoserecStatus poserec_score_video(const struct PoserecEngine *engine,
                                       const double *frames,
                                       size_t n_frames,
                                       double *out,
                                       size_t out_len);

// Top `top` items for a video, best first, ties broken by ascending id.
// Writes up to `top` index positions and scores; `out_count` receives how
// many were written (fewer when the index is smaller).
//
// # Safety
// `out_items` and `out_scores` must hold `top` elements; `frames` as for
// [`poserec_score_video`].
enum PoserecStatus poserec_recommend(const struct PoserecEngine *engine,
                                     const double *frames,
                                     size_t n_frames,
                                     size_t top,
                                     size_t *out_items,
                                     double *out_scores,
                                     size_t *out_count);

// Library version as a static nul-terminated string.
const char *poserec_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEREC_H */
