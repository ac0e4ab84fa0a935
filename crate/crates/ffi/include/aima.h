#ifndef AIMA_H
#define AIMA_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AimaStatus {
  AIMA_STATUS_OK = 0,
  AIMA_STATUS_NULL_POINTER = 1,
  AIMA_STATUS_INVALID_ARGUMENT = 2,
  AIMA_STATUS_DOMAIN = 3,
  AIMA_STATUS_SHAPE = 4,
  AIMA_STATUS_CONFIG = 5,
  AIMA_STATUS_INPUT = 6,
  AIMA_STATUS_TRACE = 7,
  AIMA_STATUS_NUMERIC = 8,
  AIMA_STATUS_CHECKPOINT = 9,
  AIMA_STATUS_GENERATION = 10,
  AIMA_STATUS_PARSE = 11,
  AIMA_STATUS_IO = 12,
  AIMA_STATUS_BUFFER_TOO_SMALL = 13,
  AIMA_STATUS_PANIC = 14,
} AimaStatus;

typedef enum AimaDifficulty {
  AIMA_DIFFICULTY_EASY = 0,
  AIMA_DIFFICULTY_HARD = 1,
} AimaDifficulty;

typedef enum AimaStrategy {
  AIMA_STRATEGY_VANILLA = 0,
  AIMA_STRATEGY_UNIFORM = 1,
  AIMA_STRATEGY_ALL_QUERY = 2,
  AIMA_STRATEGY_ANCHOR = 3,
  AIMA_STRATEGY_SINK = 4,
  AIMA_STRATEGY_SOFT = 5,
} AimaStrategy;

// Opaque model handle.
typedef struct AimaModel AimaModel;

// Opaque scene handle.
typedef struct AimaScene AimaScene;

// Result of grounding one scene, in global pixel coordinates.
typedef struct AimaClick {
  double x;
  double y;
  bool hit;
  // Smallest bbox expansion in patches that contains the click; -1 if none.
  int32_t min_relax;
} AimaClick;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t aima_last_error(char *buf, size_t len);

// Creates a model with the default architecture and the given seed.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum AimaStatus aima_model_new(uint64_t seed, struct AimaModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum AimaStatus aima_model_load(const char *path, struct AimaModel **out);

// # Safety
// `model` must come from this library and `path` be NUL-terminated.
enum AimaStatus aima_model_save(const struct AimaModel *model, const char *path);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void aima_model_free(struct AimaModel *model);

// Generates one synthetic scene.
//
// # Safety
// `out` must be a valid handle slot.
enum AimaStatus aima_scene_generate(uint64_t seed,
                                    enum AimaDifficulty difficulty,
                                    struct AimaScene **out);

// Writes the target bbox as `x1, y1, x2, y2` into `out`.
//
// # Safety
// `scene` must be a live handle and `out` point to 4 writable doubles.
enum AimaStatus aima_scene_target(const struct AimaScene *scene, double *out);

// # Safety
// `scene` must be null or a handle from this library not yet freed.
void aima_scene_free(struct AimaScene *scene);

// One-step grounding with the given strategy; sink uses global top-1.
//
// # Safety
// `model` and `scene` must be live handles and `out` writable.
enum AimaStatus aima_ground(const struct AimaModel *model,
                            const struct AimaScene *scene,
                            enum AimaStrategy strategy,
                            struct AimaClick *out);

// Patch label distribution of `bbox` (`x1, y1, x2, y2`) on an image tiled
// by square patches. Writes `rows * cols` values in row-major order to
// `out` and the count to `written`.
//
// # Safety
// `bbox` must point to 4 doubles, `out` to `out_len` writable doubles, and
// `written` must be writable.
enum AimaStatus aima_patch_labels(uint32_t image_w,
                                  uint32_t image_h,
                                  uint32_t patch_px,
                                  const double *bbox,
                                  double alpha,
                                  double *out,
                                  size_t out_len,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIMA_H */
