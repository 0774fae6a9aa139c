#ifndef PRUNEKIT_H
#define PRUNEKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PkResidualPolicy {
  PK_RESIDUAL_POLICY_TIE_GROUP = 0,
  PK_RESIDUAL_POLICY_SKIP_FINAL = 1,
} PkResidualPolicy;

typedef enum PkScope {
  PK_SCOPE_GLOBAL = 0,
  PK_SCOPE_PER_LAYER = 1,
} PkScope;

typedef enum PkStatus {
  PK_STATUS_OK = 0,
  PK_STATUS_NULL_POINTER = 1,
  PK_STATUS_INVALID_UTF8 = 2,
  PK_STATUS_SCHEMA = 3,
  PK_STATUS_VALIDATION = 4,
  PK_STATUS_SHAPE = 5,
  PK_STATUS_DEPENDENCY = 6,
  PK_STATUS_MISSING_WEIGHT = 7,
  PK_STATUS_SHAPE_MISMATCH = 8,
  PK_STATUS_INFEASIBLE_TARGET = 9,
  PK_STATUS_NON_FINITE = 10,
  PK_STATUS_FORMAT = 11,
  PK_STATUS_CONFIG = 12,
  PK_STATUS_IO = 13,
  PK_STATUS_OTHER = 14,
  PK_STATUS_PANIC = 15,
} PkStatus;

// A validated model graph.
typedef struct PkModel PkModel;

// A pruning plan.
typedef struct PkPlan PkPlan;

// Named f32 tensors.
typedef struct PkWeights PkWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *pk_last_error_message(void);

// # Safety
// `s` must come from this library and not have been freed.
void pk_string_free(char *s);

// # Safety
// `data`/`len` must be a buffer returned by [`pk_weights_encode`].
void pk_bytes_free(uint8_t *data, size_t len);

// Parses a model IR document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum PkStatus pk_model_parse(const char *json, struct PkModel **out);

// Builds a bundled fixture (`tiny-alexnet`, `tiny-resnet`,
// `tiny-mobilenetv2`, `tiny-squeezenet`).
//
// # Safety
// `name` must be a NUL-terminated string; `out` a valid pointer.
enum PkStatus pk_model_fixture(const char *name,
                               size_t resolution,
                               size_t width,
                               size_t num_classes,
                               struct PkModel **out);

// Canonical serialization; free the result with [`pk_string_free`].
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum PkStatus pk_model_serialize(const struct PkModel *model, char **out);

// Total parameters and operations (2 per multiply-accumulate).
//
// # Safety
// `model` must be a live handle; outputs valid pointers.
enum PkStatus pk_model_cost(const struct PkModel *model, uint64_t *params, uint64_t *ops);

// Number of input floats per sample and logits per sample.
//
// # Safety
// `model` must be a live handle; outputs valid pointers.
enum PkStatus pk_model_io_sizes(const struct PkModel *model, size_t *input, size_t *classes);

// Dependency report as a JSON document.
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum PkStatus pk_model_analyze(const struct PkModel *model,
                               enum PkResidualPolicy residual_policy,
                               char **out);

// # Safety
// `model` must be a handle from this library, or NULL.
void pk_model_free(struct PkModel *model);

// Seeded initialization for `model`.
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum PkStatus pk_weights_init(const struct PkModel *model, uint64_t seed, struct PkWeights **out);

// Decodes a weight container.
//
// # Safety
// `data` must point to `len` readable bytes; `out` a valid pointer.
enum PkStatus pk_weights_decode(const uint8_t *data, size_t len, struct PkWeights **out);

// Encodes a weight container; free with [`pk_bytes_free`].
//
// # Safety
// `weights` must be a live handle; outputs valid pointers.
enum PkStatus pk_weights_encode(const struct PkWeights *weights, uint8_t **data, size_t *len);

// # Safety
// `weights` must be a handle from this library, or NULL.
void pk_weights_free(struct PkWeights *weights);

// L1-ranked, dependency-respecting plan reaching `level` percent of
// parameter memory.
//
// # Safety
// `model` and `weights` must be live handles; `out` a valid pointer.
enum PkStatus pk_plan_build(const struct PkModel *model,
                            const struct PkWeights *weights,
                            double level,
                            enum PkScope scope,
                            enum PkResidualPolicy residual_policy,
                            struct PkPlan **out);

// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum PkStatus pk_plan_from_json(const char *json, struct PkPlan **out);

// # Safety
// `plan` must be a live handle; `out` a valid pointer.
enum PkStatus pk_plan_to_json(const struct PkPlan *plan, char **out);

// # Safety
// `plan` must be a live handle; `out` a valid pointer.
enum PkStatus pk_plan_achieved_level(const struct PkPlan *plan, double *out);

// # Safety
// `plan` must be a handle from this library, or NULL.
void pk_plan_free(struct PkPlan *plan);

// Physically removes the planned filters. `weights` and `out_weights` may
// both be NULL to shrink the graph only.
//
// # Safety
// Non-NULL handles must be live; `out_model` a valid pointer.
enum PkStatus pk_shrink(const struct PkModel *model,
                        const struct PkWeights *weights,
                        const struct PkPlan *plan,
                        struct PkModel **out_model,
                        struct PkWeights **out_weights);

// Eval-mode forward pass. `input` holds `batch` samples in channel-major
// layout; `logits` receives `batch * num_classes` values.
//
// # Safety
// Handles must be live; `input` and `logits` must hold the stated lengths.
enum PkStatus pk_forward(const struct PkModel *model,
                         const struct PkWeights *weights,
                         const float *input,
                         size_t batch,
                         float *logits,
                         size_t logits_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRUNEKIT_H */
