#ifndef KVADAPT_H
#define KVADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum KvaStatus {
  KVA_STATUS_OK = 0,
  KVA_STATUS_NULL_POINTER = 1,
  KVA_STATUS_INVALID_UTF8 = 2,
  KVA_STATUS_CONFIG = 3,
  KVA_STATUS_MISSING_ARTIFACT = 4,
  KVA_STATUS_IO = 5,
  KVA_STATUS_INVALID_INPUT = 6,
  KVA_STATUS_OUT_OF_VOCABULARY = 7,
  KVA_STATUS_UNKNOWN_TASK = 8,
  KVA_STATUS_NO_TASKS = 9,
  KVA_STATUS_COMPATIBILITY = 10,
  KVA_STATUS_DIMENSION = 11,
  KVA_STATUS_INVALID_DATA = 12,
  // A Rust panic was caught at the boundary.
  KVA_STATUS_INTERNAL = 13,
} KvaStatus;

// One generated label.
typedef struct KvaPrediction KvaPrediction;

// A loaded backbone, vocabulary and adaptor store.
typedef struct KvaSession KvaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on this thread.
const char *kva_last_error(void);

// Static, NUL-terminated crate version.
const char *kva_version(void);

// Opens the run described by the TOML file at `config_path`.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out` must be writable.
enum KvaStatus kva_session_open(const char *config_path, struct KvaSession **out);

// # Safety
// `session` must come from [`kva_session_open`] or be null.
void kva_session_free(struct KvaSession *session);

// Number of stored tasks; 0 for a null session.
//
// # Safety
// `session` must be a live handle or null.
size_t kva_session_task_count(const struct KvaSession *session);

// Predicts for a PNG patch or a directory of bag PNGs. With a null
// `task_id` the adaptors are retrieved from `prompt`; otherwise the named
// task is used and a null `prompt` selects that task's own prompt.
//
// # Safety
// Pointers must be valid NUL-terminated strings or null where allowed;
// `out` must be writable.
enum KvaStatus kva_predict(const struct KvaSession *session,
                           const char *input_path,
                           const char *prompt,
                           const char *task_id,
                           struct KvaPrediction **out);

// # Safety
// `p` must come from [`kva_predict`] or be null.
void kva_prediction_free(struct KvaPrediction *p);

// Generated label text; owned by the prediction.
//
// # Safety
// `p` must be a live prediction or null.
const char *kva_prediction_label(const struct KvaPrediction *p);

// Task whose adaptors produced the label; owned by the prediction.
//
// # Safety
// `p` must be a live prediction or null.
const char *kva_prediction_task_id(const struct KvaPrediction *p);

// 1 if decoding stopped at end-of-sequence, 0 if it hit the length cap or `p` is null.
//
// # Safety
// `p` must be a live prediction or null.
int32_t kva_prediction_terminated(const struct KvaPrediction *p);

// Number of per-patch attention weights; 0 for patch inputs.
//
// # Safety
// `p` must be a live prediction or null.
size_t kva_prediction_attention_len(const struct KvaPrediction *p);

// Copies up to `cap` attention weights into `buf`; returns how many were written.
//
// # Safety
// `buf` must hold `cap` doubles; `p` must be a live prediction or null.
size_t kva_prediction_attention(const struct KvaPrediction *p, double *buf, size_t cap);

// Key loss of `key` against one `query` and `n_prev` earlier keys stored
// row-major in `prev_keys`, all of length `len`.
//
// # Safety
// `key` and `query` must hold `len` doubles, `prev_keys` `n_prev * len`
// (null allowed when `n_prev` is 0); `out` must be writable.
enum KvaStatus kva_key_loss(const double *key,
                            const double *query,
                            size_t len,
                            const double *prev_keys,
                            size_t n_prev,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVADAPT_H */
