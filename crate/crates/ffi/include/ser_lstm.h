/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SER_LSTM_H
#define SER_LSTM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define SER_NUM_EMOTIONS 8

#define SER_FEATURE_FRAMES 20

#define SER_FEATURE_COEFFS 40

typedef enum SerStatus {
  SER_STATUS_OK = 0,
  SER_STATUS_NULL_POINTER = 1,
  SER_STATUS_INVALID_ARGUMENT = 2,
  SER_STATUS_IO = 3,
  SER_STATUS_FORMAT = 4,
  SER_STATUS_SHAPE = 5,
  SER_STATUS_NUMERIC = 6,
  SER_STATUS_BUFFER_TOO_SMALL = 7,
  SER_STATUS_PANIC = 8,
} SerStatus;

/**
 * Opaque model handle.
 */
typedef struct SerModel SerModel;

/**
 * The seven numeric fields of a RAVDESS file name plus the 0-based emotion index.
 */
typedef struct SerRavdessLabel {
  uint8_t modality;
  uint8_t vocal_channel;
  uint8_t emotion;
  uint8_t intensity;
  uint8_t statement;
  uint8_t repetition;
  uint8_t actor;
  uint8_t emotion_index;
} SerRavdessLabel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SerStatus ser_model_load(const char *path, struct SerModel **out);

/**
 * Creates an untrained model with the default architecture and `num_layers`
 * LSTM layers (1 or 2). Features are used without standardization.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum SerStatus ser_model_new(uint32_t num_layers, uint64_t seed, struct SerModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ser_model_free(struct SerModel *model);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ser_model_num_params(const struct SerModel *model);

/**
 * Number of LSTM layers, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t ser_model_num_layers(const struct SerModel *model);

/**
 * Classifies a raw (unstandardized) `frames × coeffs` MFCC matrix given row-major.
 * Writes `SER_NUM_EMOTIONS` probabilities and, if `class_out` is not null, the argmax.
 *
 * # Safety
 * `features` must point to `len` doubles, `probs_out` to `probs_len` writable doubles.
 */
enum SerStatus ser_model_predict_features(const struct SerModel *model,
                                          const double *features,
                                          size_t len,
                                          double *probs_out,
                                          size_t probs_len,
                                          size_t *class_out);

/**
 * Reads, featurizes and classifies a WAV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `probs_out` point to `probs_len` writable doubles.
 */
enum SerStatus ser_model_predict_wav(const struct SerModel *model,
                                     const char *path,
                                     double *probs_out,
                                     size_t probs_len,
                                     size_t *class_out);

/**
 * Computes the pooled `SER_FEATURE_FRAMES × SER_FEATURE_COEFFS` MFCC matrix of a
 * WAV file with default settings, row-major. `padded_out` may be null.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` point to `out_len` writable doubles.
 */
enum SerStatus ser_featurize_wav(const char *path, double *out, size_t out_len, bool *padded_out);

/**
 * Parses a RAVDESS file name such as `03-01-05-01-02-01-12.wav`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
enum SerStatus ser_parse_ravdess_filename(const char *name, struct SerRavdessLabel *out);

/**
 * Static name of emotion `index` (0-based), or null when out of range.
 */
const char *ser_emotion_name(size_t index);

/**
 * Runs the finite-difference gradient check on the small reference model and
 * writes the largest relative error.
 *
 * # Safety
 * `max_rel_error` must be writable.
 */
enum SerStatus ser_gradient_check(uint64_t seed, double *max_rel_error);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to fit) into `buf` and returns the full message length excluding the NUL.
 * Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ser_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SER_LSTM_H */
