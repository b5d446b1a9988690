#ifndef VIDEDIT_H
#define VIDEDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The numeric values match the exit codes of
 * the `videdit` command-line tool.
 */
typedef enum VideditStatus {
  VIDEDIT_STATUS_OK = 0,
  /**
   * A panic inside the library.
   */
  VIDEDIT_STATUS_INTERNAL = 1,
  /**
   * Null pointer, invalid UTF-8 or a buffer of the wrong size.
   */
  VIDEDIT_STATUS_INVALID_ARGUMENT = 2,
  VIDEDIT_STATUS_CONFIG = 3,
  VIDEDIT_STATUS_MISSING_ARTIFACT = 4,
  VIDEDIT_STATUS_INVALID_INPUT = 5,
  VIDEDIT_STATUS_NUMERIC = 6,
  VIDEDIT_STATUS_IO = 7,
} VideditStatus;

/**
 * Result of inverting a video: latent trajectory plus per-step null embeddings.
 */
typedef struct VideditRecord VideditRecord;

/**
 * Configuration, noise schedule, text encoder and (once loaded) denoiser.
 */
typedef struct VideditSession VideditSession;

/**
 * A video of shape `[frames, channels, height, width]` with pixel values in `[0, 1]`.
 */
typedef struct VideditVideo VideditVideo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if it succeeded.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *videdit_last_error(void);

/**
 * Static, human-readable name of a status code.
 */
const char *videdit_status_name(enum VideditStatus status);

/**
 * Library version as a static string.
 */
const char *videdit_version(void);

/**
 * Creates a session from a TOML run configuration. A null `config_toml`
 * selects the defaults. No denoiser is loaded yet.
 *
 * # Safety
 * `config_toml` must be null or a valid C string; `out` must be writable.
 */
enum VideditStatus videdit_session_new(const char *config_toml, struct VideditSession **out);

/**
 * # Safety
 * `session` must be null or a pointer returned by [`videdit_session_new`].
 */
void videdit_session_free(struct VideditSession *session);

/**
 * Loads a denoiser checkpoint. A null `path` uses the configured checkpoint path.
 *
 * # Safety
 * `session` must be a live session; `path` null or a valid C string.
 */
enum VideditStatus videdit_session_load_model(struct VideditSession *session, const char *path);

/**
 * Installs a freshly initialized (untrained) denoiser built from the
 * configuration's `[model]` section. Useful for wiring tests.
 *
 * # Safety
 * `session` must be a live session.
 */
enum VideditStatus videdit_session_init_model(struct VideditSession *session);

/**
 * Number of DDIM steps of the session's schedule.
 *
 * # Safety
 * `session` must be null or a live session. Returns 0 for null.
 */
size_t videdit_session_num_steps(const struct VideditSession *session);

/**
 * Creates a video by copying `len` values laid out as `[frames][channels][height][width]`.
 *
 * # Safety
 * `data` must point to `len` readable doubles; `out` must be writable.
 */
enum VideditStatus videdit_video_new(size_t frames,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     const double *data,
                                     size_t len,
                                     struct VideditVideo **out);

/**
 * # Safety
 * `video` must be null or a pointer returned by this library.
 */
void videdit_video_free(struct VideditVideo *video);

/**
 * Writes `[frames, channels, height, width]` into `shape`.
 *
 * # Safety
 * `video` must be live; `shape` must point to 4 writable `size_t`.
 */
enum VideditStatus videdit_video_shape(const struct VideditVideo *video, size_t *shape);

/**
 * Copies the video's values into `buf`, which must hold exactly the number of
 * elements given by the product of its shape.
 *
 * # Safety
 * `video` must be live; `buf` must point to `len` writable doubles.
 */
enum VideditStatus videdit_video_copy_data(const struct VideditVideo *video,
                                           double *buf,
                                           size_t len);

/**
 * Reads a directory of numbered PNG frames.
 *
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum VideditStatus videdit_video_read(const char *dir, struct VideditVideo **out);

/**
 * Writes the video as `dir/0000.png`, `dir/0001.png`, ...
 *
 * # Safety
 * `video` must be live; `dir` a valid C string.
 */
enum VideditStatus videdit_video_write(const struct VideditVideo *video, const char *dir);

/**
 * Renders the configured toy scene with the configuration's seed.
 *
 * # Safety
 * `session` must be live; `out` must be writable.
 */
enum VideditStatus videdit_render(const struct VideditSession *session, struct VideditVideo **out);

/**
 * Inverts a pixel-range video under `source_prompt` (null uses the configured
 * source prompt), including null-text optimization.
 *
 * # Safety
 * `session` and `video` must be live; `source_prompt` null or a valid C
 * string; `out` must be writable.
 */
enum VideditStatus videdit_invert(const struct VideditSession *session,
                                  const struct VideditVideo *video,
                                  const char *source_prompt,
                                  struct VideditRecord **out);

/**
 * # Safety
 * `record` must be null or a pointer returned by this library.
 */
void videdit_record_free(struct VideditRecord *record);

/**
 * Number of DDIM steps stored in the record, 0 for null.
 *
 * # Safety
 * `record` must be null or live.
 */
size_t videdit_record_num_steps(const struct VideditRecord *record);

/**
 * Saves the record as a directory (`record.bin` plus `manifest.toml`).
 *
 * # Safety
 * `record` must be live; `dir` a valid C string.
 */
enum VideditStatus videdit_record_save(const struct VideditRecord *record, const char *dir);

/**
 * Loads a record directory written by [`videdit_record_save`] or the CLI.
 *
 * # Safety
 * `dir` must be a valid C string; `out` must be writable.
 */
enum VideditStatus videdit_record_load(const char *dir, struct VideditRecord **out);

/**
 * Reconstructs the source video from a record with the configured guidance.
 *
 * # Safety
 * `session` and `record` must be live; `out` must be writable.
 */
enum VideditStatus videdit_reconstruct(const struct VideditSession *session,
                                       const struct VideditRecord *record,
                                       struct VideditVideo **out);

/**
 * Edits the recorded video toward `target_prompt` (null uses the configured
 * target) with the configured injection thresholds and guidance.
 *
 * # Safety
 * `session` and `record` must be live; `target_prompt` null or a valid C
 * string; `out` must be writable.
 */
enum VideditStatus videdit_edit(const struct VideditSession *session,
                                const struct VideditRecord *record,
                                const char *target_prompt,
                                struct VideditVideo **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIDEDIT_H */
