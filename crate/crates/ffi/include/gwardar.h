/* SPDX-License-Identifier: Apache-2.0 */

#ifndef GWARDAR_H
#define GWARDAR_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GwardarStatus {
  GWARDAR_STATUS_OK = 0,
  GWARDAR_STATUS_NULL_POINTER = 1,
  GWARDAR_STATUS_INVALID_UTF8 = 2,
  GWARDAR_STATUS_PARSE_ERROR = 3,
  GWARDAR_STATUS_UNKNOWN_DEVICE = 4,
  GWARDAR_STATUS_NO_TRUSTED_SNAPSHOT = 5,
  GWARDAR_STATUS_INVALID_CONFIG = 6,
  GWARDAR_STATUS_INTERNAL = 255,
} GwardarStatus;

/**
 * Opaque simulation handle.
 */
typedef struct GwardarSimulation GwardarSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a simulation. `topology` is a JSON file path or a generator spec such as
 * `gen:random:54:3`. `config_json` may be NULL for defaults.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL. `out` must be writable.
 */
enum GwardarStatus gwardar_simulation_new(const char *topology,
                                          const char *config_json,
                                          uint64_t seed,
                                          struct GwardarSimulation **out);

/**
 * # Safety
 * `sim` must come from [`gwardar_simulation_new`] and not be used afterwards. NULL is ignored.
 */
void gwardar_simulation_free(struct GwardarSimulation *sim);

/**
 * Runs the learning phase. Writes the number of windows used to `windows` when non-NULL.
 *
 * # Safety
 * `sim` must be a live handle. `windows` must be NULL or writable.
 */
enum GwardarStatus gwardar_warm_up(struct GwardarSimulation *sim, size_t *windows);

/**
 * Advances the simulation by `ticks` time units.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum GwardarStatus gwardar_step(struct GwardarSimulation *sim, uint64_t ticks);

/**
 * Runs one scenario from the current state and keeps the resulting state. `out_json` receives
 * `{"attack": {...}, "verdicts": [...]}`.
 *
 * # Safety
 * `sim` must be a live handle, `spec_json` NUL-terminated, `out_json` writable.
 */
enum GwardarStatus gwardar_run_scenario(struct GwardarSimulation *sim,
                                        const char *spec_json,
                                        char **out_json);

/**
 * The NOS's claimed view (topology, tables, version) as JSON.
 *
 * # Safety
 * `sim` must be a live handle and `out_json` writable.
 */
enum GwardarStatus gwardar_query_view_json(struct GwardarSimulation *sim, char **out_json);

/**
 * Writes whether the intercepted replica equals the live tables.
 *
 * # Safety
 * `sim` must be a live handle and `equal` writable.
 */
enum GwardarStatus gwardar_verify_replica(struct GwardarSimulation *sim, bool *equal);

/**
 * Full restore from the latest trusted snapshot. `report_json` may be NULL.
 *
 * # Safety
 * `sim` must be a live handle. `report_json` must be NULL or writable.
 */
enum GwardarStatus gwardar_restore(struct GwardarSimulation *sim, char **report_json);

/**
 * Ends a takeover. `was_active` may be NULL.
 *
 * # Safety
 * `sim` must be a live handle. `was_active` must be NULL or writable.
 */
enum GwardarStatus gwardar_release_takeover(struct GwardarSimulation *sim, bool *was_active);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *gwardar_last_error_message(void);

/**
 * # Safety
 * `s` must be a string returned by this library, or NULL.
 */
void gwardar_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GWARDAR_H */
