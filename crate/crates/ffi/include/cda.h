#ifndef CDA_H
#define CDA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum cda_status {
  CDA_STATUS_OK = 0,
  CDA_STATUS_NULL_ARGUMENT = 1,
  CDA_STATUS_INVALID_UTF8 = 2,
  CDA_STATUS_PARSE = 3,
  CDA_STATUS_JSON = 4,
  CDA_STATUS_NOT_FOUND = 5,
  CDA_STATUS_NO_CORRUPTION = 6,
  CDA_STATUS_SYNTHESIS_EXHAUSTED = 7,
  CDA_STATUS_EXPLOIT_FAILED = 8,
  CDA_STATUS_RUNTIME = 9,
  CDA_STATUS_PANIC = 10,
} cda_status;

typedef enum cda_region {
  CDA_REGION_STACK = 0,
  CDA_REGION_HEAP = 1,
} cda_region;

/**
 * Simulated hypervisor process.
 */
typedef struct cda_machine cda_machine;

/**
 * Parsed scenario.
 */
typedef struct cda_scenario cda_scenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *cda_last_error(void);

/**
 * Static version string.
 */
const char *cda_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void cda_string_free(char *s);

/**
 * # Safety
 * `source` must be a NUL-terminated string; `out` must be writable.
 */
enum cda_status cda_scenario_parse(const char *source, struct cda_scenario **out);

/**
 * Loads one of the scenarios shipped with the library by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum cda_status cda_scenario_bundled(const char *name, struct cda_scenario **out);

/**
 * Canonical text of a scenario.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
enum cda_status cda_scenario_print(const struct cda_scenario *s, char **out);

/**
 * # Safety
 * `s` must be null or a handle from this library not yet freed.
 */
void cda_scenario_free(struct cda_scenario *s);

/**
 * Gadget database as JSON.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
enum cda_status cda_extract(const struct cda_scenario *s, char **out);

/**
 * Ranked matches of `db_json` against the pointer `poc_json` corrupts.
 *
 * # Safety
 * Strings must be NUL-terminated; `s` live; `out` writable.
 */
enum cda_status cda_match(const struct cda_scenario *s,
                          const char *db_json,
                          const char *poc_json,
                          uint64_t seed,
                          char **out);

/**
 * Input sequence reaching `gadget_id`, or `CDA_STATUS_SYNTHESIS_EXHAUSTED`.
 *
 * # Safety
 * `gadget_id` must be NUL-terminated; `s` live; `out` writable.
 */
enum cda_status cda_synthesize(const struct cda_scenario *s,
                               const char *gadget_id,
                               uint64_t seed,
                               uint64_t budget,
                               char **out);

/**
 * Full pipeline. The outcome JSON is written whenever a chain was
 * assembled, including when verification found no expected variant
 * (`CDA_STATUS_EXPLOIT_FAILED`).
 *
 * # Safety
 * `poc_json` must be NUL-terminated; `s` live; `out` writable.
 */
enum cda_status cda_exploit(const struct cda_scenario *s,
                            const char *poc_json,
                            uint64_t seed,
                            char **out);

/**
 * Re-verifies a chain (bare, or the `chain` member of an outcome).
 *
 * # Safety
 * `chain_json` must be NUL-terminated; `s` live; `out` writable.
 */
enum cda_status cda_verify(const struct cda_scenario *s,
                           const char *chain_json,
                           uint64_t seed,
                           char **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum cda_status cda_machine_new(uint64_t guest_size,
                                uint64_t heap_size,
                                uint64_t seed,
                                struct cda_machine **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void cda_machine_free(struct cda_machine *m);

/**
 * Runs an input sequence on the machine and returns its trace. Machine
 * state carries over between calls.
 *
 * # Safety
 * `input_json` must be NUL-terminated; handles live; `out` writable.
 */
enum cda_status cda_machine_run(struct cda_machine *m,
                                const struct cda_scenario *s,
                                const char *input_json,
                                char **out);

/**
 * Every word in `region` that currently holds a guest address.
 *
 * # Safety
 * `m` live; `out` writable.
 */
enum cda_status cda_machine_residues(const struct cda_machine *m,
                                     enum cda_region region,
                                     char **out);

/**
 * Textual dump of the machine with the deepest `top_slots` stack slots.
 *
 * # Safety
 * `m` live; `out` writable.
 */
enum cda_status cda_machine_dump(const struct cda_machine *m, size_t top_slots, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDA_H */
