/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef POISONCERT_H
#define POISONCERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PcStatus {
  PC_STATUS_OK = 0,
  PC_STATUS_NULL_ARGUMENT = 1,
  PC_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration, data or threat model.
   */
  PC_STATUS_CONFIG = 3,
  PC_STATUS_INTERNAL = 4,
  PC_STATUS_PANIC = 5,
  /**
   * Output buffer too small; the needed length was still written.
   */
  PC_STATUS_BUFFER_TOO_SMALL = 6,
} PcStatus;

typedef enum PcCertStatus {
  PC_CERT_STATUS_OPTIMAL = 0,
  PC_CERT_STATUS_BOUNDED = 1,
  PC_CERT_STATUS_TIMEOUT = 2,
} PcCertStatus;

/**
 * A finished certificate.
 */
typedef struct PcCertificate PcCertificate;

/**
 * A parsed run configuration.
 */
typedef struct PcConfig PcConfig;

typedef struct PcSummary {
  enum PcCertStatus status;
  double primal;
  double bound;
  double gap;
  size_t nodes;
  size_t poisoned;
} PcSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *pc_last_error(void);

/**
 * Library version as a static string.
 */
const char *pc_version(void);

/**
 * Parses a TOML run configuration.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcStatus pc_config_from_toml(const char *text, struct PcConfig **out);

/**
 * Parses a JSON run configuration.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PcStatus pc_config_from_json(const char *text, struct PcConfig **out);

/**
 * # Safety
 * `cfg` must come from `pc_config_from_*` and not be used afterwards.
 */
void pc_config_free(struct PcConfig *cfg);

/**
 * Sets the wall-clock limit in seconds; a non-positive value removes it.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum PcStatus pc_config_set_time_limit(struct PcConfig *cfg, double seconds);

/**
 * # Safety
 * `cfg` must be a live config handle.
 */
enum PcStatus pc_config_set_deterministic(struct PcConfig *cfg, bool on);

/**
 * Runs branch-and-bound certification.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum PcStatus pc_certify(const struct PcConfig *cfg, struct PcCertificate **out);

/**
 * Runs the heuristic attack search; the bound is the root interval bound.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum PcStatus pc_attack(const struct PcConfig *cfg, struct PcCertificate **out);

/**
 * # Safety
 * `cert` must come from `pc_certify` or `pc_attack` and not be used afterwards.
 */
void pc_certificate_free(struct PcCertificate *cert);

/**
 * # Safety
 * `cert` must be a live certificate and `out` a valid pointer.
 */
enum PcStatus pc_certificate_summary(const struct PcCertificate *cert, struct PcSummary *out);

/**
 * Copies the poisoned training indices into `buf` (capacity `cap`) and
 * stores their number in `len`. With a short buffer nothing is copied and
 * `PC_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `buf` must have room for `cap` values (or be NULL with `cap == 0`).
 */
enum PcStatus pc_certificate_poisoned(const struct PcCertificate *cert,
                                      size_t *buf,
                                      size_t cap,
                                      size_t *len);

/**
 * The certificate as JSON. Free the string with `pc_string_free`.
 *
 * # Safety
 * `cert` must be a live certificate and `out` a valid pointer.
 */
enum PcStatus pc_certificate_to_json(const struct PcCertificate *cert, char **out);

/**
 * Builds the attack model and returns it as model-file text. Free the
 * string with `pc_string_free`.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum PcStatus pc_export(const struct PcConfig *cfg, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void pc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POISONCERT_H */
