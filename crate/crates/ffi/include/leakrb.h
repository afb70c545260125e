#ifndef LEAKRB_H
#define LEAKRB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes. 2 and 3 match the CLI exit codes.
typedef enum LrbStatus {
  LRB_STATUS_OK = 0,
  LRB_STATUS_NULL_POINTER = 1,
  LRB_STATUS_INVALID = 2,
  LRB_STATUS_NUMERICAL = 3,
  LRB_STATUS_UTF8 = 4,
  LRB_STATUS_PANIC = 5,
} LrbStatus;

// A validated RB count dataset.
typedef struct LrbDataset LrbDataset;

// The result of analyzing a dataset under a plan.
typedef struct LrbReport LrbReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *lrb_last_error(void);

// Library version, static storage.
const char *lrb_version(void);

// # Safety
// `s` must come from this library or be NULL.
void lrb_string_free(char *s);

// Parses and validates a dataset JSON document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum LrbStatus lrb_dataset_from_json(const char *json, struct LrbDataset **out);

// Runs the simulator on an RB protocol configuration JSON.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum LrbStatus lrb_dataset_simulate(const char *config_json, struct LrbDataset **out);

// # Safety
// `ds` must be a live dataset handle; `out` must be writable.
enum LrbStatus lrb_dataset_to_json(const struct LrbDataset *ds, char **out);

// Number of circuit records.
//
// # Safety
// `ds` must be a live dataset handle; `out` must be writable.
enum LrbStatus lrb_dataset_len(const struct LrbDataset *ds, size_t *out);

// # Safety
// `ds` must come from this library or be NULL; it is invalid afterwards.
void lrb_dataset_free(struct LrbDataset *ds);

// Analyzes a dataset under an analysis plan JSON.
//
// # Safety
// `ds` must be a live dataset handle, `plan_json` a NUL-terminated string,
// `out` writable.
enum LrbStatus lrb_analyze(const struct LrbDataset *ds,
                           const char *plan_json,
                           struct LrbReport **out);

// Looks up a reported quantity ("r", "t", "lambda", "tau", "infidelity",
// "fidelity", "process_fidelity"). `ci` is NaN when no interval is known.
//
// # Safety
// `report` must be a live handle, `name` a NUL-terminated string, `value`
// and `ci` writable.
enum LrbStatus lrb_report_quantity(const struct LrbReport *report,
                                   const char *name,
                                   double *value,
                                   double *ci);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum LrbStatus lrb_report_to_json(const struct LrbReport *report, char **out);

// # Safety
// `report` must come from this library or be NULL; it is invalid afterwards.
void lrb_report_free(struct LrbReport *report);

// Fits one model ("linear", "exponential-plus-floor", ...) to a decay-curve
// JSON and returns the fit as JSON.
//
// # Safety
// `curve_json` and `model` must be NUL-terminated strings; `out` writable.
enum LrbStatus lrb_fit(const char *curve_json, const char *model, char **out);

// Runs a sweep spec and returns the sweep result as JSON and the CSV table.
// Either output pointer may be NULL to skip it.
//
// # Safety
// `spec_json` must be a NUL-terminated string.
enum LrbStatus lrb_sweep(const char *spec_json, char **out_json, char **out_csv);

// Leaked-action histograms for a built-in gateset name, as JSON.
//
// # Safety
// `gateset` must be a NUL-terminated string; `out` writable.
enum LrbStatus lrb_gateset_audit(const char *gateset, char **out);

// Twirled two-qubit parameters (r, t) of the default error model.
//
// # Safety
// `r` and `t` must be writable.
enum LrbStatus lrb_channel_parameters(double lambda_s,
                                      double tau_s,
                                      bool seepage,
                                      double *r,
                                      double *t);

// Runs the command-line tool in-process with `argc` arguments (argv[0]
// included) and returns its exit status.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int32_t lrb_cli_run(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEAKRB_H */
