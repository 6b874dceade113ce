#ifndef CALORIC_LAB_H
#define CALORIC_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every fallible entry point.
typedef enum ClStatus {
  CL_STATUS_OK = 0,
  // Malformed input: bad JSON, dimension mismatch, inadmissible point.
  CL_STATUS_INVALID_INPUT = 1,
  // The computation itself failed: zero mass, unbounded or infeasible LP.
  CL_STATUS_NUMERICAL = 2,
  CL_STATUS_NULL_POINTER = 3,
  // A panic was caught; the library state is unaffected.
  CL_STATUS_PANIC = 4,
} ClStatus;

// Thermal capacity LP instance.
typedef struct ClCapacity ClCapacity;

// Nonnegative space-time measure.
typedef struct ClMeasure ClMeasure;

// Signed spatial measure in a bounded domain.
typedef struct ClTransport ClTransport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *cl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cl_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` is null or was returned by this library and not yet freed.
void cl_string_free(char *s);

// `Γ(x, t)` in `dim` space dimensions; zero for `t <= 0`.
//
// # Safety
// `x` points to `dim` doubles.
enum ClStatus cl_heat_kernel(const double *x, uintptr_t dim, double t, double *out);

// Builds a measure from `len` atoms; `x` holds `len * dim` coordinates row by row.
//
// # Safety
// Array arguments hold the stated number of doubles; `out` is writable.
enum ClStatus cl_measure_new(uintptr_t dim,
                             const double *x,
                             const double *t,
                             const double *w,
                             uintptr_t len,
                             struct ClMeasure **out);

// Parses the JSON measure format written by the CLI.
//
// # Safety
// `json` is a NUL-terminated string; `out` is writable.
enum ClStatus cl_measure_from_json(const char *json, struct ClMeasure **out);

// Serializes a measure; release the result with `cl_string_free`.
//
// # Safety
// `m` is a live handle; `out` is writable.
enum ClStatus cl_measure_to_json(const struct ClMeasure *m, char **out);

// # Safety
// `m` is null or a live handle, which becomes invalid.
void cl_measure_free(struct ClMeasure *m);

// Number of atoms; zero for a null handle.
//
// # Safety
// `m` is null or a live handle.
uintptr_t cl_measure_len(const struct ClMeasure *m);

// # Safety
// `m` is a live handle; `out` is writable.
enum ClStatus cl_measure_total_mass(const struct ClMeasure *m, double *out);

// `F_r(μ) = ∫ (r - ‖p‖)_+ dμ(p)`.
//
// # Safety
// `m` is a live handle; `out` is writable.
enum ClStatus cl_measure_f_r(const struct ClMeasure *m, double r, double *out);

// Blow-up `c T_{center, r}[μ]` as a new handle.
//
// # Safety
// `m` is a live handle; `center_x` points to `dim` doubles; `out` is writable.
enum ClStatus cl_measure_blow_up(const struct ClMeasure *m,
                                 const double *center_x,
                                 uintptr_t dim,
                                 double center_t,
                                 double r,
                                 double c,
                                 struct ClMeasure **out);

// Transport distance `d_{C_r}(μ, ν)`.
//
// # Safety
// `mu` and `nu` are live handles; `out` is writable.
enum ClStatus cl_measure_distance(const struct ClMeasure *mu,
                                  const struct ClMeasure *nu,
                                  double r,
                                  double *out);

// Monte Carlo caloric measure of a domain seen from `pole`. `domain_json` and
// `walk_json` use the CLI config schema in JSON form.
//
// # Safety
// String arguments are NUL-terminated; `pole_x` points to `dim` doubles;
// `out` is writable.
enum ClStatus cl_simulate_caloric_measure(const char *domain_json,
                                          const double *pole_x,
                                          uintptr_t dim,
                                          double pole_t,
                                          const char *walk_json,
                                          struct ClMeasure **out);

// # Safety
// `json` is a NUL-terminated string; `out` is writable.
enum ClStatus cl_transport_from_json(const char *json, struct ClTransport **out);

// # Safety
// `p` is null or a live handle, which becomes invalid.
void cl_transport_free(struct ClTransport *p);

// Kantorovich-Rubinstein norm of the signed measure.
//
// # Safety
// `p` is a live handle; `out` is writable.
enum ClStatus cl_transport_kr_norm(const struct ClTransport *p, double *out);

// Boundary transport distance between the positive and negative parts.
//
// # Safety
// `p` is a live handle; `out` is writable.
enum ClStatus cl_transport_wb1(const struct ClTransport *p, double *out);

// # Safety
// `json` is a NUL-terminated string; `out` is writable.
enum ClStatus cl_capacity_from_json(const char *json, struct ClCapacity **out);

// # Safety
// `p` is null or a live handle, which becomes invalid.
void cl_capacity_free(struct ClCapacity *p);

// Optimal value of the capacity LP.
//
// # Safety
// `p` is a live handle; `out` is writable.
enum ClStatus cl_capacity_value(const struct ClCapacity *p, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CALORIC_LAB_H */
