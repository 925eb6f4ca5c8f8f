/* C ABI for the ldd-audit inference auditing library.
 *
 * Conventions:
 *   - fallible functions return an LDD_* status and write results through
 *     out-pointers;
 *   - on a non-zero status, ldd_last_error() returns a thread-local message
 *     valid until the next call on the same thread;
 *   - char* results are owned by the caller and released with
 *     ldd_string_free();
 *   - structured data crosses as JSON in the same schemas as the wire
 *     protocol and CLI config files.
 */

#ifndef LDD_AUDIT_H
#define LDD_AUDIT_H

#include <stdint.h>
#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define LDD_OK 0
#define LDD_ERR_INVALID_ARGUMENT 1
#define LDD_ERR_NULL_POINTER 2
#define LDD_ERR_COMPUTATION 3
#define LDD_ERR_UTF8 4
#define LDD_ERR_JSON 5
#define LDD_ERR_UNAVAILABLE 6

/* Opaque audited inference server. */
typedef struct LddServer LddServer;

/* Opaque campaign auditor. */
typedef struct LddAuditor LddAuditor;

/* Generalized Pareto tail fit. */
typedef struct LddEvtFit {
  double threshold_u;
  double shape_xi;
  double scale_beta;
  double exceed_rate;
  uint64_t n_exceedances;
} LddEvtFit;

/* Library version as a static string; never freed. */
const char *ldd_version(void);

/* Message for the most recent failure on this thread, or NULL after a
 * success. Valid until the next call on the same thread. */
const char *ldd_last_error(void);

/* Frees a string returned by this library. NULL is a no-op. */
void ldd_string_free(char *s);

/* Total variation distance between softmax(a) and softmax(b). */
int32_t ldd_tv_distance(const double *a, const double *b, size_t len,
                        double *out);

/* KL divergence KL(softmax(a) || softmax(b)). */
int32_t ldd_kl_divergence(const double *a, const double *b, size_t len,
                          double *out);

/* Minimal L1 perturbation of logits making target_set its exact top-k. */
int32_t ldd_topk_distance(const double *logits, size_t len,
                          const uint32_t *target_set, size_t k, double *out);

/* Audits needed so an alpha-dishonest server evades with probability at
 * most eta. */
int32_t ldd_required_samples(double alpha, double p_detect, double eta,
                             uint64_t *out);

/* P[more than k false flags in n audits] at per-request rate fp. */
int32_t ldd_false_reject_prob(uint64_t n, double fp, uint64_t k, double *out);

/* P[more than k flags in n audits] at per-request flag rate p. */
int32_t ldd_detect_prob(uint64_t n, double p, uint64_t k, double *out);

/* Peaks-over-threshold GPD fit of the upper tail_fraction of samples. */
int32_t ldd_fit_evt(const double *samples, size_t len, double tail_fraction,
                    LddEvtFit *out);

/* False-positive rate P[p > t2] under a fitted tail. */
int32_t ldd_estimate_fp_evt(const LddEvtFit *fit, double t2, double *out);

/* Builds a server from a ServerConfig JSON document. NULL on error. */
LddServer *ldd_server_new(const char *config_json, uint64_t seed);

/* Handles one protocol message (JSON), returning the JSON reply. */
char *ldd_server_handle(LddServer *server, const char *message_json);

/* The server's model commitment as a JSON object. */
char *ldd_server_model_commitment(const LddServer *server);

/* Frees a server. NULL is a no-op. */
void ldd_server_free(LddServer *server);

/* Builds an auditor from an AuditorConfig JSON document. NULL on error. */
LddAuditor *ldd_auditor_new(const char *config_json, uint64_t seed);

/* Runs one probe (request, audit, verdict) against an in-process server,
 * returning the ProbeRecord as JSON. */
char *ldd_auditor_probe(LddAuditor *auditor, LddServer *server);

/* Frees an auditor. NULL is a no-op. */
void ldd_auditor_free(LddAuditor *auditor);

#ifdef __cplusplus
}
#endif

#endif /* LDD_AUDIT_H */
