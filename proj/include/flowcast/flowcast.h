#ifndef FLOWCAST_FLOWCAST_H
#define FLOWCAST_FLOWCAST_H

/* C interface to the flowcast forecasting library. All entry points return
 * an fc_status; on failure, fc_last_error() holds a human-readable message
 * for the calling thread. Handles are opaque and must be released with the
 * matching free function. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fc_status {
  FC_OK = 0,
  FC_ERROR_INVALID_ARGUMENT = 1,
  FC_ERROR_IO = 2,
  FC_ERROR_RUNTIME = 3
} fc_status;

const char* fc_version(void);

/* Message of the most recent failure on this thread; empty after success. */
const char* fc_last_error(void);

/* Applies the FLOWCAST_THREADS override (default 1) to the process-wide
 * worker-thread cap and reports the value in effect. `applied` may be NULL. */
fc_status fc_init_threads(int* applied);

/* Opaque run configuration. */
typedef struct fc_config fc_config;

fc_status fc_config_load(const char* path, fc_config** out);
fc_status fc_config_parse(const char* json_text, fc_config** out);
void fc_config_free(fc_config* cfg);

fc_status fc_config_hash(const fc_config* cfg, uint64_t* out);
fc_status fc_config_out_dir(const fc_config* cfg, char* buf, size_t cap);

/* JSON template with every key present; free with fc_string_free. */
fc_status fc_default_config(char** out);
void fc_string_free(char* s);

/* Commands. Each validates the config, locks the run directory for the call,
 * and writes its artifacts under out_dir (see the repository README for the
 * layouts). */
fc_status fc_cmd_generate_data(const fc_config* cfg);
fc_status fc_cmd_train(const fc_config* cfg);
fc_status fc_cmd_train_error_net(const fc_config* cfg);
fc_status fc_cmd_forecast(const fc_config* cfg);

/* strategy: none | random | predictive | uncertainty; NULL or "" falls back
 * to the config's sensing.strategy. */
fc_status fc_cmd_assimilate(const fc_config* cfg, const char* strategy);

/* strategy: random | predictive | uncertainty (NULL/"" as above). */
fc_status fc_cmd_place_sensors(const fc_config* cfg, const char* strategy);

/* Runs the theory checks and writes the margin report; *passed is 1 when all
 * checks hold, 0 otherwise. A failed check is still FC_OK: the command ran. */
fc_status fc_cmd_verify(const fc_config* cfg, int* passed);

/* Times greedy placement on a 2000-node mesh; *loglog_slope may be NULL. */
fc_status fc_cmd_benchmark_placement(const fc_config* cfg, double* loglog_slope);

#ifdef __cplusplus
}
#endif

#endif /* FLOWCAST_FLOWCAST_H */
