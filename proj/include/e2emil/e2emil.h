#ifndef E2EMIL_H
#define E2EMIL_H

/* C interface to the e2emil library. Every fallible call returns an e2emil_status;
 * on failure e2emil_last_error() describes the error for the calling thread until
 * the next failing call. Handles are opaque and owned by the caller. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(E2EMIL_BUILDING)
#    define E2EMIL_API __declspec(dllexport)
#  else
#    define E2EMIL_API __declspec(dllimport)
#  endif
#else
#  define E2EMIL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values double as CLI exit codes. */
typedef enum e2emil_status {
  E2EMIL_OK = 0,
  E2EMIL_INVALID_ARGUMENT = 1,
  E2EMIL_CONFIG_ERROR = 2,
  E2EMIL_IO_ERROR = 3,
  E2EMIL_VERIFICATION_FAILED = 4,
  E2EMIL_COLLECTIVE_ERROR = 5,
  E2EMIL_INTERNAL_ERROR = 6
} e2emil_status;

typedef struct e2emil_config e2emil_config;
typedef struct e2emil_dataset e2emil_dataset;
typedef struct e2emil_model e2emil_model;

E2EMIL_API const char* e2emil_version(void);
E2EMIL_API const char* e2emil_status_name(e2emil_status status);
/* Message of the last failure on this thread; "" if none. */
E2EMIL_API const char* e2emil_last_error(void);

/* ---- configuration ---- */

E2EMIL_API e2emil_status e2emil_config_create(e2emil_config** out);
E2EMIL_API void e2emil_config_destroy(e2emil_config* config);
/* Applies a key = value file on top of the current values. */
E2EMIL_API e2emil_status e2emil_config_load_file(e2emil_config* config, const char* path);
E2EMIL_API e2emil_status e2emil_config_set(e2emil_config* config, const char* key, const char* value);
/* Copies the value, NUL-terminated, into buf when it fits. *needed (optional)
 * receives the required size including the terminator. */
E2EMIL_API e2emil_status e2emil_config_get(const e2emil_config* config, const char* key, char* buf, size_t cap,
                                           size_t* needed);
/* Resolved configuration text, same buffer contract as e2emil_config_get. */
E2EMIL_API e2emil_status e2emil_config_dump(const e2emil_config* config, char* buf, size_t cap, size_t* needed);

/* ---- datasets ---- */

E2EMIL_API e2emil_status e2emil_dataset_generate(const e2emil_config* config, e2emil_dataset** out);
E2EMIL_API e2emil_status e2emil_dataset_load(const char* path, e2emil_dataset** out);
E2EMIL_API e2emil_status e2emil_dataset_save(const e2emil_dataset* dataset, const char* path);
E2EMIL_API void e2emil_dataset_destroy(e2emil_dataset* dataset);
E2EMIL_API size_t e2emil_dataset_size(const e2emil_dataset* dataset);
E2EMIL_API size_t e2emil_dataset_tile_dim(const e2emil_dataset* dataset);
E2EMIL_API uint64_t e2emil_dataset_checksum(const e2emil_dataset* dataset);
E2EMIL_API e2emil_status e2emil_dataset_slide_info(const e2emil_dataset* dataset, size_t index, size_t* n_tiles,
                                                   int* label, size_t* n_witness);

/* ---- models ---- */

/* Initial parameters from the config's model keys and seed. */
E2EMIL_API e2emil_status e2emil_model_init(const e2emil_config* config, size_t tile_dim, e2emil_model** out);
E2EMIL_API e2emil_status e2emil_model_load(const char* path, e2emil_model** out);
E2EMIL_API e2emil_status e2emil_model_save(const e2emil_model* model, const char* path);
E2EMIL_API void e2emil_model_destroy(e2emil_model* model);
E2EMIL_API uint64_t e2emil_model_checksum(const e2emil_model* model);
/* Slide-level probability on the first max_tiles tiles (0 means all). */
E2EMIL_API e2emil_status e2emil_model_infer(const e2emil_model* model, const e2emil_dataset* dataset, size_t index,
                                            size_t max_tiles, double* probability);

/* ---- commands ---- */

E2EMIL_API e2emil_status e2emil_cmd_gen_data(const e2emil_config* config);
E2EMIL_API e2emil_status e2emil_cmd_train(const e2emil_config* config);
E2EMIL_API e2emil_status e2emil_cmd_verify_equivalence(const e2emil_config* config);
E2EMIL_API e2emil_status e2emil_cmd_gradcheck(const e2emil_config* config);
E2EMIL_API e2emil_status e2emil_cmd_sweep_k(const e2emil_config* config);
/* write_csv nonzero: also write report.csv under the config's out directory. */
E2EMIL_API e2emil_status e2emil_cmd_report(const e2emil_config* config, const char* const* run_dirs, size_t n_dirs,
                                           int write_csv);

#ifdef __cplusplus
}
#endif

#endif
