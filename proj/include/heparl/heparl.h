/* heparl C API: offline RL for heparin dosing (pipeline, training, evaluation). */
#ifndef HEPARL_H
#define HEPARL_H

#include <stddef.h>

#if defined(_WIN32)
#define HP_API __declspec(dllexport)
#else
#define HP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Mirrors the process exit codes of the command-line tool. */
typedef enum hp_status {
  HP_OK = 0,
  HP_ERR_INPUT = 2,     /* usage, configuration or input error */
  HP_ERR_PIPELINE = 3,  /* pipeline invariant violation */
  HP_ERR_UNDEFINED = 4  /* evaluation undefined (e.g. all importance weights zero) */
} hp_status;

#define HP_STATE_DIM 16
#define HP_NUM_ACTIONS 6

typedef struct hp_config hp_config;
typedef struct hp_policy hp_policy;

HP_API const char* hp_version(void);

/* Message of the last failed call on this thread; "" if none. */
HP_API const char* hp_last_error(void);
/* Category of the last failure ("configuration error", "usage error", ...). */
HP_API const char* hp_last_error_kind(void);

HP_API hp_config* hp_config_new(void);
HP_API void hp_config_free(hp_config* cfg);
/* Merges a key=value file; later calls and hp_config_set win. */
HP_API hp_status hp_config_load(hp_config* cfg, const char* path);
HP_API hp_status hp_config_set(hp_config* cfg, const char* key, const char* value);
/* Copies the value (NUL-terminated, truncated to cap) into buf. HP_ERR_INPUT if absent. */
HP_API hp_status hp_config_get(const hp_config* cfg, const char* key, char* buf, size_t cap);

/* Subcommands. Each writes into the fresh directory named by `out`. */
HP_API hp_status hp_run(const char* command, const hp_config* cfg);
HP_API hp_status hp_run_etl(const hp_config* cfg);
HP_API hp_status hp_run_simulate(const hp_config* cfg);
HP_API hp_status hp_run_train(const hp_config* cfg);
HP_API hp_status hp_run_evaluate(const hp_config* cfg);
HP_API hp_status hp_run_embed(const hp_config* cfg);
HP_API hp_status hp_run_report(const hp_config* cfg);

/* Trained policies loaded from agent checkpoints. */
HP_API hp_status hp_policy_load(const char* checkpoint_path, hp_policy** out);
HP_API void hp_policy_free(hp_policy* policy);
/* Algorithm tag: "dqn", "double-dqn", "dueling-dqn" or "bcq". */
HP_API const char* hp_policy_algorithm(const hp_policy* policy);
/* q_out receives HP_NUM_ACTIONS values for one z-scored state. */
HP_API hp_status hp_policy_q_values(const hp_policy* policy, const double* state, double* q_out);
/* Greedy action; BCQ restricts the argmax to its eligible set. */
HP_API hp_status hp_policy_select_action(const hp_policy* policy, const double* state, int* action_out);

HP_API hp_status hp_reward_from_aptt(double aptt_seconds, double* reward_out);

#ifdef __cplusplus
}
#endif

#endif
