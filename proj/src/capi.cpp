#include "heparl/heparl.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "heparl/agents.hpp"
#include "heparl/commands.hpp"
#include "heparl/error.hpp"
#include "heparl/io.hpp"

struct hp_config {
  heparl::Config cfg;
};

struct hp_policy {
  heparl::agents::Checkpoint ckpt;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_kind;

void clear_error() {
  g_error.clear();
  g_kind.clear();
}

hp_status fail(hp_status status, const char* kind, std::string msg) {
  g_kind = kind;
  g_error = std::move(msg);
  return status;
}

template <class F>
hp_status guarded(F&& f) {
  clear_error();
  try {
    f();
    return HP_OK;
  } catch (const heparl::Error& e) {
    return fail(static_cast<hp_status>(heparl::exit_code(e.code())), heparl::errc_name(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(HP_ERR_PIPELINE, "internal error", "out of memory");
  } catch (const std::exception& e) {
    return fail(HP_ERR_PIPELINE, "internal error", e.what());
  } catch (...) {
    return fail(HP_ERR_PIPELINE, "internal error", "unknown failure");
  }
}

hp_status null_arg(const char* what) { return fail(HP_ERR_INPUT, "usage error", std::string("null argument: ") + what); }

}  // namespace

extern "C" {

const char* hp_version(void) { return heparl::cmd::kVersion; }

const char* hp_last_error(void) { return g_error.c_str(); }

const char* hp_last_error_kind(void) { return g_kind.c_str(); }

hp_config* hp_config_new(void) {
  clear_error();
  try {
    return new hp_config{};
  } catch (...) {
    fail(HP_ERR_PIPELINE, "internal error", "out of memory");
    return nullptr;
  }
}

void hp_config_free(hp_config* cfg) { delete cfg; }

hp_status hp_config_load(hp_config* cfg, const char* path) {
  if (!cfg || !path) return null_arg("cfg/path");
  return guarded([&] { cfg->cfg.merge(heparl::Config::load(path)); });
}

hp_status hp_config_set(hp_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_arg("cfg/key/value");
  return guarded([&] {
    const std::string k = heparl::io::trim(key);
    if (k.empty()) throw heparl::Error(heparl::Errc::usage, "empty configuration key");
    cfg->cfg.set(k, heparl::io::trim(value));
  });
}

hp_status hp_config_get(const hp_config* cfg, const char* key, char* buf, size_t cap) {
  if (!cfg || !key || !buf || cap == 0) return null_arg("cfg/key/buf");
  return guarded([&] {
    const auto v = cfg->cfg.raw(key);
    if (!v) throw heparl::Error(heparl::Errc::usage, std::string("no configuration key '") + key + "'");
    const std::size_t n = std::min(cap - 1, v->size());
    std::memcpy(buf, v->data(), n);
    buf[n] = '\0';
  });
}

hp_status hp_run(const char* command, const hp_config* cfg) {
  if (!command || !cfg) return null_arg("command/cfg");
  return guarded([&] { heparl::cmd::run(command, cfg->cfg); });
}

hp_status hp_run_etl(const hp_config* cfg) { return hp_run("etl", cfg); }
hp_status hp_run_simulate(const hp_config* cfg) { return hp_run("simulate", cfg); }
hp_status hp_run_train(const hp_config* cfg) { return hp_run("train", cfg); }
hp_status hp_run_evaluate(const hp_config* cfg) { return hp_run("evaluate", cfg); }
hp_status hp_run_embed(const hp_config* cfg) { return hp_run("embed", cfg); }
hp_status hp_run_report(const hp_config* cfg) { return hp_run("report", cfg); }

hp_status hp_policy_load(const char* checkpoint_path, hp_policy** out) {
  if (!checkpoint_path || !out) return null_arg("checkpoint_path/out");
  *out = nullptr;
  return guarded([&] {
    auto ckpt = heparl::agents::deserialize_checkpoint(heparl::io::read_file(checkpoint_path));
    *out = new hp_policy{std::move(ckpt)};
  });
}

void hp_policy_free(hp_policy* policy) { delete policy; }

const char* hp_policy_algorithm(const hp_policy* policy) {
  if (!policy) return "";
  return heparl::agents::algorithm_name(policy->ckpt.model.algorithm());
}

hp_status hp_policy_q_values(const hp_policy* policy, const double* state, double* q_out) {
  if (!policy || !state || !q_out) return null_arg("policy/state/q_out");
  return guarded([&] {
    heparl::nn::Matrix x(HP_STATE_DIM, 1);
    for (int i = 0; i < HP_STATE_DIM; ++i) x(i, 0) = state[i];
    const auto out = policy->ckpt.model.forward(x);
    for (int a = 0; a < HP_NUM_ACTIONS; ++a) q_out[a] = out.q(a, 0);
  });
}

hp_status hp_policy_select_action(const hp_policy* policy, const double* state, int* action_out) {
  if (!policy || !state || !action_out) return null_arg("policy/state/action_out");
  return guarded([&] {
    heparl::nn::Matrix x(HP_STATE_DIM, 1);
    for (int i = 0; i < HP_STATE_DIM; ++i) x(i, 0) = state[i];
    const auto& model = policy->ckpt.model;
    *action_out = model.select_actions(model.forward(x), policy->ckpt.tau).front();
  });
}

hp_status hp_reward_from_aptt(double aptt_seconds, double* reward_out) {
  if (!reward_out) return null_arg("reward_out");
  return guarded([&] { *reward_out = heparl::reward_from_aptt(aptt_seconds); });
}

}  // extern "C"
