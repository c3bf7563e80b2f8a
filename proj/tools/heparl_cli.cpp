// heparl: offline RL experiments for heparin dosing.
//
//   heparl <command> [--config PATH] [--seed N] [--out DIR] [INPUT...] [--key value | --key=value]...
//
// Any extra --key sets the configuration key of the same name (dashes become
// underscores); command-line values override the config file.

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "heparl/heparl.h"

namespace {

struct Sub {
  const char* name;
  const char* help;
  const char* input_key;  // key bound to positional arguments, if any
};

constexpr Sub kSubs[] = {
    {"etl", "Raw events CSV to trajectory CSV, stats, bins and exclusions", "events"},
    {"simulate", "Generate a synthetic cohort with exact behavior probabilities", nullptr},
    {"train", "Train dqn, double-dqn, dueling-dqn or bcq on a trajectory CSV", "trajectories"},
    {"evaluate", "IS/WIS/ESS for checkpoints plus the clinician baseline", "checkpoint"},
    {"embed", "t-SNE of learned state representations and value-region report", "checkpoint"},
    {"report", "Merge run directories into comparison tables and curves", "runs"},
};

std::string key_of(std::string flag) {
  while (!flag.empty() && flag.front() == '-') flag.erase(flag.begin());
  for (char& c : flag)
    if (c == '-') c = '_';
  return flag;
}

// Extra arguments in CLI11's order. Returns false with a message on malformed input.
bool parse_extras(const std::vector<std::string>& extras, std::vector<std::pair<std::string, std::string>>& out,
                  std::vector<std::string>& positional, std::string& err) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) {
      if (a.size() > 1 && a[0] == '-') {
        err = "unknown short option '" + a + "'";
        return false;
      }
      positional.push_back(a);
      continue;
    }
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(key_of(a.substr(0, eq)), a.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      out.emplace_back(key_of(a), extras[++i]);
    } else {
      out.emplace_back(key_of(a), "true");
    }
    if (out.back().first.empty()) {
      err = "empty option name in '" + a + "'";
      return false;
    }
  }
  return true;
}

int fail(int code, const std::string& msg) {
  std::fprintf(stderr, "heparl: %s\n", msg.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline reinforcement learning for heparin dosing", "heparl"};
  app.set_version_flag("--version", hp_version());
  app.require_subcommand(1);

  std::string config_path, out_dir, seed;
  std::vector<CLI::App*> subs;
  for (const auto& s : kSubs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->allow_extras();
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--seed", seed, "master seed for all random streams");
    sub->add_option("--out", out_dir, "fresh output run directory");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return HP_ERR_INPUT;
  }

  const Sub* chosen = nullptr;
  CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) chosen = &kSubs[i], sub = subs[i];

  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> positional;
  std::string err;
  if (!parse_extras(sub->remaining(), overrides, positional, err)) return fail(HP_ERR_INPUT, err);
  if (!positional.empty()) {
    if (!chosen->input_key) return fail(HP_ERR_INPUT, std::string(chosen->name) + " takes no positional arguments");
    std::string joined;
    for (const auto& p : positional) joined += (joined.empty() ? "" : ",") + p;
    overrides.emplace(overrides.begin(), chosen->input_key, joined);
  }
  if (!seed.empty()) overrides.emplace_back("seed", seed);
  if (!out_dir.empty()) overrides.emplace_back("out", out_dir);

  hp_config* cfg = hp_config_new();
  if (!cfg) return fail(HP_ERR_PIPELINE, hp_last_error());
  int code = HP_OK;
  if (!config_path.empty() && hp_config_load(cfg, config_path.c_str()) != HP_OK) code = HP_ERR_INPUT;
  for (const auto& [k, v] : overrides) {
    if (code != HP_OK) break;
    if (hp_config_set(cfg, k.c_str(), v.c_str()) != HP_OK) code = HP_ERR_INPUT;
  }
  if (code == HP_OK) code = hp_run(chosen->name, cfg);
  if (code != HP_OK) {
    const std::string kind = hp_last_error_kind();
    fail(code, (kind.empty() ? "" : kind + ": ") + hp_last_error());
  }
  hp_config_free(cfg);
  return code;
}
