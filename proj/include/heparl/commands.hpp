#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "heparl/agents.hpp"
#include "heparl/config.hpp"

namespace heparl::cmd {

inline constexpr const char* kVersion = "0.1.0";

// Run-directory manifest: command, resolved config, derived stream seeds,
// input/output SHA-256 digests and UTC timestamps.
class Manifest {
 public:
  Manifest(std::string command, std::uint64_t seed);

  void add_input(const std::filesystem::path& path);
  void note(const std::string& key, const std::string& value);
  // Writes manifest.txt, hashing every regular file already in `dir`.
  void write(const std::filesystem::path& dir, const Config& cfg) const;

  static std::string utc_now();

 private:
  std::string command_;
  std::uint64_t seed_;
  std::string started_;
  std::vector<std::filesystem::path> inputs_;
  std::vector<std::pair<std::string, std::string>> notes_;
};

// `out` must be absent or an empty directory.
void check_run_dir(const Config& cfg);
// Creates `out` after check_run_dir.
std::filesystem::path fresh_run_dir(const Config& cfg);

// Trajectories plus split and behavior probabilities resolved from config:
//   trajectories=PATH (required), split=PATH (default: sibling split.csv,
//   else a seeded patient hash), behavior=auto|exact|estimate,
//   behavior_probs=PATH (default: sibling behavior_probs.csv).
struct LoadedCohort {
  agents::Dataset data;
  std::string behavior_source;
  std::vector<std::filesystem::path> inputs;
};
LoadedCohort load_cohort(const Config& cfg, std::uint64_t seed);

void run_etl(const Config& cfg);
void run_simulate(const Config& cfg);
void run_train(const Config& cfg);
void run_evaluate(const Config& cfg);
void run_embed(const Config& cfg);
void run_report(const Config& cfg);

// Dispatch by name; throws Error(usage) on an unknown command.
void run(const std::string& command, const Config& cfg);

}  // namespace heparl::cmd
