#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "heparl/config.hpp"
#include "heparl/traj.hpp"

namespace heparl::sim {

// Synthetic ICU coagulation model. aPTT follows first-order dynamics driven
// by the dose category; the other state features are AR(1) signals shaped to
// the cohort statistics of a heparin ICU population, except PT which is read
// off the current aPTT through a noisy linear coupling (the state never
// contains aPTT itself).
struct SimConfig {
  double baseline_mean = 45.0;
  double baseline_sd = 8.0;
  double baseline_min = 25.0;
  double baseline_max = 60.0;
  double kappa_median = 1.0;
  double kappa_log_sd = 0.3;
  double decay = 0.2;  // per hour
  double noise_sd = 3.0;
  std::array<double, kNumActions> dose_effects{0.0, 3.0, 6.0, 9.0, 12.0, 15.0};
  int horizon_min = 7;
  int horizon_max = 72;
  double aptt_min = 15.0;
  double aptt_max = 200.0;
  double clinician_rule_prob = 0.9;
  double ar_phi = 0.9;
  double pt_aptt_slope = 0.12;
  double pt_noise_sd = 0.6;
  bool confound = false;

  static SimConfig from(const Config& cfg);
};

struct PatientParams {
  double baseline_aptt = 45.0;
  double sensitivity = 1.0;  // kappa
  double decay = 0.2;
  double noise_sd = 3.0;
  int horizon = 7;            // observed hours
  StateVector feature_level{};  // per-patient level of each raw feature
};

struct SimState {
  double aptt = 45.0;
  StateVector features{};  // raw canonical features, PT consistent with aptt
  int prev_action = 0;
};

// Target mean / sd of each raw canonical feature.
struct FeatureTarget {
  double mean;
  double sd;
};
const std::array<FeatureTarget, kStateDim>& feature_targets();
inline constexpr double kApttTargetMean = 67.3;

PatientParams sample_patient(const SimConfig& cfg, Rng& rng);
SimState initial_state(const SimConfig& cfg, const PatientParams& p, Rng& rng);

// Deterministic part of the aPTT update, clipped to the physiological range.
double next_aptt(const SimConfig& cfg, const PatientParams& p, double aptt, int action, double noise);

// One hour of dynamics. All random draws come from `rng` in a fixed order that
// does not depend on the action.
SimState step(const SimConfig& cfg, const PatientParams& p, const SimState& s, ActionCategory a, Rng& rng);

// Titration rule: raise the previous category when aPTT < 60, lower it when
// aPTT > 100, otherwise repeat it.
int clinician_rule_action(double aptt, int prev_action);
ActionProbs clinician_probs(const SimConfig& cfg, double aptt, int prev_action);
// Draws from clinician_probs; returns the action and its exact probability.
std::pair<ActionCategory, double> synthetic_clinician(const SimConfig& cfg, const SimState& s, Rng& rng);

// Inverse-CDF draw using one uniform variate.
int sample_action(const ActionProbs& probs, Rng& rng);

struct Cohort {
  std::vector<Trajectory> trajectories;  // z-scored states, raw aPTT
  LoggedProbs behavior;                  // exact probability of each logged action
  NormalizationStats stats;              // fitted on this cohort's raw states
  std::vector<PatientParams> patients;
  std::vector<std::vector<StateVector>> raw_states;  // [patient][hour]
};

// Patient i uses streams base + 2i (dynamics) and base + 2i + 1 (actions),
// base being the "cohort" sub-stream of seed,
// through mix64, so any subset can be regenerated independently.
Cohort generate_cohort(const SimConfig& cfg, std::size_t n, std::uint64_t seed);

// What a policy may look at during a rollout. `state` is z-scored with the
// cohort statistics; the simulator internals are exposed for the synthetic
// clinician and for oracle policies.
struct Observation {
  StateVector state{};
  const SimState* sim = nullptr;
  const PatientParams* patient = nullptr;
};

using BatchPolicy = std::function<void(std::span<const Observation>, std::span<ActionProbs>)>;

BatchPolicy clinician_policy(const SimConfig& cfg);
// Per step, the category whose noiseless next aPTT lands closest to 80 s
// using the patient's latent parameters.
BatchPolicy oracle_policy(const SimConfig& cfg);
BatchPolicy constant_policy(int action);

struct MonteCarloResult {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

// Fresh rollouts under `policy`, simulated in lockstep so the policy sees
// whole batches; identical to serial rollouts by construction.
MonteCarloResult monte_carlo_value(const SimConfig& cfg, const NormalizationStats& stats, const BatchPolicy& policy,
                                   std::size_t n_rollouts, double gamma, std::uint64_t seed);

}  // namespace heparl::sim
