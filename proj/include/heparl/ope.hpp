#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "heparl/nn.hpp"
#include "heparl/traj.hpp"

namespace heparl::ope {

enum class Provenance { softened_greedy, greedy, behavior_estimate, synthetic_clinician };

const char* provenance_name(Provenance p) noexcept;

// Action-probability function over the 6 dose categories, evaluated in batches.
struct PolicySnapshot {
  using BatchFn = std::function<void(std::span<const StateVector>, std::span<ActionProbs>)>;

  Provenance provenance = Provenance::greedy;
  BatchFn batch;

  ActionProbs operator()(const StateVector& s) const;
};

using GreedyFn = std::function<void(std::span<const StateVector>, std::span<int>)>;

// (1 - eps) * onehot(greedy) + eps / 6
ActionProbs soften(int greedy_action, double epsilon);
PolicySnapshot soften_policy(GreedyFn greedy, double epsilon);
// Deterministic greedy policy without softening.
PolicySnapshot greedy_policy(GreedyFn greedy);

// max(p, floor) renormalized to sum to 1.
ActionProbs floor_and_renormalize(const ActionProbs& probs, double floor);

struct BehaviorEstimateOptions {
  std::size_t hidden = 256;
  std::size_t iterations = 3000;
  std::size_t batch = 128;
  double lr = 1e-3;
  double floor = 0.01;
  double validation_fraction = 0.1;
  std::size_t validate_every = 100;
  std::uint64_t seed = 0;
};

// Softmax classifier 16 -> hidden -> hidden -> 6 over (state, logged action)
// pairs, keeping the parameters with the lowest held-out cross-entropy.
struct BehaviorModel {
  nn::Mlp net;
  double floor = 0.01;
  double validation_loss = 0.0;

  PolicySnapshot snapshot() const;
};

BehaviorModel fit_behavior_model(std::span<const Trajectory> train, const BehaviorEstimateOptions& options);
PolicySnapshot estimate_behavior_policy(std::span<const Trajectory> train, const BehaviorEstimateOptions& options);

// Probability the policy assigns to each logged action.
LoggedProbs logged_action_probs(std::span<const Trajectory> trajectories, const PolicySnapshot& policy);

// Sum over steps of log(pi_target / pi_behavior); -inf when the target
// assigns zero probability. Throws Error(evaluation) on a zero behavior
// probability.
double log_ratio(std::span<const double> target, std::span<const double> behavior);

// (1/n) * prod_t pi_target / pi_behavior, computed in log space.
double importance_weight(std::span<const double> target, std::span<const double> behavior, std::size_t n);

struct Estimate {
  double is = 0.0;
  double wis = 0.0;
  double ess = 0.0;  // (sum w)^2 / sum w^2
  std::size_t n = 0;
  bool wis_defined = false;
};

// Per-trajectory (full-horizon) importance sampling over the cohort. The
// reduction runs in patient_id order. WIS is left undefined when every weight
// is zero; use wis_estimate() to get an error instead.
Estimate evaluate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                  double gamma);

double is_estimate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                   double gamma);
// Throws Error(undefined_estimate) when all weights are zero.
double wis_estimate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                    double gamma);

double mean_discounted_return(std::span<const Trajectory> trajectories, double gamma);

}  // namespace heparl::ope
