#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "heparl/config.hpp"
#include "heparl/nn.hpp"
#include "heparl/ope.hpp"
#include "heparl/sim.hpp"
#include "heparl/traj.hpp"

namespace heparl::agents {

enum class Algorithm { dqn, double_dqn, dueling_dqn, bcq };

const char* algorithm_name(Algorithm a) noexcept;
Algorithm parse_algorithm(std::string_view name);

struct TrainerConfig {
  double gamma = 0.99;
  std::size_t minibatch = 32;
  std::size_t iterations = 100000;  // one iteration = one minibatch step
  std::size_t eval_every = 200;
  std::size_t target_update_every = 500;
  double rho = 0.99;  // Polyak: target <- rho * target + (1 - rho) * online
  double lr = 5e-5;
  double adam_eps = 1e-4;
  double tau = 0.3;
  std::uint64_t seed = 0;
  bool detach_behavior_trunk = false;
  std::size_t behavior_pretrain_iters = 0;
  std::size_t hidden = 256;
  std::size_t depth = 3;  // number of hidden trunk layers
  std::size_t head_hidden = 128;
  nn::Init init = nn::Init::fan_in;
  double softening_epsilon = 0.01;
  double eval_gamma = 0.99;
  std::size_t eval_max_trajectories = 0;  // 0 = evaluate on every trajectory
  std::size_t probe_size = 256;
  std::size_t buffer_capacity = 50000;

  static TrainerConfig from(const Config& cfg);
  void validate() const;
};

// ---- action selection ----------------------------------------------------

using QValues = std::array<double, kNumActions>;
using ActionMask = std::array<bool, kNumActions>;

// Lowest index among maxima.
int argmax(std::span<const double> values);
int argmax_masked(std::span<const double> values, const ActionMask& mask);

// {a : G(a|s) / max G > tau}. Throws Error(config) unless 0 <= tau < 1.
ActionMask bcq_eligible_actions(const ActionProbs& behavior_probs, double tau);
int bcq_select_action(const QValues& q, const ActionProbs& behavior_probs, double tau);

// Q = V + A - mean(A), column-wise. value is 1 x B, advantage 6 x B.
nn::Matrix dueling_q_forward(const nn::Matrix& value, const nn::Matrix& advantage);

// ---- TD targets (columns are samples) ---------------------------------------

struct TdBatch {
  std::vector<double> reward;
  std::vector<bool> terminal;
};

// y = r + gamma * max_a' Q_target(s', a')
std::vector<double> dqn_target(const TdBatch& batch, const nn::Matrix& q_target_next, double gamma);
// a* = argmax Q_online(s'); y = r + gamma * Q_target(s', a*)
std::vector<double> double_dqn_target(const TdBatch& batch, const nn::Matrix& q_online_next,
                                      const nn::Matrix& q_target_next, double gamma);
// As double_dqn_target with a* restricted to the eligible set at s'.
std::vector<double> bcq_target(const TdBatch& batch, const nn::Matrix& q_online_next, const nn::Matrix& q_target_next,
                               const nn::Matrix& behavior_probs_next, double tau, double gamma);

// ---- networks ----------------------------------------------------------------

// Shared ReLU trunk plus algorithm-specific heads:
//   dqn / double-dqn: linear Q head
//   dueling-dqn:      value and advantage streams (one 128-node layer each)
//   bcq:              linear Q head + behavior head (two 128-node layers, softmax)
class QModel {
 public:
  struct Output {
    nn::Matrix q;         // 6 x B
    nn::Matrix behavior;  // 6 x B probabilities (bcq only)
    nn::Matrix hidden;    // penultimate trunk activations
  };

  struct Cache {
    nn::ForwardCache trunk, q_head, value_head, advantage_head, behavior_head;
    Output out;
  };

  struct Grads {
    nn::MlpGrads trunk, q_head, value_head, advantage_head, behavior_head;
  };

  static QModel make(Algorithm algorithm, const TrainerConfig& cfg, Rng& rng);
  static QModel from_parts(Algorithm algorithm, nn::Mlp trunk, nn::Mlp q_head, nn::Mlp value_head,
                           nn::Mlp advantage_head, nn::Mlp behavior_head);

  Algorithm algorithm() const noexcept { return algorithm_; }
  bool has_behavior_head() const noexcept { return !behavior_head_.empty(); }

  Output forward(const nn::Matrix& states) const;
  const Output& forward(const nn::Matrix& states, Cache& cache) const;

  // dq: dL/dQ (6 x B). dbehavior_logits: dL/d(behavior logits) or null.
  Grads backward(const Cache& cache, const nn::Matrix& dq, const nn::Matrix* dbehavior_logits,
                 bool detach_behavior_trunk) const;

  // Greedy action per column: BCQ restricts the argmax to eligible actions.
  std::vector<int> select_actions(const Output& out, double tau) const;
  // Q of the selected action per column.
  std::vector<double> selected_q(const Output& out, double tau) const;

  // Named parts in a fixed order (empty parts skipped).
  std::vector<std::pair<std::string, const nn::Mlp*>> parts() const;
  std::vector<std::pair<std::string, nn::Mlp*>> mutable_parts();

  std::size_t num_params() const;

 private:
  Algorithm algorithm_ = Algorithm::dqn;
  nn::Mlp trunk_, q_head_, value_head_, advantage_head_, behavior_head_;
};

// Adam state for every part of a QModel.
struct QAdam {
  std::vector<nn::AdamState> states;
  static QAdam for_model(const QModel& model, nn::AdamOptions options);
  void step(QModel& model, const QModel::Grads& grads);
};

void polyak_update(QModel& target, const QModel& online, double rho);

nn::Matrix states_to_matrix(std::span<const StateVector> states);

// Greedy action function usable by OPE policy snapshots.
ope::GreedyFn greedy_fn(const QModel& model, double tau);
// Deterministic one-hot rollout policy for the simulator.
sim::BatchPolicy greedy_rollout_policy(const QModel& model, double tau);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  QModel model;
  double tau = 0.3;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view text);

// ---- training ----------------------------------------------------------------------

struct Dataset {
  std::vector<Trajectory> train, test;
  LoggedProbs behavior_train, behavior_test;  // probability of each logged action
};

struct MetricsRow {
  std::size_t iteration = 0;
  double wis_train = 0.0, wis_test = 0.0;
  double mean_q_train = 0.0, mean_q_test = 0.0;
  double td_loss = 0.0;
  std::optional<double> behavior_loss;
};

std::string metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  QModel final_model;
  QModel best_model;  // highest test WIS
  std::size_t best_iteration = 0;
  std::size_t buffer_evicted = 0;
};

using EvalCallback = std::function<void(const MetricsRow&, const QModel&)>;

// Offline training loop: minibatch TD steps on the preloaded replay buffer
// (plus a behavior-cloning step per iteration for BCQ), Polyak target
// blending every target_update_every iterations, evaluation every eval_every.
TrainResult train_run(const Dataset& data, Algorithm algorithm, const TrainerConfig& cfg,
                      const EvalCallback& on_eval = {});

// Per-action counts of logged and policy actions over a cohort.
struct ActionCounts {
  std::array<std::size_t, kNumActions> clinician{};
  std::array<std::size_t, kNumActions> policy{};
};
ActionCounts action_distribution(const QModel& model, std::span<const Trajectory> trajectories, double tau);

}  // namespace heparl::agents
