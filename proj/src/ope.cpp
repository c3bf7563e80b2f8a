#include "heparl/ope.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "heparl/error.hpp"

namespace heparl::ope {

const char* provenance_name(Provenance p) noexcept {
  switch (p) {
    case Provenance::softened_greedy: return "softened-greedy";
    case Provenance::greedy: return "greedy";
    case Provenance::behavior_estimate: return "behavior-estimate";
    case Provenance::synthetic_clinician: return "synthetic-clinician";
  }
  return "policy";
}

ActionProbs PolicySnapshot::operator()(const StateVector& s) const {
  ActionProbs out{};
  batch(std::span<const StateVector>(&s, 1), std::span<ActionProbs>(&out, 1));
  return out;
}

ActionProbs soften(int greedy_action, double epsilon) {
  ActionProbs p;
  p.fill(epsilon / static_cast<double>(kNumActions));
  p[static_cast<std::size_t>(ActionCategory(greedy_action).index())] += 1.0 - epsilon;
  return p;
}

PolicySnapshot soften_policy(GreedyFn greedy, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error(Errc::config, "softening epsilon must lie in (0, 1)");
  PolicySnapshot snap;
  snap.provenance = Provenance::softened_greedy;
  snap.batch = [greedy = std::move(greedy), epsilon](std::span<const StateVector> states, std::span<ActionProbs> out) {
    std::vector<int> actions(states.size());
    greedy(states, actions);
    for (std::size_t i = 0; i < states.size(); ++i) out[i] = soften(actions[i], epsilon);
  };
  return snap;
}

PolicySnapshot greedy_policy(GreedyFn greedy) {
  PolicySnapshot snap;
  snap.provenance = Provenance::greedy;
  snap.batch = [greedy = std::move(greedy)](std::span<const StateVector> states, std::span<ActionProbs> out) {
    std::vector<int> actions(states.size());
    greedy(states, actions);
    for (std::size_t i = 0; i < states.size(); ++i) {
      out[i].fill(0.0);
      out[i][static_cast<std::size_t>(ActionCategory(actions[i]).index())] = 1.0;
    }
  };
  return snap;
}

ActionProbs floor_and_renormalize(const ActionProbs& probs, double floor) {
  ActionProbs out;
  double total = 0.0;
  for (std::size_t a = 0; a < kNumActions; ++a) {
    out[a] = std::max(probs[a], floor);
    total += out[a];
  }
  for (double& p : out) p /= total;
  return out;
}

namespace {

nn::Matrix to_matrix(std::span<const StateVector> states) {
  nn::Matrix m(static_cast<Eigen::Index>(kStateDim), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t f = 0; f < kStateDim; ++f) m(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(i)) = states[i][f];
  }
  return m;
}

}  // namespace

PolicySnapshot BehaviorModel::snapshot() const {
  PolicySnapshot snap;
  snap.provenance = Provenance::behavior_estimate;
  snap.batch = [net = net, floor = floor](std::span<const StateVector> states, std::span<ActionProbs> out) {
    constexpr std::size_t kChunk = 4096;
    for (std::size_t start = 0; start < states.size(); start += kChunk) {
      const std::size_t len = std::min(kChunk, states.size() - start);
      const nn::Matrix p = net.forward(to_matrix(states.subspan(start, len)));
      for (std::size_t i = 0; i < len; ++i) {
        ActionProbs raw;
        for (std::size_t a = 0; a < kNumActions; ++a) raw[a] = p(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i));
        out[start + i] = floor_and_renormalize(raw, floor);
      }
    }
  };
  return snap;
}

BehaviorModel fit_behavior_model(std::span<const Trajectory> train, const BehaviorEstimateOptions& o) {
  std::vector<StateVector> states;
  std::vector<int> labels;
  for (const Trajectory& traj : train) {
    for (const Transition& t : traj.transitions) {
      states.push_back(t.state);
      labels.push_back(t.action.index());
    }
  }
  if (states.empty()) throw Error(Errc::evaluation, "behavior estimation needs a nonempty training set");
  if (!(o.floor >= 0.0 && o.floor * kNumActions < 1.0)) throw Error(Errc::config, "behavior floor out of range");

  Rng rng = make_stream(o.seed, "behavior");
  std::vector<std::size_t> order(states.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(o.validation_fraction * static_cast<double>(states.size())));
  if (states.size() < 20) n_val = 0;
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  const std::vector<std::size_t> fit_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  auto gather = [&](const std::vector<std::size_t>& idx, nn::Matrix& x, std::vector<int>& y) {
    x.resize(static_cast<Eigen::Index>(kStateDim), static_cast<Eigen::Index>(idx.size()));
    y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t f = 0; f < kStateDim; ++f) {
        x(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(i)) = states[idx[i]][f];
      }
      y[i] = labels[idx[i]];
    }
  };
  nn::Matrix x_val;
  std::vector<int> y_val;
  gather(val_idx, x_val, y_val);

  const std::size_t sizes[] = {kStateDim, o.hidden, o.hidden, kNumActions};
  BehaviorModel model;
  model.floor = o.floor;
  model.net = nn::Mlp::make(sizes, nn::Activation::relu, nn::Activation::softmax, rng);
  // start from the uniform distribution
  model.net.mutable_layers().back().weight.setZero();
  model.net.mutable_layers().back().bias.setZero();
  nn::AdamOptions adam_opts;
  adam_opts.lr = o.lr;
  adam_opts.eps = 1e-8;
  nn::AdamState adam = nn::AdamState::for_params(model.net, adam_opts);

  auto validation_loss = [&]() {
    nn::ForwardCache cache;
    model.net.forward(x_val, &cache);
    return nn::softmax_cross_entropy(cache.pre.back(), y_val).first;
  };

  nn::Mlp best = model.net;
  double best_loss = n_val ? validation_loss() : std::numeric_limits<double>::infinity();
  const std::size_t batch = std::min(o.batch, fit_idx.size());
  std::uniform_int_distribution<std::size_t> pick(0, fit_idx.size() - 1);
  nn::Matrix xb;
  std::vector<int> yb;
  std::vector<std::size_t> bidx(batch);
  for (std::size_t it = 1; it <= o.iterations; ++it) {
    for (auto& b : bidx) b = fit_idx[pick(rng)];
    gather(bidx, xb, yb);
    nn::ForwardCache cache;
    model.net.forward(xb, &cache);
    auto [loss, dlogits] = nn::softmax_cross_entropy(cache.pre.back(), yb);
    if (!std::isfinite(loss)) throw Error(Errc::evaluation, "behavior estimation diverged (loss is not finite)");
    const nn::MlpGrads g = model.net.backward(cache, dlogits, nullptr, true);
    nn::adam_step(model.net, g, adam);
    if (n_val && (it % o.validate_every == 0 || it == o.iterations)) {
      const double v = validation_loss();
      if (!std::isfinite(v)) throw Error(Errc::evaluation, "behavior estimation diverged (validation loss)");
      if (v < best_loss) {
        best_loss = v;
        best = model.net;
      }
    }
  }
  if (n_val) {
    model.net = best;
    model.validation_loss = best_loss;
  }
  return model;
}

PolicySnapshot estimate_behavior_policy(std::span<const Trajectory> train, const BehaviorEstimateOptions& options) {
  return fit_behavior_model(train, options).snapshot();
}

LoggedProbs logged_action_probs(std::span<const Trajectory> trajectories, const PolicySnapshot& policy) {
  std::vector<StateVector> states;
  for (const Trajectory& traj : trajectories) {
    for (const Transition& t : traj.transitions) states.push_back(t.state);
  }
  std::vector<ActionProbs> probs(states.size());
  policy.batch(states, probs);
  LoggedProbs out(trajectories.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    out[i].reserve(trajectories[i].transitions.size());
    for (const Transition& t : trajectories[i].transitions) {
      out[i].push_back(probs[k++][static_cast<std::size_t>(t.action.index())]);
    }
  }
  return out;
}

double log_ratio(std::span<const double> target, std::span<const double> behavior) {
  if (target.size() != behavior.size()) throw Error(Errc::shape, "target/behavior probability length mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (!(behavior[t] > 0.0)) {
      throw Error(Errc::evaluation, "behavior probability of a logged action is zero (missing floor?)");
    }
    if (target[t] <= 0.0) return -std::numeric_limits<double>::infinity();
    total += std::log(target[t]) - std::log(behavior[t]);
  }
  return total;
}

double importance_weight(std::span<const double> target, std::span<const double> behavior, std::size_t n) {
  if (n == 0) throw Error(Errc::domain, "cohort size must be positive");
  return std::exp(log_ratio(target, behavior)) / static_cast<double>(n);
}

Estimate evaluate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                  double gamma) {
  const std::size_t n = trajectories.size();
  if (n == 0) throw Error(Errc::evaluation, "empty cohort");
  if (target.size() != n || behavior.size() != n) throw Error(Errc::shape, "probabilities misaligned with cohort");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trajectories[a].patient_id < trajectories[b].patient_id;
  });

  std::vector<double> logw(n), ret(n);
  double max_logw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    logw[k] = log_ratio(target[i], behavior[i]);
    ret[k] = discounted_return(trajectories[i], gamma);
    max_logw = std::max(max_logw, logw[k]);
  }

  Estimate e;
  e.n = n;
  if (!std::isfinite(max_logw)) return e;  // every weight is zero

  // Shifted weights: w_k = exp(max) * s_k / n.
  double sum_s = 0.0, sum_s2 = 0.0, sum_sg = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double s = std::exp(logw[k] - max_logw);
    sum_s += s;
    sum_s2 += s * s;
    sum_sg += s * ret[k];
  }
  e.is = std::exp(max_logw) * sum_sg / static_cast<double>(n);
  e.wis = sum_sg / sum_s;
  e.ess = sum_s * sum_s / sum_s2;
  e.wis_defined = true;
  return e;
}

double is_estimate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                   double gamma) {
  return evaluate(trajectories, target, behavior, gamma).is;
}

double wis_estimate(std::span<const Trajectory> trajectories, const LoggedProbs& target, const LoggedProbs& behavior,
                    double gamma) {
  const Estimate e = evaluate(trajectories, target, behavior, gamma);
  if (!e.wis_defined) throw Error(Errc::undefined_estimate, "WIS is undefined: every importance weight is zero");
  return e.wis;
}

double mean_discounted_return(std::span<const Trajectory> trajectories, double gamma) {
  if (trajectories.empty()) throw Error(Errc::evaluation, "empty cohort");
  std::vector<std::size_t> order(trajectories.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trajectories[a].patient_id < trajectories[b].patient_id;
  });
  double total = 0.0;
  for (std::size_t i : order) total += discounted_return(trajectories[i], gamma);
  return total / static_cast<double>(trajectories.size());
}

}  // namespace heparl::ope
