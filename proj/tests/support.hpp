#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "heparl/nn.hpp"
#include "heparl/traj.hpp"

namespace heparl::testing {

// Reward computed straight from the sigmoid definition, kept apart from the library.
inline double reward_oracle(double aptt) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return 2.0 * sig(aptt - 60.0) - 2.0 * sig(aptt - 100.0) - 1.0;
}

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Central difference of f at x along coordinate i.
inline double central_diff(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double keep = x;
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  return (up - down) / (2.0 * h);
}

inline StateVector random_state(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  StateVector s;
  for (double& v : s) v = n(rng);
  return s;
}

// Chained trajectory with the given actions and rewards; states are random.
inline Trajectory make_trajectory(const std::string& id, const std::vector<int>& actions,
                                  const std::vector<double>& rewards, Rng& rng) {
  Trajectory t;
  t.patient_id = id;
  t.initial_aptt = 70.0;
  StateVector s = random_state(rng);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    Transition tr;
    tr.state = s;
    tr.action = ActionCategory(actions[i]);
    tr.reward = rewards[i];
    tr.aptt_raw = 70.0;
    s = random_state(rng);
    tr.next_state = s;
    tr.terminal = i + 1 == actions.size();
    t.transitions.push_back(tr);
  }
  return t;
}

inline Trajectory random_trajectory(const std::string& id, std::size_t transitions, Rng& rng) {
  std::uniform_int_distribution<int> act(0, static_cast<int>(kNumActions) - 1);
  std::uniform_real_distribution<double> rew(-1.0, 1.0);
  std::vector<int> a(transitions);
  std::vector<double> r(transitions);
  for (std::size_t i = 0; i < transitions; ++i) a[i] = act(rng), r[i] = rew(rng);
  return make_trajectory(id, a, r, rng);
}

}  // namespace heparl::testing
