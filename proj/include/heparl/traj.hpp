#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "heparl/rng.hpp"

namespace heparl {

inline constexpr std::size_t kStateDim = 16;
inline constexpr std::size_t kNumActions = 6;
inline constexpr std::size_t kNumEdges = 4;
inline constexpr std::size_t kMinHours = 7;
inline constexpr std::size_t kMaxHours = 72;

// Canonical state feature order, shared by every stage and file format.
inline constexpr std::array<std::string_view, kStateDim> kFeatureNames = {
    "age",       "gender", "gcs", "dbp",        "sbp",       "rr",  "hgb", "temperature",
    "wbc",       "platelets", "pt", "acd",      "creatinine", "bilirubin", "inr", "weight"};

using StateVector = std::array<double, kStateDim>;
using ActionProbs = std::array<double, kNumActions>;

// Index of a canonical feature, or -1.
int feature_index(std::string_view name) noexcept;

class ActionCategory {
 public:
  constexpr ActionCategory() = default;
  explicit ActionCategory(int index);

  constexpr int index() const noexcept { return index_; }
  friend constexpr bool operator==(ActionCategory, ActionCategory) = default;

 private:
  int index_ = 0;
};

// Sigmoid aPTT reward: ~+1 inside 60-100 s, ~-1 outside, 0 at the bounds.
double reward_from_aptt(double aptt_seconds);

inline bool is_therapeutic(double aptt_seconds) noexcept {
  return aptt_seconds >= 60.0 && aptt_seconds <= 100.0;
}

// Dose thresholds splitting nonzero doses into five categories; category 0
// is reserved for a dose of exactly zero.
class ActionBins {
 public:
  explicit ActionBins(std::array<double, kNumEdges> edges);

  // Edges are the 20/40/60/80th percentiles of the nonzero doses, linear
  // interpolation at index q*(n-1) of the sorted sample.
  static ActionBins fit(std::span<const double> doses);

  ActionCategory discretize(double dose) const;
  const std::array<double, kNumEdges>& edges() const noexcept { return edges_; }

 private:
  std::array<double, kNumEdges> edges_;
};

// Linear-interpolation quantile at index q*(n-1) of an already sorted sample.
double sorted_quantile(std::span<const double> sorted, double q);

struct Transition {
  StateVector state{};
  ActionCategory action;
  double reward = 0.0;
  double aptt_raw = 0.0;  // aPTT at the next observation (backs the reward)
  StateVector next_state{};
  bool terminal = false;
};

struct Trajectory {
  std::string patient_id;
  double initial_aptt = 0.0;  // raw aPTT of the first observed hour
  std::vector<Transition> transitions;

  // Observed hours; T hours carry T-1 transitions.
  std::size_t hours() const noexcept { return transitions.size() + 1; }
  // Raw aPTT observed at hour t, t in [0, hours()).
  double aptt_at(std::size_t t) const;
};

// Checks chaining, terminal placement, and length bounds; throws Error(internal).
void validate_trajectory(const Trajectory& traj);

double discounted_return(const Trajectory& traj, double gamma);

// Offline replay storage. Preloading more than `capacity` transitions keeps
// the most recent ones (ring semantics); nothing is evicted afterwards.
class ReplayBuffer {
 public:
  static constexpr std::size_t kDefaultCapacity = 50000;

  explicit ReplayBuffer(std::size_t capacity = kDefaultCapacity);

  void add(const Transition& t);
  void preload(std::span<const Trajectory> trajectories);

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t evicted() const noexcept { return evicted_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }

  // n distinct indices, uniform without replacement.
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;
  std::vector<Transition> sample(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::size_t evicted_ = 0;
  std::vector<Transition> items_;
};

struct NormalizationStats {
  StateVector mean{};
  StateVector std{};

  // Population mean/std over the given raw rows.
  static NormalizationStats fit(std::span<const StateVector> rows);
  double apply(std::size_t feature, double raw) const noexcept;
  StateVector apply(const StateVector& raw) const noexcept;
  StateVector invert(const StateVector& z) const noexcept;
};

// ---- serialization ------------------------------------------------------

// Processed-trajectory CSV. One row per hour: row t < T-1 carries the state,
// raw aPTT at hour t, the logged action and the transition reward; the
// closing row t = T-1 carries the final observation with empty action and
// reward fields and terminal = 1.
std::string trajectory_csv_header();
std::string write_trajectory_csv(std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_trajectory_csv(std::string_view text);

// Exact probability of each logged action, aligned with trajectories[i].transitions[t].
using LoggedProbs = std::vector<std::vector<double>>;

std::string write_behavior_probs_csv(std::span<const Trajectory> trajectories,
                                     const LoggedProbs& probs);
LoggedProbs read_behavior_probs_csv(std::string_view text,
                                    std::span<const Trajectory> trajectories);

std::string write_normalization_csv(const NormalizationStats& stats);
NormalizationStats read_normalization_csv(std::string_view text);

std::string write_bins_csv(const ActionBins& bins);
ActionBins read_bins_csv(std::string_view text);

}  // namespace heparl
