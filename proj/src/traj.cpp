#include "heparl/traj.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>

#include "heparl/error.hpp"
#include "heparl/io.hpp"

namespace heparl {

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::string where(std::size_t line) { return "line " + std::to_string(line) + ": "; }

}  // namespace

int feature_index(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kFeatureNames.size(); ++i) {
    if (kFeatureNames[i] == name) return static_cast<int>(i);
  }
  return -1;
}

ActionCategory::ActionCategory(int index) : index_(index) {
  if (index < 0 || index >= static_cast<int>(kNumActions)) {
    throw Error(Errc::domain, "action category out of range: " + std::to_string(index));
  }
}

double reward_from_aptt(double aptt_seconds) {
  if (!std::isfinite(aptt_seconds) || aptt_seconds <= 0.0) {
    throw Error(Errc::domain, "aPTT must be finite and positive");
  }
  return 2.0 * logistic(aptt_seconds - 60.0) - 2.0 * logistic(aptt_seconds - 100.0) - 1.0;
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(Errc::fit, "quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ActionBins::ActionBins(std::array<double, kNumEdges> edges) : edges_(edges) {
  for (std::size_t i = 0; i < kNumEdges; ++i) {
    if (!std::isfinite(edges_[i]) || edges_[i] <= 0.0) {
      throw Error(Errc::fit, "action bin edges must be finite and positive");
    }
    if (i > 0 && !(edges_[i] > edges_[i - 1])) {
      throw Error(Errc::fit, "action bin edges must be strictly increasing");
    }
  }
}

ActionBins ActionBins::fit(std::span<const double> doses) {
  std::vector<double> nonzero;
  nonzero.reserve(doses.size());
  for (double d : doses) {
    if (!std::isfinite(d) || d < 0.0) throw Error(Errc::domain, "dose must be finite and >= 0");
    if (d > 0.0) nonzero.push_back(d);
  }
  std::sort(nonzero.begin(), nonzero.end());
  std::size_t n_distinct = nonzero.empty() ? 0 : 1;
  for (std::size_t i = 1; i < nonzero.size(); ++i) {
    if (nonzero[i] != nonzero[i - 1]) ++n_distinct;
  }
  if (n_distinct < 5) {
    throw Error(Errc::fit, "need at least 5 distinct nonzero doses to fit action bins, got " +
                               std::to_string(n_distinct));
  }
  std::array<double, kNumEdges> edges{};
  for (std::size_t k = 0; k < kNumEdges; ++k) {
    edges[k] = sorted_quantile(nonzero, 0.2 * static_cast<double>(k + 1));
  }
  return ActionBins(edges);
}

ActionCategory ActionBins::discretize(double dose) const {
  if (!std::isfinite(dose) || dose < 0.0) throw Error(Errc::domain, "dose must be finite and >= 0");
  if (dose == 0.0) return ActionCategory(0);
  int k = 1;
  for (double e : edges_) {
    if (dose > e) ++k;
  }
  return ActionCategory(k);
}

double Trajectory::aptt_at(std::size_t t) const {
  if (t == 0) return initial_aptt;
  if (t > transitions.size()) throw Error(Errc::domain, "hour beyond trajectory end");
  return transitions[t - 1].aptt_raw;
}

void validate_trajectory(const Trajectory& traj) {
  const std::size_t hours = traj.hours();
  if (traj.transitions.empty() || hours < kMinHours || hours > kMaxHours) {
    throw Error(Errc::internal, "trajectory " + traj.patient_id + " has " + std::to_string(hours) +
                                    " hours, outside [7, 72]");
  }
  for (std::size_t t = 0; t < traj.transitions.size(); ++t) {
    const Transition& tr = traj.transitions[t];
    const bool last = t + 1 == traj.transitions.size();
    if (tr.terminal != last) {
      throw Error(Errc::internal, "trajectory " + traj.patient_id + ": terminal flag misplaced");
    }
    if (!last && tr.next_state != traj.transitions[t + 1].state) {
      throw Error(Errc::internal, "trajectory " + traj.patient_id + ": broken state chaining");
    }
    for (double v : tr.state) {
      if (!std::isfinite(v)) throw Error(Errc::internal, "non-finite state in " + traj.patient_id);
    }
  }
}

double discounted_return(const Trajectory& traj, double gamma) {
  if (traj.transitions.empty()) throw Error(Errc::domain, "empty trajectory");
  double total = 0.0;
  double discount = 1.0;
  for (const Transition& t : traj.transitions) {
    total += discount * t.reward;
    discount *= gamma;
  }
  return total;
}

// ---- replay buffer ------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error(Errc::config, "replay buffer capacity must be positive");
  items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void ReplayBuffer::add(const Transition& t) {
  if (items_.size() < capacity_) {
    items_.push_back(t);
    return;
  }
  items_[next_] = t;
  next_ = (next_ + 1) % capacity_;
  ++evicted_;
}

void ReplayBuffer::preload(std::span<const Trajectory> trajectories) {
  for (const Trajectory& traj : trajectories) {
    for (const Transition& t : traj.transitions) add(t);
  }
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  const std::size_t size = items_.size();
  if (n > size) {
    throw Error(Errc::sampling, "cannot sample " + std::to_string(n) + " of " +
                                    std::to_string(size) + " transitions");
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  if (n == 0) return out;
  // Floyd's algorithm: uniform n-subset in O(n).
  std::unordered_set<std::size_t> chosen;
  chosen.reserve(n * 2);
  for (std::size_t j = size - n; j < size; ++j) {
    std::uniform_int_distribution<std::size_t> dist(0, j);
    const std::size_t r = dist(rng);
    const std::size_t pick = chosen.insert(r).second ? r : j;
    if (pick == j) chosen.insert(j);
    out.push_back(pick);
  }
  return out;
}

std::vector<Transition> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<Transition> out;
  for (std::size_t i : sample_indices(n, rng)) out.push_back(items_[i]);
  return out;
}

// ---- normalization ------------------------------------------------------

NormalizationStats NormalizationStats::fit(std::span<const StateVector> rows) {
  NormalizationStats s;
  if (rows.empty()) return s;
  const double n = static_cast<double>(rows.size());
  for (std::size_t f = 0; f < kStateDim; ++f) {
    double sum = 0.0;
    for (const auto& r : rows) sum += r[f];
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& r : rows) ss += (r[f] - mean) * (r[f] - mean);
    s.mean[f] = mean;
    s.std[f] = std::sqrt(ss / n);
  }
  return s;
}

double NormalizationStats::apply(std::size_t feature, double raw) const noexcept {
  return std[feature] > 0.0 ? (raw - mean[feature]) / std[feature] : 0.0;
}

StateVector NormalizationStats::apply(const StateVector& raw) const noexcept {
  StateVector z{};
  for (std::size_t f = 0; f < kStateDim; ++f) z[f] = apply(f, raw[f]);
  return z;
}

StateVector NormalizationStats::invert(const StateVector& z) const noexcept {
  StateVector raw{};
  for (std::size_t f = 0; f < kStateDim; ++f) raw[f] = std[f] > 0.0 ? z[f] * std[f] + mean[f] : mean[f];
  return raw;
}

// ---- CSV ----------------------------------------------------------------

std::string trajectory_csv_header() {
  std::string h = "patient_id,t";
  for (auto name : kFeatureNames) {
    h += ',';
    h += name;
  }
  h += ",aptt_raw,action,reward,terminal";
  return h;
}

std::string write_trajectory_csv(std::span<const Trajectory> trajectories) {
  std::string out = trajectory_csv_header() + "\n";
  auto write_state = [&out](const StateVector& s) {
    for (double v : s) {
      out += ',';
      out += io::format_double(v);
    }
  };
  for (const Trajectory& traj : trajectories) {
    if (traj.patient_id.find_first_of(",\n\r") != std::string::npos) {
      throw Error(Errc::ingestion, "patient_id contains a separator: " + traj.patient_id);
    }
    const std::size_t n = traj.transitions.size();
    for (std::size_t t = 0; t < n; ++t) {
      const Transition& tr = traj.transitions[t];
      out += traj.patient_id + ',' + std::to_string(t);
      write_state(tr.state);
      out += ',' + io::format_double(traj.aptt_at(t)) + ',' + std::to_string(tr.action.index()) +
             ',' + io::format_double(tr.reward) + ",0\n";
    }
    if (n == 0) continue;
    out += traj.patient_id + ',' + std::to_string(n);
    write_state(traj.transitions.back().next_state);
    out += ',' + io::format_double(traj.aptt_at(n)) + ",,,1\n";
  }
  return out;
}

std::vector<Trajectory> read_trajectory_csv(std::string_view text) {
  std::vector<Trajectory> out;
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != trajectory_csv_header()) {
    throw Error(Errc::ingestion, "trajectory CSV header mismatch");
  }
  constexpr std::size_t kCols = 2 + kStateDim + 4;

  struct Row {
    std::size_t t;
    StateVector state;
    double aptt;
    int action;
    double reward;
    bool terminal;
  };
  std::vector<Row> rows;
  std::string current;
  bool open = false;

  auto flush = [&](std::size_t line) {
    if (rows.empty()) return;
    if (!rows.back().terminal) throw Error(Errc::ingestion, where(line) + "trajectory " + current + " lacks a closing row");
    Trajectory traj;
    traj.patient_id = current;
    traj.initial_aptt = rows.front().aptt;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
      Transition tr;
      tr.state = rows[i].state;
      tr.action = ActionCategory(rows[i].action);
      tr.reward = rows[i].reward;
      tr.aptt_raw = rows[i + 1].aptt;
      tr.next_state = rows[i + 1].state;
      tr.terminal = i + 2 == rows.size();
      traj.transitions.push_back(tr);
    }
    if (traj.transitions.empty()) throw Error(Errc::ingestion, "trajectory " + current + " has no transitions");
    out.push_back(std::move(traj));
    rows.clear();
  };

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = io::trim(lines[li]);
    if (line.empty()) continue;
    const auto f = io::split(line);
    if (f.size() != kCols) throw Error(Errc::ingestion, where(li + 1) + "expected " + std::to_string(kCols) + " columns");
    if (!open || f[0] != current) {
      if (open && !rows.empty() && !rows.back().terminal) {
        throw Error(Errc::ingestion, where(li + 1) + "trajectory " + current + " lacks a closing row");
      }
      flush(li + 1);
      current = f[0];
      open = true;
    } else if (!rows.empty() && rows.back().terminal) {
      throw Error(Errc::ingestion, where(li + 1) + "row after closing row for " + current);
    }
    Row r{};
    try {
      r.t = static_cast<std::size_t>(io::parse_int(f[1]));
      for (std::size_t k = 0; k < kStateDim; ++k) r.state[k] = io::parse_double(f[2 + k]);
      r.aptt = io::parse_double(f[2 + kStateDim]);
      r.terminal = io::parse_int(f[5 + kStateDim]) != 0;
      if (!r.terminal) {
        r.action = static_cast<int>(io::parse_int(f[3 + kStateDim]));
        r.reward = io::parse_double(f[4 + kStateDim]);
      }
    } catch (const Error& e) {
      throw Error(Errc::ingestion, where(li + 1) + e.what());
    }
    if (r.t != rows.size()) throw Error(Errc::ingestion, where(li + 1) + "hours must be contiguous from 0");
    if (!r.terminal && (r.action < 0 || r.action >= static_cast<int>(kNumActions))) {
      throw Error(Errc::ingestion, where(li + 1) + "action out of range");
    }
    rows.push_back(r);
  }
  flush(lines.size());
  return out;
}

std::string write_behavior_probs_csv(std::span<const Trajectory> trajectories, const LoggedProbs& probs) {
  if (probs.size() != trajectories.size()) throw Error(Errc::shape, "behavior probabilities misaligned");
  std::string out = "patient_id,t,prob_logged_action\n";
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    if (probs[i].size() != trajectories[i].transitions.size()) {
      throw Error(Errc::shape, "behavior probabilities misaligned for " + trajectories[i].patient_id);
    }
    for (std::size_t t = 0; t < probs[i].size(); ++t) {
      out += trajectories[i].patient_id + ',' + std::to_string(t) + ',' + io::format_double(probs[i][t]) + '\n';
    }
  }
  return out;
}

LoggedProbs read_behavior_probs_csv(std::string_view text, std::span<const Trajectory> trajectories) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != "patient_id,t,prob_logged_action") {
    throw Error(Errc::ingestion, "behavior probability CSV header mismatch");
  }
  std::map<std::pair<std::string, std::size_t>, double> table;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = io::trim(lines[li]);
    if (line.empty()) continue;
    const auto f = io::split(line);
    if (f.size() != 3) throw Error(Errc::ingestion, where(li + 1) + "expected 3 columns");
    table[{f[0], static_cast<std::size_t>(io::parse_int(f[1]))}] = io::parse_double(f[2]);
  }
  LoggedProbs out(trajectories.size());
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    for (std::size_t t = 0; t < trajectories[i].transitions.size(); ++t) {
      auto it = table.find({trajectories[i].patient_id, t});
      if (it == table.end()) {
        throw Error(Errc::ingestion, "no behavior probability for " + trajectories[i].patient_id +
                                         " hour " + std::to_string(t));
      }
      out[i].push_back(it->second);
    }
  }
  return out;
}

std::string write_normalization_csv(const NormalizationStats& stats) {
  std::string out = "feature,mean,std\n";
  for (std::size_t f = 0; f < kStateDim; ++f) {
    out += std::string(kFeatureNames[f]) + ',' + io::format_double(stats.mean[f]) + ',' +
           io::format_double(stats.std[f]) + '\n';
  }
  return out;
}

NormalizationStats read_normalization_csv(std::string_view text) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != "feature,mean,std") {
    throw Error(Errc::ingestion, "normalization CSV header mismatch");
  }
  NormalizationStats s;
  std::array<bool, kStateDim> seen{};
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = io::trim(lines[li]);
    if (line.empty()) continue;
    const auto f = io::split(line);
    if (f.size() != 3) throw Error(Errc::ingestion, where(li + 1) + "expected 3 columns");
    const int idx = feature_index(f[0]);
    if (idx < 0) throw Error(Errc::ingestion, where(li + 1) + "unknown feature " + f[0]);
    s.mean[idx] = io::parse_double(f[1]);
    s.std[idx] = io::parse_double(f[2]);
    seen[idx] = true;
  }
  for (std::size_t f = 0; f < kStateDim; ++f) {
    if (!seen[f]) throw Error(Errc::ingestion, "normalization CSV lacks feature " + std::string(kFeatureNames[f]));
  }
  return s;
}

std::string write_bins_csv(const ActionBins& bins) {
  std::string out = "edge_index,value\n";
  for (std::size_t k = 0; k < kNumEdges; ++k) {
    out += std::to_string(k) + ',' + io::format_double(bins.edges()[k]) + '\n';
  }
  return out;
}

ActionBins read_bins_csv(std::string_view text) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != "edge_index,value") {
    throw Error(Errc::ingestion, "action bins CSV header mismatch");
  }
  std::array<double, kNumEdges> edges{};
  std::size_t count = 0;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = io::trim(lines[li]);
    if (line.empty()) continue;
    const auto f = io::split(line);
    if (f.size() != 2) throw Error(Errc::ingestion, where(li + 1) + "expected 2 columns");
    const auto k = io::parse_int(f[0]);
    if (k < 0 || k >= static_cast<long long>(kNumEdges)) throw Error(Errc::ingestion, where(li + 1) + "bad edge index");
    edges[static_cast<std::size_t>(k)] = io::parse_double(f[1]);
    ++count;
  }
  if (count != kNumEdges) throw Error(Errc::ingestion, "action bins CSV needs 4 edges");
  return ActionBins(edges);
}

}  // namespace heparl
