#include "heparl/etl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "heparl/error.hpp"
#include "heparl/io.hpp"
#include "heparl/rng.hpp"

namespace heparl::etl {

namespace {

std::string at_row(std::size_t row) { return "events row " + std::to_string(row) + ": "; }

}  // namespace

const std::map<std::string, Bounds>& EtlConfig::default_bounds() {
  static const std::map<std::string, Bounds> table = {
      {"age", {0.0, 120.0}},      {"gender", {0.0, 1.0}},        {"gcs", {3.0, 15.0}},
      {"dbp", {10.0, 200.0}},     {"sbp", {30.0, 300.0}},        {"rr", {0.0, 80.0}},
      {"hgb", {2.0, 25.0}},       {"temperature", {30.0, 43.0}}, {"wbc", {0.0, 200.0}},
      {"platelets", {1.0, 2000.0}}, {"pt", {5.0, 150.0}},        {"acd", {5.0, 150.0}},
      {"creatinine", {0.1, 30.0}}, {"bilirubin", {0.0, 80.0}},   {"inr", {0.5, 20.0}},
      {"weight", {20.0, 350.0}},  {"aptt", {10.0, 250.0}},
  };
  return table;
}

EtlConfig EtlConfig::from(const Config& cfg) {
  EtlConfig c;
  c.dose_feature = cfg.get_string("dose_feature", c.dose_feature);
  c.aptt_feature = cfg.get_string("aptt_feature", c.aptt_feature);
  const std::string extras = cfg.get_string("extra_features", "");
  for (const auto& f : io::split(extras, ',')) {
    const std::string name = io::trim(f);
    if (!name.empty()) c.extra_features.push_back(name);
  }
  c.units_per_ml = cfg.get_double("heparin_units_per_ml", c.units_per_ml);
  if (!(c.units_per_ml > 0.0)) throw Error(Errc::config, "heparin_units_per_ml must be positive");
  c.missing_threshold = cfg.get_double("missing_threshold", c.missing_threshold);
  if (!(c.missing_threshold > 0.0 && c.missing_threshold <= 1.0))
    throw Error(Errc::config, "missing_threshold must lie in (0, 1]");
  const long long k = cfg.get_int("knn_k", static_cast<long long>(c.knn_k));
  if (k <= 0) throw Error(Errc::config, "knn_k must be positive");
  c.knn_k = static_cast<std::size_t>(k);
  c.train_fraction = cfg.get_double("train_fraction", c.train_fraction);
  if (!(c.train_fraction > 0.0 && c.train_fraction <= 1.0))
    throw Error(Errc::config, "train_fraction must lie in (0, 1]");
  c.seed = cfg.get_u64("seed", c.seed);
  c.bounds = default_bounds();
  if (c.aptt_feature != "aptt") {
    c.bounds[c.aptt_feature] = c.bounds["aptt"];
    c.bounds.erase("aptt");
  }
  for (auto& [name, b] : c.bounds) {
    const auto v = cfg.get_doubles("bounds." + name, {b.lo, b.hi});
    if (v.size() != 2) throw Error(Errc::config, "bounds." + name + " needs lo,hi");
    b = {v[0], v[1]};
  }
  for (const auto& [key, value] : cfg.entries()) {
    if (key.rfind("bounds.", 0) != 0) continue;
    const std::string name = key.substr(7);
    if (c.bounds.count(name)) continue;
    const auto v = cfg.get_doubles(key, {});
    if (v.size() != 2) throw Error(Errc::config, key + " needs lo,hi");
    c.bounds[name] = {v[0], v[1]};
  }
  for (const auto& [name, b] : c.bounds) {
    if (!(b.lo < b.hi)) throw Error(Errc::config, "bounds." + name + ": lo must be below hi");
  }
  return c;
}

std::vector<RawEvent> read_events_csv(std::string_view text, const EtlConfig& cfg) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]).empty()) throw Error(Errc::ingestion, "events file is empty");
  if (io::trim(lines[0]) != "patient_id,timestamp,feature_name,value,unit")
    throw Error(Errc::ingestion, "events header must be patient_id,timestamp,feature_name,value,unit");
  std::set<std::string, std::less<>> vocabulary(kFeatureNames.begin(), kFeatureNames.end());
  vocabulary.insert(cfg.aptt_feature);
  vocabulary.insert(cfg.dose_feature);
  vocabulary.insert(cfg.extra_features.begin(), cfg.extra_features.end());

  std::vector<RawEvent> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string line = io::trim(lines[i]);
    if (line.empty()) continue;
    const auto f = io::split(line, ',');
    if (f.size() != 5) throw Error(Errc::ingestion, at_row(i) + "expected 5 fields, got " + std::to_string(f.size()));
    RawEvent e;
    e.row = i;
    e.patient_id = io::trim(f[0]);
    if (e.patient_id.empty()) throw Error(Errc::ingestion, at_row(i) + "empty patient_id");
    try {
      e.timestamp = io::parse_double(f[1]);
      e.value = io::parse_double(f[3]);
    } catch (const Error& err) {
      throw Error(Errc::ingestion, at_row(i) + err.what());
    }
    if (!std::isfinite(e.timestamp)) throw Error(Errc::ingestion, at_row(i) + "non-finite timestamp");
    if (!std::isfinite(e.value)) throw Error(Errc::ingestion, at_row(i) + "non-finite value");
    e.feature = io::trim(f[2]);
    if (!vocabulary.count(e.feature)) throw Error(Errc::ingestion, at_row(i) + "unknown feature '" + e.feature + "'");
    e.unit = io::trim(f[4]);
    if (e.feature == cfg.dose_feature && e.value < 0.0) throw Error(Errc::ingestion, at_row(i) + "negative dose");
    out.push_back(std::move(e));
  }
  if (out.empty()) throw Error(Errc::ingestion, "events file has no data rows");
  return out;
}

std::vector<RawEvent> harmonize_units(std::vector<RawEvent> events, const EtlConfig& cfg) {
  for (auto& e : events) {
    if (e.feature != cfg.dose_feature) continue;
    if (e.unit == "units" || e.unit == "units/ml") {
      e.unit = "units";
    } else if (e.unit == "ml") {
      e.value *= cfg.units_per_ml;
      e.unit = "units";
    } else {
      throw Error(Errc::ingestion, at_row(e.row) + "unsupported dose unit '" + e.unit + "'");
    }
  }
  return events;
}

int GridSet::column(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<int>(i);
  return -1;
}

GridSet resample_hourly(const std::vector<RawEvent>& events, const EtlConfig& cfg) {
  GridSet set;
  set.columns.assign(kFeatureNames.begin(), kFeatureNames.end());
  set.columns.push_back(cfg.aptt_feature);
  std::set<std::string> extras;
  for (const auto& e : events) {
    if (e.feature != cfg.dose_feature && set.column(e.feature) < 0) extras.insert(e.feature);
  }
  set.columns.insert(set.columns.end(), extras.begin(), extras.end());

  std::map<std::string, std::vector<const RawEvent*>> by_patient;
  for (const auto& e : events) by_patient[e.patient_id].push_back(&e);

  const std::size_t n_cols = set.columns.size();
  for (auto& [id, evs] : by_patient) {
    std::stable_sort(evs.begin(), evs.end(),
                     [](const RawEvent* a, const RawEvent* b) { return a->timestamp < b->timestamp; });
    auto hour_of = [](double ts) { return static_cast<long long>(std::floor(ts / 3600.0)); };
    const long long first = hour_of(evs.front()->timestamp);
    const long long last = hour_of(evs.back()->timestamp);
    const auto n_hours = static_cast<std::size_t>(last - first + 1);

    std::vector<std::vector<double>> sum(n_hours, std::vector<double>(n_cols, 0.0));
    std::vector<std::vector<std::size_t>> count(n_hours, std::vector<std::size_t>(n_cols, 0));
    HourlyGrid g;
    g.patient_id = id;
    g.start_hour = first;
    g.dose.assign(n_hours, 0.0);
    for (const RawEvent* e : evs) {
      const auto h = static_cast<std::size_t>(hour_of(e->timestamp) - first);
      if (e->feature == cfg.dose_feature) {
        g.dose[h] += e->value;
      } else {
        const auto c = static_cast<std::size_t>(set.column(e->feature));
        sum[h][c] += e->value;
        ++count[h][c];
      }
    }
    g.cells.assign(n_hours, std::vector<std::optional<double>>(n_cols));
    for (std::size_t h = 0; h < n_hours; ++h)
      for (std::size_t c = 0; c < n_cols; ++c)
        if (count[h][c]) g.cells[h][c] = sum[h][c] / static_cast<double>(count[h][c]);
    set.grids.push_back(std::move(g));
  }
  return set;
}

std::optional<std::string> window_trajectory(HourlyGrid& grid) {
  std::size_t start = 0;
  while (start < grid.dose.size() && !(grid.dose[start] > 0.0)) ++start;
  if (start == grid.dose.size()) return std::string("no heparin dose");
  const std::size_t end = std::min(grid.hours(), start + kMaxHours);
  if (end - start < kMinHours)
    return "only " + std::to_string(end - start) + " hours from first dose (minimum " + std::to_string(kMinHours) + ")";
  grid.cells = std::vector<std::vector<std::optional<double>>>(grid.cells.begin() + static_cast<std::ptrdiff_t>(start),
                                                                grid.cells.begin() + static_cast<std::ptrdiff_t>(end));
  grid.dose = std::vector<double>(grid.dose.begin() + static_cast<std::ptrdiff_t>(start),
                                  grid.dose.begin() + static_cast<std::ptrdiff_t>(end));
  grid.start_hour += static_cast<long long>(start);
  return std::nullopt;
}

std::vector<double> missing_rates(const GridSet& set) {
  std::vector<double> rates(set.columns.size(), 0.0);
  std::size_t rows = 0;
  for (const auto& g : set.grids) {
    rows += g.hours();
    for (const auto& row : g.cells)
      for (std::size_t c = 0; c < row.size(); ++c)
        if (!row[c]) rates[c] += 1.0;
  }
  if (rows == 0) return std::vector<double>(set.columns.size(), 1.0);
  for (double& r : rates) r /= static_cast<double>(rows);
  return rates;
}

std::vector<std::string> filter_features_by_missing_rate(GridSet& set, double threshold,
                                                         const std::vector<std::string>& required) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(Errc::config, "missing-rate threshold must lie in (0, 1]");
  const auto rates = missing_rates(set);
  std::vector<std::size_t> keep;
  std::vector<std::string> dropped;
  for (std::size_t c = 0; c < set.columns.size(); ++c) {
    if (rates[c] > threshold) {
      if (std::find(required.begin(), required.end(), set.columns[c]) != required.end()) {
        throw Error(Errc::feature_loss, "feature '" + set.columns[c] + "' is missing in " +
                                      io::format_double(rates[c] * 100.0) + "% of hours, above missing_threshold " +
                                      io::format_double(threshold) + "; raise missing_threshold");
      }
      dropped.push_back(set.columns[c]);
    } else {
      keep.push_back(c);
    }
  }
  if (dropped.empty()) return dropped;
  std::vector<std::string> columns;
  for (std::size_t c : keep) columns.push_back(set.columns[c]);
  for (auto& g : set.grids) {
    for (auto& row : g.cells) {
      std::vector<std::optional<double>> kept;
      for (std::size_t c : keep) kept.push_back(row[c]);
      row = std::move(kept);
    }
  }
  set.columns = std::move(columns);
  return dropped;
}

std::size_t remove_outliers(GridSet& set, const std::map<std::string, Bounds>& bounds) {
  for (const auto& [name, b] : bounds) {
    if (!(b.lo < b.hi)) throw Error(Errc::config, "bounds for '" + name + "': lo must be below hi");
  }
  std::size_t removed = 0;
  for (std::size_t c = 0; c < set.columns.size(); ++c) {
    const auto it = bounds.find(set.columns[c]);
    if (it == bounds.end()) continue;
    for (auto& g : set.grids) {
      for (auto& row : g.cells) {
        if (row[c] && (*row[c] < it->second.lo || *row[c] > it->second.hi)) {
          row[c].reset();
          ++removed;
        }
      }
    }
  }
  return removed;
}

std::size_t impute_sample_and_hold(HourlyGrid& grid) {
  std::size_t filled = 0;
  if (grid.cells.empty()) return 0;
  const std::size_t n_cols = grid.cells.front().size();
  for (std::size_t c = 0; c < n_cols; ++c) {
    std::optional<double> last;
    for (auto& row : grid.cells) {
      if (row[c]) {
        last = row[c];
      } else if (last) {
        row[c] = last;
        ++filled;
      }
    }
  }
  return filled;
}

std::size_t impute_knn(GridSet& set, std::size_t k) {
  if (k == 0) throw Error(Errc::config, "knn k must be positive");
  const std::size_t n_cols = set.columns.size();
  std::vector<const std::vector<std::optional<double>>*> rows;
  for (const auto& g : set.grids)
    for (const auto& r : g.cells) rows.push_back(&r);

  std::vector<double> scale(n_cols, 1.0);
  for (std::size_t c = 0; c < n_cols; ++c) {
    double sum = 0.0, n = 0.0;
    for (const auto* r : rows)
      if ((*r)[c]) sum += *(*r)[c], n += 1.0;
    if (n == 0.0) continue;
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto* r : rows)
      if ((*r)[c]) ss += (*(*r)[c] - mean) * (*(*r)[c] - mean);
    const double sd = std::sqrt(ss / n);
    if (sd > 0.0) scale[c] = sd;
  }

  auto distance = [&](const std::vector<std::optional<double>>& a, const std::vector<std::optional<double>>& b) {
    double d = 0.0;
    bool any = false;
    for (std::size_t c = 0; c < n_cols; ++c) {
      if (a[c] && b[c]) {
        const double z = (*a[c] - *b[c]) / scale[c];
        d += z * z;
        any = true;
      }
    }
    return any ? std::sqrt(d) : std::numeric_limits<double>::infinity();
  };

  struct Fill {
    std::size_t row, col;
    double value;
  };
  std::vector<Fill> fills;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& target = *rows[i];
    for (std::size_t c = 0; c < n_cols; ++c) {
      if (target[c]) continue;
      cand.clear();
      for (std::size_t j = 0; j < rows.size(); ++j) {
        if (j != i && (*rows[j])[c]) cand.emplace_back(distance(target, *rows[j]), j);
      }
      if (cand.empty()) throw Error(Errc::imputation, "no cohort row observes '" + set.columns[c] + "'");
      const std::size_t take = std::min(k, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
      double sum = 0.0;
      for (std::size_t m = 0; m < take; ++m) sum += *(*rows[cand[m].second])[c];
      fills.push_back({i, c, sum / static_cast<double>(take)});
    }
  }
  std::size_t row = 0, fi = 0;
  for (auto& g : set.grids) {
    for (auto& r : g.cells) {
      for (; fi < fills.size() && fills[fi].row == row; ++fi) r[fills[fi].col] = fills[fi].value;
      ++row;
    }
  }
  return fills.size();
}

bool is_train_patient(std::string_view patient_id, std::uint64_t seed, double train_fraction) {
  const std::uint64_t h = mix64(fnv1a64(patient_id) ^ mix64(seed));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < train_fraction;
}

namespace {

std::array<int, kStateDim> canonical_columns(const GridSet& set) {
  std::array<int, kStateDim> cols{};
  for (std::size_t f = 0; f < kStateDim; ++f) {
    cols[f] = set.column(kFeatureNames[f]);
    if (cols[f] < 0) throw Error(Errc::feature_loss, "canonical feature '" + std::string(kFeatureNames[f]) + "' lost");
  }
  return cols;
}

StateVector raw_state(const std::vector<std::optional<double>>& row, const std::array<int, kStateDim>& cols) {
  StateVector s{};
  for (std::size_t f = 0; f < kStateDim; ++f) {
    const auto& cell = row[static_cast<std::size_t>(cols[f])];
    if (!cell) throw Error(Errc::imputation, "missing cell after imputation");
    s[f] = *cell;
  }
  return s;
}

}  // namespace

NormalizationStats zscore_fit(const GridSet& set, const std::vector<bool>& train) {
  const auto cols = canonical_columns(set);
  std::vector<StateVector> rows;
  for (std::size_t p = 0; p < set.grids.size(); ++p) {
    if (!train[p]) continue;
    for (const auto& r : set.grids[p].cells) rows.push_back(raw_state(r, cols));
  }
  if (rows.empty()) throw Error(Errc::fit, "no training rows to fit normalization");
  return NormalizationStats::fit(rows);
}

std::vector<Trajectory> build_trajectories(const GridSet& set, const ActionBins& bins, const NormalizationStats& stats,
                                           std::string_view aptt_feature) {
  const auto cols = canonical_columns(set);
  const int aptt_col = set.column(aptt_feature);
  if (aptt_col < 0) throw Error(Errc::feature_loss, "aPTT column lost");
  std::vector<Trajectory> out;
  for (const auto& g : set.grids) {
    const std::size_t hours = g.hours();
    if (hours < kMinHours || hours > kMaxHours)
      throw Error(Errc::internal, "patient " + g.patient_id + " has " + std::to_string(hours) + " hours after windowing");
    std::vector<StateVector> states;
    std::vector<double> aptt;
    for (const auto& r : g.cells) {
      states.push_back(stats.apply(raw_state(r, cols)));
      const auto& a = r[static_cast<std::size_t>(aptt_col)];
      if (!a) throw Error(Errc::imputation, "missing aPTT after imputation");
      aptt.push_back(*a);
    }
    Trajectory t;
    t.patient_id = g.patient_id;
    t.initial_aptt = aptt.front();
    for (std::size_t h = 0; h + 1 < hours; ++h) {
      Transition tr;
      tr.state = states[h];
      tr.action = bins.discretize(g.dose[h]);
      tr.aptt_raw = aptt[h + 1];
      tr.reward = reward_from_aptt(aptt[h + 1]);
      tr.next_state = states[h + 1];
      tr.terminal = h + 2 == hours;
      t.transitions.push_back(tr);
    }
    validate_trajectory(t);
    out.push_back(std::move(t));
  }
  return out;
}

EtlResult run_pipeline(std::vector<RawEvent> events, const EtlConfig& cfg) {
  EtlResult res;
  res.counts.events = events.size();
  events = harmonize_units(std::move(events), cfg);
  GridSet set = resample_hourly(events, cfg);
  res.counts.patients_in = set.grids.size();

  std::vector<HourlyGrid> kept;
  for (auto& g : set.grids) {
    if (auto reason = window_trajectory(g)) {
      res.exclusions.push_back({g.patient_id, *reason});
    } else {
      kept.push_back(std::move(g));
    }
  }
  set.grids = std::move(kept);
  if (set.grids.empty()) throw Error(Errc::ingestion, "every patient was excluded");

  std::vector<std::string> required(kFeatureNames.begin(), kFeatureNames.end());
  required.push_back(cfg.aptt_feature);
  res.dropped_features = filter_features_by_missing_rate(set, cfg.missing_threshold, required);
  res.counts.outliers_removed = remove_outliers(set, cfg.bounds);
  for (auto& g : set.grids) res.counts.sample_and_hold_filled += impute_sample_and_hold(g);
  res.counts.knn_filled = impute_knn(set, cfg.knn_k);

  for (const auto& g : set.grids) {
    const bool tr = is_train_patient(g.patient_id, cfg.seed, cfg.train_fraction);
    res.train.push_back(tr);
    ++(tr ? res.counts.train_patients : res.counts.test_patients);
  }
  if (res.counts.train_patients == 0) throw Error(Errc::fit, "split left no training patients");
  res.stats = zscore_fit(set, res.train);

  std::vector<double> doses;
  for (std::size_t p = 0; p < set.grids.size(); ++p) {
    if (!res.train[p]) continue;
    const auto& d = set.grids[p].dose;
    for (std::size_t h = 0; h + 1 < d.size(); ++h)
      if (d[h] != 0.0) doses.push_back(d[h]);
  }
  res.bins = ActionBins::fit(doses);
  res.trajectories = build_trajectories(set, *res.bins, res.stats, cfg.aptt_feature);
  res.counts.patients_out = res.trajectories.size();
  std::sort(res.exclusions.begin(), res.exclusions.end(),
            [](const Exclusion& a, const Exclusion& b) { return a.patient_id < b.patient_id; });
  return res;
}

std::string write_exclusions(const std::vector<Exclusion>& exclusions) {
  std::string out = "patient_id,reason\n";
  for (const auto& e : exclusions) out += e.patient_id + "," + e.reason + "\n";
  return out;
}

std::string write_split_csv(std::span<const Trajectory> trajectories, const std::vector<bool>& train) {
  if (trajectories.size() != train.size()) throw Error(Errc::shape, "split flags do not match trajectories");
  std::string out = "patient_id,split\n";
  for (std::size_t i = 0; i < trajectories.size(); ++i)
    out += trajectories[i].patient_id + (train[i] ? ",train\n" : ",test\n");
  return out;
}

std::map<std::string, bool> read_split_csv(std::string_view text) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != "patient_id,split") throw Error(Errc::ingestion, "split CSV header mismatch");
  std::map<std::string, bool> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string line = io::trim(lines[i]);
    if (line.empty()) continue;
    const auto f = io::split(line, ',');
    if (f.size() != 2 || (f[1] != "train" && f[1] != "test"))
      throw Error(Errc::ingestion, "split CSV row " + std::to_string(i) + ": expected patient_id,train|test");
    out[f[0]] = f[1] == "train";
  }
  return out;
}

}  // namespace heparl::etl
