#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "heparl/config.hpp"
#include "heparl/traj.hpp"

namespace heparl::etl {

struct RawEvent {
  std::string patient_id;
  double timestamp = 0.0;  // seconds since epoch
  std::string feature;
  double value = 0.0;
  std::string unit;
  std::size_t row = 0;  // 1-based data row in the source file, 0 if synthetic
};

struct Bounds {
  double lo;
  double hi;
};

struct EtlConfig {
  std::string dose_feature = "heparin";
  std::string aptt_feature = "aptt";
  std::vector<std::string> extra_features;  // accepted beyond the canonical vocabulary
  double units_per_ml = 100.0;
  double missing_threshold = 0.8;
  std::size_t knn_k = 5;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::map<std::string, Bounds> bounds;

  static EtlConfig from(const Config& cfg);
  static const std::map<std::string, Bounds>& default_bounds();
};

// Header `patient_id,timestamp,feature_name,value,unit`. Throws
// Error(ingestion) naming the row on malformed input or unknown features.
std::vector<RawEvent> read_events_csv(std::string_view text, const EtlConfig& cfg);

// Dose events end up in `units`: `ml` is scaled by units_per_ml, `units/ml`
// is read as a legacy spelling of `units`.
std::vector<RawEvent> harmonize_units(std::vector<RawEvent> events, const EtlConfig& cfg);

// One row per clock hour from the patient's first event hour to the last.
struct HourlyGrid {
  std::string patient_id;
  long long start_hour = 0;
  std::vector<std::vector<std::optional<double>>> cells;  // [hour][column]
  std::vector<double> dose;                               // units given during each hour

  std::size_t hours() const noexcept { return cells.size(); }
};

struct GridSet {
  std::vector<std::string> columns;  // canonical features, then aPTT, then extras
  std::vector<HourlyGrid> grids;     // sorted by patient_id

  int column(std::string_view name) const noexcept;
};

// Measurements are averaged within an hour; doses are summed.
GridSet resample_hourly(const std::vector<RawEvent>& events, const EtlConfig& cfg);

struct Exclusion {
  std::string patient_id;
  std::string reason;
};

// Keeps hours [first dose, first dose + 72). Returns the reason when the
// patient has no dose or fewer than 7 hours from the first dose.
std::optional<std::string> window_trajectory(HourlyGrid& grid);

std::vector<double> missing_rates(const GridSet& set);
// Drops columns whose cohort-wide missing rate exceeds `threshold`; returns
// their names. Throws Error(feature_loss) when a required column would be dropped.
std::vector<std::string> filter_features_by_missing_rate(GridSet& set, double threshold,
                                                         const std::vector<std::string>& required);

// Values outside [lo, hi] become missing; returns the number removed.
std::size_t remove_outliers(GridSet& set, const std::map<std::string, Bounds>& bounds);

// Forward fill per column; returns the number of cells filled.
std::size_t impute_sample_and_hold(HourlyGrid& grid);

// Remaining missing cells take the mean of the column over the k nearest
// cohort rows observing it (std-scaled Euclidean over mutually observed
// columns, ties by row order). Neighbors are drawn from the grid as passed in,
// never from values imputed in the same call. Returns the number filled.
std::size_t impute_knn(GridSet& set, std::size_t k);

// 80/20 style split by a seeded hash of patient_id.
bool is_train_patient(std::string_view patient_id, std::uint64_t seed, double train_fraction);

NormalizationStats zscore_fit(const GridSet& set, const std::vector<bool>& train);

std::vector<Trajectory> build_trajectories(const GridSet& set, const ActionBins& bins, const NormalizationStats& stats,
                                           std::string_view aptt_feature = "aptt");

struct EtlCounts {
  std::size_t events = 0;
  std::size_t patients_in = 0;
  std::size_t patients_out = 0;
  std::size_t outliers_removed = 0;
  std::size_t sample_and_hold_filled = 0;
  std::size_t knn_filled = 0;
  std::size_t train_patients = 0;
  std::size_t test_patients = 0;
};

struct EtlResult {
  std::vector<Trajectory> trajectories;  // sorted by patient_id
  std::vector<bool> train;               // aligned with trajectories
  NormalizationStats stats;
  std::optional<ActionBins> bins;
  std::vector<Exclusion> exclusions;
  std::vector<std::string> dropped_features;
  EtlCounts counts;
};

// harmonize -> resample -> window -> missing-rate filter -> outliers ->
// sample-and-hold -> KNN -> split -> z-score fit (train) -> bin fit (train)
// -> build.
EtlResult run_pipeline(std::vector<RawEvent> events, const EtlConfig& cfg);

std::string write_exclusions(const std::vector<Exclusion>& exclusions);
std::string write_split_csv(std::span<const Trajectory> trajectories, const std::vector<bool>& train);
// patient_id -> is_train
std::map<std::string, bool> read_split_csv(std::string_view text);

}  // namespace heparl::etl
