#include "doctest.h"

#include <set>

#include "heparl/error.hpp"
#include "heparl/etl.hpp"
#include "heparl/io.hpp"
#include "support.hpp"

using namespace heparl;
using namespace heparl::etl;
using heparl::testing::reward_oracle;

namespace {

const std::string kData = HEPARL_TEST_DATA;

RawEvent event(const std::string& id, double ts, const std::string& f, double v, const std::string& unit = "") {
  return RawEvent{id, ts, f, v, unit, 0};
}

using Cell = std::optional<double>;

GridSet one_column_set(std::vector<std::vector<Cell>> rows_by_patient) {
  GridSet set;
  set.columns = {"f"};
  int id = 0;
  for (auto& rows : rows_by_patient) {
    HourlyGrid g;
    g.patient_id = "P" + std::to_string(id++);
    for (auto& c : rows) g.cells.push_back({c});
    g.dose.assign(g.cells.size(), 0.0);
    set.grids.push_back(g);
  }
  return set;
}

EtlConfig fixture_config() {
  EtlConfig cfg;
  cfg.missing_threshold = 0.95;
  cfg.train_fraction = 1.0;
  cfg.seed = 1;
  cfg.bounds = EtlConfig::default_bounds();
  return cfg;
}

}  // namespace

TEST_CASE("unit harmonization") {
  EtlConfig cfg;
  auto out = harmonize_units({event("a", 0, "heparin", 500, "units"), event("a", 1, "heparin", 5, "ml"),
                              event("a", 2, "heparin", 7, "units/ml"), event("a", 3, "aptt", 50, "s")},
                             cfg);
  CHECK(out[0].value == 500.0);
  CHECK(out[1].value == 500.0);
  CHECK(out[1].unit == "units");
  CHECK(out[2].value == 7.0);
  CHECK(out[3].value == 50.0);
  try {
    harmonize_units({event("a", 0, "heparin", 5, "mg")}, cfg);
    FAIL("expected an ingestion error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ingestion);
  }
}

TEST_CASE("hourly resampling") {
  EtlConfig cfg;
  const double h = 3600.0 * 1000;
  const auto set = resample_hourly({event("a", h + 10, "aptt", 60), event("a", h + 3500, "aptt", 70),
                                    event("a", h + 3600, "aptt", 42), event("a", h + 20, "heparin", 200),
                                    event("a", h + 30, "heparin", 300), event("b", h, "age", 50)},
                                   cfg);
  REQUIRE(set.grids.size() == 2);
  const auto& g = set.grids[0];
  CHECK(g.patient_id == "a");
  REQUIRE(g.hours() == 2);
  const auto c = static_cast<std::size_t>(set.column("aptt"));
  CHECK(*g.cells[0][c] == 65.0);
  CHECK(*g.cells[1][c] == 42.0);
  CHECK(g.dose[0] == 500.0);
  CHECK(g.dose[1] == 0.0);
  CHECK_FALSE(g.cells[0][0].has_value());
  CHECK(set.columns.size() == kStateDim + 1);
}

TEST_CASE("missing-rate filter") {
  GridSet set;
  set.columns = {"mostly_missing", "mostly_there", "aptt"};
  HourlyGrid g;
  g.patient_id = "p";
  for (int i = 0; i < 10; ++i) g.cells.push_back({i == 0 ? Cell(1.0) : Cell(), i == 0 ? Cell() : Cell(2.0), Cell(50.0)});
  g.dose.assign(10, 0.0);
  set.grids.push_back(g);
  const auto dropped = filter_features_by_missing_rate(set, 0.8, {"aptt"});
  CHECK(dropped == std::vector<std::string>{"mostly_missing"});
  CHECK(set.columns == std::vector<std::string>{"mostly_there", "aptt"});
  CHECK(set.grids[0].cells[0].size() == 2);

  GridSet bad;
  bad.columns = {"aptt"};
  HourlyGrid b;
  for (int i = 0; i < 10; ++i) b.cells.push_back({i == 0 ? Cell(50.0) : Cell()});
  b.dose.assign(10, 0.0);
  bad.grids.push_back(b);
  try {
    filter_features_by_missing_rate(bad, 0.8, {"aptt"});
    FAIL("expected the canonical-feature guard");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::feature_loss);
    CHECK(std::string(e.what()).find("aptt") != std::string::npos);
  }
  CHECK_THROWS_AS(filter_features_by_missing_rate(bad, 0.0, {}), Error);
}

TEST_CASE("outlier removal") {
  GridSet set;
  set.columns = {"temperature"};
  HourlyGrid g;
  g.cells = {{Cell(85.0)}, {Cell(36.9)}, {Cell(30.0)}, {Cell(43.0)}, {Cell(29.99)}};
  g.dose.assign(5, 0.0);
  set.grids.push_back(g);
  CHECK(remove_outliers(set, EtlConfig::default_bounds()) == 2);
  const auto& c = set.grids[0].cells;
  CHECK_FALSE(c[0][0].has_value());
  CHECK(*c[1][0] == 36.9);
  CHECK(*c[2][0] == 30.0);
  CHECK(*c[3][0] == 43.0);
  CHECK_FALSE(c[4][0].has_value());
}

TEST_CASE("sample-and-hold") {
  auto set = one_column_set({{1.0, Cell(), Cell(), 5.0}, {Cell(), 3.0}, {2.0, 4.0}});
  CHECK(impute_sample_and_hold(set.grids[0]) == 2);
  CHECK(impute_sample_and_hold(set.grids[1]) == 0);
  CHECK(impute_sample_and_hold(set.grids[2]) == 0);
  const auto& a = set.grids[0].cells;
  CHECK((*a[0][0] == 1.0 && *a[1][0] == 1.0 && *a[2][0] == 1.0 && *a[3][0] == 5.0));
  CHECK_FALSE(set.grids[1].cells[0][0].has_value());
  CHECK(*set.grids[1].cells[1][0] == 3.0);
  CHECK(*set.grids[2].cells[1][0] == 4.0);
}

TEST_CASE("KNN imputation") {
  auto grid_of = [](std::vector<std::array<Cell, 2>> rows) {
    GridSet set;
    set.columns = {"x", "f"};
    HourlyGrid g;
    g.patient_id = "p";
    for (auto& r : rows) g.cells.push_back({r[0], r[1]});
    g.dose.assign(g.cells.size(), 0.0);
    set.grids.push_back(g);
    return set;
  };
  auto one = grid_of({{0.0, Cell()}, {0.1, 7.0}, {5.0, 100.0}, {6.0, 90.0}});
  CHECK(impute_knn(one, 1) == 1);
  CHECK(*one.grids[0].cells[0][1] == 7.0);

  auto two = grid_of({{0.0, Cell()}, {0.1, 4.0}, {-0.1, 8.0}, {9.0, 100.0}});
  CHECK(impute_knn(two, 2) == 1);
  CHECK(*two.grids[0].cells[0][1] == 6.0);

  // imputed values are never used as neighbors within the same call
  auto chain = grid_of({{0.0, Cell()}, {0.01, Cell()}, {3.0, 10.0}, {9.0, 20.0}});
  CHECK(impute_knn(chain, 1) == 2);
  CHECK(*chain.grids[0].cells[0][1] == 10.0);
  CHECK(*chain.grids[0].cells[1][1] == 10.0);

  auto full = grid_of({{0.0, 1.0}, {1.0, 2.0}});
  const auto before = full.grids[0].cells;
  CHECK(impute_knn(full, 3) == 0);
  CHECK(full.grids[0].cells == before);

  auto none = grid_of({{0.0, Cell()}, {1.0, Cell()}});
  try {
    impute_knn(none, 1);
    FAIL("expected an imputation error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::imputation);
  }
}

TEST_CASE("dosing window") {
  HourlyGrid g;
  g.patient_id = "w";
  g.start_hour = 1000;
  for (int i = 0; i < 100; ++i) g.cells.push_back({Cell(static_cast<double>(i))});
  g.dose.assign(100, 0.0);
  g.dose[10] = 50.0;
  g.dose[30] = 50.0;
  CHECK_FALSE(window_trajectory(g).has_value());
  CHECK(g.hours() == 72);
  CHECK(g.start_hour == 1010);
  CHECK(*g.cells.front()[0] == 10.0);
  CHECK(*g.cells.back()[0] == 81.0);

  auto short_grid = [](int post) {
    HourlyGrid s;
    for (int i = 0; i < 3 + post; ++i) s.cells.push_back({Cell(1.0)});
    s.dose.assign(s.cells.size(), 0.0);
    s.dose[3] = 10.0;
    return s;
  };
  auto five = short_grid(5);
  const auto why = window_trajectory(five);
  REQUIRE(why.has_value());
  CHECK(why->find("5 hours") != std::string::npos);
  auto seven = short_grid(7);
  CHECK_FALSE(window_trajectory(seven).has_value());
  CHECK(seven.hours() == 7);

  HourlyGrid nodose;
  nodose.cells.assign(10, {Cell(1.0)});
  nodose.dose.assign(10, 0.0);
  CHECK(window_trajectory(nodose) == std::optional<std::string>("no heparin dose"));
}

TEST_CASE("trajectory construction from grids") {
  GridSet set;
  set.columns.assign(kFeatureNames.begin(), kFeatureNames.end());
  set.columns.push_back("aptt");
  HourlyGrid g;
  g.patient_id = "b";
  const std::vector<double> aptt{50, 55, 80, 70, 65, 90, 75};
  for (std::size_t h = 0; h < 7; ++h) {
    std::vector<Cell> row(kStateDim, Cell(static_cast<double>(h)));
    row.push_back(aptt[h]);
    g.cells.push_back(row);
  }
  g.dose = {100, 0, 200, 300, 400, 500, 600};
  set.grids.push_back(g);
  NormalizationStats stats;
  stats.mean.fill(0.0);
  stats.std.fill(1.0);
  const auto trajs = build_trajectories(set, ActionBins({150, 250, 350, 450}), stats);
  REQUIRE(trajs.size() == 1);
  const auto& t = trajs[0];
  REQUIRE(t.transitions.size() == 6);
  CHECK(t.transitions[0].action.index() == 1);
  CHECK(t.transitions[1].action.index() == 0);
  CHECK(t.transitions[1].reward == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(t.transitions[1].reward == reward_oracle(80.0));
  CHECK(t.transitions.back().terminal);
  CHECK(t.initial_aptt == 50.0);
  for (std::size_t k = 0; k < 6; ++k) CHECK(t.aptt_at(k + 1) == aptt[k + 1]);
}

TEST_CASE("split by patient hash") {
  std::size_t train = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string id = "patient-" + std::to_string(i);
    const bool a = is_train_patient(id, 3, 0.8);
    CHECK(a == is_train_patient(id, 3, 0.8));
    train += a;
  }
  CHECK(train / 10000.0 == doctest::Approx(0.8).epsilon(0.02));
  CHECK(is_train_patient("x", 1, 1.0));
  CHECK_FALSE(is_train_patient("x", 1, 0.0));
}

TEST_CASE("events CSV validation") {
  EtlConfig cfg;
  CHECK_THROWS_AS(read_events_csv("", cfg), Error);
  CHECK_THROWS_AS(read_events_csv("patient_id,timestamp,feature_name,value,unit\n", cfg), Error);
  CHECK_THROWS_AS(read_events_csv("id,time,feature,value,unit\np,0,age,1,\n", cfg), Error);
  try {
    read_events_csv("patient_id,timestamp,feature_name,value,unit\np,0,age,1,\np,1,age,abc,\n", cfg);
    FAIL("expected a row error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ingestion);
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_events_csv("patient_id,timestamp,feature_name,value,unit\np,0,lactate,1,\n", cfg), Error);
  CHECK_THROWS_AS(read_events_csv("patient_id,timestamp,feature_name,value,unit\np,0,heparin,-5,units\n", cfg), Error);
  cfg.extra_features = {"lactate"};
  CHECK(read_events_csv("patient_id,timestamp,feature_name,value,unit\np,0,lactate,1,\n", cfg).size() == 1);
}

TEST_CASE("golden 3-patient fixture") {
  const EtlConfig cfg = fixture_config();
  const std::string text = io::read_file(kData + "/etl_fixture_events.csv");
  const auto res = run_pipeline(read_events_csv(text, cfg), cfg);
  const std::string csv = write_trajectory_csv(res.trajectories);

  // byte-identical to the stored golden file and across runs
  CHECK(csv == io::read_file(kData + "/etl_fixture_trajectories.csv"));
  CHECK(write_exclusions(res.exclusions) == io::read_file(kData + "/etl_fixture_exclusions.log"));
  const auto again = run_pipeline(read_events_csv(text, cfg), cfg);
  CHECK(write_trajectory_csv(again.trajectories) == csv);

  // patient conservation: 3 in, 2 emitted, 1 excluded with a reason
  REQUIRE(res.trajectories.size() == 2);
  REQUIRE(res.exclusions.size() == 1);
  CHECK(res.exclusions[0].patient_id == "P3");
  CHECK(res.exclusions[0].reason == "only 5 hours from first dose (minimum 7)");
  CHECK(res.counts.outliers_removed == 1);
  CHECK(res.counts.knn_filled == 7);
  CHECK(res.counts.sample_and_hold_filled == 193);
  CHECK(res.dropped_features.empty());

  // Hand-derived values. Doses {100, 200 (2 ml), 300} and {400, 250+250} give
  // nonzero quintile edges (180, 260, 340, 420).
  REQUIRE(res.bins.has_value());
  const std::array<double, 4> edges{180, 260, 340, 420};
  for (std::size_t k = 0; k < 4; ++k) CHECK(res.bins->edges()[k] == doctest::Approx(edges[k]).epsilon(1e-14));

  const std::vector<std::vector<int>> actions{{1, 2, 0, 3, 0, 0}, {4, 0, 5, 0, 0, 0}};
  // aPTT by hour after hourly averaging (60, 70 -> 65) and forward fill
  const std::vector<std::vector<double>> aptt{{50, 65, 65, 80, 80, 80, 90}, {100, 100, 40, 40, 40, 40, 120}};
  // features that differ between P1 and P2 z-score to -1 / +1; equal ones
  // (gcs, creatinine, and bilirubin imputed from P1) to 0
  const std::set<std::string> constant{"gcs", "creatinine", "bilirubin"};
  for (std::size_t p = 0; p < 2; ++p) {
    const auto& t = res.trajectories[p];
    CHECK(t.patient_id == (p == 0 ? "P1" : "P2"));
    REQUIRE(t.transitions.size() == 6);
    CHECK(t.initial_aptt == aptt[p][0]);
    for (std::size_t k = 0; k < 6; ++k) {
      const auto& tr = t.transitions[k];
      CHECK(tr.action.index() == actions[p][k]);
      CHECK(tr.aptt_raw == aptt[p][k + 1]);
      CHECK(std::abs(tr.reward - reward_oracle(aptt[p][k + 1])) <= 1e-15);
      CHECK(tr.terminal == (k == 5));
      for (std::size_t f = 0; f < kStateDim; ++f) {
        const double expect = constant.count(std::string(kFeatureNames[f])) ? 0.0 : (p == 0 ? -1.0 : 1.0);
        CHECK(tr.state[f] == expect);
      }
    }
  }
  CHECK(res.stats.mean[static_cast<std::size_t>(feature_index("temperature"))] == 37.0);
  CHECK(res.stats.std[static_cast<std::size_t>(feature_index("sbp"))] == 10.0);
}

TEST_CASE("pipeline invariants on a larger synthetic event log") {
  Rng rng(5);
  std::vector<RawEvent> events;
  std::normal_distribution<double> n(0.0, 1.0);
  const auto& bounds = EtlConfig::default_bounds();
  std::size_t patients = 40;
  for (std::size_t p = 0; p < patients; ++p) {
    const std::string id = "Q" + std::to_string(1000 + p);
    const double t0 = 3600.0 * (500000 + 7 * p);
    const int hours = 4 + static_cast<int>(p % 30);
    for (int h = 0; h < hours; ++h) {
      for (const auto name : kFeatureNames) {
        if ((h + p) % 3 != 0 && h > 0) continue;
        const auto& b = bounds.at(std::string(name));
        const double v = b.lo + (b.hi - b.lo) * (0.4 + 0.1 * n(rng));
        if (name == "bilirubin" && p % 2 == 0) continue;
        events.push_back(event(id, t0 + h * 3600 + 5, std::string(name), v));
      }
      if (h % 2 == 0) events.push_back(event(id, t0 + h * 3600 + 7, "aptt", 70 + 20 * n(rng), "s"));
      if (p % 11 != 3 && h % 3 == 1) events.push_back(event(id, t0 + h * 3600 + 9, "heparin", 100 + 50.0 * h + p, "units"));
    }
  }
  EtlConfig cfg;
  cfg.missing_threshold = 0.95;
  cfg.seed = 9;
  cfg.bounds = EtlConfig::default_bounds();
  const auto res = run_pipeline(events, cfg);
  const auto again = run_pipeline(events, cfg);
  CHECK(write_trajectory_csv(res.trajectories) == write_trajectory_csv(again.trajectories));

  std::set<std::string> emitted, excluded;
  for (const auto& t : res.trajectories) CHECK(emitted.insert(t.patient_id).second);
  for (const auto& e : res.exclusions) {
    CHECK(excluded.insert(e.patient_id).second);
    CHECK_FALSE(e.reason.empty());
    CHECK(emitted.count(e.patient_id) == 0);
  }
  CHECK(emitted.size() + excluded.size() == patients);
  CHECK(res.exclusions.size() > 0);

  // z-scored training states: mean 0, std 1 per non-constant feature
  std::vector<StateVector> rows;
  for (std::size_t i = 0; i < res.trajectories.size(); ++i) {
    if (!res.train[i]) continue;
    const auto& t = res.trajectories[i];
    for (const auto& tr : t.transitions) rows.push_back(tr.state);
    rows.push_back(t.transitions.back().next_state);
  }
  const auto s = NormalizationStats::fit(rows);
  for (std::size_t f = 0; f < kStateDim; ++f) {
    CHECK(std::abs(s.mean[f]) < 1e-9);
    if (res.stats.std[f] > 0.0) CHECK(std::abs(s.std[f] - 1.0) < 1e-9);
  }
  for (const auto& t : res.trajectories) CHECK_NOTHROW(validate_trajectory(t));
}

TEST_CASE("KNN leaves no missing cells") {
  Rng rng(6);
  std::bernoulli_distribution miss(0.3);
  std::normal_distribution<double> n;
  GridSet set;
  set.columns = {"a", "b", "c", "d"};
  for (int p = 0; p < 8; ++p) {
    HourlyGrid g;
    g.patient_id = "p" + std::to_string(p);
    for (int h = 0; h < 12; ++h) {
      std::vector<Cell> row;
      for (int c = 0; c < 4; ++c) row.push_back(miss(rng) ? Cell() : Cell(n(rng)));
      g.cells.push_back(row);
    }
    g.dose.assign(12, 0.0);
    set.grids.push_back(g);
  }
  impute_knn(set, 5);
  for (const auto& g : set.grids)
    for (const auto& row : g.cells)
      for (const auto& c : row) REQUIRE(c.has_value());
}
