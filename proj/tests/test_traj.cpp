#include "doctest.h"

#include <set>

#include "heparl/error.hpp"
#include "heparl/traj.hpp"
#include "support.hpp"

using namespace heparl;
using heparl::testing::reward_oracle;

TEST_CASE("reward at reference aPTT values") {
  CHECK(std::abs(reward_from_aptt(80.0) - 1.0) <= 1e-7);
  CHECK(std::abs(reward_from_aptt(60.0)) <= 1e-12);
  CHECK(std::abs(reward_from_aptt(100.0)) <= 1e-12);
  CHECK(std::abs(reward_from_aptt(40.0) + 1.0) <= 1e-7);
  CHECK_THROWS_AS(reward_from_aptt(std::nan("")), Error);
  CHECK_THROWS_AS(reward_from_aptt(-3.0), Error);
}

TEST_CASE("reward matches direct evaluation, peaks at 80 and is symmetric") {
  double best = -2.0, best_at = 0.0;
  for (int i = 0; i <= 14000; ++i) {
    const double a = 20.0 + 0.01 * i;
    const double r = reward_from_aptt(a);
    REQUIRE(std::abs(r - reward_oracle(a)) <= 1e-12);
    REQUIRE(r >= -1.0);
    REQUIRE(r <= 1.0);
    if (r > best) best = r, best_at = a;
  }
  CHECK(best_at == doctest::Approx(80.0).epsilon(1e-9));
  for (int i = 0; i <= 4000; ++i) {
    const double d = 0.01 * i;
    REQUIRE(std::abs(reward_from_aptt(80.0 + d) - reward_from_aptt(80.0 - d)) <= 1e-12);
  }
}

TEST_CASE("action bins from hand-computed percentiles") {
  const std::vector<double> five{10, 20, 30, 40, 50};
  const auto e5 = ActionBins::fit(five).edges();
  CHECK(e5[0] == doctest::Approx(18.0));
  CHECK(e5[1] == doctest::Approx(26.0));
  CHECK(e5[2] == doctest::Approx(34.0));
  CHECK(e5[3] == doctest::Approx(42.0));

  const std::vector<double> ten{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto e10 = ActionBins::fit(ten).edges();
  CHECK(e10[0] == doctest::Approx(2.8));
  CHECK(e10[1] == doctest::Approx(4.6));
  CHECK(e10[2] == doctest::Approx(6.4));
  CHECK(e10[3] == doctest::Approx(8.2));

  // zeros are not part of the percentile sample
  const std::vector<double> with_zeros{0, 0, 10, 0, 20, 30, 40, 50};
  CHECK(ActionBins::fit(with_zeros).edges() == e5);

  const std::vector<double> constant(20, 5.0);
  try {
    ActionBins::fit(constant);
    FAIL("expected a fit error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::fit);
  }
}

TEST_CASE("dose discretization") {
  const ActionBins bins({18, 26, 34, 42});
  CHECK(bins.discretize(0.0).index() == 0);
  CHECK(bins.discretize(30.0).index() == 3);
  CHECK(bins.discretize(1000.0).index() == 5);
  CHECK(bins.discretize(1e-9).index() == 1);
  // right-closed intervals
  CHECK(bins.discretize(18.0).index() == 1);
  CHECK(bins.discretize(18.000001).index() == 2);
  CHECK(bins.discretize(42.0).index() == 4);
  CHECK_THROWS_AS(bins.discretize(-1.0), Error);
}

TEST_CASE("discretization is monotone and quintiles are balanced") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    std::lognormal_distribution<double> dose(6.0, 0.8);
    std::vector<double> sample(500);
    for (double& d : sample) d = dose(rng);
    const auto bins = ActionBins::fit(sample);

    std::vector<double> sorted = sample;
    std::sort(sorted.begin(), sorted.end());
    int prev = 0;
    for (double d : sorted) {
      const int k = bins.discretize(d).index();
      REQUIRE(k >= prev);
      prev = k;
    }
    std::array<int, kNumActions> count{};
    for (double d : sample) ++count[static_cast<std::size_t>(bins.discretize(d).index())];
    CHECK(count[0] == 0);
    for (std::size_t k = 1; k < kNumActions; ++k) {
      const double frac = count[k] / 500.0;
      CHECK(frac >= 0.15);
      CHECK(frac <= 0.25);
    }
  }
}

TEST_CASE("discounted return") {
  Rng rng(3);
  auto t = heparl::testing::make_trajectory("p", {0, 0}, {1.0, 1.0}, rng);
  CHECK(discounted_return(t, 0.5) == 1.5);
  auto u = heparl::testing::make_trajectory("q", {0, 1, 2}, {0.25, 0.7, -0.3}, rng);
  CHECK(discounted_return(u, 0.0) == 0.25);
  auto z = heparl::testing::make_trajectory("r", {0, 1, 2}, {0.0, 0.0, 0.0}, rng);
  CHECK(discounted_return(z, 0.99) == 0.0);
}

TEST_CASE("replay buffer sampling") {
  Rng rng(5);
  ReplayBuffer buf(64);
  for (int i = 0; i < 32; ++i) {
    Transition t;
    t.reward = i;
    buf.add(t);
  }
  Rng a(9), b(9);
  const auto ia = buf.sample_indices(32, a);
  const auto ib = buf.sample_indices(32, b);
  CHECK(ia == ib);
  CHECK(std::set<std::size_t>(ia.begin(), ia.end()).size() == 32);
  CHECK(buf.sample(0, rng).empty());
  CHECK_THROWS_AS(buf.sample(33, rng), Error);

  ReplayBuffer small(10);
  for (int i = 0; i < 15; ++i) {
    Transition t;
    t.reward = i;
    small.add(t);
  }
  CHECK(small.size() == 10);
  CHECK(small.evicted() == 5);
  std::set<double> kept;
  for (std::size_t i = 0; i < small.size(); ++i) kept.insert(small[i].reward);
  CHECK(*kept.begin() == 5.0);
}

TEST_CASE("normalization") {
  std::vector<StateVector> rows(4);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].fill(3.0);
    rows[i][0] = static_cast<double>(i);
  }
  const auto s = NormalizationStats::fit(rows);
  CHECK(s.apply(0, s.mean[0]) == 0.0);
  CHECK(s.apply(0, s.mean[0] + s.std[0]) == doctest::Approx(1.0));
  CHECK(s.apply(1, 3.0) == 0.0);
  CHECK(s.apply(1, 7.0) == 0.0);
  const auto round = s.invert(s.apply(rows[2]));
  CHECK(round[0] == doctest::Approx(2.0));
  CHECK(round[1] == 3.0);
}

TEST_CASE("trajectory validation and CSV round trip") {
  Rng rng(8);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 4; ++i) trajs.push_back(heparl::testing::random_trajectory("P" + std::to_string(i), 6 + 7 * i, rng));
  for (const auto& t : trajs) CHECK_NOTHROW(validate_trajectory(t));

  const std::string csv = write_trajectory_csv(trajs);
  CHECK(csv.rfind(trajectory_csv_header() + "\n", 0) == 0);
  const auto back = read_trajectory_csv(csv);
  REQUIRE(back.size() == trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    REQUIRE(back[i].transitions.size() == trajs[i].transitions.size());
    for (std::size_t k = 0; k < trajs[i].transitions.size(); ++k) {
      const auto& x = back[i].transitions[k];
      const auto& y = trajs[i].transitions[k];
      CHECK(x.state == y.state);
      CHECK(x.next_state == y.next_state);
      CHECK(x.action == y.action);
      CHECK(x.reward == y.reward);
      CHECK(x.terminal == y.terminal);
    }
    // chaining holds bitwise after parsing
    for (std::size_t k = 0; k + 1 < back[i].transitions.size(); ++k)
      CHECK(back[i].transitions[k].next_state == back[i].transitions[k + 1].state);
  }
  CHECK(write_trajectory_csv(back) == csv);

  auto broken = trajs[0];
  broken.transitions[2].next_state[0] += 1.0;
  CHECK_THROWS_AS(validate_trajectory(broken), Error);
  auto early = trajs[0];
  early.transitions[1].terminal = true;
  CHECK_THROWS_AS(validate_trajectory(early), Error);
  auto short_traj = heparl::testing::random_trajectory("S", 5, rng);
  CHECK_THROWS_AS(validate_trajectory(short_traj), Error);
  auto long_traj = heparl::testing::random_trajectory("L", 72, rng);
  CHECK_THROWS_AS(validate_trajectory(long_traj), Error);
  CHECK_NOTHROW(validate_trajectory(heparl::testing::random_trajectory("M", 71, rng)));
}

TEST_CASE("sidecar CSV round trips") {
  const ActionBins bins({18, 26, 34, 42});
  CHECK(read_bins_csv(write_bins_csv(bins)).edges() == bins.edges());

  NormalizationStats s;
  for (std::size_t f = 0; f < kStateDim; ++f) s.mean[f] = 0.1 * f, s.std[f] = 1.0 / (f + 1.0);
  const auto back = read_normalization_csv(write_normalization_csv(s));
  CHECK(back.mean == s.mean);
  CHECK(back.std == s.std);

  Rng rng(2);
  std::vector<Trajectory> trajs{heparl::testing::random_trajectory("A", 6, rng),
                                heparl::testing::random_trajectory("B", 8, rng)};
  LoggedProbs probs;
  for (const auto& t : trajs) probs.emplace_back(t.transitions.size(), 0.25);
  probs[1][3] = 0.9;
  CHECK(read_behavior_probs_csv(write_behavior_probs_csv(trajs, probs), trajs) == probs);
}
