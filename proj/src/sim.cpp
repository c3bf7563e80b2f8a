#include "heparl/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "heparl/error.hpp"

namespace heparl::sim {

namespace {

enum class FeatureKind { static_gaussian, binary, ar_gaussian, ar_lognormal, ar_clipped, coupled_pt };

constexpr std::array<FeatureKind, kStateDim> kKinds = {
    FeatureKind::static_gaussian,  // age
    FeatureKind::binary,           // gender
    FeatureKind::ar_clipped,       // gcs
    FeatureKind::ar_gaussian,      // dbp
    FeatureKind::ar_gaussian,      // sbp
    FeatureKind::ar_gaussian,      // rr
    FeatureKind::ar_gaussian,      // hgb
    FeatureKind::ar_gaussian,      // temperature
    FeatureKind::ar_gaussian,      // wbc
    FeatureKind::ar_gaussian,      // platelets
    FeatureKind::coupled_pt,       // pt
    FeatureKind::ar_gaussian,      // acd
    FeatureKind::ar_lognormal,     // creatinine
    FeatureKind::ar_gaussian,      // bilirubin
    FeatureKind::ar_gaussian,      // inr
    FeatureKind::static_gaussian,  // weight
};

constexpr std::size_t kAge = 0, kGcs = 2, kPt = 10, kWeight = 15;

struct LogParams {
  double mu;
  double sigma;
};

LogParams lognormal_params(const FeatureTarget& t) {
  const double s2 = std::log(1.0 + (t.sd * t.sd) / (t.mean * t.mean));
  return {std::log(t.mean) - 0.5 * s2, std::sqrt(s2)};
}

double normal(Rng& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(rng);
}

double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  return d(rng);
}

double coupled_pt(const SimConfig& cfg, double aptt, double noise) {
  return feature_targets()[kPt].mean + cfg.pt_aptt_slope * (aptt - kApttTargetMean) + cfg.pt_noise_sd * noise;
}

// Value of an AR feature given its latent deviation from the patient level.
double observe(std::size_t f, const PatientParams& p, double latent) {
  switch (kKinds[f]) {
    case FeatureKind::ar_lognormal: return std::exp(p.feature_level[f] + latent);
    case FeatureKind::ar_clipped: return std::clamp(p.feature_level[f] + latent, 3.0, 15.0);
    default: return p.feature_level[f] + latent;
  }
}

}  // namespace

const std::array<FeatureTarget, kStateDim>& feature_targets() {
  static const std::array<FeatureTarget, kStateDim> targets = {{
      {65.9, 15.5},                          // age
      {0.58, 0.49355850717012273},           // gender (male fraction)
      {13.7, 2.9},                           // gcs
      {58.2, 14.7},                          // dbp
      {119.1, 21.4},                         // sbp
      {19.6, 5.1},                           // rr
      {10.6, 1.9},                           // hgb
      {36.9, 1.6},                           // temperature
      {11.2, 6.6},                           // wbc
      {226.4, 113.8},                        // platelets
      {15.7, 4.2},                           // pt
      {40.4, 8.9},                           // acd
      {1.6, 3.7},                            // creatinine
      {10.0, 1.8},                           // bilirubin
      {1.4, 0.5},                            // inr
      {89.4, 27.9},                          // weight
  }};
  return targets;
}

SimConfig SimConfig::from(const Config& cfg) {
  SimConfig c;
  c.baseline_mean = cfg.get_double("baseline_mean", c.baseline_mean);
  c.baseline_sd = cfg.get_double("baseline_sd", c.baseline_sd);
  c.baseline_min = cfg.get_double("baseline_min", c.baseline_min);
  c.baseline_max = cfg.get_double("baseline_max", c.baseline_max);
  c.kappa_median = cfg.get_double("kappa_median", c.kappa_median);
  c.kappa_log_sd = cfg.get_double("kappa_log_sd", c.kappa_log_sd);
  c.decay = cfg.get_double("decay", c.decay);
  c.noise_sd = cfg.get_double("noise_sd", c.noise_sd);
  const auto effects = cfg.get_doubles("dose_effects", {c.dose_effects.begin(), c.dose_effects.end()});
  if (effects.size() != kNumActions) throw Error(Errc::config, "dose_effects needs 6 values");
  std::copy(effects.begin(), effects.end(), c.dose_effects.begin());
  c.horizon_min = static_cast<int>(cfg.get_int("horizon_min", c.horizon_min));
  c.horizon_max = static_cast<int>(cfg.get_int("horizon_max", c.horizon_max));
  c.aptt_min = cfg.get_double("aptt_min", c.aptt_min);
  c.aptt_max = cfg.get_double("aptt_max", c.aptt_max);
  c.clinician_rule_prob = cfg.get_double("clinician_rule_prob", c.clinician_rule_prob);
  c.ar_phi = cfg.get_double("ar_phi", c.ar_phi);
  c.pt_aptt_slope = cfg.get_double("pt_aptt_slope", c.pt_aptt_slope);
  c.pt_noise_sd = cfg.get_double("pt_noise_sd", c.pt_noise_sd);
  c.confound = cfg.get_bool("confound", c.confound);

  if (c.horizon_min < static_cast<int>(kMinHours) || c.horizon_max > static_cast<int>(kMaxHours) ||
      c.horizon_min > c.horizon_max) {
    throw Error(Errc::config, "simulator horizon must lie within [7, 72]");
  }
  if (!(c.decay > 0.0 && c.decay < 1.0)) throw Error(Errc::config, "decay must lie in (0, 1)");
  if (c.noise_sd < 0.0 || c.baseline_sd < 0.0 || c.kappa_log_sd < 0.0 || c.pt_noise_sd < 0.0) {
    throw Error(Errc::config, "simulator spreads must be non-negative");
  }
  if (!(c.clinician_rule_prob >= 0.0 && c.clinician_rule_prob <= 1.0)) {
    throw Error(Errc::config, "clinician_rule_prob must lie in [0, 1]");
  }
  if (!(c.ar_phi >= 0.0 && c.ar_phi < 1.0)) throw Error(Errc::config, "ar_phi must lie in [0, 1)");
  if (!(c.aptt_min > 0.0 && c.aptt_min < c.aptt_max)) throw Error(Errc::config, "bad aPTT clip range");
  return c;
}

PatientParams sample_patient(const SimConfig& cfg, Rng& rng) {
  PatientParams p;
  p.baseline_aptt = std::clamp(cfg.baseline_mean + cfg.baseline_sd * normal(rng), cfg.baseline_min, cfg.baseline_max);
  p.sensitivity = cfg.kappa_median * std::exp(cfg.kappa_log_sd * normal(rng));
  p.decay = cfg.decay;
  p.noise_sd = cfg.noise_sd;
  std::uniform_int_distribution<int> horizon(cfg.horizon_min, cfg.horizon_max);
  p.horizon = horizon(rng);

  const auto& targets = feature_targets();
  for (std::size_t f = 0; f < kStateDim; ++f) {
    const FeatureTarget& t = targets[f];
    const double z = normal(rng);
    switch (kKinds[f]) {
      case FeatureKind::static_gaussian:
        p.feature_level[f] = t.mean + t.sd * z;
        break;
      case FeatureKind::binary:
        p.feature_level[f] = uniform01(rng) < t.mean ? 1.0 : 0.0;
        break;
      case FeatureKind::ar_lognormal: {
        const LogParams lp = lognormal_params(t);
        p.feature_level[f] = lp.mu + lp.sigma * std::sqrt(0.5) * z;
        break;
      }
      case FeatureKind::coupled_pt:
        p.feature_level[f] = t.mean;
        break;
      default:
        p.feature_level[f] = t.mean + t.sd * std::sqrt(0.5) * z;
        break;
    }
  }
  p.feature_level[kAge] = std::clamp(p.feature_level[kAge], 18.0, 100.0);
  p.feature_level[kWeight] = std::clamp(p.feature_level[kWeight], 35.0, 250.0);

  if (cfg.confound) {
    const double z_age = (p.feature_level[kAge] - targets[kAge].mean) / targets[kAge].sd;
    const double z_weight = (p.feature_level[kWeight] - targets[kWeight].mean) / targets[kWeight].sd;
    p.sensitivity *= std::exp(0.25 * (z_age - z_weight));
  }
  return p;
}

namespace {

// Latent AR deviations are not stored in SimState; they are recovered from
// the observed value. Clipped GCS keeps its own latent via this table.
double ar_sd(std::size_t f) {
  const FeatureTarget& t = feature_targets()[f];
  if (kKinds[f] == FeatureKind::ar_lognormal) return lognormal_params(t).sigma * std::sqrt(0.5);
  return t.sd * std::sqrt(0.5);
}

double latent_of(std::size_t f, const PatientParams& p, double value) {
  if (kKinds[f] == FeatureKind::ar_lognormal) return std::log(value) - p.feature_level[f];
  return value - p.feature_level[f];
}

}  // namespace

SimState initial_state(const SimConfig& cfg, const PatientParams& p, Rng& rng) {
  SimState s;
  s.aptt = std::clamp(p.baseline_aptt + p.noise_sd * normal(rng), cfg.aptt_min, cfg.aptt_max);
  s.prev_action = 0;
  for (std::size_t f = 0; f < kStateDim; ++f) {
    switch (kKinds[f]) {
      case FeatureKind::static_gaussian:
      case FeatureKind::binary:
        s.features[f] = p.feature_level[f];
        break;
      case FeatureKind::coupled_pt:
        s.features[f] = coupled_pt(cfg, s.aptt, normal(rng));
        break;
      default:
        s.features[f] = observe(f, p, ar_sd(f) * normal(rng));
        break;
    }
  }
  return s;
}

double next_aptt(const SimConfig& cfg, const PatientParams& p, double aptt, int action, double noise) {
  const double drift = p.sensitivity * cfg.dose_effects[static_cast<std::size_t>(action)] -
                       p.decay * (aptt - p.baseline_aptt);
  return std::clamp(aptt + drift + noise, cfg.aptt_min, cfg.aptt_max);
}

SimState step(const SimConfig& cfg, const PatientParams& p, const SimState& s, ActionCategory a, Rng& rng) {
  SimState out;
  out.aptt = next_aptt(cfg, p, s.aptt, a.index(), p.noise_sd * normal(rng));
  out.prev_action = a.index();
  const double innovation = std::sqrt(1.0 - cfg.ar_phi * cfg.ar_phi);
  for (std::size_t f = 0; f < kStateDim; ++f) {
    switch (kKinds[f]) {
      case FeatureKind::static_gaussian:
      case FeatureKind::binary:
        out.features[f] = s.features[f];
        break;
      case FeatureKind::coupled_pt:
        out.features[f] = coupled_pt(cfg, out.aptt, normal(rng));
        break;
      case FeatureKind::ar_clipped: {
        // Clipping loses the latent above 15; restart from the clipped value.
        const double latent = latent_of(f, p, s.features[f]);
        out.features[f] = observe(f, p, cfg.ar_phi * latent + innovation * ar_sd(f) * normal(rng));
        break;
      }
      default: {
        const double latent = latent_of(f, p, s.features[f]);
        out.features[f] = observe(f, p, cfg.ar_phi * latent + innovation * ar_sd(f) * normal(rng));
        break;
      }
    }
  }
  return out;
}

int clinician_rule_action(double aptt, int prev_action) {
  if (aptt < 60.0) return std::min(prev_action + 1, static_cast<int>(kNumActions) - 1);
  if (aptt > 100.0) return std::max(prev_action - 1, 0);
  return prev_action;
}

ActionProbs clinician_probs(const SimConfig& cfg, double aptt, int prev_action) {
  ActionProbs probs;
  const double explore = (1.0 - cfg.clinician_rule_prob) / static_cast<double>(kNumActions);
  probs.fill(explore);
  probs[static_cast<std::size_t>(clinician_rule_action(aptt, prev_action))] += cfg.clinician_rule_prob;
  return probs;
}

int sample_action(const ActionProbs& probs, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  for (std::size_t a = 0; a < kNumActions; ++a) {
    cum += probs[a];
    if (u < cum) return static_cast<int>(a);
  }
  // Round-off: fall back to the last action with positive mass.
  for (std::size_t a = kNumActions; a-- > 0;) {
    if (probs[a] > 0.0) return static_cast<int>(a);
  }
  return 0;
}

std::pair<ActionCategory, double> synthetic_clinician(const SimConfig& cfg, const SimState& s, Rng& rng) {
  const ActionProbs probs = clinician_probs(cfg, s.aptt, s.prev_action);
  const int a = sample_action(probs, rng);
  return {ActionCategory(a), probs[static_cast<std::size_t>(a)]};
}

Cohort generate_cohort(const SimConfig& cfg, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(Errc::config, "cohort size must be at least 1");
  Cohort c;
  c.patients.reserve(n);
  c.raw_states.resize(n);
  std::vector<std::vector<double>> aptts(n);
  std::vector<std::vector<int>> actions(n);
  c.behavior.resize(n);
  const std::uint64_t base = mix64(seed ^ fnv1a64("cohort"));
  for (std::size_t i = 0; i < n; ++i) {
    Rng dyn = make_indexed_stream(base, 2 * i);
    Rng act = make_indexed_stream(base, 2 * i + 1);
    PatientParams p = sample_patient(cfg, dyn);
    SimState s = initial_state(cfg, p, dyn);
    c.raw_states[i].push_back(s.features);
    aptts[i].push_back(s.aptt);
    for (int t = 0; t + 1 < p.horizon; ++t) {
      auto [a, prob] = synthetic_clinician(cfg, s, act);
      s = step(cfg, p, s, a, dyn);
      actions[i].push_back(a.index());
      c.behavior[i].push_back(prob);
      c.raw_states[i].push_back(s.features);
      aptts[i].push_back(s.aptt);
    }
    c.patients.push_back(p);
  }

  std::vector<StateVector> all;
  for (const auto& rows : c.raw_states) all.insert(all.end(), rows.begin(), rows.end());
  c.stats = NormalizationStats::fit(all);

  c.trajectories.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "S%06zu", i);
    Trajectory traj;
    traj.patient_id = id;
    traj.initial_aptt = aptts[i][0];
    const std::size_t steps = actions[i].size();
    for (std::size_t t = 0; t < steps; ++t) {
      Transition tr;
      tr.state = c.stats.apply(c.raw_states[i][t]);
      tr.next_state = c.stats.apply(c.raw_states[i][t + 1]);
      tr.action = ActionCategory(actions[i][t]);
      tr.aptt_raw = aptts[i][t + 1];
      tr.reward = reward_from_aptt(tr.aptt_raw);
      tr.terminal = t + 1 == steps;
      traj.transitions.push_back(tr);
    }
    c.trajectories.push_back(std::move(traj));
  }
  return c;
}

BatchPolicy clinician_policy(const SimConfig& cfg) {
  return [cfg](std::span<const Observation> obs, std::span<ActionProbs> out) {
    for (std::size_t i = 0; i < obs.size(); ++i) {
      out[i] = clinician_probs(cfg, obs[i].sim->aptt, obs[i].sim->prev_action);
    }
  };
}

BatchPolicy oracle_policy(const SimConfig& cfg) {
  return [cfg](std::span<const Observation> obs, std::span<ActionProbs> out) {
    for (std::size_t i = 0; i < obs.size(); ++i) {
      int best = 0;
      double best_gap = 1e300;
      for (int a = 0; a < static_cast<int>(kNumActions); ++a) {
        const double gap = std::abs(next_aptt(cfg, *obs[i].patient, obs[i].sim->aptt, a, 0.0) - 80.0);
        if (gap < best_gap) {
          best_gap = gap;
          best = a;
        }
      }
      out[i].fill(0.0);
      out[i][static_cast<std::size_t>(best)] = 1.0;
    }
  };
}

BatchPolicy constant_policy(int action) {
  const ActionCategory a(action);
  return [a](std::span<const Observation> obs, std::span<ActionProbs> out) {
    for (std::size_t i = 0; i < obs.size(); ++i) {
      out[i].fill(0.0);
      out[i][static_cast<std::size_t>(a.index())] = 1.0;
    }
  };
}

MonteCarloResult monte_carlo_value(const SimConfig& cfg, const NormalizationStats& stats, const BatchPolicy& policy,
                                   std::size_t n_rollouts, double gamma, std::uint64_t seed) {
  if (n_rollouts == 0) throw Error(Errc::config, "need at least one rollout");
  std::vector<PatientParams> patients(n_rollouts);
  std::vector<SimState> states(n_rollouts);
  std::vector<Rng> dyn, act;
  dyn.reserve(n_rollouts);
  act.reserve(n_rollouts);
  int max_h = 0;
  const std::uint64_t base = mix64(seed ^ fnv1a64("rollout"));
  for (std::size_t i = 0; i < n_rollouts; ++i) {
    dyn.push_back(make_indexed_stream(base, 2 * i));
    act.push_back(make_indexed_stream(base, 2 * i + 1));
    patients[i] = sample_patient(cfg, dyn[i]);
    states[i] = initial_state(cfg, patients[i], dyn[i]);
    max_h = std::max(max_h, patients[i].horizon);
  }
  std::vector<double> returns(n_rollouts, 0.0), discount(n_rollouts, 1.0);
  std::vector<Observation> obs;
  std::vector<std::size_t> active;
  std::vector<ActionProbs> probs;
  for (int t = 0; t + 1 < max_h; ++t) {
    obs.clear();
    active.clear();
    for (std::size_t i = 0; i < n_rollouts; ++i) {
      if (t + 1 < patients[i].horizon) {
        active.push_back(i);
        obs.push_back({stats.apply(states[i].features), &states[i], &patients[i]});
      }
    }
    probs.assign(obs.size(), ActionProbs{});
    policy(obs, probs);
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::size_t i = active[k];
      const int a = sample_action(probs[k], act[i]);
      states[i] = step(cfg, patients[i], states[i], ActionCategory(a), dyn[i]);
      returns[i] += discount[i] * reward_from_aptt(states[i].aptt);
      discount[i] *= gamma;
    }
  }
  MonteCarloResult r;
  r.n = n_rollouts;
  double sum = 0.0;
  for (double g : returns) sum += g;
  r.mean = sum / static_cast<double>(n_rollouts);
  if (n_rollouts > 1) {
    double ss = 0.0;
    for (double g : returns) ss += (g - r.mean) * (g - r.mean);
    r.std_error = std::sqrt(ss / static_cast<double>(n_rollouts - 1) / static_cast<double>(n_rollouts));
  }
  return r;
}

}  // namespace heparl::sim
