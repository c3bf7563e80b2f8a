#include "heparl/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>

#include "heparl/embed.hpp"
#include "heparl/error.hpp"
#include "heparl/etl.hpp"
#include "heparl/io.hpp"
#include "heparl/ope.hpp"
#include "heparl/rng.hpp"
#include "heparl/sim.hpp"

namespace fs = std::filesystem;

namespace heparl::cmd {

namespace {

constexpr std::array<const char*, 6> kStreams{"etl", "init", "sampling", "eval", "embed", "behavior"};

void log(const std::string& msg) { std::cerr << "heparl: " << msg << "\n"; }

std::string require(const Config& cfg, const std::string& key) {
  const auto v = cfg.raw(key);
  if (!v || v->empty()) throw Error(Errc::usage, "missing required option '" + key + "'");
  return *v;
}

fs::path sibling(const fs::path& file, const std::string& name) { return file.parent_path() / name; }

std::uint64_t run_seed(const Config& cfg) { return cfg.get_u64("seed", 0); }

void write(const fs::path& dir, const std::string& name, std::string_view text) {
  io::write_file_atomic(dir / name, text);
}

std::vector<std::string> list_option(const Config& cfg, const std::string& key) {
  std::vector<std::string> out;
  for (const auto& item : io::split(require(cfg, key), ',')) {
    const std::string v = io::trim(item);
    if (!v.empty()) out.push_back(v);
  }
  return out;
}

}  // namespace

// ---- manifest ---------------------------------------------------------------

Manifest::Manifest(std::string command, std::uint64_t seed)
    : command_(std::move(command)), seed_(seed), started_(utc_now()) {}

void Manifest::add_input(const fs::path& path) { inputs_.push_back(path); }

void Manifest::note(const std::string& key, const std::string& value) { notes_.emplace_back(key, value); }

std::string Manifest::utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void Manifest::write(const fs::path& dir, const Config& cfg) const {
  std::string out = "heparl-manifest 1\n";
  out += "command=" + command_ + "\n";
  out += std::string("version=") + kVersion + "\n";
  out += "started=" + started_ + "\n";
  out += "finished=" + utc_now() + "\n";
  out += "seed=" + std::to_string(seed_) + "\n";
  for (const char* s : kStreams) out += std::string("stream.") + s + "=" + std::to_string(mix64(seed_ ^ fnv1a64(s))) + "\n";
  for (const auto& [k, v] : notes_) out += "note." + k + "=" + v + "\n";
  for (const auto& [k, v] : cfg.resolved()) out += "config." + k + "=" + v + "\n";
  for (const auto& p : inputs_) out += "input " + p.string() + " sha256=" + io::sha256_file(p) + "\n";
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) out += "output " + fs::relative(p, dir).string() + " sha256=" + io::sha256_file(p) + "\n";
  io::write_file_atomic(dir / "manifest.txt", out);
}

void check_run_dir(const Config& cfg) {
  const fs::path out = require(cfg, "out");
  std::error_code ec;
  if (fs::exists(out, ec)) {
    if (!fs::is_directory(out, ec)) throw Error(Errc::usage, "output path '" + out.string() + "' is not a directory");
    if (!fs::is_empty(out, ec)) throw Error(Errc::usage, "output directory '" + out.string() + "' is not empty");
  }
}

fs::path fresh_run_dir(const Config& cfg) {
  check_run_dir(cfg);
  const fs::path out = require(cfg, "out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(Errc::io, "cannot create output directory '" + out.string() + "': " + ec.message());
  return out;
}

// ---- shared loading ---------------------------------------------------------------

LoadedCohort load_cohort(const Config& cfg, std::uint64_t seed) {
  LoadedCohort lc;
  const fs::path traj_path = require(cfg, "trajectories");
  const auto all = read_trajectory_csv(io::read_file(traj_path));
  if (all.empty()) throw Error(Errc::ingestion, "no trajectories in " + traj_path.string());
  for (const auto& t : all) validate_trajectory(t);
  lc.inputs.push_back(traj_path);

  std::vector<bool> train(all.size());
  const fs::path split_path = cfg.get_string("split", sibling(traj_path, "split.csv").string());
  if (fs::exists(split_path)) {
    const auto split = etl::read_split_csv(io::read_file(split_path));
    for (std::size_t i = 0; i < all.size(); ++i) {
      const auto it = split.find(all[i].patient_id);
      if (it == split.end()) throw Error(Errc::ingestion, "patient " + all[i].patient_id + " missing from split file");
      train[i] = it->second;
    }
    lc.inputs.push_back(split_path);
  } else {
    const double frac = cfg.get_double("train_fraction", 0.8);
    for (std::size_t i = 0; i < all.size(); ++i) train[i] = etl::is_train_patient(all[i].patient_id, seed, frac);
  }

  std::string source = cfg.get_string("behavior", "auto");
  const fs::path probs_path = cfg.get_string("behavior_probs", sibling(traj_path, "behavior_probs.csv").string());
  if (source == "auto") source = fs::exists(probs_path) ? "exact" : "estimate";
  LoggedProbs probs;
  if (source == "exact") {
    if (!fs::exists(probs_path))
      throw Error(Errc::usage, "behavior=exact needs the sidecar " + probs_path.string());
    probs = read_behavior_probs_csv(io::read_file(probs_path), all);
    lc.inputs.push_back(probs_path);
  } else if (source != "estimate") {
    throw Error(Errc::config, "behavior must be auto, exact or estimate");
  }

  for (std::size_t i = 0; i < all.size(); ++i) {
    (train[i] ? lc.data.train : lc.data.test).push_back(all[i]);
  }
  if (lc.data.train.empty()) throw Error(Errc::training, "split left no training trajectories");

  if (source == "exact") {
    for (std::size_t i = 0; i < all.size(); ++i) (train[i] ? lc.data.behavior_train : lc.data.behavior_test).push_back(probs[i]);
  } else {
    ope::BehaviorEstimateOptions o;
    o.hidden = static_cast<std::size_t>(cfg.get_int("behavior_hidden", static_cast<long long>(o.hidden)));
    o.iterations = static_cast<std::size_t>(cfg.get_int("behavior_iterations", static_cast<long long>(o.iterations)));
    o.batch = static_cast<std::size_t>(cfg.get_int("behavior_batch", static_cast<long long>(o.batch)));
    o.lr = cfg.get_double("behavior_lr", o.lr);
    o.floor = cfg.get_double("behavior_floor", o.floor);
    o.seed = seed;
    const auto policy = ope::estimate_behavior_policy(lc.data.train, o);
    lc.data.behavior_train = ope::logged_action_probs(lc.data.train, policy);
    lc.data.behavior_test = ope::logged_action_probs(lc.data.test, policy);
  }
  lc.behavior_source = source;
  return lc;
}

// ---- etl ---------------------------------------------------------------------------

void run_etl(const Config& cfg) {
  check_run_dir(cfg);
  const std::uint64_t seed = run_seed(cfg);
  const fs::path events_path = require(cfg, "events");
  const auto ecfg = etl::EtlConfig::from(cfg);
  auto events = etl::read_events_csv(io::read_file(events_path), ecfg);
  const auto res = etl::run_pipeline(std::move(events), ecfg);

  const fs::path out = fresh_run_dir(cfg);
  write(out, "trajectories.csv", write_trajectory_csv(res.trajectories));
  write(out, "normalization_stats.csv", write_normalization_csv(res.stats));
  write(out, "action_bins.csv", write_bins_csv(*res.bins));
  write(out, "exclusions.log", etl::write_exclusions(res.exclusions));
  write(out, "split.csv", etl::write_split_csv(res.trajectories, res.train));

  Manifest m("etl", seed);
  m.add_input(events_path);
  const auto& c = res.counts;
  m.note("events", std::to_string(c.events));
  m.note("patients_in", std::to_string(c.patients_in));
  m.note("patients_out", std::to_string(c.patients_out));
  m.note("patients_excluded", std::to_string(res.exclusions.size()));
  m.note("outliers_removed", std::to_string(c.outliers_removed));
  m.note("sample_and_hold_filled", std::to_string(c.sample_and_hold_filled));
  m.note("knn_filled", std::to_string(c.knn_filled));
  m.note("train_patients", std::to_string(c.train_patients));
  m.note("test_patients", std::to_string(c.test_patients));
  std::string dropped;
  for (const auto& d : res.dropped_features) dropped += (dropped.empty() ? "" : ",") + d;
  m.note("dropped_features", dropped);
  for (const auto& [name, b] : ecfg.bounds)
    m.note("bounds." + name, io::format_double(b.lo) + "," + io::format_double(b.hi));
  m.write(out, cfg);
}

// ---- simulate ----------------------------------------------------------------------

void run_simulate(const Config& cfg) {
  check_run_dir(cfg);
  const std::uint64_t seed = run_seed(cfg);
  const long long n = cfg.get_int("n_patients", 1911);
  if (n <= 0) throw Error(Errc::usage, "n_patients must be positive");
  const auto scfg = sim::SimConfig::from(cfg);
  const double frac = cfg.get_double("train_fraction", 0.8);
  if (!(frac > 0.0 && frac <= 1.0)) throw Error(Errc::config, "train_fraction must lie in (0, 1]");
  const auto cohort = sim::generate_cohort(scfg, static_cast<std::size_t>(n), seed);
  std::vector<bool> train;
  for (const auto& t : cohort.trajectories) train.push_back(etl::is_train_patient(t.patient_id, seed, frac));

  const fs::path out = fresh_run_dir(cfg);
  write(out, "trajectories.csv", write_trajectory_csv(cohort.trajectories));
  write(out, "behavior_probs.csv", write_behavior_probs_csv(cohort.trajectories, cohort.behavior));
  write(out, "normalization_stats.csv", write_normalization_csv(cohort.stats));
  write(out, "split.csv", etl::write_split_csv(cohort.trajectories, train));

  Manifest m("simulate", seed);
  std::size_t transitions = 0;
  for (const auto& t : cohort.trajectories) transitions += t.transitions.size();
  m.note("patients", std::to_string(n));
  m.note("transitions", std::to_string(transitions));
  m.write(out, cfg);
}

// ---- train -------------------------------------------------------------------------

void run_train(const Config& cfg) {
  check_run_dir(cfg);
  const std::uint64_t seed = run_seed(cfg);
  const auto algorithm = agents::parse_algorithm(require(cfg, "algorithm"));
  const auto tcfg = agents::TrainerConfig::from(cfg);
  const long long ckpt_every = cfg.get_int("checkpoint_every", 10000);
  if (ckpt_every < 0) throw Error(Errc::config, "checkpoint_every must be >= 0");
  const auto lc = load_cohort(cfg, seed);

  const fs::path out = fresh_run_dir(cfg);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  auto save = [&](const agents::QModel& model, std::size_t iteration, const std::string& name) {
    io::write_file_atomic(ckpt_dir / name, agents::serialize_checkpoint({model, tcfg.tau, seed, iteration}));
  };

  std::string metrics = agents::metrics_csv_header() + "\n";
  const auto result = agents::train_run(lc.data, algorithm, tcfg, [&](const agents::MetricsRow& row, const agents::QModel& m) {
    metrics += agents::format_metrics_row(row) + "\n";
    if (ckpt_every > 0 && row.iteration % static_cast<std::size_t>(ckpt_every) == 0) {
      char name[40];
      std::snprintf(name, sizeof name, "iter_%07zu.ckpt", row.iteration);
      save(m, row.iteration, name);
    }
  });
  write(out, "metrics.csv", metrics);
  save(result.best_model, result.best_iteration, "best.ckpt");
  save(result.final_model, tcfg.iterations, "final.ckpt");

  const auto& eval_set = lc.data.test.empty() ? lc.data.train : lc.data.test;
  const auto counts = agents::action_distribution(result.final_model, eval_set, tcfg.tau);
  std::string dist = "action,count_clinician,count_policy\n";
  for (std::size_t a = 0; a < kNumActions; ++a)
    dist += std::to_string(a) + "," + std::to_string(counts.clinician[a]) + "," + std::to_string(counts.policy[a]) + "\n";
  write(out, "action_distribution.csv", dist);

  Manifest m("train", seed);
  for (const auto& p : lc.inputs) m.add_input(p);
  m.note("algorithm", agents::algorithm_name(algorithm));
  m.note("iteration_unit", "one iteration is one minibatch gradient step (no environment episodes)");
  m.note("behavior_source", lc.behavior_source);
  m.note("train_trajectories", std::to_string(lc.data.train.size()));
  m.note("test_trajectories", std::to_string(lc.data.test.size()));
  m.note("buffer_evicted", std::to_string(result.buffer_evicted));
  m.note("best_iteration", std::to_string(result.best_iteration));
  m.write(out, cfg);
  if (result.buffer_evicted) log("replay buffer evicted " + std::to_string(result.buffer_evicted) + " transitions");
}

// ---- evaluate ----------------------------------------------------------------------

namespace {

struct EvalRow {
  std::string policy, split;
  ope::Estimate est;
};


}  // namespace

void run_evaluate(const Config& cfg) {
  check_run_dir(cfg);
  const std::uint64_t seed = run_seed(cfg);
  const auto ckpt_paths = list_option(cfg, "checkpoint");
  const double gamma = cfg.get_double("eval_gamma", cfg.get_double("gamma", 0.99));
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(Errc::config, "eval_gamma must lie in [0, 1]");
  const double eps = cfg.get_double("target_epsilon", cfg.get_double("softening_epsilon", 0.01));
  if (!(eps >= 0.0 && eps < 1.0)) throw Error(Errc::config, "target_epsilon must lie in [0, 1)");
  const long long mc_rollouts = cfg.get_int("mc_rollouts", 0);
  if (mc_rollouts < 0) throw Error(Errc::config, "mc_rollouts must be >= 0");
  const auto lc = load_cohort(cfg, seed);

  struct Policy {
    std::string name;
    agents::Checkpoint ckpt;
  };
  std::vector<Policy> policies;
  std::set<std::string> names;
  for (const auto& p : ckpt_paths) {
    Policy pol{"", agents::deserialize_checkpoint(io::read_file(p))};
    std::string name = agents::algorithm_name(pol.ckpt.model.algorithm());
    for (int k = 2; names.count(name); ++k) name = std::string(agents::algorithm_name(pol.ckpt.model.algorithm())) + "#" + std::to_string(k);
    names.insert(name);
    pol.name = name;
    policies.push_back(std::move(pol));
  }

  std::vector<EvalRow> rows;
  auto add_split = [&](const std::string& split, const std::vector<Trajectory>& trajs, const LoggedProbs& behavior) {
    if (trajs.empty()) return;
    for (const auto& p : policies) {
      const auto greedy = agents::greedy_fn(p.ckpt.model, p.ckpt.tau);
      const auto snapshot = eps > 0.0 ? ope::soften_policy(greedy, eps) : ope::greedy_policy(greedy);
      const auto target = ope::logged_action_probs(trajs, snapshot);
      rows.push_back({p.name, split, ope::evaluate(trajs, target, behavior, gamma)});
    }
    rows.push_back({"clinician", split, ope::evaluate(trajs, behavior, behavior, gamma)});
  };
  add_split("train", lc.data.train, lc.data.behavior_train);
  add_split("test", lc.data.test, lc.data.behavior_test);

  for (const auto& r : rows) {
    if (!r.est.wis_defined)
      throw Error(Errc::undefined_estimate, "WIS undefined for policy " + r.policy + " on the " + r.split +
                                                " split: every importance weight is zero");
  }

  std::string mc_csv;
  if (mc_rollouts > 0) {
    const fs::path traj_path = require(cfg, "trajectories");
    const fs::path stats_path = cfg.get_string("normalization", sibling(traj_path, "normalization_stats.csv").string());
    const auto stats = read_normalization_csv(io::read_file(stats_path));
    const auto scfg = sim::SimConfig::from(cfg);
    const std::uint64_t mc_seed = mix64(seed ^ fnv1a64("eval"));
    mc_csv = "policy,mc_return,std_error,n_rollouts\n";
    auto add = [&](const std::string& name, const sim::BatchPolicy& pol) {
      const auto r = sim::monte_carlo_value(scfg, stats, pol, static_cast<std::size_t>(mc_rollouts), gamma, mc_seed);
      mc_csv += name + "," + io::format_double(r.mean) + "," + io::format_double(r.std_error) + "," + std::to_string(r.n) + "\n";
    };
    for (const auto& p : policies) add(p.name, agents::greedy_rollout_policy(p.ckpt.model, p.ckpt.tau));
    add("clinician", sim::clinician_policy(scfg));
  }

  const fs::path out = fresh_run_dir(cfg);
  std::string csv = "policy,split,n,is,wis,ess\n";
  for (const auto& r : rows) {
    csv += r.policy + "," + r.split + "," + std::to_string(r.est.n) + "," + io::format_double(r.est.is) + "," +
           io::format_double(r.est.wis) + "," + io::format_double(r.est.ess) + "\n";
  }
  write(out, "evaluation.csv", csv);
  if (!mc_csv.empty()) write(out, "monte_carlo.csv", mc_csv);

  Manifest m("evaluate", seed);
  for (const auto& p : lc.inputs) m.add_input(p);
  for (const auto& p : ckpt_paths) m.add_input(p);
  m.note("behavior_source", lc.behavior_source);
  m.write(out, cfg);
}

// ---- embed -------------------------------------------------------------------------

void run_embed(const Config& cfg) {
  check_run_dir(cfg);
  const std::uint64_t seed = run_seed(cfg);
  const auto ckpt = agents::deserialize_checkpoint(io::read_file(require(cfg, "checkpoint")));
  const long long max_points = cfg.get_int("max_points", 2000);
  if (max_points < 10 || max_points > 5000) throw Error(Errc::config, "max_points must lie in [10, 5000]");
  const double perplexity = cfg.get_double("perplexity", 30.0);
  embed::TsneOptions topt;
  topt.iterations = static_cast<int>(cfg.get_int("tsne_iterations", topt.iterations));
  topt.learning_rate = cfg.get_double("tsne_learning_rate", topt.learning_rate);
  topt.exaggeration = cfg.get_double("tsne_exaggeration", topt.exaggeration);
  topt.seed = seed;
  const bool use_hidden = cfg.get_bool("embed_hidden", false);

  const fs::path traj_path = require(cfg, "trajectories");
  const auto all = read_trajectory_csv(io::read_file(traj_path));
  std::vector<bool> train(all.size(), true);
  const fs::path split_path = cfg.get_string("split", sibling(traj_path, "split.csv").string());
  if (fs::exists(split_path)) {
    const auto split = etl::read_split_csv(io::read_file(split_path));
    for (std::size_t i = 0; i < all.size(); ++i) {
      const auto it = split.find(all[i].patient_id);
      train[i] = it == split.end() || it->second;
    }
  } else {
    const double frac = cfg.get_double("train_fraction", 0.8);
    for (std::size_t i = 0; i < all.size(); ++i) train[i] = etl::is_train_patient(all[i].patient_id, seed, frac);
  }

  std::vector<embed::EmbeddedPoint> points;
  std::vector<StateVector> states;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t t = 0; t < all[i].transitions.size(); ++t) {
      embed::EmbeddedPoint p;
      p.patient_id = all[i].patient_id;
      p.t = t;
      p.aptt = all[i].aptt_at(t);
      p.therapeutic = is_therapeutic(p.aptt);
      p.test = !train[i];
      points.push_back(p);
      states.push_back(all[i].transitions[t].state);
    }
  }
  if (points.size() < 10) throw Error(Errc::usage, "embedding needs at least 10 states, got " + std::to_string(points.size()));
  if (points.size() > static_cast<std::size_t>(max_points)) {
    Rng rng = make_stream(seed, "embed");
    std::vector<std::size_t> idx(points.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_points));
    std::sort(idx.begin(), idx.end());
    std::vector<embed::EmbeddedPoint> p2;
    std::vector<StateVector> s2;
    for (std::size_t k : idx) p2.push_back(points[k]), s2.push_back(states[k]);
    points = std::move(p2);
    states = std::move(s2);
  }

  const auto out_model = ckpt.model.forward(agents::states_to_matrix(states));
  const auto max_q = ckpt.model.selected_q(out_model, ckpt.tau);
  const nn::Matrix x = use_hidden ? nn::Matrix(out_model.hidden.transpose())
                                  : nn::Matrix(agents::states_to_matrix(states).transpose());
  const double n = static_cast<double>(points.size());
  const double perp = std::min(perplexity, std::floor((n - 1.0) / 3.0));
  if (perp < 5.0) throw Error(Errc::usage, "too few states for a perplexity of at least 5");
  if (perp != perplexity) log("perplexity lowered to " + io::format_double(perp) + " for " + std::to_string(points.size()) + " points");
  const auto aff = embed::pairwise_affinities(x, perp);
  if (aff.jittered) log(std::to_string(aff.jittered) + " duplicate distances raised to the 1e-12 floor");
  if (aff.unconverged) log(std::to_string(aff.unconverged) + " affinity rows missed the perplexity tolerance");
  const auto ts = embed::tsne_run(aff, topt);
  for (std::size_t i = 0; i < points.size(); ++i) {
    points[i].x = ts.y(static_cast<Eigen::Index>(i), 0);
    points[i].y = ts.y(static_cast<Eigen::Index>(i), 1);
    points[i].max_q = max_q[i];
  }
  const auto regions = embed::value_region_report(points);

  const fs::path out = fresh_run_dir(cfg);
  write(out, "embedding.csv", embed::write_embedding_csv(points));
  write(out, "regions.csv", embed::write_region_csv(regions));
  write(out, "embedding.svg", embed::render_svg(points));

  Manifest m("embed", seed);
  m.add_input(traj_path);
  m.add_input(require(cfg, "checkpoint"));
  m.note("points", std::to_string(points.size()));
  m.note("perplexity", io::format_double(perp));
  m.note("kl_initial", io::format_double(ts.kl_initial));
  m.note("kl_final", io::format_double(ts.kl_final));
  m.note("unconverged_rows", std::to_string(aff.unconverged));
  m.note("jittered_distances", std::to_string(aff.jittered));
  m.write(out, cfg);
}

// ---- report ------------------------------------------------------------------------

namespace {

struct RunInfo {
  fs::path dir;
  std::string algorithm;
  std::string seed;
  std::vector<std::vector<double>> metrics;  // rows of numeric columns (behavior_loss NaN when empty)
  std::string dist;
};

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  std::map<std::string, std::string> kv;
  for (const auto& line : io::read_lines(dir / "manifest.txt")) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && line.rfind("input ", 0) != 0 && line.rfind("output ", 0) != 0)
      kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string curves_svg(const std::map<std::string, std::map<std::size_t, std::pair<double, double>>>& curves,
                       const std::string& title) {
  constexpr double W = 800, H = 500, pad = 50;
  double x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& [alg, pts] : curves) {
    for (const auto& [it, ms] : pts) {
      x1 = std::max(x1, static_cast<double>(it));
      if (first) y0 = y1 = ms.first, first = false;
      y0 = std::min(y0, ms.first - ms.second);
      y1 = std::max(y1, ms.first + ms.second);
    }
  }
  if (y1 - y0 < 1e-12) y1 = y0 + 1.0;
  auto px = [&](double x) { return pad + x / x1 * (W - 2 * pad); };
  auto py = [&](double y) { return H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad); };
  static constexpr std::array<const char*, 6> colors{"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"500\" viewBox=\"0 0 800 500\">\n";
  out += "<rect width=\"800\" height=\"500\" fill=\"white\"/>\n";
  out += "<text x=\"400\" y=\"25\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";
  char buf[200];
  std::size_t k = 0;
  for (const auto& [alg, pts] : curves) {
    const char* color = colors[k % colors.size()];
    std::string band_hi, band_lo, line;
    for (const auto& [it, ms] : pts) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(static_cast<double>(it)), py(ms.first));
      line += buf;
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(static_cast<double>(it)), py(ms.first + ms.second));
      band_hi += buf;
    }
    for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(static_cast<double>(it->first)), py(it->second.first - it->second.second));
      band_lo += buf;
    }
    out += std::string("<polygon points=\"") + band_hi + band_lo + "\" fill=\"" + color + "\" fill-opacity=\"0.2\"/>\n";
    out += std::string("<polyline points=\"") + line + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\" fill=\"%s\">%s</text>\n",
                  W - pad - 120, pad + 16.0 * static_cast<double>(k), color, alg.c_str());
    out += buf;
    ++k;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace

void run_report(const Config& cfg) {
  check_run_dir(cfg);
  const auto dirs = list_option(cfg, "runs");
  const std::string header = agents::metrics_csv_header();
  std::vector<RunInfo> runs;
  for (const auto& d : dirs) {
    RunInfo r;
    r.dir = d;
    const auto lines = io::read_lines(r.dir / "metrics.csv");
    if (lines.empty() || io::trim(lines[0]) != header)
      throw Error(Errc::usage, "run " + d + ": metrics.csv does not have the expected columns");
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (io::trim(lines[i]).empty()) continue;
      const auto f = io::split(io::trim(lines[i]), ',');
      if (f.size() != 7) throw Error(Errc::usage, "run " + d + ": malformed metrics row " + std::to_string(i));
      std::vector<double> row;
      for (std::size_t c = 0; c < 7; ++c)
        row.push_back(f[c].empty() ? std::numeric_limits<double>::quiet_NaN() : io::parse_double(f[c]));
      r.metrics.push_back(row);
    }
    const auto mf = read_manifest(r.dir);
    r.algorithm = mf.count("note.algorithm") ? mf.at("note.algorithm") : "unknown";
    r.seed = mf.count("seed") ? mf.at("seed") : "";
    if (fs::exists(r.dir / "action_distribution.csv")) r.dist = io::read_file(r.dir / "action_distribution.csv");
    runs.push_back(std::move(r));
  }

  // algorithm -> iteration -> column -> values
  std::map<std::string, std::map<std::size_t, std::vector<std::vector<double>>>> grouped;
  for (const auto& r : runs) {
    for (const auto& row : r.metrics) {
      auto& cols = grouped[r.algorithm][static_cast<std::size_t>(row[0])];
      cols.resize(6);
      for (std::size_t c = 1; c < 7; ++c)
        if (!std::isnan(row[c])) cols[c - 1].push_back(row[c]);
    }
  }
  const std::array<const char*, 6> names{"wis_train", "wis_test", "mean_q_train", "mean_q_test", "td_loss", "behavior_loss"};
  std::string comparison = "algorithm,iteration,n_runs";
  for (const char* n : names) comparison += std::string(",") + n + "_mean," + n + "_std";
  comparison += "\n";
  std::map<std::string, std::map<std::size_t, std::pair<double, double>>> wis_curve, q_curve;
  for (const auto& [alg, iters] : grouped) {
    for (const auto& [it, cols] : iters) {
      comparison += alg + "," + std::to_string(it) + "," + std::to_string(cols[1].size());
      for (const auto& v : cols) {
        if (v.empty()) comparison += ",,";
        else comparison += "," + io::format_double(mean_of(v)) + "," + io::format_double(sample_std(v));
      }
      comparison += "\n";
      if (!cols[1].empty()) wis_curve[alg][it] = {mean_of(cols[1]), sample_std(cols[1])};
      if (!cols[3].empty()) q_curve[alg][it] = {mean_of(cols[3]), sample_std(cols[3])};
    }
  }

  std::string actions = "run,algorithm,seed,action,count_clinician,count_policy\n";
  for (const auto& r : runs) {
    if (r.dist.empty()) continue;
    const auto lines = io::split(r.dist, '\n');
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const std::string line = io::trim(lines[i]);
      if (!line.empty()) actions += r.dir.filename().string() + "," + r.algorithm + "," + r.seed + "," + line + "\n";
    }
  }

  const fs::path out = fresh_run_dir(cfg);
  write(out, "comparison.csv", comparison);
  write(out, "action_distribution.csv", actions);
  write(out, "wis_curves.svg", curves_svg(wis_curve, "test WIS (mean +- std)"));
  write(out, "q_curves.svg", curves_svg(q_curve, "mean predicted Q, test probe (mean +- std)"));

  Manifest m("report", run_seed(cfg));
  for (const auto& r : runs) m.add_input(r.dir / "metrics.csv");
  m.note("runs", std::to_string(runs.size()));
  m.write(out, cfg);
}

void run(const std::string& command, const Config& cfg) {
  if (command == "etl") return run_etl(cfg);
  if (command == "simulate") return run_simulate(cfg);
  if (command == "train") return run_train(cfg);
  if (command == "evaluate") return run_evaluate(cfg);
  if (command == "embed") return run_embed(cfg);
  if (command == "report") return run_report(cfg);
  throw Error(Errc::usage, "unknown command '" + command + "'");
}

}  // namespace heparl::cmd
