#include "heparl/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "heparl/error.hpp"
#include "heparl/io.hpp"

namespace heparl::agents {

const char* algorithm_name(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::dqn: return "dqn";
    case Algorithm::double_dqn: return "double-dqn";
    case Algorithm::dueling_dqn: return "dueling-dqn";
    case Algorithm::bcq: return "bcq";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::dqn, Algorithm::double_dqn, Algorithm::dueling_dqn, Algorithm::bcq}) {
    if (name == algorithm_name(a)) return a;
  }
  if (name == "double_dqn" || name == "ddqn") return Algorithm::double_dqn;
  if (name == "dueling_dqn" || name == "dueling") return Algorithm::dueling_dqn;
  throw Error(Errc::config, "unknown algorithm '" + std::string(name) + "'");
}

namespace {

std::size_t positive(const Config& cfg, const std::string& key, std::size_t fallback) {
  const long long v = cfg.get_int(key, static_cast<long long>(fallback));
  if (v <= 0) throw Error(Errc::config, key + " must be positive");
  return static_cast<std::size_t>(v);
}

std::size_t non_negative(const Config& cfg, const std::string& key, std::size_t fallback) {
  const long long v = cfg.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw Error(Errc::config, key + " must be >= 0");
  return static_cast<std::size_t>(v);
}

}  // namespace

TrainerConfig TrainerConfig::from(const Config& cfg) {
  TrainerConfig c;
  c.gamma = cfg.get_double("gamma", c.gamma);
  c.minibatch = positive(cfg, "minibatch", c.minibatch);
  c.iterations = positive(cfg, "iterations", c.iterations);
  c.eval_every = positive(cfg, "eval_every", c.eval_every);
  c.target_update_every = positive(cfg, "target_update_every", c.target_update_every);
  c.rho = cfg.get_double("rho", c.rho);
  c.lr = cfg.get_double("lr", c.lr);
  c.adam_eps = cfg.get_double("adam_eps", c.adam_eps);
  c.tau = cfg.get_double("tau", c.tau);
  c.seed = cfg.get_u64("seed", c.seed);
  c.detach_behavior_trunk = cfg.get_bool("detach_behavior_trunk", c.detach_behavior_trunk);
  c.behavior_pretrain_iters = non_negative(cfg, "behavior_pretrain_iters", c.behavior_pretrain_iters);
  c.hidden = positive(cfg, "hidden", c.hidden);
  c.depth = positive(cfg, "depth", c.depth);
  c.head_hidden = positive(cfg, "head_hidden", c.head_hidden);
  const std::string init = cfg.get_string("init", c.init == nn::Init::he ? "he" : "fan_in");
  if (init == "he") c.init = nn::Init::he;
  else if (init == "fan_in") c.init = nn::Init::fan_in;
  else throw Error(Errc::config, "init must be 'he' or 'fan_in'");
  c.softening_epsilon = cfg.get_double("softening_epsilon", c.softening_epsilon);
  c.eval_gamma = cfg.get_double("eval_gamma", c.gamma);
  c.eval_max_trajectories = non_negative(cfg, "eval_max_trajectories", c.eval_max_trajectories);
  c.probe_size = positive(cfg, "probe_size", c.probe_size);
  c.buffer_capacity = positive(cfg, "buffer_capacity", c.buffer_capacity);
  c.validate();
  return c;
}

void TrainerConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(Errc::config, "gamma must lie in [0, 1]");
  if (!(eval_gamma >= 0.0 && eval_gamma <= 1.0)) throw Error(Errc::config, "eval_gamma must lie in [0, 1]");
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error(Errc::config, "rho must lie in [0, 1]");
  if (!(lr > 0.0)) throw Error(Errc::config, "lr must be positive");
  if (!(adam_eps > 0.0)) throw Error(Errc::config, "adam_eps must be positive");
  if (!(tau >= 0.0 && tau < 1.0)) throw Error(Errc::config, "tau must lie in [0, 1)");
  if (!(softening_epsilon > 0.0 && softening_epsilon < 1.0))
    throw Error(Errc::config, "softening_epsilon must lie in (0, 1)");
  if (minibatch == 0 || iterations == 0 || eval_every == 0 || target_update_every == 0 || hidden == 0 ||
      depth == 0 || head_hidden == 0 || probe_size == 0 || buffer_capacity == 0)
    throw Error(Errc::config, "trainer sizes must be positive");
}

// ---- action selection ----------------------------------------------------

int argmax(std::span<const double> values) {
  if (values.empty()) throw Error(Errc::usage, "argmax of an empty vector");
  int best = 0;
  for (std::size_t a = 1; a < values.size(); ++a) {
    if (values[a] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  return best;
}

int argmax_masked(std::span<const double> values, const ActionMask& mask) {
  int best = -1;
  for (std::size_t a = 0; a < values.size() && a < mask.size(); ++a) {
    if (!mask[a]) continue;
    if (best < 0 || values[a] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  if (best < 0) throw Error(Errc::internal, "empty eligible action set");
  return best;
}

ActionMask bcq_eligible_actions(const ActionProbs& behavior_probs, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw Error(Errc::config, "tau must lie in [0, 1)");
  const double top = *std::max_element(behavior_probs.begin(), behavior_probs.end());
  if (!(top > 0.0)) throw Error(Errc::domain, "behavior probabilities have no positive entry");
  ActionMask mask{};
  for (std::size_t a = 0; a < kNumActions; ++a) mask[a] = behavior_probs[a] / top > tau;
  return mask;
}

int bcq_select_action(const QValues& q, const ActionProbs& behavior_probs, double tau) {
  return argmax_masked(q, bcq_eligible_actions(behavior_probs, tau));
}

nn::Matrix dueling_q_forward(const nn::Matrix& value, const nn::Matrix& advantage) {
  if (value.rows() != 1 || value.cols() != advantage.cols())
    throw Error(Errc::shape, "dueling streams disagree in shape");
  // mean of pairwise differences: bitwise invariant to any exactly representable shift of A
  const Eigen::Index k = advantage.rows();
  nn::Matrix q(k, advantage.cols());
  for (Eigen::Index c = 0; c < advantage.cols(); ++c) {
    for (Eigen::Index i = 0; i < k; ++i) {
      double d = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) d += advantage(i, c) - advantage(j, c);
      q(i, c) = value(0, c) + d / static_cast<double>(k);
    }
  }
  return q;
}

// ---- TD targets ---------------------------------------------------------

namespace {

void check_batch(const TdBatch& batch, const nn::Matrix& m) {
  if (batch.reward.empty()) throw Error(Errc::usage, "empty TD batch");
  if (batch.reward.size() != batch.terminal.size() || static_cast<std::size_t>(m.cols()) != batch.reward.size() ||
      static_cast<std::size_t>(m.rows()) != kNumActions)
    throw Error(Errc::shape, "TD batch shape mismatch");
}

std::span<const double> column(const nn::Matrix& m, std::size_t j) {
  return {m.data() + j * static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.rows())};
}

}  // namespace

std::vector<double> dqn_target(const TdBatch& batch, const nn::Matrix& q_target_next, double gamma) {
  check_batch(batch, q_target_next);
  std::vector<double> y(batch.reward.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    y[j] = batch.reward[j];
    if (!batch.terminal[j]) y[j] += gamma * q_target_next.col(static_cast<Eigen::Index>(j)).maxCoeff();
  }
  return y;
}

std::vector<double> double_dqn_target(const TdBatch& batch, const nn::Matrix& q_online_next,
                                      const nn::Matrix& q_target_next, double gamma) {
  check_batch(batch, q_online_next);
  check_batch(batch, q_target_next);
  std::vector<double> y(batch.reward.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    y[j] = batch.reward[j];
    if (!batch.terminal[j]) {
      const int a = argmax(column(q_online_next, j));
      y[j] += gamma * q_target_next(a, static_cast<Eigen::Index>(j));
    }
  }
  return y;
}

std::vector<double> bcq_target(const TdBatch& batch, const nn::Matrix& q_online_next, const nn::Matrix& q_target_next,
                               const nn::Matrix& behavior_probs_next, double tau, double gamma) {
  check_batch(batch, q_online_next);
  check_batch(batch, q_target_next);
  check_batch(batch, behavior_probs_next);
  std::vector<double> y(batch.reward.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    y[j] = batch.reward[j];
    if (!batch.terminal[j]) {
      ActionProbs g{};
      for (std::size_t a = 0; a < kNumActions; ++a) g[a] = behavior_probs_next(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j));
      const int a = argmax_masked(column(q_online_next, j), bcq_eligible_actions(g, tau));
      y[j] += gamma * q_target_next(a, static_cast<Eigen::Index>(j));
    }
  }
  return y;
}

// ---- QModel ---------------------------------------------------------------

QModel QModel::make(Algorithm algorithm, const TrainerConfig& cfg, Rng& rng) {
  QModel m;
  m.algorithm_ = algorithm;
  std::vector<std::size_t> trunk_sizes{kStateDim};
  for (std::size_t i = 0; i < cfg.depth; ++i) trunk_sizes.push_back(cfg.hidden);
  m.trunk_ = nn::Mlp::make(trunk_sizes, nn::Activation::relu, nn::Activation::relu, rng, cfg.init);
  if (algorithm == Algorithm::dueling_dqn) {
    const std::array<std::size_t, 3> v{cfg.hidden, cfg.head_hidden, 1};
    const std::array<std::size_t, 3> a{cfg.hidden, cfg.head_hidden, kNumActions};
    m.value_head_ = nn::Mlp::make(v, nn::Activation::relu, nn::Activation::identity, rng, cfg.init);
    m.advantage_head_ = nn::Mlp::make(a, nn::Activation::relu, nn::Activation::identity, rng, cfg.init);
  } else {
    const std::array<std::size_t, 2> q{cfg.hidden, kNumActions};
    m.q_head_ = nn::Mlp::make(q, nn::Activation::identity, nn::Activation::identity, rng, cfg.init);
  }
  if (algorithm == Algorithm::bcq) {
    const std::array<std::size_t, 4> b{cfg.hidden, cfg.head_hidden, cfg.head_hidden, kNumActions};
    m.behavior_head_ = nn::Mlp::make(b, nn::Activation::relu, nn::Activation::softmax, rng, cfg.init);
  }
  return m;
}

QModel QModel::from_parts(Algorithm algorithm, nn::Mlp trunk, nn::Mlp q_head, nn::Mlp value_head,
                          nn::Mlp advantage_head, nn::Mlp behavior_head) {
  QModel m;
  m.algorithm_ = algorithm;
  m.trunk_ = std::move(trunk);
  m.q_head_ = std::move(q_head);
  m.value_head_ = std::move(value_head);
  m.advantage_head_ = std::move(advantage_head);
  m.behavior_head_ = std::move(behavior_head);
  if (m.trunk_.empty() || m.trunk_.input_dim() != kStateDim) throw Error(Errc::shape, "trunk must take 16 inputs");
  const std::size_t h = m.trunk_.output_dim();
  if (algorithm == Algorithm::dueling_dqn) {
    if (m.value_head_.empty() || m.advantage_head_.empty() || m.value_head_.input_dim() != h ||
        m.advantage_head_.input_dim() != h || m.value_head_.output_dim() != 1 ||
        m.advantage_head_.output_dim() != kNumActions)
      throw Error(Errc::shape, "malformed dueling heads");
  } else if (m.q_head_.empty() || m.q_head_.input_dim() != h || m.q_head_.output_dim() != kNumActions) {
    throw Error(Errc::shape, "Q head must map the trunk to 6 outputs");
  }
  if (algorithm == Algorithm::bcq) {
    if (m.behavior_head_.empty() || m.behavior_head_.input_dim() != h ||
        m.behavior_head_.output_dim() != kNumActions ||
        m.behavior_head_.layers().back().activation != nn::Activation::softmax)
      throw Error(Errc::shape, "malformed behavior head");
  }
  return m;
}

QModel::Output QModel::forward(const nn::Matrix& states) const {
  Output out;
  out.hidden = trunk_.forward(states);
  if (algorithm_ == Algorithm::dueling_dqn) {
    out.q = dueling_q_forward(value_head_.forward(out.hidden), advantage_head_.forward(out.hidden));
  } else {
    out.q = q_head_.forward(out.hidden);
  }
  if (!behavior_head_.empty()) out.behavior = behavior_head_.forward(out.hidden);
  return out;
}

const QModel::Output& QModel::forward(const nn::Matrix& states, Cache& cache) const {
  Output& out = cache.out;
  out.hidden = trunk_.forward(states, &cache.trunk);
  if (algorithm_ == Algorithm::dueling_dqn) {
    out.q = dueling_q_forward(value_head_.forward(out.hidden, &cache.value_head),
                              advantage_head_.forward(out.hidden, &cache.advantage_head));
  } else {
    out.q = q_head_.forward(out.hidden, &cache.q_head);
  }
  if (!behavior_head_.empty()) out.behavior = behavior_head_.forward(out.hidden, &cache.behavior_head);
  return out;
}

QModel::Grads QModel::backward(const Cache& cache, const nn::Matrix& dq, const nn::Matrix* dbehavior_logits,
                               bool detach_behavior_trunk) const {
  Grads g;
  nn::Matrix dh;
  if (algorithm_ == Algorithm::dueling_dqn) {
    const nn::Matrix dv = dq.colwise().sum();
    nn::Matrix da = dq;
    da.rowwise() -= dq.colwise().mean();
    nn::Matrix dh_a;
    g.value_head = value_head_.backward(cache.value_head, dv, &dh);
    g.advantage_head = advantage_head_.backward(cache.advantage_head, da, &dh_a);
    dh += dh_a;
  } else {
    g.q_head = q_head_.backward(cache.q_head, dq, &dh);
  }
  if (dbehavior_logits) {
    if (behavior_head_.empty()) throw Error(Errc::usage, "model has no behavior head");
    nn::Matrix dh_b;
    g.behavior_head = behavior_head_.backward(cache.behavior_head, *dbehavior_logits, &dh_b, true);
    if (!detach_behavior_trunk) dh += dh_b;
  } else if (!behavior_head_.empty()) {
    g.behavior_head = behavior_head_.zero_grads();
  }
  g.trunk = trunk_.backward(cache.trunk, dh);
  return g;
}

std::vector<int> QModel::select_actions(const Output& out, double tau) const {
  const std::size_t n = static_cast<std::size_t>(out.q.cols());
  std::vector<int> actions(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (algorithm_ == Algorithm::bcq) {
      ActionProbs g{};
      for (std::size_t a = 0; a < kNumActions; ++a) g[a] = out.behavior(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j));
      actions[j] = argmax_masked(column(out.q, j), bcq_eligible_actions(g, tau));
    } else {
      actions[j] = argmax(column(out.q, j));
    }
  }
  return actions;
}

std::vector<double> QModel::selected_q(const Output& out, double tau) const {
  const auto actions = select_actions(out, tau);
  std::vector<double> q(actions.size());
  for (std::size_t j = 0; j < q.size(); ++j) q[j] = out.q(actions[j], static_cast<Eigen::Index>(j));
  return q;
}

std::vector<std::pair<std::string, const nn::Mlp*>> QModel::parts() const {
  std::vector<std::pair<std::string, const nn::Mlp*>> out;
  out.emplace_back("trunk", &trunk_);
  if (!q_head_.empty()) out.emplace_back("q_head", &q_head_);
  if (!value_head_.empty()) out.emplace_back("value_head", &value_head_);
  if (!advantage_head_.empty()) out.emplace_back("advantage_head", &advantage_head_);
  if (!behavior_head_.empty()) out.emplace_back("behavior_head", &behavior_head_);
  return out;
}

std::vector<std::pair<std::string, nn::Mlp*>> QModel::mutable_parts() {
  std::vector<std::pair<std::string, nn::Mlp*>> out;
  out.emplace_back("trunk", &trunk_);
  if (!q_head_.empty()) out.emplace_back("q_head", &q_head_);
  if (!value_head_.empty()) out.emplace_back("value_head", &value_head_);
  if (!advantage_head_.empty()) out.emplace_back("advantage_head", &advantage_head_);
  if (!behavior_head_.empty()) out.emplace_back("behavior_head", &behavior_head_);
  return out;
}

std::size_t QModel::num_params() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parts()) n += p->num_params();
  return n;
}

namespace {

const nn::MlpGrads& grads_for(const QModel::Grads& g, const std::string& name) {
  if (name == "trunk") return g.trunk;
  if (name == "q_head") return g.q_head;
  if (name == "value_head") return g.value_head;
  if (name == "advantage_head") return g.advantage_head;
  return g.behavior_head;
}

}  // namespace

QAdam QAdam::for_model(const QModel& model, nn::AdamOptions options) {
  QAdam q;
  for (const auto& [name, p] : model.parts()) q.states.push_back(nn::AdamState::for_params(*p, options));
  return q;
}

void QAdam::step(QModel& model, const QModel::Grads& grads) {
  auto parts = model.mutable_parts();
  if (parts.size() != states.size()) throw Error(Errc::shape, "optimizer does not match model");
  for (std::size_t i = 0; i < parts.size(); ++i) nn::adam_step(*parts[i].second, grads_for(grads, parts[i].first), states[i]);
}

void polyak_update(QModel& target, const QModel& online, double rho) {
  auto t = target.mutable_parts();
  const auto o = online.parts();
  if (t.size() != o.size() || target.algorithm() != online.algorithm())
    throw Error(Errc::shape, "target and online models differ");
  for (std::size_t i = 0; i < t.size(); ++i) nn::polyak_update(*t[i].second, *o[i].second, rho);
}

nn::Matrix states_to_matrix(std::span<const StateVector> states) {
  nn::Matrix m(static_cast<Eigen::Index>(kStateDim), static_cast<Eigen::Index>(states.size()));
  for (std::size_t j = 0; j < states.size(); ++j)
    for (std::size_t i = 0; i < kStateDim; ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = states[j][i];
  return m;
}

ope::GreedyFn greedy_fn(const QModel& model, double tau) {
  auto frozen = std::make_shared<const QModel>(model);
  return [frozen, tau](std::span<const StateVector> states, std::span<int> actions) {
    constexpr std::size_t kChunk = 4096;
    for (std::size_t start = 0; start < states.size(); start += kChunk) {
      const std::size_t len = std::min(kChunk, states.size() - start);
      const auto out = frozen->forward(states_to_matrix(states.subspan(start, len)));
      const auto sel = frozen->select_actions(out, tau);
      std::copy(sel.begin(), sel.end(), actions.begin() + static_cast<std::ptrdiff_t>(start));
    }
  };
}

sim::BatchPolicy greedy_rollout_policy(const QModel& model, double tau) {
  ope::GreedyFn greedy = greedy_fn(model, tau);
  return [greedy](std::span<const sim::Observation> obs, std::span<ActionProbs> out) {
    std::vector<StateVector> states;
    states.reserve(obs.size());
    for (const auto& o : obs) states.push_back(o.state);
    std::vector<int> actions(states.size());
    greedy(states, actions);
    for (std::size_t i = 0; i < actions.size(); ++i) {
      out[i].fill(0.0);
      out[i][static_cast<std::size_t>(actions[i])] = 1.0;
    }
  };
}

// ---- checkpoints ---------------------------------------------------------------

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "heparl-agent 1\n";
  out += std::string("algorithm ") + algorithm_name(ckpt.model.algorithm()) + "\n";
  out += "tau " + io::format_double17(ckpt.tau) + "\n";
  out += "seed " + std::to_string(ckpt.seed) + "\n";
  out += "iteration " + std::to_string(ckpt.iteration) + "\n";
  const auto parts = ckpt.model.parts();
  out += "parts " + std::to_string(parts.size()) + "\n";
  for (const auto& [name, p] : parts) {
    out += "part " + name + "\n";
    out += nn::serialize(*p);
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view text) {
  const std::vector<std::string> lines = io::split(text, '\n');
  std::size_t pos = 0;
  auto field = [&](const std::string& key) -> std::string {
    if (pos >= lines.size()) throw Error(Errc::ingestion, "truncated agent checkpoint");
    const auto kv = io::split(io::trim(lines[pos++]), ' ');
    if (kv.size() != 2 || kv[0] != key) throw Error(Errc::ingestion, "agent checkpoint: expected '" + key + "'");
    return kv[1];
  };
  if (lines.empty() || io::trim(lines[0]) != "heparl-agent 1")
    throw Error(Errc::ingestion, "unsupported agent checkpoint version");
  pos = 1;
  Checkpoint c;
  const Algorithm algorithm = parse_algorithm(field("algorithm"));
  c.tau = io::parse_double(field("tau"));
  const auto seed_text = field("seed");
  try {
    c.seed = std::stoull(seed_text);
  } catch (const std::exception&) {
    throw Error(Errc::ingestion, "agent checkpoint: bad seed");
  }
  const auto it = io::parse_int(field("iteration"));
  if (it < 0) throw Error(Errc::ingestion, "agent checkpoint: negative iteration");
  c.iteration = static_cast<std::size_t>(it);
  const auto n = io::parse_int(field("parts"));
  nn::Mlp trunk, q, v, a, b;
  for (long long i = 0; i < n; ++i) {
    const std::string name = field("part");
    nn::Mlp m = nn::deserialize_lines(lines, pos);
    if (name == "trunk") trunk = std::move(m);
    else if (name == "q_head") q = std::move(m);
    else if (name == "value_head") v = std::move(m);
    else if (name == "advantage_head") a = std::move(m);
    else if (name == "behavior_head") b = std::move(m);
    else throw Error(Errc::ingestion, "agent checkpoint: unknown part '" + name + "'");
  }
  try {
    c.model = QModel::from_parts(algorithm, std::move(trunk), std::move(q), std::move(v), std::move(a), std::move(b));
  } catch (const Error& e) {
    throw Error(Errc::ingestion, std::string("agent checkpoint: ") + e.what());
  }
  return c;
}

// ---- training ----------------------------------------------------------------------

std::string metrics_csv_header() {
  return "iteration,wis_train,wis_test,mean_q_train,mean_q_test,td_loss,behavior_loss";
}

std::string format_metrics_row(const MetricsRow& r) {
  std::string out = std::to_string(r.iteration);
  for (double v : {r.wis_train, r.wis_test, r.mean_q_train, r.mean_q_test, r.td_loss}) out += "," + io::format_double17(v);
  out += ",";
  if (r.behavior_loss) out += io::format_double17(*r.behavior_loss);
  return out;
}

namespace {

struct EvalSet {
  std::vector<Trajectory> trajectories;
  LoggedProbs behavior;
  nn::Matrix probe;
};

EvalSet make_eval_set(const std::vector<Trajectory>& trajs, const LoggedProbs& behavior, const TrainerConfig& cfg,
                      Rng& rng) {
  if (behavior.size() != trajs.size()) throw Error(Errc::shape, "behavior probabilities do not match trajectories");
  EvalSet e;
  std::vector<std::size_t> idx(trajs.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (cfg.eval_max_trajectories > 0 && cfg.eval_max_trajectories < trajs.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cfg.eval_max_trajectories);
    std::sort(idx.begin(), idx.end());
  }
  for (std::size_t i : idx) {
    e.trajectories.push_back(trajs[i]);
    e.behavior.push_back(behavior[i]);
  }
  std::vector<StateVector> states;
  for (const auto& t : trajs)
    for (const auto& tr : t.transitions) states.push_back(tr.state);
  if (states.empty()) return e;
  std::vector<StateVector> probe;
  std::uniform_int_distribution<std::size_t> pick(0, states.size() - 1);
  for (std::size_t i = 0; i < cfg.probe_size; ++i) probe.push_back(states[pick(rng)]);
  e.probe = states_to_matrix(probe);
  return e;
}

double mean_probe_q(const QModel& model, const nn::Matrix& probe, double tau) {
  if (probe.cols() == 0) return 0.0;
  const auto q = model.selected_q(model.forward(probe), tau);
  return std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(q.size());
}

double wis_of(const QModel& model, const EvalSet& e, const TrainerConfig& cfg) {
  if (e.trajectories.empty()) return 0.0;
  const auto target = ope::logged_action_probs(
      e.trajectories, ope::soften_policy(greedy_fn(model, cfg.tau), cfg.softening_epsilon));
  const auto est = ope::evaluate(e.trajectories, target, e.behavior, cfg.eval_gamma);
  return est.wis_defined ? est.wis : std::numeric_limits<double>::quiet_NaN();
}

struct Step {
  double td_loss = 0.0;
  double behavior_loss = 0.0;
};

}  // namespace

TrainResult train_run(const Dataset& data, Algorithm algorithm, const TrainerConfig& cfg, const EvalCallback& on_eval) {
  cfg.validate();
  if (data.train.empty()) throw Error(Errc::training, "empty training set");
  ReplayBuffer buffer(cfg.buffer_capacity);
  buffer.preload(data.train);
  if (buffer.size() == 0) throw Error(Errc::training, "training set has no transitions");
  const std::size_t batch = std::min(cfg.minibatch, buffer.size());

  Rng init_rng = make_stream(cfg.seed, "init");
  Rng sample_rng = make_stream(cfg.seed, "sampling");
  Rng eval_rng = make_stream(cfg.seed, "eval");

  QModel online = QModel::make(algorithm, cfg, init_rng);
  QModel target = online;
  QAdam adam = QAdam::for_model(online, nn::AdamOptions{cfg.lr, 0.9, 0.999, cfg.adam_eps});

  const EvalSet train_eval = make_eval_set(data.train, data.behavior_train, cfg, eval_rng);
  const EvalSet test_eval = make_eval_set(data.test, data.behavior_test, cfg, eval_rng);

  const bool bcq = algorithm == Algorithm::bcq;
  const bool double_q = algorithm == Algorithm::double_dqn || bcq;
  const Eigen::Index b = static_cast<Eigen::Index>(batch);

  nn::Matrix s(static_cast<Eigen::Index>(kStateDim), b), s_next(static_cast<Eigen::Index>(kStateDim), b);
  std::vector<int> actions(batch);
  TdBatch td;
  td.reward.resize(batch);
  td.terminal.resize(batch);
  QModel::Cache cache;

  auto load_batch = [&]() {
    const auto idx = buffer.sample_indices(batch, sample_rng);
    for (std::size_t j = 0; j < batch; ++j) {
      const Transition& t = buffer[idx[j]];
      for (std::size_t i = 0; i < kStateDim; ++i) {
        s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.state[i];
        s_next(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.next_state[i];
      }
      actions[j] = t.action.index();
      td.reward[j] = t.reward;
      td.terminal[j] = t.terminal;
    }
  };

  auto behavior_grad = [&](nn::Matrix& dlogits) {
    const auto [loss, grad] = nn::softmax_cross_entropy(cache.behavior_head.pre.back(), actions);
    dlogits = grad;
    return loss;
  };

  for (std::size_t it = 0; it < cfg.behavior_pretrain_iters && bcq; ++it) {
    load_batch();
    online.forward(s, cache);
    nn::Matrix dlogits;
    behavior_grad(dlogits);
    const nn::Matrix dq = nn::Matrix::Zero(static_cast<Eigen::Index>(kNumActions), b);
    adam.step(online, online.backward(cache, dq, &dlogits, cfg.detach_behavior_trunk));
  }
  if (bcq && cfg.behavior_pretrain_iters > 0) target = online;

  auto one_step = [&]() {
    load_batch();
    Step st;
    std::vector<double> y;
    const auto target_next = target.forward(s_next);
    if (double_q) {
      const auto online_next = online.forward(s_next);
      y = bcq ? bcq_target(td, online_next.q, target_next.q, online_next.behavior, cfg.tau, cfg.gamma)
              : double_dqn_target(td, online_next.q, target_next.q, cfg.gamma);
    } else {
      y = dqn_target(td, target_next.q, cfg.gamma);
    }
    const auto& out = online.forward(s, cache);
    nn::Matrix dq = nn::Matrix::Zero(static_cast<Eigen::Index>(kNumActions), b);
    for (std::size_t j = 0; j < batch; ++j) {
      const double err = out.q(actions[j], static_cast<Eigen::Index>(j)) - y[j];
      st.td_loss += err * err;
      dq(actions[j], static_cast<Eigen::Index>(j)) = 2.0 * err / static_cast<double>(batch);
    }
    st.td_loss /= static_cast<double>(batch);
    if (!std::isfinite(st.td_loss)) throw Error(Errc::training, "TD loss diverged");
    if (bcq) {
      nn::Matrix dlogits;
      st.behavior_loss = behavior_grad(dlogits);
      adam.step(online, online.backward(cache, dq, &dlogits, cfg.detach_behavior_trunk));
    } else {
      adam.step(online, online.backward(cache, dq, nullptr, false));
    }
    return st;
  };

  TrainResult result;
  result.buffer_evicted = buffer.evicted();
  double best_wis = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  double td_sum = 0.0, bl_sum = 0.0;
  std::size_t window = 0;

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const Step st = one_step();
    td_sum += st.td_loss;
    bl_sum += st.behavior_loss;
    ++window;
    if (it % cfg.target_update_every == 0) polyak_update(target, online, cfg.rho);
    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      MetricsRow row;
      row.iteration = it;
      row.wis_train = wis_of(online, train_eval, cfg);
      row.wis_test = test_eval.trajectories.empty() ? row.wis_train : wis_of(online, test_eval, cfg);
      row.mean_q_train = mean_probe_q(online, train_eval.probe, cfg.tau);
      row.mean_q_test = test_eval.probe.cols() ? mean_probe_q(online, test_eval.probe, cfg.tau) : row.mean_q_train;
      row.td_loss = td_sum / static_cast<double>(window);
      if (bcq) row.behavior_loss = bl_sum / static_cast<double>(window);
      td_sum = bl_sum = 0.0;
      window = 0;
      result.metrics.push_back(row);
      if (!have_best || row.wis_test > best_wis) {
        best_wis = row.wis_test;
        result.best_model = online;
        result.best_iteration = it;
        have_best = true;
      }
      if (on_eval) on_eval(row, online);
    }
  }
  result.final_model = online;
  return result;
}

ActionCounts action_distribution(const QModel& model, std::span<const Trajectory> trajectories, double tau) {
  ActionCounts counts;
  std::vector<StateVector> states;
  for (const auto& t : trajectories) {
    for (const auto& tr : t.transitions) {
      ++counts.clinician[static_cast<std::size_t>(tr.action.index())];
      states.push_back(tr.state);
    }
  }
  std::vector<int> actions(states.size());
  greedy_fn(model, tau)(states, actions);
  for (int a : actions) ++counts.policy[static_cast<std::size_t>(a)];
  return counts;
}

}  // namespace heparl::agents
