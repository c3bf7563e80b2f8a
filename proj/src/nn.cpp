#include "heparl/nn.hpp"

#include <cmath>

#include "heparl/error.hpp"
#include "heparl/io.hpp"

namespace heparl::nn {

const char* activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
    case Activation::softmax: return "softmax";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  if (name == "softmax") return Activation::softmax;
  throw Error(Errc::ingestion, "unknown activation '" + std::string(name) + "'");
}

void MlpGrads::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

MlpGrads& MlpGrads::operator+=(const MlpGrads& other) {
  if (other.weight.size() != weight.size()) throw Error(Errc::shape, "gradient layer count mismatch");
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += other.weight[i];
    bias[i] += other.bias[i];
  }
  return *this;
}

MlpGrads& MlpGrads::operator*=(double scale) {
  for (auto& w : weight) w *= scale;
  for (auto& b : bias) b *= scale;
  return *this;
}

Mlp::Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    if (l.bias.size() != l.weight.rows()) throw Error(Errc::shape, "bias size does not match layer output");
    if (i > 0 && l.weight.cols() != layers_[i - 1].weight.rows()) {
      throw Error(Errc::shape, "layer " + std::to_string(i) + " input does not chain with previous output");
    }
    if (l.activation == Activation::softmax && i + 1 != layers_.size()) {
      throw Error(Errc::shape, "softmax is only allowed at the head");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) throw Error(Errc::shape, "non-finite parameters");
  }
}

Mlp Mlp::make(std::span<const std::size_t> sizes, Activation hidden, Activation head, Rng& rng, Init init) {
  if (sizes.size() < 2) throw Error(Errc::shape, "an MLP needs at least input and output sizes");
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(sizes[i]);
    const auto out = static_cast<Eigen::Index>(sizes[i + 1]);
    Layer l;
    l.activation = (i + 2 == sizes.size()) ? head : hidden;
    const double scale = init == Init::fan_in ? 1.0 : l.activation == Activation::relu ? 6.0 : 3.0;
    const double limit = std::sqrt(scale / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    l.weight.resize(out, in);
    for (Eigen::Index c = 0; c < in; ++c) {
      for (Eigen::Index r = 0; r < out; ++r) l.weight(r, c) = dist(rng);
    }
    l.bias = Vector::Zero(out);
    if (init == Init::fan_in) {
      for (Eigen::Index r = 0; r < out; ++r) l.bias(r) = dist(rng);
    }
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::input_dim() const {
  if (layers_.empty()) throw Error(Errc::shape, "empty network");
  return static_cast<std::size_t>(layers_.front().weight.cols());
}

std::size_t Mlp::output_dim() const {
  if (layers_.empty()) throw Error(Errc::shape, "empty network");
  return static_cast<std::size_t>(layers_.back().weight.rows());
}

std::size_t Mlp::num_params() const noexcept {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - mx).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

Vector softmax(const Vector& logits) {
  Matrix m = logits;
  return softmax(m).col(0);
}

Matrix Mlp::forward(const Matrix& x, ForwardCache* cache) const {
  if (layers_.empty()) throw Error(Errc::shape, "empty network");
  if (x.rows() != layers_.front().weight.cols()) {
    throw Error(Errc::shape, "input dimension " + std::to_string(x.rows()) + " does not match network input " +
                                 std::to_string(layers_.front().weight.cols()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->owner = this;
    cache->version = version_;
  }
  Matrix h = x;
  for (const Layer& l : layers_) {
    Matrix z = l.weight * h;
    z.colwise() += l.bias;
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(z);
    }
    switch (l.activation) {
      case Activation::relu: h = z.cwiseMax(0.0); break;
      case Activation::identity: h = std::move(z); break;
      case Activation::softmax: h = softmax(z); break;
    }
  }
  if (cache) cache->output = h;
  return h;
}

Vector Mlp::forward(const Vector& x) const {
  Matrix m = x;
  return forward(m).col(0);
}

MlpGrads Mlp::zero_grads() const {
  MlpGrads g;
  for (const Layer& l : layers_) {
    g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

MlpGrads Mlp::backward(const ForwardCache& cache, const Matrix& upstream, Matrix* input_grad,
                       bool logit_grad) const {
  if (cache.owner != this || cache.version != version_ || cache.pre.size() != layers_.size()) {
    throw Error(Errc::usage, "backward called with a stale or foreign forward cache");
  }
  if (upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols()) {
    throw Error(Errc::shape, "upstream gradient shape does not match network output");
  }
  MlpGrads g;
  g.weight.resize(layers_.size());
  g.bias.resize(layers_.size());
  Matrix delta = upstream;
  for (std::size_t idx = layers_.size(); idx-- > 0;) {
    const Layer& l = layers_[idx];
    switch (l.activation) {
      case Activation::relu:
        delta = (cache.pre[idx].array() > 0.0).select(delta, 0.0);
        break;
      case Activation::identity:
        break;
      case Activation::softmax:
        if (!logit_grad) {
          const Matrix& p = cache.output;
          const Eigen::RowVectorXd dot = (p.array() * delta.array()).colwise().sum();
          delta = (p.array() * (delta.rowwise() - dot).array()).matrix();
        }
        break;
    }
    g.weight[idx] = delta * cache.inputs[idx].transpose();
    g.bias[idx] = delta.rowwise().sum();
    if (idx > 0 || input_grad) {
      Matrix prev = l.weight.transpose() * delta;
      if (idx == 0) {
        *input_grad = std::move(prev);
      } else {
        delta = std::move(prev);
      }
    }
  }
  return g;
}

bool Mlp::same_shape(const Mlp& other) const noexcept {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].weight.rows() != other.layers_[i].weight.rows() ||
        layers_[i].weight.cols() != other.layers_[i].weight.cols() ||
        layers_[i].activation != other.layers_[i].activation) {
      return false;
    }
  }
  return true;
}

bool operator==(const Mlp& a, const Mlp& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    if (a.layers_[i].weight != b.layers_[i].weight || a.layers_[i].bias != b.layers_[i].bias) return false;
  }
  return true;
}

std::pair<double, Vector> softmax_cross_entropy(const Vector& logits, int label) {
  if (label < 0 || label >= logits.size()) throw Error(Errc::domain, "label out of range");
  if (!logits.allFinite()) throw Error(Errc::domain, "non-finite logits");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  Vector grad = (logits.array() - lse).exp().matrix();
  grad(label) -= 1.0;
  return {lse - logits(label), grad};
}

std::pair<double, Matrix> softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.cols()) != labels.size()) throw Error(Errc::shape, "label count mismatch");
  if (labels.empty()) throw Error(Errc::shape, "empty batch");
  Matrix grad(logits.rows(), logits.cols());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    auto [loss, g] = softmax_cross_entropy(Vector(logits.col(c)), labels[static_cast<std::size_t>(c)]);
    total += loss;
    grad.col(c) = g * inv;
  }
  return {total * inv, grad};
}

AdamState AdamState::for_params(const Mlp& params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (const Layer& l : params.layers()) {
    s.m_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    s.v_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    s.m_bias.push_back(Vector::Zero(l.bias.size()));
    s.v_bias.push_back(Vector::Zero(l.bias.size()));
  }
  return s;
}

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, std::uint64_t step, const AdamOptions& o) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw Error(Errc::shape, "adam buffers differ in size");
  }
  if (step == 0) throw Error(Errc::usage, "adam step index is 1-based");
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    params[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
  }
}

namespace {

template <class Dense>
std::span<double> span_of(Dense& d) {
  return {d.data(), static_cast<std::size_t>(d.size())};
}

template <class Dense>
std::span<const double> cspan_of(const Dense& d) {
  return {d.data(), static_cast<std::size_t>(d.size())};
}

}  // namespace

void adam_step(Mlp& params, const MlpGrads& grads, AdamState& state) {
  auto& layers = params.mutable_layers();
  if (grads.weight.size() != layers.size() || state.m_weight.size() != layers.size()) {
    throw Error(Errc::shape, "adam: layer count mismatch");
  }
  ++state.step;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (grads.weight[i].rows() != layers[i].weight.rows() || grads.weight[i].cols() != layers[i].weight.cols() ||
        grads.bias[i].size() != layers[i].bias.size()) {
      throw Error(Errc::shape, "adam: gradient shape mismatch at layer " + std::to_string(i));
    }
    adam_update(span_of(layers[i].weight), cspan_of(grads.weight[i]), span_of(state.m_weight[i]),
                span_of(state.v_weight[i]), state.step, state.options);
    adam_update(span_of(layers[i].bias), cspan_of(grads.bias[i]), span_of(state.m_bias[i]),
                span_of(state.v_bias[i]), state.step, state.options);
  }
}

void polyak_update(Mlp& target, const Mlp& online, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error(Errc::config, "polyak coefficient must lie in [0, 1]");
  if (!target.same_shape(online)) throw Error(Errc::shape, "polyak update between different architectures");
  auto& t = target.mutable_layers();
  const auto& o = online.layers();
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i].weight = rho * t[i].weight + (1.0 - rho) * o[i].weight;
    t[i].bias = rho * t[i].bias + (1.0 - rho) * o[i].bias;
  }
}

std::vector<double> flatten(const Mlp& params) {
  std::vector<double> out;
  out.reserve(params.num_params());
  for (const Layer& l : params.layers()) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

std::vector<double> flatten(const MlpGrads& grads) {
  std::vector<double> out;
  for (std::size_t i = 0; i < grads.weight.size(); ++i) {
    out.insert(out.end(), grads.weight[i].data(), grads.weight[i].data() + grads.weight[i].size());
    out.insert(out.end(), grads.bias[i].data(), grads.bias[i].data() + grads.bias[i].size());
  }
  return out;
}

void unflatten(Mlp& params, std::span<const double> flat) {
  if (flat.size() != params.num_params()) throw Error(Errc::shape, "flat parameter size mismatch");
  std::size_t pos = 0;
  for (Layer& l : params.mutable_layers()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.weight.size(), l.weight.data());
    pos += static_cast<std::size_t>(l.weight.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(), l.bias.data());
    pos += static_cast<std::size_t>(l.bias.size());
  }
}

std::string serialize(const Mlp& params) {
  std::string out = "heparl-mlp 1\nlayers " + std::to_string(params.num_layers()) + "\n";
  for (const Layer& l : params.layers()) {
    out += "layer " + std::to_string(l.weight.cols()) + " " + std::to_string(l.weight.rows()) + " " +
           activation_name(l.activation) + "\n";
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
        if (c) out += ' ';
        out += io::format_double17(l.weight(r, c));
      }
      out += '\n';
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
      if (r) out += ' ';
      out += io::format_double17(l.bias(r));
    }
    out += '\n';
  }
  return out;
}

Mlp deserialize_lines(const std::vector<std::string>& lines, std::size_t& pos) {
  auto next = [&]() -> std::string {
    if (pos >= lines.size()) throw Error(Errc::ingestion, "truncated network checkpoint");
    return io::trim(lines[pos++]);
  };
  if (next() != "heparl-mlp 1") throw Error(Errc::ingestion, "unsupported network checkpoint version");
  const auto head = io::split(next(), ' ');
  if (head.size() != 2 || head[0] != "layers") throw Error(Errc::ingestion, "malformed checkpoint layer count");
  const auto n_layers = io::parse_int(head[1]);
  std::vector<Layer> layers;
  for (long long li = 0; li < n_layers; ++li) {
    const auto spec = io::split(next(), ' ');
    if (spec.size() != 4 || spec[0] != "layer") throw Error(Errc::ingestion, "malformed checkpoint layer header");
    const auto in = io::parse_int(spec[1]);
    const auto out = io::parse_int(spec[2]);
    if (in <= 0 || out <= 0) throw Error(Errc::ingestion, "malformed checkpoint layer dims");
    Layer l;
    l.activation = parse_activation(spec[3]);
    l.weight.resize(out, in);
    for (long long r = 0; r < out; ++r) {
      const auto vals = io::split(next(), ' ');
      if (static_cast<long long>(vals.size()) != in) throw Error(Errc::ingestion, "checkpoint weight row length");
      for (long long c = 0; c < in; ++c) l.weight(r, c) = io::parse_double(vals[static_cast<std::size_t>(c)]);
    }
    const auto vals = io::split(next(), ' ');
    if (static_cast<long long>(vals.size()) != out) throw Error(Errc::ingestion, "checkpoint bias length");
    l.bias.resize(out);
    for (long long r = 0; r < out; ++r) l.bias(r) = io::parse_double(vals[static_cast<std::size_t>(r)]);
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

Mlp deserialize(std::string_view text) {
  std::vector<std::string> lines = io::split(text, '\n');
  std::size_t pos = 0;
  return deserialize_lines(lines, pos);
}

}  // namespace heparl::nn
