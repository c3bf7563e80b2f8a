#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "heparl/rng.hpp"

namespace heparl::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { relu, identity, softmax };

// he: U(+-sqrt(6/fan_in)) for ReLU layers, U(+-sqrt(3/fan_in)) otherwise, zero bias.
// fan_in: weights and biases U(+-1/sqrt(fan_in)).
enum class Init { he, fan_in };

const char* activation_name(Activation a) noexcept;
Activation parse_activation(std::string_view name);

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;
};

struct MlpGrads {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  void set_zero();
  MlpGrads& operator+=(const MlpGrads& other);
  MlpGrads& operator*=(double scale);
};

class Mlp;

// Activations retained by a forward pass for the matching backward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  Matrix output;
  const Mlp* owner = nullptr;
  std::uint64_t version = 0;
};

// Dense feed-forward network. Samples are columns: a batch is in x B.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<Layer> layers);

  // sizes = {in, h1, ..., out}; hidden layers use `hidden`, the last layer `head`.
  static Mlp make(std::span<const std::size_t> sizes, Activation hidden, Activation head, Rng& rng,
                  Init init = Init::he);

  bool empty() const noexcept { return layers_.empty(); }
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t num_params() const noexcept;
  std::size_t num_layers() const noexcept { return layers_.size(); }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  // Mutable access invalidates outstanding forward caches.
  std::vector<Layer>& mutable_layers() noexcept {
    ++version_;
    return layers_;
  }
  std::uint64_t version() const noexcept { return version_; }

  Matrix forward(const Matrix& x, ForwardCache* cache = nullptr) const;
  Vector forward(const Vector& x) const;

  // Reverse-mode gradients of a scalar loss given dL/d(output). When the head
  // is softmax and `logit_grad` is set, `upstream` is taken as dL/d(logits).
  // If `input_grad` is non-null it receives dL/d(input).
  MlpGrads backward(const ForwardCache& cache, const Matrix& upstream, Matrix* input_grad = nullptr,
                    bool logit_grad = false) const;

  MlpGrads zero_grads() const;
  bool same_shape(const Mlp& other) const noexcept;

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

// Column-wise numerically stable softmax.
Matrix softmax(const Matrix& logits);
Vector softmax(const Vector& logits);

// -log softmax(logits)[label] with gradient softmax - onehot.
std::pair<double, Vector> softmax_cross_entropy(const Vector& logits, int label);
// Mean over columns; gradient already divided by the batch size.
std::pair<double, Matrix> softmax_cross_entropy(const Matrix& logits, std::span<const int> labels);

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-4;
};

struct AdamState {
  AdamOptions options;
  std::vector<Matrix> m_weight, v_weight;
  std::vector<Vector> m_bias, v_bias;
  std::uint64_t step = 0;

  static AdamState for_params(const Mlp& params, AdamOptions options = {});
};

// Adam with bias correction on flat buffers; `step` is the 1-based step index.
void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, std::uint64_t step, const AdamOptions& options);

void adam_step(Mlp& params, const MlpGrads& grads, AdamState& state);

// target <- rho * target + (1 - rho) * online
void polyak_update(Mlp& target, const Mlp& online, double rho);

std::vector<double> flatten(const Mlp& params);
std::vector<double> flatten(const MlpGrads& grads);
void unflatten(Mlp& params, std::span<const double> flat);

// Text checkpoint: header with format version and layer shapes, then values
// at 17 significant digits (bitwise round trip).
std::string serialize(const Mlp& params);
Mlp deserialize(std::string_view text);
// Parses one serialized network starting at lines[pos]; advances pos.
Mlp deserialize_lines(const std::vector<std::string>& lines, std::size_t& pos);

}  // namespace heparl::nn
