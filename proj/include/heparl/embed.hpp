#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "heparl/nn.hpp"

namespace heparl::embed {

using nn::Matrix;

struct RowAffinity {
  std::vector<double> p;  // conditional P(j|i), p[i] = 0
  double beta = 1.0;      // 1 / (2 sigma^2)
  double perplexity = 0.0;
  bool converged = false;
};

// Gaussian conditional row over squared distances (entry `self` ignored),
// bandwidth by bisection until |2^H - perplexity| <= tol or max_iter.
RowAffinity conditional_row(std::span<const double> sq_dist, std::size_t self, double perplexity, double tol = 1e-5,
                            int max_iter = 50);

struct AffinityMatrix {
  Matrix p;  // N x N, symmetric, zero diagonal, sums to 1
  double perplexity = 30.0;
  std::vector<double> row_perplexity;
  std::size_t jittered = 0;       // distances raised to the 1e-12 floor
  std::size_t unconverged = 0;    // rows whose bisection missed tolerance
};

// Rows of X are points. Requires 5 <= perplexity <= (N - 1) / 3.
AffinityMatrix pairwise_affinities(const Matrix& x, double perplexity);
// Same computation without the perplexity range check.
AffinityMatrix affinities_unchecked(const Matrix& x, double perplexity);

struct TsneOptions {
  int iterations = 1000;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  int exaggeration_iters = 250;
  double momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch = 250;
  double init_sd = 1e-4;
  std::uint64_t seed = 0;
};

struct TsneResult {
  Matrix y;  // N x 2
  double kl_initial = 0.0;
  double kl_final = 0.0;
};

// KL(P || Q) under the Student-t kernel and its gradient with respect to Y.
double kl_divergence(const Matrix& p, const Matrix& y);
Matrix kl_gradient(const Matrix& p, const Matrix& y);

TsneResult tsne_run(const AffinityMatrix& affinities, const TsneOptions& options);

struct EmbeddedPoint {
  std::string patient_id;
  std::size_t t = 0;
  double x = 0.0, y = 0.0;
  double max_q = 0.0;
  double aptt = 0.0;
  bool therapeutic = false;
  bool test = false;
};

struct RegionRow {
  std::string region;
  std::size_t n = 0;
  double therapeutic_fraction = 0.0;
};

// Low / medium / high tertiles of max_q (stable by index on ties).
std::vector<RegionRow> value_region_report(std::span<const EmbeddedPoint> points);

std::string write_embedding_csv(std::span<const EmbeddedPoint> points);
std::string write_region_csv(std::span<const RegionRow> rows);
// Scatter colored by max_q quintile; test points drawn larger.
std::string render_svg(std::span<const EmbeddedPoint> points);

}  // namespace heparl::embed
