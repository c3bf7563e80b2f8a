#include "heparl/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "heparl/error.hpp"
#include "heparl/io.hpp"
#include "heparl/rng.hpp"

namespace heparl::embed {

namespace {

constexpr double kMinDist = 1e-12;

}  // namespace

RowAffinity conditional_row(std::span<const double> sq_dist, std::size_t self, double perplexity, double tol,
                            int max_iter) {
  const std::size_t n = sq_dist.size();
  if (n < 2) throw Error(Errc::shape, "need at least two points for affinities");
  if (!(perplexity > 0.0)) throw Error(Errc::config, "perplexity must be positive");
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != self) dmin = std::min(dmin, sq_dist[j]);

  RowAffinity r;
  r.p.assign(n, 0.0);
  const double target = std::log(perplexity);
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  auto evaluate = [&](double beta) {
    double z = 0.0, wd = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self) continue;
      const double d = sq_dist[j] - dmin;
      const double e = std::exp(-beta * d);
      r.p[j] = e;
      z += e;
      wd += e * d;
    }
    for (double& v : r.p) v /= z;
    return std::log(z) + beta * wd / z;  // entropy in nats
  };
  double beta = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    const double h = evaluate(beta);
    r.beta = beta;
    r.perplexity = std::exp(h);
    if (std::abs(r.perplexity - perplexity) <= tol) {
      r.converged = true;
      break;
    }
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }
  return r;
}

AffinityMatrix affinities_unchecked(const Matrix& x, double perplexity) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n < 2) throw Error(Errc::shape, "need at least two points for affinities");
  AffinityMatrix a;
  a.perplexity = perplexity;
  a.row_perplexity.resize(n);
  Matrix d(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < static_cast<Eigen::Index>(n); ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).squaredNorm();
  }
  Matrix cond = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double v = d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (i != j && v < kMinDist) {
        v = kMinDist;
        ++a.jittered;
      }
      row[j] = i == j ? 0.0 : v;
    }
    const RowAffinity r = conditional_row(row, i, perplexity);
    if (!r.converged) ++a.unconverged;
    a.row_perplexity[i] = r.perplexity;
    for (std::size_t j = 0; j < n; ++j) cond(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.p[j];
  }
  a.p = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double denom = 2.0 * static_cast<double>(n);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    for (Eigen::Index j = i + 1; j < static_cast<Eigen::Index>(n); ++j) {
      const double v = (cond(i, j) + cond(j, i)) / denom;
      a.p(i, j) = v;
      a.p(j, i) = v;
    }
  }
  return a;
}

AffinityMatrix pairwise_affinities(const Matrix& x, double perplexity) {
  const double n = static_cast<double>(x.rows());
  if (!(perplexity >= 5.0 && perplexity <= (n - 1.0) / 3.0))
    throw Error(Errc::config, "perplexity " + io::format_double(perplexity) + " outside [5, (N-1)/3] for N = " +
                                  io::format_double(n));
  return affinities_unchecked(x, perplexity);
}

namespace {

// Student-t numerators 1 / (1 + |yi - yj|^2) with zero diagonal.
Matrix student_t(const Matrix& y) {
  const Eigen::VectorXd norms = y.rowwise().squaredNorm();
  Matrix d = (-2.0 * y * y.transpose()).colwise() + norms;
  d.rowwise() += norms.transpose();
  Matrix num = (1.0 + d.array().max(0.0)).inverse().matrix();
  num.diagonal().setZero();
  return num;
}

Matrix gradient_from(const Matrix& p, const Matrix& y, const Matrix& num, double exaggeration) {
  const double z = num.sum();
  const Matrix w = ((exaggeration * p.array() - num.array() / z) * num.array()).matrix();
  const Eigen::VectorXd rs = w.rowwise().sum();
  return 4.0 * (rs.asDiagonal() * y - w * y);
}

double kl_from(const Matrix& p, const Matrix& num) {
  const double z = num.sum();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) kl += p(i, j) * std::log(p(i, j) * z / num(i, j));
  return kl;
}

}  // namespace

double kl_divergence(const Matrix& p, const Matrix& y) { return kl_from(p, student_t(y)); }

Matrix kl_gradient(const Matrix& p, const Matrix& y) { return gradient_from(p, y, student_t(y), 1.0); }

TsneResult tsne_run(const AffinityMatrix& affinities, const TsneOptions& o) {
  const Matrix& p = affinities.p;
  const Eigen::Index n = p.rows();
  if (n < 2 || p.cols() != n) throw Error(Errc::shape, "affinity matrix must be square with N >= 2");
  if (o.iterations < 0 || !(o.learning_rate > 0.0)) throw Error(Errc::config, "invalid t-SNE options");
  Rng rng = make_stream(o.seed, "embed");
  std::normal_distribution<double> normal(0.0, o.init_sd);
  TsneResult res;
  res.y.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < 2; ++c) res.y(i, c) = normal(rng);
  res.kl_initial = kl_divergence(p, res.y);

  Matrix update = Matrix::Zero(n, 2);
  Matrix gains = Matrix::Ones(n, 2);
  for (int it = 0; it < o.iterations; ++it) {
    const double ex = it < o.exaggeration_iters ? o.exaggeration : 1.0;
    const double mom = it < o.momentum_switch ? o.momentum : o.final_momentum;
    const Matrix num = student_t(res.y);
    const Matrix g = gradient_from(p, res.y, num, ex);
    if (!g.allFinite())
      throw Error(Errc::internal, "t-SNE gradient became non-finite at iteration " + std::to_string(it));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same = (g(i, c) > 0.0) == (update(i, c) > 0.0);
        gains(i, c) = same ? std::max(gains(i, c) * 0.8, 0.01) : gains(i, c) + 0.2;
        update(i, c) = mom * update(i, c) - o.learning_rate * gains(i, c) * g(i, c);
      }
    }
    res.y += update;
    res.y.rowwise() -= res.y.colwise().mean();
  }
  res.kl_final = kl_divergence(p, res.y);
  return res;
}

std::vector<RegionRow> value_region_report(std::span<const EmbeddedPoint> points) {
  if (points.empty()) throw Error(Errc::usage, "no points for the region report");
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return points[a].max_q < points[b].max_q; });
  const std::size_t n = points.size();
  const std::array<std::size_t, 4> cut{0, n / 3, 2 * n / 3, n};
  const std::array<const char*, 3> names{"low", "medium", "high"};
  std::vector<RegionRow> rows;
  for (std::size_t r = 0; r < 3; ++r) {
    RegionRow row;
    row.region = names[r];
    row.n = cut[r + 1] - cut[r];
    std::size_t ther = 0;
    for (std::size_t k = cut[r]; k < cut[r + 1]; ++k) ther += points[order[k]].therapeutic ? 1 : 0;
    row.therapeutic_fraction = row.n ? static_cast<double>(ther) / static_cast<double>(row.n) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string write_embedding_csv(std::span<const EmbeddedPoint> points) {
  std::string out = "patient_id,t,x,y,max_q,therapeutic,split\n";
  for (const auto& p : points) {
    out += p.patient_id + "," + std::to_string(p.t) + "," + io::format_double(p.x) + "," + io::format_double(p.y) + "," +
           io::format_double(p.max_q) + "," + (p.therapeutic ? "1" : "0") + "," + (p.test ? "test" : "train") + "\n";
  }
  return out;
}

std::string write_region_csv(std::span<const RegionRow> rows) {
  std::string out = "region,n,therapeutic_fraction\n";
  for (const auto& r : rows)
    out += r.region + "," + std::to_string(r.n) + "," + io::format_double(r.therapeutic_fraction) + "\n";
  return out;
}

std::string render_svg(std::span<const EmbeddedPoint> points) {
  constexpr double kSize = 800.0, kPad = 20.0;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!points.empty()) {
    x0 = x1 = points[0].x;
    y0 = y1 = points[0].y;
    for (const auto& p : points) {
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
    }
  }
  const double sx = (kSize - 2 * kPad) / std::max(x1 - x0, 1e-12);
  const double sy = (kSize - 2 * kPad) / std::max(y1 - y0, 1e-12);

  std::vector<double> q;
  for (const auto& p : points) q.push_back(p.max_q);
  std::sort(q.begin(), q.end());
  static constexpr std::array<const char*, 5> palette{"#313695", "#74add1", "#fee090", "#f46d43", "#a50026"};
  auto bucket = [&](double v) {
    const auto rank = static_cast<std::size_t>(std::lower_bound(q.begin(), q.end(), v) - q.begin());
    return std::min<std::size_t>(4, rank * 5 / std::max<std::size_t>(q.size(), 1));
  };

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n";
  out += "<rect width=\"800\" height=\"800\" fill=\"white\"/>\n";
  for (const auto& p : points) {
    const double cx = kPad + (p.x - x0) * sx;
    const double cy = kSize - kPad - (p.y - y0) * sy;
    char buf[160];
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%s\" fill=\"%s\" fill-opacity=\"0.7\"/>\n", cx, cy,
                  p.test ? "4" : "2", palette[bucket(p.max_q)]);
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace heparl::embed
