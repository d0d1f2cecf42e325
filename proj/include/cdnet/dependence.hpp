#pragma once

// Sample dependence statistics between two paired sample sets: squared
// distance covariance, cross covariance, distance correlation, and a
// permutation test of independence built on distance covariance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "cdnet/autodiff.hpp"
#include "cdnet/error.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

struct DistanceMatrix {
  Tensor raw;       // raw(n, m) = |s_n - s_m|
  Tensor centered;  // doubly centered raw
};

inline DistanceMatrix centered_distance_matrix(const Tensor& samples) {
  const std::size_t n = samples.rows();
  if (n < 2) throw ShapeError("distance matrix needs at least 2 samples, got " + std::to_string(n));
  const std::size_t dim = samples.cols();

  Tensor raw({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = samples(i, k) - samples(j, k);
        acc += d * d;
      }
      raw(i, j) = raw(j, i) = std::sqrt(acc);
    }
  }

  // raw is symmetric, so row means equal column means.
  std::vector<double> means(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) means[i] += raw(i, j);
    grand += means[i];
    means[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);

  Tensor centered({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) centered(i, j) = raw(i, j) - means[i] - means[j] + grand;
  return {std::move(raw), std::move(centered)};
}

namespace detail {

inline void require_paired(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("paired samples disagree on count: " + std::to_string(a.rows()) + " vs " +
                     std::to_string(b.rows()));
  }
  if (a.rows() < 2) throw ShapeError("dependence statistics need at least 2 samples");
}

inline double mean_product(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc / static_cast<double>(a.size());
}

}  // namespace detail

/// Squared sample distance covariance: mean over (n, m) of A(n, m) * B(n, m).
inline double dcov2(const Tensor& y_hat, const Tensor& z) {
  detail::require_paired(y_hat, z);
  const auto a = centered_distance_matrix(y_hat);
  const auto b = centered_distance_matrix(z);
  // Nonnegative in exact arithmetic; clip rounding noise below zero.
  return std::max(0.0, detail::mean_product(a.centered, b.centered));
}

/// Half the squared Frobenius norm of the sample cross-covariance matrix.
inline double xcov(const Tensor& y_hat, const Tensor& z) {
  detail::require_paired(y_hat, z);
  const std::size_t n = y_hat.rows(), p = y_hat.cols(), q = z.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<double> mean_y(p, 0.0), mean_z(q, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < p; ++i) mean_y[i] += y_hat(r, i) * inv_n;
    for (std::size_t j = 0; j < q; ++j) mean_z[j] += z(r, j) * inv_n;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      double c = 0.0;
      for (std::size_t r = 0; r < n; ++r) c += (y_hat(r, i) - mean_y[i]) * (z(r, j) - mean_z[j]);
      c *= inv_n;
      total += c * c;
    }
  }
  return 0.5 * total;
}

/// Distance correlation R in [0, 1]; 0 when either distance variance vanishes.
inline double dcorr(const Tensor& u, const Tensor& v) {
  detail::require_paired(u, v);
  const auto a = centered_distance_matrix(u);
  const auto b = centered_distance_matrix(v);
  const double cross = std::max(0.0, detail::mean_product(a.centered, b.centered));
  const double var_u = detail::mean_product(a.centered, a.centered);
  const double var_v = detail::mean_product(b.centered, b.centered);
  const double denom = std::sqrt(var_u * var_v);
  if (!(denom > 0.0)) return 0.0;
  return std::clamp(std::sqrt(cross / denom), 0.0, 1.0);
}

/// Permutation p-value for H0: U and V independent. Only V's sample order is
/// shuffled; p = (1 + #{permuted >= observed}) / (1 + num_permutations).
inline double permutation_independence_test(const Tensor& u, const Tensor& v, std::size_t num_permutations,
                                            std::uint64_t seed) {
  detail::require_paired(u, v);
  const std::size_t k = u.rows();
  if (k < 4) throw ShapeError("permutation test needs at least 4 samples, got " + std::to_string(k));
  if (num_permutations < 99) throw Error("permutation test needs at least 99 permutations");

  const Tensor a = centered_distance_matrix(u).centered;
  const Tensor b = centered_distance_matrix(v).centered;

  // Permuting V's samples permutes B's rows and columns together.
  auto statistic = [&](const std::vector<std::size_t>& perm) {
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double* arow = a.data() + i * k;
      const double* brow = b.data() + perm[i] * k;
      for (std::size_t j = 0; j < k; ++j) acc += arow[j] * brow[perm[j]];
    }
    return acc / static_cast<double>(k * k);
  };

  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const double observed = statistic(perm);

  std::mt19937_64 rng(seed);
  std::size_t at_least = 0;
  for (std::size_t t = 0; t < num_permutations; ++t) {
    std::shuffle(perm.begin(), perm.end(), rng);
    if (statistic(perm) >= observed) ++at_least;
  }
  return static_cast<double>(1 + at_least) / static_cast<double>(1 + num_permutations);
}

// Differentiable forms for use inside training graphs.

/// Double centering as column centering followed by row centering.
inline Node double_center(Graph& g, Node m) {
  const Node cols_centered = g.sub(m, g.batch_mean(m));
  const Node t = g.transpose(cols_centered);
  return g.transpose(g.sub(t, g.batch_mean(t)));
}

inline Node dcov2_node(Graph& g, Node y_hat, Node z) {
  auto scope = g.scoped("dcov2");
  const Node a = double_center(g, g.pairwise_distance(y_hat));
  const Node b = double_center(g, g.pairwise_distance(z));
  return g.mean(g.mul(a, b));
}

/// XCov via Gram matrices of the centered samples:
/// sum_ij C_ij^2 = sum_nm (Yc Yc^T)_nm (Zc Zc^T)_nm with C = Yc^T Zc / N.
inline Node xcov_node(Graph& g, Node y_hat, Node z) {
  auto scope = g.scoped("xcov");
  const Node yc = g.sub(y_hat, g.batch_mean(y_hat));
  const Node zc = g.sub(z, g.batch_mean(z));
  const Node gram_y = g.matmul(yc, g.transpose(yc));
  const Node gram_z = g.matmul(zc, g.transpose(zc));
  return g.affine(g.mean(g.mul(gram_y, gram_z)), 0.5);
}

}  // namespace cdnet
