#pragma once

// Shared fixtures and deliberately naive reference implementations. The
// oracles follow the defining formulas literally and share no code with the
// library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cdnet/tensor.hpp"

namespace testing_support {

using cdnet::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t({rows, cols});
  for (double& v : t.values()) v = d(rng);
  return t;
}

inline double naive_distance(const Tensor& s, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t k = 0; k < s.cols(); ++k) acc += (s(i, k) - s(j, k)) * (s(i, k) - s(j, k));
  return std::sqrt(acc);
}

/// A(n, m) = a_nm - mean_row_n - mean_col_m + grand mean, all four spelled out.
inline std::vector<std::vector<double>> naive_centered(const Tensor& s) {
  const std::size_t n = s.rows();
  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i][j] = naive_distance(s, i, j);
  std::vector<std::vector<double>> out(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double row = 0.0, col = 0.0, all = 0.0;
      for (std::size_t k = 0; k < n; ++k) row += a[i][k];
      for (std::size_t k = 0; k < n; ++k) col += a[k][j];
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l) all += a[k][l];
      out[i][j] = a[i][j] - row / n - col / n + all / (n * n);
    }
  }
  return out;
}

inline double naive_dcov2(const Tensor& y, const Tensor& z) {
  const auto a = naive_centered(y), b = naive_centered(z);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) acc += a[i][j] * b[i][j];
  return acc / static_cast<double>(a.size() * a.size());
}

/// 1/2 sum_ij [ (1/N) sum_n (y_ni - mean_i)(z_nj - mean_j) ]^2
inline double naive_xcov(const Tensor& y, const Tensor& z) {
  const std::size_t n = y.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < y.cols(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) {
      double my = 0.0, mz = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        my += y(r, i);
        mz += z(r, j);
      }
      my /= n;
      mz /= n;
      double c = 0.0;
      for (std::size_t r = 0; r < n; ++r) c += (y(r, i) - my) * (z(r, j) - mz);
      c /= n;
      total += c * c;
    }
  }
  return 0.5 * total;
}

/// SSIM with an explicit 2-D Gaussian window evaluated per window position.
inline double naive_ssim(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                         double peak) {
  double k[7], ks = 0.0;
  for (int i = 0; i < 7; ++i) {
    k[i] = std::exp(-((i - 3.0) * (i - 3.0)) / (2.0 * 1.5 * 1.5));
    ks += k[i];
  }
  double win[7][7];
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) win[i][j] = k[i] * k[j] / (ks * ks);
  const double c1 = std::pow(0.01 * peak, 2), c2 = std::pow(0.03 * peak, 2);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + 7 <= h; ++r) {
    for (std::size_t c = 0; c + 7 <= w; ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
          ma += win[i][j] * a[(r + i) * w + c + j];
          mb += win[i][j] * b[(r + i) * w + c + j];
        }
      double va = 0, vb = 0, cv = 0;
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
          const double da = a[(r + i) * w + c + j] - ma, db = b[(r + i) * w + c + j] - mb;
          va += win[i][j] * da * da;
          vb += win[i][j] * db * db;
          cv += win[i][j] * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Metric fixture k: an LCG-filled image and a clamped perturbation of it.
/// Even k are 16x16, odd k are 12x20.
struct FixturePair {
  std::size_t h, w;
  std::vector<double> a, b;
};

inline FixturePair metric_fixture(int k) {
  FixturePair f;
  f.h = k % 2 == 0 ? 16 : 12;
  f.w = k % 2 == 0 ? 16 : 20;
  std::uint64_t s = 1000 + 7919 * static_cast<std::uint64_t>(k);
  auto next = [&s] {
    s = (1103515245ull * s + 12345ull) % 2147483648ull;
    return static_cast<double>(s) / 2147483648.0;
  };
  f.a.resize(f.h * f.w);
  f.b.resize(f.h * f.w);
  for (double& v : f.a) v = next();
  for (std::size_t i = 0; i < f.b.size(); ++i) f.b[i] = std::clamp(f.a[i] + 0.4 * (next() - 0.5), 0.0, 1.0);
  return f;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("cdnet-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
