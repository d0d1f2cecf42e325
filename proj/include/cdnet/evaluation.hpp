#pragma once

// Reconstruction quality metrics and the classifier-based disentanglement
// protocol: a linear classifier trained on real attribute-positive versus
// attribute-negative images scores edited counterparts of negative images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdnet/data.hpp"
#include "cdnet/error.hpp"
#include "cdnet/manipulation.hpp"
#include "cdnet/network.hpp"
#include "cdnet/random.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

inline constexpr double kPsnrCap = 100.0;

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct MetricReport {
  MeanStd rmse, psnr, ssim;
  std::size_t count = 0;
};

inline nlohmann::json to_json(const MetricReport& r) {
  auto pair = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  return {{"kind", "metrics"}, {"count", r.count}, {"rmse", pair(r.rmse)}, {"psnr", pair(r.psnr)}, {"ssim", pair(r.ssim)}};
}

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) return {};
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return {mean, std::sqrt(acc / n)};
}

inline double rmse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("rmse: images must be non-empty and equally sized");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc / static_cast<double>(a.size()));
}

/// 20 log10(peak / rmse), capped for (near) exact matches.
inline double psnr_from_rmse(double rmse_value, double peak) {
  if (!(peak > 0.0)) throw Error("psnr: peak must be positive");
  if (rmse_value <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 20.0 * std::log10(peak / rmse_value));
}

struct SsimOptions {
  std::size_t window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable weighted sum over every fully contained window.
inline std::vector<double> filter_valid(std::span<const double> img, ImageShape shape, const std::vector<double>& k) {
  const std::size_t w = k.size();
  const std::size_t out_h = shape.height - w + 1, out_w = shape.width - w + 1;
  std::vector<double> rows(shape.height * out_w, 0.0);
  for (std::size_t r = 0; r < shape.height; ++r)
    for (std::size_t c = 0; c < out_w; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < w; ++i) acc += k[i] * img[r * shape.width + c + i];
      rows[r * out_w + c] = acc;
    }
  std::vector<double> out(out_h * out_w, 0.0);
  for (std::size_t r = 0; r < out_h; ++r)
    for (std::size_t c = 0; c < out_w; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < w; ++i) acc += k[i] * rows[(r + i) * out_w + c];
      out[r * out_w + c] = acc;
    }
  return out;
}

}  // namespace detail

/// Single-scale SSIM averaged over valid Gaussian windows.
inline double ssim(std::span<const double> a, std::span<const double> b, ImageShape shape, double peak,
                   const SsimOptions& opt = {}) {
  if (a.size() != shape.pixels() || b.size() != shape.pixels()) throw ShapeError("ssim: image size mismatch");
  if (shape.height < opt.window || shape.width < opt.window) throw ShapeError("ssim: image smaller than window");
  const auto k = detail::gaussian_kernel(opt.window, opt.sigma);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = detail::filter_valid(a, shape, k), mu_b = detail::filter_valid(b, shape, k);
  const auto s_aa = detail::filter_valid(aa, shape, k), s_bb = detail::filter_valid(bb, shape, k);
  const auto s_ab = detail::filter_valid(ab, shape, k);
  const double c1 = (opt.k1 * peak) * (opt.k1 * peak), c2 = (opt.k2 * peak) * (opt.k2 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double var_a = s_aa[i] - mu_a[i] * mu_a[i];
    const double var_b = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

inline MetricReport image_metrics(const Tensor& x, const Tensor& x_hat, ImageShape shape, double peak) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("image_metrics: " + to_string(x.shape()) + " vs " + to_string(x_hat.shape()));
  }
  if (x.cols() != shape.pixels()) throw ShapeError("image_metrics: row width does not match the image shape");
  std::vector<double> r(x.rows()), p(x.rows()), s(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    r[i] = rmse(x.row(i), x_hat.row(i));
    p[i] = psnr_from_rmse(r[i], peak);
    // Identical images score exactly 1 regardless of rounding in the filters.
    s[i] = std::ranges::equal(x.row(i), x_hat.row(i)) ? 1.0 : ssim(x.row(i), x_hat.row(i), shape, peak);
  }
  return {mean_std(r), mean_std(p), mean_std(s), x.rows()};
}

// ---------------------------------------------------------------------------
// Linear classifier

struct LinearClassifierOptions {
  double l2 = 1e-3;
  double learning_rate = 0.5;
  std::size_t iterations = 300;
  double holdout_fraction = 0.2;
};

struct LinearClassifier {
  std::vector<double> weights;
  double bias = 0.0;
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;

  double score(std::span<const double> x) const {
    double s = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x[i];
    return s;
  }
  bool positive(std::span<const double> x) const { return score(x) > 0.0; }
};

namespace detail {

struct HingeSplit {
  std::vector<std::size_t> fit, holdout;
};

// The permutation depends only on subset size and seed, so swapping the two
// classes swaps their splits.
inline HingeSplit holdout_split(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (held >= n) held = n - 1;
  return {{order.begin() + static_cast<std::ptrdiff_t>(held), order.end()},
          {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held)}};
}

}  // namespace detail

/// Full-batch subgradient descent on
///   l2/2 |w|^2 + mean_i max(0, 1 - y_i (w.x_i + b)).
/// Violating positives and negatives are summed separately, which makes a
/// label flip produce exactly the negated solution.
inline LinearClassifier train_linear_classifier(const Tensor& positives, const Tensor& negatives, std::uint64_t seed,
                                                const LinearClassifierOptions& opt = {}) {
  if (positives.empty() || negatives.empty() || positives.rows() == 0 || negatives.rows() == 0) {
    throw Error("train_linear_classifier: both classes need at least one sample");
  }
  if (positives.cols() != negatives.cols()) throw ShapeError("train_linear_classifier: feature widths differ");
  const std::size_t dim = positives.cols();
  const auto pos_split = detail::holdout_split(positives.rows(), opt.holdout_fraction, seed);
  const auto neg_split = detail::holdout_split(negatives.rows(), opt.holdout_fraction, seed);
  const double n = static_cast<double>(pos_split.fit.size() + neg_split.fit.size());

  LinearClassifier clf;
  clf.weights.assign(dim, 0.0);
  std::vector<double> sum_pos(dim), sum_neg(dim);
  for (std::size_t t = 0; t < opt.iterations; ++t) {
    std::fill(sum_pos.begin(), sum_pos.end(), 0.0);
    std::fill(sum_neg.begin(), sum_neg.end(), 0.0);
    double count_pos = 0.0, count_neg = 0.0;
    for (std::size_t i : pos_split.fit) {
      auto x = positives.row(i);
      if (clf.score(x) < 1.0) {
        for (std::size_t k = 0; k < dim; ++k) sum_pos[k] += x[k];
        count_pos += 1.0;
      }
    }
    for (std::size_t i : neg_split.fit) {
      auto x = negatives.row(i);
      if (-clf.score(x) < 1.0) {
        for (std::size_t k = 0; k < dim; ++k) sum_neg[k] += x[k];
        count_neg += 1.0;
      }
    }
    const double step = opt.learning_rate / std::sqrt(static_cast<double>(t + 1));
    for (std::size_t k = 0; k < dim; ++k) {
      const double grad = opt.l2 * clf.weights[k] - (sum_pos[k] - sum_neg[k]) / n;
      clf.weights[k] -= step * grad;
    }
    clf.bias -= step * (-(count_pos - count_neg) / n);
  }

  auto accuracy = [&](const std::vector<std::size_t>& pi, const std::vector<std::size_t>& ni) {
    if (pi.empty() && ni.empty()) return 1.0;
    double correct = 0.0;
    for (std::size_t i : pi) correct += clf.score(positives.row(i)) > 0.0 ? 1.0 : 0.0;
    for (std::size_t i : ni) correct += clf.score(negatives.row(i)) < 0.0 ? 1.0 : 0.0;
    return correct / static_cast<double>(pi.size() + ni.size());
  };
  clf.train_accuracy = accuracy(pos_split.fit, neg_split.fit);
  clf.holdout_accuracy = accuracy(pos_split.holdout, neg_split.holdout);
  return clf;
}

// ---------------------------------------------------------------------------
// Protocol

struct ProtocolResult {
  std::string attribute;
  std::size_t attribute_index = 0;
  std::vector<double> intensities;
  std::vector<double> error_rates;  // averaged over classifier seeds
  std::vector<std::vector<double>> error_rates_per_seed;
  double classifier_train_accuracy = 0.0;
  double classifier_holdout_accuracy = 0.0;
  std::size_t synthesized_per_intensity = 0;
};

inline nlohmann::json to_json(const ProtocolResult& r) {
  return {{"kind", "protocol"},
          {"attribute", r.attribute},
          {"attribute_index", r.attribute_index},
          {"intensities", r.intensities},
          {"error_rates", r.error_rates},
          {"error_rates_per_seed", r.error_rates_per_seed},
          {"classifier_train_accuracy", r.classifier_train_accuracy},
          {"classifier_holdout_accuracy", r.classifier_holdout_accuracy},
          {"synthesized_per_intensity", r.synthesized_per_intensity}};
}

/// `count` evenly spaced points from lo to hi inclusive.
inline std::vector<double> linear_grid(double lo, double hi, std::size_t count) {
  if (count == 0) throw Error("grid needs at least one point");
  if (count == 1) return {lo};
  if (!(hi > lo)) throw Error("grid upper bound must exceed the lower bound");
  std::vector<double> g(count);
  for (std::size_t i = 0; i < count; ++i) {
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  g.back() = hi;
  return g;
}

struct ProtocolOptions {
  std::size_t classifier_seeds = 5;
  LinearClassifierOptions classifier;
  EditInterval interval;
};

inline ProtocolResult disentanglement_protocol(const Model& model, const Dataset& train, const Dataset& test,
                                               std::size_t attribute, const std::vector<double>& grid,
                                               std::uint64_t seed, const ProtocolOptions& opt = {}) {
  if (model.spec.mode != LabelMode::multilabel || train.mode != LabelMode::multilabel) {
    throw Error("the protocol needs a multilabel model and dataset");
  }
  if (attribute >= train.labels.cols() || attribute >= model.spec.target_dim) {
    throw Error("attribute index " + std::to_string(attribute) + " not present in the labels");
  }
  if (grid.empty()) throw Error("intensity grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw Error("intensity grid must be strictly increasing");
  for (double v : grid)
    if (!opt.interval.contains(v)) throw EditRangeError("grid intensity outside the editing interval");
  if (opt.classifier_seeds == 0) throw Error("need at least one classifier seed");

  // Step 1: split training images by attribute presence.
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < train.size(); ++i) (train.labels(i, attribute) > 0.5 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw Error("training data holds a single class for this attribute");
  const Tensor positives = train.images.gather_rows(pos);
  const Tensor negatives = train.images.gather_rows(neg);

  // Step 3: negative test images edited up to every grid intensity.
  std::vector<std::size_t> lacking;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels(i, attribute) <= 0.5) lacking.push_back(i);
  if (lacking.empty()) throw Error("no test images lack the attribute");
  const Tensor x = test.images.gather_rows(lacking);
  const Tensor y_hat = encode_y(model, x);
  const Tensor z = encode_z(model, x);
  std::vector<Tensor> synthesized;
  for (double v : grid) {
    Tensor edited = y_hat;
    for (std::size_t r = 0; r < edited.rows(); ++r) {
      const AttributeEdit e{attribute, v};
      const auto row = edit_multilabel(y_hat.row(r), std::span<const AttributeEdit>(&e, 1), opt.interval);
      std::copy(row.begin(), row.end(), edited.row(r).begin());
    }
    synthesized.push_back(decode(model, edited, z));
  }

  ProtocolResult result;
  result.attribute = attribute < train.label_names.size() ? train.label_names[attribute] : std::to_string(attribute);
  result.attribute_index = attribute;
  result.intensities = grid;
  result.error_rates.assign(grid.size(), 0.0);
  result.synthesized_per_intensity = lacking.size();
  for (std::size_t s = 0; s < opt.classifier_seeds; ++s) {
    // Step 2: one classifier per seed.
    const auto clf = train_linear_classifier(positives, negatives, derive_seed(seed, {hash_name("protocol"), s}),
                                             opt.classifier);
    result.classifier_train_accuracy += clf.train_accuracy / static_cast<double>(opt.classifier_seeds);
    result.classifier_holdout_accuracy += clf.holdout_accuracy / static_cast<double>(opt.classifier_seeds);
    // Step 4: error = fraction of synthesized images not recognized as positive.
    std::vector<double> rates;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      double missed = 0.0;
      for (std::size_t r = 0; r < synthesized[g].rows(); ++r) missed += clf.positive(synthesized[g].row(r)) ? 0.0 : 1.0;
      rates.push_back(missed / static_cast<double>(synthesized[g].rows()));
      result.error_rates[g] += rates.back() / static_cast<double>(opt.classifier_seeds);
    }
    result.error_rates_per_seed.push_back(std::move(rates));
  }
  return result;
}

/// Average ranks (ties share the mean of their positions), 1-based.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation; 0 when either side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman needs two equally long series of length >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace cdnet
