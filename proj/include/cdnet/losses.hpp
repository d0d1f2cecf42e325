#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "cdnet/autodiff.hpp"
#include "cdnet/error.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

enum class LabelMode { multiclass, multilabel };

inline std::string_view to_string(LabelMode mode) {
  return mode == LabelMode::multiclass ? "multiclass" : "multilabel";
}

inline constexpr double kProbabilityEpsilon = 1e-12;

struct LossWeights {
  double lambda_rec = 1.0;
  double lambda_dcorr_target = 1.0;
  double lambda_adv = 0.01;
  std::size_t warmup_iterations = 2000;

  void validate() const {
    auto check = [](double v, const char* field) {
      if (!std::isfinite(v) || v < 0.0) throw ConfigError(field, "must be finite and >= 0");
    };
    check(lambda_rec, "lambda_rec");
    check(lambda_dcorr_target, "lambda_dcorr");
    check(lambda_adv, "lambda_adv");
    if (warmup_iterations < 1) throw ConfigError("warmup_iterations", "must be >= 1");
  }
};

// Graph builders. Every loss reduces to a 1x1 node.

inline Node safe_log(Graph& g, Node p) {
  return g.log(g.clamp(p, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon));
}

/// Batch-mean cross entropy (multiclass) or attribute-and-batch-mean binary
/// cross entropy (multilabel).
inline Node classification_loss_node(Graph& g, Node y_hat, Node y, LabelMode mode) {
  auto scope = g.scoped("class_loss");
  if (mode == LabelMode::multiclass) {
    return g.affine(g.sum(g.batch_mean(g.mul(y, safe_log(g, y_hat)))), -1.0);
  }
  const Node pos = g.mul(y, safe_log(g, y_hat));
  const Node neg = g.mul(g.affine(y, -1.0, 1.0), safe_log(g, g.affine(y_hat, -1.0, 1.0)));
  return g.affine(g.mean(g.add(pos, neg)), -1.0);
}

/// (1 / (N M)) sum_n |x_n - x_hat_n|^2; also serves the feature-matching loss.
inline Node mean_squared_error_node(Graph& g, Node a, Node b) {
  return g.mean(g.square(g.sub(a, b)));
}

inline Node reconstruction_loss_node(Graph& g, Node pixel, Node feature, double lambda_rec) {
  return g.add(pixel, g.affine(feature, lambda_rec));
}

/// Batch mean of log D(x) + log(1 - D(x_hat)); at most 0.
inline Node adversarial_loss_node(Graph& g, Node d_real, Node d_fake) {
  auto scope = g.scoped("adv_loss");
  return g.add(g.mean(safe_log(g, d_real)), g.mean(safe_log(g, g.affine(d_fake, -1.0, 1.0))));
}

/// -mean log D(x_hat): the non-saturating generator objective.
inline Node non_saturating_generator_loss_node(Graph& g, Node d_fake) {
  return g.affine(g.mean(safe_log(g, d_fake)), -1.0);
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + to_string(a.shape()) + " does not match " +
                     to_string(b.shape()));
  }
}

template <class Build>
double evaluate_scalar(const Tensor& a, const Tensor& b, Build build) {
  Graph g;
  const Node na = g.input("a");
  const Node nb = g.input("b");
  const Node out = build(g, na, nb);
  Bindings bindings;
  bindings.bind("a", a).bind("b", b);
  return forward(g, bindings).value(out).item();
}

}  // namespace detail

// Value-level evaluation through the same graph arithmetic.

inline double classification_loss(const Tensor& y_hat, const Tensor& y, LabelMode mode) {
  detail::require_same_shape(y_hat, y, "classification_loss");
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double ones = 0.0;
    for (double v : y.row(r)) {
      if (v != 0.0 && v != 1.0) throw ShapeError("classification_loss: labels must be binary");
      ones += v;
    }
    if (mode == LabelMode::multiclass && ones != 1.0) {
      throw ShapeError("classification_loss: multiclass label row " + std::to_string(r) + " is not one-hot");
    }
  }
  return detail::evaluate_scalar(y_hat, y, [mode](Graph& g, Node p, Node t) {
    return classification_loss_node(g, p, t, mode);
  });
}

inline double pixel_recon_loss(const Tensor& x, const Tensor& x_hat) {
  detail::require_same_shape(x, x_hat, "pixel_recon_loss");
  return detail::evaluate_scalar(x, x_hat, mean_squared_error_node);
}

inline double feature_recon_loss(const Tensor& h_x, const Tensor& h_x_hat) {
  detail::require_same_shape(h_x, h_x_hat, "feature_recon_loss");
  return detail::evaluate_scalar(h_x, h_x_hat, mean_squared_error_node);
}

inline double reconstruction_loss(double pixel, double feature, double lambda_rec) {
  return pixel + lambda_rec * feature;
}

inline double adversarial_loss(const Tensor& d_real, const Tensor& d_fake) {
  detail::require_same_shape(d_real, d_fake, "adversarial_loss");
  return detail::evaluate_scalar(d_real, d_fake, adversarial_loss_node);
}

}  // namespace cdnet
