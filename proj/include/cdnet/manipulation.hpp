#pragma once

// Editing of the soft target representation: class swaps for one-hot style
// targets and per-attribute intensity overrides for binary attributes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <sstream>
#include <utility>
#include <vector>

#include "cdnet/error.hpp"
#include "cdnet/losses.hpp"
#include "cdnet/network.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

struct EditInterval {
  double lo = -2.0;
  double hi = 5.0;

  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  void validate() const {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi)) {
      throw ConfigError("edit_interval", "needs finite bounds with lo < hi");
    }
  }
  friend bool operator==(const EditInterval&, const EditInterval&) = default;
};

struct AttributeEdit {
  std::size_t index = 0;
  double value = 0.0;
};

struct EditRequest {
  LabelMode mode = LabelMode::multilabel;
  std::size_t target_class = 0;      // multiclass
  std::vector<AttributeEdit> edits;  // multilabel
};

/// Swaps the target coordinate with the current maximum (lowest index on ties).
inline std::vector<double> edit_multiclass(std::span<const double> y_hat, std::size_t target_class) {
  if (y_hat.empty()) throw ShapeError("edit_multiclass: empty soft target");
  if (target_class >= y_hat.size()) {
    throw EditRangeError("target class " + std::to_string(target_class) + " out of range [0, " +
                         std::to_string(y_hat.size()) + ")");
  }
  std::vector<double> out(y_hat.begin(), y_hat.end());
  const std::size_t top = static_cast<std::size_t>(std::max_element(out.begin(), out.end()) - out.begin());
  std::swap(out[top], out[target_class]);
  return out;
}

inline std::vector<double> edit_multilabel(std::span<const double> y_hat, std::span<const AttributeEdit> edits,
                                           const EditInterval& interval = {}) {
  std::vector<double> out(y_hat.begin(), y_hat.end());
  std::set<std::size_t> seen;
  for (const auto& e : edits) {
    if (e.index >= out.size()) {
      throw EditRangeError("attribute index " + std::to_string(e.index) + " out of range [0, " +
                           std::to_string(out.size()) + ")");
    }
    if (!seen.insert(e.index).second) {
      throw EditRangeError("attribute index " + std::to_string(e.index) + " edited more than once");
    }
    if (!std::isfinite(e.value) || !interval.contains(e.value)) {
      std::ostringstream msg;
      msg << "value " << e.value << " for attribute " << e.index << " outside the editing interval [" << interval.lo
          << ", " << interval.hi << "]";
      throw EditRangeError(msg.str());
    }
  }
  for (const auto& e : edits) out[e.index] = e.value;
  return out;
}

struct Synthesis {
  Tensor x_edit;        // 1 x M
  Tensor y_hat;         // 1 x C
  Tensor y_hat_edited;  // 1 x C
  Tensor z;             // 1 x D
};

inline Tensor apply_edit(const Tensor& y_hat, const EditRequest& edit, const EditInterval& interval) {
  if (y_hat.rows() != 1) throw ShapeError("apply_edit: expected a single soft target row");
  const std::vector<double> edited = edit.mode == LabelMode::multiclass
                                         ? edit_multiclass(y_hat.row(0), edit.target_class)
                                         : edit_multilabel(y_hat.row(0), edit.edits, interval);
  return Tensor({1, edited.size()}, edited);
}

/// encode -> edit the soft target -> decode with the untouched latent.
inline Synthesis synthesize(const Model& model, const Tensor& x, const EditRequest& edit,
                            const EditInterval& interval = {}) {
  if (x.rank() != 2 || x.rows() != 1) throw ShapeError("synthesize: expected a single 1 x M image");
  if (edit.mode != model.spec.mode) throw EditRangeError("edit mode does not match the model's label mode");
  Synthesis s;
  s.y_hat = encode_y(model, x);
  s.z = encode_z(model, x);
  s.y_hat_edited = apply_edit(s.y_hat, edit, interval);
  s.x_edit = decode(model, s.y_hat_edited, s.z);
  return s;
}

}  // namespace cdnet
