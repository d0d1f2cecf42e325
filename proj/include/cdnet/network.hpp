#pragma once

// The four fully connected components: the target encoder, the latent
// encoder, the decoder/generator, and the discriminator.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdnet/autodiff.hpp"
#include "cdnet/error.hpp"
#include "cdnet/losses.hpp"
#include "cdnet/random.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

enum class Activation { relu, tanh, sigmoid };
enum class ImageRange { unit, symmetric };  // [0, 1] or [-1, 1]

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "relu";
}

inline std::string_view to_string(ImageRange r) { return r == ImageRange::unit ? "unit" : "symmetric"; }

inline constexpr std::string_view kEncY = "enc_y";
inline constexpr std::string_view kEncZ = "enc_z";
inline constexpr std::string_view kDec = "dec";
inline constexpr std::string_view kDis = "dis";

struct NetworkSpec {
  std::size_t image_dim = 256;
  std::size_t target_dim = 10;
  std::size_t latent_dim = 8;
  LabelMode mode = LabelMode::multiclass;
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::vector<std::size_t> decoder_hidden{128, 256};
  std::vector<std::size_t> discriminator_hidden{256, 64};
  double dropout = 0.3;
  Activation activation = Activation::relu;
  ImageRange image_range = ImageRange::unit;
  /// Discriminator hidden layer whose activations feed the feature-matching
  /// loss; defaults to the last hidden layer.
  std::optional<std::size_t> feature_layer;

  std::size_t feature_tap() const {
    return feature_layer.value_or(discriminator_hidden.empty() ? 0 : discriminator_hidden.size() - 1);
  }
  std::size_t feature_width() const { return discriminator_hidden.at(feature_tap()); }

  void validate() const {
    if (image_dim == 0) throw ConfigError("network.image_dim", "must be positive");
    if (target_dim == 0) throw ConfigError("network.target_dim", "must be positive");
    if (latent_dim == 0) throw ConfigError("network.latent_dim", "must be positive");
    auto widths = [](const std::vector<std::size_t>& w, const char* field) {
      for (std::size_t v : w)
        if (v == 0) throw ConfigError(field, "layer widths must be positive");
    };
    widths(encoder_hidden, "network.encoder_hidden");
    widths(decoder_hidden, "network.decoder_hidden");
    widths(discriminator_hidden, "network.discriminator_hidden");
    if (discriminator_hidden.empty()) throw ConfigError("network.discriminator_hidden", "needs a hidden layer for the feature tap");
    if (feature_tap() >= discriminator_hidden.size()) throw ConfigError("network.feature_layer", "does not address a hidden layer");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("network.dropout", "must lie in [0, 1)");
  }
};

struct LayerShape {
  std::size_t in;
  std::size_t out;
};

/// Fully connected layer shapes of one component, input to output.
inline std::vector<LayerShape> layer_shapes(const NetworkSpec& spec, std::string_view component) {
  std::vector<LayerShape> layers;
  auto chain = [&](std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, std::size_t appended) {
    std::size_t width = in;
    for (std::size_t h : hidden) {
      layers.push_back({width, h});
      width = h + appended;
    }
    layers.push_back({width, out});
  };
  if (component == kEncY) {
    chain(spec.image_dim, spec.encoder_hidden, spec.target_dim, 0);
  } else if (component == kEncZ) {
    chain(spec.image_dim, spec.encoder_hidden, spec.latent_dim, 0);
  } else if (component == kDec) {
    // Every decoder layer sees the soft target appended to its input.
    chain(spec.latent_dim + spec.target_dim, spec.decoder_hidden, spec.image_dim, spec.target_dim);
  } else if (component == kDis) {
    chain(spec.image_dim, spec.discriminator_hidden, 1, 0);
  } else {
    throw Error("unknown component '" + std::string(component) + "'");
  }
  return layers;
}

inline std::string weight_name(std::string_view component, std::size_t layer) {
  return std::string(component) + "/fc" + std::to_string(layer) + "/weight";
}
inline std::string bias_name(std::string_view component, std::size_t layer) {
  return std::string(component) + "/fc" + std::to_string(layer) + "/bias";
}

inline bool belongs_to(std::string_view param_name, std::string_view component) {
  return param_name.size() > component.size() && param_name.substr(0, component.size()) == component &&
         param_name[component.size()] == '/';
}

inline std::size_t parameter_count(const NetworkSpec& spec, std::string_view component) {
  std::size_t total = 0;
  for (const auto& l : layer_shapes(spec, component)) total += l.in * l.out + l.out;
  return total;
}

inline std::size_t parameter_count(const NetworkSpec& spec) {
  return parameter_count(spec, kEncY) + parameter_count(spec, kEncZ) + parameter_count(spec, kDec) +
         parameter_count(spec, kDis);
}

using TensorMap = std::map<std::string, Tensor, std::less<>>;

struct ModelParams {
  TensorMap tensors;
  std::uint64_t init_seed = 0;

  const Tensor& at(std::string_view name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("no parameter named '" + std::string(name) + "'");
    return it->second;
  }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : tensors) total += t.size();
    return total;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero. Each
/// tensor draws from its own stream keyed by (seed, name).
inline ModelParams initialize_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams params;
  params.init_seed = seed;
  for (std::string_view component : {kEncY, kEncZ, kDec, kDis}) {
    const auto layers = layer_shapes(spec, component);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string wname = weight_name(component, i);
      std::mt19937_64 rng(derive_seed(seed, {hash_name(wname)}));
      const double bound = 1.0 / std::sqrt(static_cast<double>(layers[i].in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor w({layers[i].in, layers[i].out});
      for (double& v : w.values()) v = dist(rng);
      params.tensors.emplace(wname, std::move(w));
      params.tensors.emplace(bias_name(component, i), Tensor({1, layers[i].out}, 0.0));
    }
  }
  return params;
}

namespace detail {

inline Node dense(Graph& g, Node x, std::string_view component, std::size_t layer) {
  return g.add(g.matmul(x, g.parameter(weight_name(component, layer))), g.parameter(bias_name(component, layer)));
}

inline Node activate(Graph& g, Node x, Activation a) {
  switch (a) {
    case Activation::relu: return g.relu(x);
    case Activation::tanh: return g.tanh(x);
    case Activation::sigmoid: return g.sigmoid(x);
  }
  return x;
}

inline Node encoder(Graph& g, Node x, const NetworkSpec& spec, std::string_view component, bool with_dropout) {
  auto scope = g.scoped(component);
  const std::size_t hidden = spec.encoder_hidden.size();
  Node h = x;
  for (std::size_t i = 0; i < hidden; ++i) {
    h = activate(g, dense(g, h, component, i), spec.activation);
    if (with_dropout) h = g.dropout(h, spec.dropout);
  }
  return dense(g, h, component, hidden);
}

}  // namespace detail

/// Soft target: softmax (multiclass) or sigmoid (multilabel) outputs, N x C.
inline Node build_enc_y(Graph& g, Node x, const NetworkSpec& spec, bool with_dropout) {
  const Node logits = detail::encoder(g, x, spec, kEncY, with_dropout);
  return spec.mode == LabelMode::multiclass ? g.softmax(logits) : g.sigmoid(logits);
}

/// Unbounded latent code, N x dim(z).
inline Node build_enc_z(Graph& g, Node x, const NetworkSpec& spec, bool with_dropout) {
  return detail::encoder(g, x, spec, kEncZ, with_dropout);
}

inline Node build_decoder(Graph& g, Node y_hat, Node z, const NetworkSpec& spec) {
  auto scope = g.scoped(kDec);
  Node h = g.concat({y_hat, z});
  const std::size_t hidden = spec.decoder_hidden.size();
  for (std::size_t i = 0; i < hidden; ++i) {
    h = detail::activate(g, detail::dense(g, h, kDec, i), spec.activation);
    h = g.concat({h, y_hat});
  }
  const Node out = detail::dense(g, h, kDec, hidden);
  return spec.image_range == ImageRange::unit ? g.sigmoid(out) : g.tanh(out);
}

struct DiscriminatorNodes {
  Node prob;      // N x 1
  Node features;  // N x D_l, pre-dropout activations of the tapped layer
};

inline DiscriminatorNodes build_discriminator(Graph& g, Node x, const NetworkSpec& spec, bool with_dropout) {
  auto scope = g.scoped(kDis);
  Node h = x;
  std::optional<Node> tap;
  for (std::size_t i = 0; i < spec.discriminator_hidden.size(); ++i) {
    h = detail::activate(g, detail::dense(g, h, kDis, i), spec.activation);
    if (i == spec.feature_tap()) tap = h;
    if (with_dropout) h = g.dropout(h, spec.dropout);
  }
  const Node prob = g.sigmoid(detail::dense(g, h, kDis, spec.discriminator_hidden.size()));
  return {prob, *tap};
}

struct Model {
  NetworkSpec spec;
  ModelParams params;
};

namespace detail {

inline void require_width(const Tensor& t, std::size_t width, std::string_view what) {
  if (t.rank() != 2 || t.cols() != width) {
    throw ShapeError(std::string(what) + ": expected N x " + std::to_string(width) + " input, got " +
                     to_string(t.shape()));
  }
}

inline RunOptions run_options(bool train_mode, std::uint64_t seed) { return RunOptions{train_mode, seed}; }

}  // namespace detail

inline Tensor encode_y(const Model& model, const Tensor& x, bool train_mode = false, std::uint64_t seed = 0) {
  detail::require_width(x, model.spec.image_dim, "encode_y");
  Graph g;
  const Node out = build_enc_y(g, g.input("x"), model.spec, train_mode);
  Bindings b;
  b.bind_all(model.params.tensors).bind("x", x);
  return forward(g, b, detail::run_options(train_mode, seed)).value(out);
}

inline Tensor encode_z(const Model& model, const Tensor& x, bool train_mode = false, std::uint64_t seed = 0) {
  detail::require_width(x, model.spec.image_dim, "encode_z");
  Graph g;
  const Node out = build_enc_z(g, g.input("x"), model.spec, train_mode);
  Bindings b;
  b.bind_all(model.params.tensors).bind("x", x);
  return forward(g, b, detail::run_options(train_mode, seed)).value(out);
}

inline Tensor decode(const Model& model, const Tensor& y_hat, const Tensor& z) {
  detail::require_width(y_hat, model.spec.target_dim, "decode (soft target)");
  detail::require_width(z, model.spec.latent_dim, "decode (latent)");
  if (y_hat.rows() != z.rows()) {
    throw ShapeError("decode: soft target and latent disagree on batch extent (" + std::to_string(y_hat.rows()) +
                     " vs " + std::to_string(z.rows()) + ")");
  }
  Graph g;
  const Node out = build_decoder(g, g.input("y_hat"), g.input("z"), model.spec);
  Bindings b;
  b.bind_all(model.params.tensors).bind("y_hat", y_hat).bind("z", z);
  return forward(g, b).value(out);
}

struct Discrimination {
  Tensor prob;
  Tensor features;
};

inline Discrimination discriminate(const Model& model, const Tensor& x, bool train_mode = false,
                                   std::uint64_t seed = 0) {
  detail::require_width(x, model.spec.image_dim, "discriminate");
  Graph g;
  const auto nodes = build_discriminator(g, g.input("x"), model.spec, train_mode);
  Bindings b;
  b.bind_all(model.params.tensors).bind("x", x);
  const Execution exec = forward(g, b, detail::run_options(train_mode, seed));
  return {exec.value(nodes.prob), exec.value(nodes.features)};
}

inline Tensor reconstruct(const Model& model, const Tensor& x) {
  return decode(model, encode_y(model, x), encode_z(model, x));
}

}  // namespace cdnet
