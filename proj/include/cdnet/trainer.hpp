#pragma once

// Two-phase training: the target encoder is pretrained on classification and
// frozen; the latent encoder, decoder and discriminator are then trained
// jointly with a warmed-up decorrelation penalty and RMSProp updates.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cdnet/autodiff.hpp"
#include "cdnet/data.hpp"
#include "cdnet/dependence.hpp"
#include "cdnet/error.hpp"
#include "cdnet/losses.hpp"
#include "cdnet/network.hpp"
#include "cdnet/random.hpp"

namespace cdnet {

enum class Decorrelation { dcov2, xcov, none };
/// m1: class + pixel rec. m2: class + feature rec + adv. m3/full: class + rec + adv.
enum class Ablation { m1, m2, m3, full };
enum class GeneratorLoss { saturating, non_saturating };

inline std::string_view to_string(Decorrelation d) {
  switch (d) {
    case Decorrelation::dcov2: return "dcov2";
    case Decorrelation::xcov: return "xcov";
    case Decorrelation::none: return "none";
  }
  return "none";
}
inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::m1: return "M1";
    case Ablation::m2: return "M2";
    case Ablation::m3: return "M3";
    case Ablation::full: return "full";
  }
  return "full";
}
inline std::string_view to_string(GeneratorLoss g) {
  return g == GeneratorLoss::saturating ? "saturating" : "non_saturating";
}

struct TrainConfig {
  LabelMode mode = LabelMode::multiclass;
  Decorrelation decorrelation = Decorrelation::dcov2;
  LossWeights weights;
  double learning_rate = 1e-4;
  std::optional<double> pretrain_learning_rate;  // defaults to learning_rate
  std::size_t batch_size = 100;
  std::size_t pretrain_epochs = 10;
  std::size_t pretrain_patience = 3;
  std::size_t joint_iterations = 4000;
  double rmsprop_decay = 0.9;
  double rmsprop_epsilon = 1e-8;
  std::uint64_t seed = 7;
  Ablation ablation = Ablation::full;
  GeneratorLoss generator_loss = GeneratorLoss::saturating;
  std::size_t checkpoint_interval = 0;  // 0 disables periodic checkpoints

  void validate() const {
    weights.validate();
    if (batch_size < 2) throw ConfigError("batch_size", "must be >= 2");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate", "must be positive");
    if (!(rmsprop_decay >= 0.0 && rmsprop_decay < 1.0)) throw ConfigError("rmsprop_decay", "must lie in [0, 1)");
    if (!(rmsprop_epsilon > 0.0)) throw ConfigError("rmsprop_epsilon", "must be positive");
    if (pretrain_learning_rate && (!(*pretrain_learning_rate > 0.0) || !std::isfinite(*pretrain_learning_rate))) {
      throw ConfigError("pretrain_learning_rate", "must be positive");
    }
    if (pretrain_epochs == 0) throw ConfigError("pretrain_epochs", "must be >= 1");
    if (pretrain_patience == 0) throw ConfigError("pretrain_patience", "must be >= 1");
  }

  bool uses_discriminator() const { return ablation != Ablation::m1; }
  bool uses_pixel_loss() const { return ablation != Ablation::m2; }
  bool uses_feature_loss() const { return ablation != Ablation::m1; }
};

struct TrainRecord {
  std::string phase;  // "pretrain" or "joint"
  std::size_t iteration = 0;
  std::optional<double> loss_class;
  std::optional<double> loss_dcorr;
  std::optional<double> loss_rec_pix;
  std::optional<double> loss_rec_feat;
  std::optional<double> loss_rec;
  std::optional<double> loss_adv;
  std::optional<double> lambda_dcorr;
  std::optional<double> dcorr_monitor;
  std::optional<double> validation_accuracy;
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const TrainRecord& r) {
  nlohmann::json j;
  j["phase"] = r.phase;
  j["iteration"] = r.iteration;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("loss_class", r.loss_class);
  put("loss_dcorr", r.loss_dcorr);
  put("loss_rec_pix", r.loss_rec_pix);
  put("loss_rec_feat", r.loss_rec_feat);
  put("loss_rec", r.loss_rec);
  put("loss_adv", r.loss_adv);
  put("lambda_dcorr", r.lambda_dcorr);
  put("dcorr_monitor", r.dcorr_monitor);
  put("validation_accuracy", r.validation_accuracy);
  j["wall_ms"] = r.wall_ms;
  return j;
}

struct TrainLog {
  std::vector<TrainRecord> records;

  void write_jsonl(std::ostream& out) const {
    for (const auto& r : records) out << to_json(r).dump() << '\n';
  }
};

/// Thrown when phase 2 hits a non-finite value; carries the parameters from
/// before the failing iteration and the diagnostic record.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, ModelParams last_good, TrainRecord diagnostic)
      : NumericError(what), last_good_(std::move(last_good)), diagnostic_(std::move(diagnostic)) {}
  const ModelParams& last_good() const noexcept { return last_good_; }
  const TrainRecord& diagnostic() const noexcept { return diagnostic_; }

 private:
  ModelParams last_good_;
  TrainRecord diagnostic_;
};

inline double lambda_dcorr_at(std::size_t iteration, const LossWeights& w) {
  const double progress = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(w.warmup_iterations));
  return w.lambda_dcorr_target * progress;
}

struct RmsPropState {
  TensorMap mean_square;
};

/// v <- decay v + (1 - decay) g^2;  theta <- theta - lr g / (sqrt(v) + eps).
/// Only parameters present in `grads` are touched.
inline void rmsprop_step(TensorMap& params, const Gradients& grads, RmsPropState& state, double lr, double decay,
                         double eps) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("gradient for unknown parameter '" + name + "'");
    Tensor& theta = it->second;
    if (theta.shape() != g.shape()) throw ShapeError("gradient shape mismatch for parameter '" + name + "'");
    auto [vit, inserted] = state.mean_square.try_emplace(name, g.shape(), 0.0);
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = decay * v[i] + (1.0 - decay) * g[i] * g[i];
      theta[i] -= lr * g[i] / (std::sqrt(v[i]) + eps);
    }
  }
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

inline ParameterFilter component_filter(std::string_view component) {
  return [component](std::string_view name) { return belongs_to(name, component); };
}

}  // namespace detail

/// Fraction of correct argmax predictions (multiclass) or of correct
/// thresholded attributes (multilabel).
inline double classification_accuracy(const Model& model, const Dataset& ds) {
  constexpr std::size_t chunk = 512;
  double correct = 0.0;
  const std::size_t classes = ds.labels.cols();
  for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(ds.size(), begin + chunk); ++i) idx.push_back(i);
    const Tensor pred = encode_y(model, ds.images.gather_rows(idx));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto p = pred.row(r);
      auto y = ds.labels.row(idx[r]);
      if (ds.mode == LabelMode::multiclass) {
        const auto guess = std::max_element(p.begin(), p.end()) - p.begin();
        const auto truth = std::max_element(y.begin(), y.end()) - y.begin();
        correct += guess == truth ? 1.0 : 0.0;
      } else {
        for (std::size_t c = 0; c < classes; ++c) correct += ((p[c] > 0.5) == (y[c] > 0.5)) ? 1.0 : 0.0;
      }
    }
  }
  const double total = static_cast<double>(ds.size()) * (ds.mode == LabelMode::multiclass ? 1.0 : classes);
  return correct / total;
}

/// Phase 1: minimizes the classification loss over the target encoder only.
/// Runs up to `pretrain_epochs`, stops after `pretrain_patience` epochs without
/// validation improvement, and keeps the best-validation weights.
inline TrainLog pretrain_enc_y(const TrainConfig& config, const Dataset& train, const Dataset& validation,
                               Model& model) {
  config.validate();
  if (train.size() == 0) throw Error("pretrain_enc_y: empty dataset");
  if (train.mode != config.mode || model.spec.mode != config.mode) {
    throw ConfigError("mode", "label mode of config, network and dataset must agree");
  }
  const auto start = std::chrono::steady_clock::now();

  Graph g;
  const Node x = g.input("x");
  const Node y = g.input("y");
  const Node loss = classification_loss_node(g, build_enc_y(g, x, model.spec, true), y, config.mode);

  TrainLog log;
  RmsPropState state;
  const auto filter = detail::component_filter(kEncY);
  double best_accuracy = -1.0;
  TensorMap best = model.params.tensors;
  std::size_t since_best = 0;
  std::size_t iteration = 0;

  for (std::size_t epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    const auto batches = minibatches(train.size(), config.batch_size, derive_seed(config.seed, {hash_name("pretrain")}), epoch);
    for (const auto& batch : batches) {
      Bindings b;
      b.bind_all(model.params.tensors);
      b.bind("x", train.images.gather_rows(batch)).bind("y", train.labels.gather_rows(batch));
      const Execution exec = forward(g, b, {true, derive_seed(config.seed, {hash_name("pretrain-dropout"), iteration})});
      const Gradients grads = backward(g, exec, loss, {}, filter);
      rmsprop_step(model.params.tensors, grads, state, config.pretrain_learning_rate.value_or(config.learning_rate),
                   config.rmsprop_decay, config.rmsprop_epsilon);
      TrainRecord rec;
      rec.phase = "pretrain";
      rec.iteration = iteration++;
      rec.loss_class = exec.value(loss).item();
      rec.wall_ms = detail::elapsed_ms(start);
      log.records.push_back(std::move(rec));
    }
    const double accuracy = classification_accuracy(model, validation);
    log.records.back().validation_accuracy = accuracy;
    if (accuracy > best_accuracy) {
      best_accuracy = accuracy;
      best = model.params.tensors;
      since_best = 0;
    } else if (++since_best >= config.pretrain_patience) {
      break;
    }
  }
  for (auto& [name, t] : model.params.tensors) {
    if (belongs_to(name, kEncY)) t = best.at(name);
  }
  return log;
}

/// Node handles of the phase-2 graph.
struct JointGraph {
  Graph graph;
  Node x, lambda;
  Node y_hat, z, x_hat;
  Node dcorr;  // penalty used (or monitored, when decorrelation is none)
  Node pixel, feature, rec, adv, fake_prob;
  Node objective_enc_z, objective_dec, objective_dis;
  bool has_discriminator = false;
};

inline JointGraph build_joint_graph(const TrainConfig& config, const NetworkSpec& spec) {
  JointGraph j;
  Graph& g = j.graph;
  j.x = g.input("x");
  j.lambda = g.input("lambda_dcorr");
  // Frozen target encoder runs in evaluation mode.
  j.y_hat = build_enc_y(g, j.x, spec, false);
  j.z = build_enc_z(g, j.x, spec, true);
  j.dcorr = config.decorrelation == Decorrelation::xcov ? xcov_node(g, j.y_hat, j.z) : dcov2_node(g, j.y_hat, j.z);
  j.x_hat = build_decoder(g, j.y_hat, j.z, spec);
  j.pixel = mean_squared_error_node(g, j.x, j.x_hat);
  j.has_discriminator = config.uses_discriminator();
  if (j.has_discriminator) {
    const auto real = build_discriminator(g, j.x, spec, true);
    const auto fake = build_discriminator(g, j.x_hat, spec, true);
    j.feature = mean_squared_error_node(g, real.features, fake.features);
    j.adv = adversarial_loss_node(g, real.prob, fake.prob);
    j.fake_prob = fake.prob;
  }
  const double lambda_rec = config.weights.lambda_rec;
  switch (config.ablation) {
    case Ablation::m1: j.rec = j.pixel; break;
    case Ablation::m2: j.rec = g.affine(j.feature, lambda_rec); break;
    case Ablation::m3:
    case Ablation::full: j.rec = reconstruction_loss_node(g, j.pixel, j.feature, lambda_rec); break;
  }
  j.objective_enc_z =
      config.decorrelation == Decorrelation::none ? j.rec : g.add(j.rec, g.mul(j.lambda, j.dcorr));
  if (j.has_discriminator) {
    const Node gen = config.generator_loss == GeneratorLoss::saturating
                         ? j.adv
                         : non_saturating_generator_loss_node(g, j.fake_prob);
    j.objective_dec = g.add(j.rec, g.affine(gen, config.weights.lambda_adv));
    j.objective_dis = g.affine(j.adv, -1.0);
  } else {
    j.objective_dec = j.rec;
  }
  return j;
}

using CheckpointCallback = std::function<void(const ModelParams&, std::size_t iteration)>;

/// Phase 2. The target encoder is never updated; each objective only updates
/// its own component.
inline TrainLog train_joint(const TrainConfig& config, const Dataset& train, Model& model,
                            const CheckpointCallback& on_checkpoint = {}) {
  config.validate();
  if (train.size() == 0) throw Error("train_joint: empty dataset");
  const auto start = std::chrono::steady_clock::now();
  JointGraph j = build_joint_graph(config, model.spec);
  const Graph& g = j.graph;

  TrainLog log;
  RmsPropState state_z, state_dec, state_dis;
  const auto filter_z = detail::component_filter(kEncZ);
  const auto filter_dec = detail::component_filter(kDec);
  const auto filter_dis = detail::component_filter(kDis);
  const std::uint64_t batch_seed = derive_seed(config.seed, {hash_name("joint")});

  std::size_t epoch = 0;
  auto batches = minibatches(train.size(), config.batch_size, batch_seed, epoch);
  std::size_t cursor = 0;

  for (std::size_t it = 0; it < config.joint_iterations; ++it) {
    if (cursor == batches.size()) {
      batches = minibatches(train.size(), config.batch_size, batch_seed, ++epoch);
      cursor = 0;
    }
    const auto& batch = batches[cursor++];
    const double lambda = lambda_dcorr_at(it, config.weights);

    TrainRecord rec;
    rec.phase = "joint";
    rec.iteration = it;
    rec.lambda_dcorr = lambda;
    ModelParams last_good = model.params;
    try {
      Bindings b;
      b.bind_all(model.params.tensors);
      b.bind("x", train.images.gather_rows(batch)).bind("lambda_dcorr", Tensor::scalar(lambda));
      const Execution exec = forward(g, b, {true, derive_seed(config.seed, {hash_name("joint-dropout"), it})});

      const Gradients grad_z = backward(g, exec, j.objective_enc_z, {}, filter_z);
      const Gradients grad_dec = backward(g, exec, j.objective_dec, {}, filter_dec);
      std::optional<Gradients> grad_dis;
      if (j.has_discriminator) grad_dis = backward(g, exec, j.objective_dis, {}, filter_dis);

      const double lr = config.learning_rate, decay = config.rmsprop_decay, eps = config.rmsprop_epsilon;
      rmsprop_step(model.params.tensors, grad_z, state_z, lr, decay, eps);
      rmsprop_step(model.params.tensors, grad_dec, state_dec, lr, decay, eps);
      if (grad_dis) rmsprop_step(model.params.tensors, *grad_dis, state_dis, lr, decay, eps);

      const double dcorr = exec.value(j.dcorr).item();
      rec.dcorr_monitor = dcorr;
      if (config.decorrelation != Decorrelation::none) rec.loss_dcorr = dcorr;
      if (config.uses_pixel_loss()) rec.loss_rec_pix = exec.value(j.pixel).item();
      if (config.uses_feature_loss()) rec.loss_rec_feat = exec.value(j.feature).item();
      rec.loss_rec = exec.value(j.rec).item();
      if (j.has_discriminator) rec.loss_adv = exec.value(j.adv).item();
      for (const auto& [name, t] : model.params.tensors) {
        if (!t.all_finite()) throw NumericError("parameter '" + name + "' became non-finite");
      }
    } catch (const NumericError& e) {
      model.params = last_good;
      rec.wall_ms = detail::elapsed_ms(start);
      throw TrainingAborted(std::string("joint training aborted at iteration ") + std::to_string(it) + ": " + e.what(),
                            std::move(last_good), std::move(rec));
    }
    rec.wall_ms = detail::elapsed_ms(start);
    log.records.push_back(std::move(rec));
    if (on_checkpoint && config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0) {
      on_checkpoint(model.params, it + 1);
    }
  }
  return log;
}

struct TrainResult {
  Model model;
  TrainLog pretrain_log;
  TrainLog joint_log;
};

/// Initializes parameters from the master seed and runs both phases.
inline TrainResult train(const TrainConfig& config, const NetworkSpec& spec, const DatasetSplits& data,
                         const CheckpointCallback& on_checkpoint = {}) {
  config.validate();
  spec.validate();
  TrainResult result;
  result.model.spec = spec;
  result.model.params = initialize_params(spec, derive_seed(config.seed, {hash_name("init")}));
  result.pretrain_log = pretrain_enc_y(config, data.train, data.validation, result.model);
  result.joint_log = train_joint(config, data.train, result.model, on_checkpoint);
  return result;
}

}  // namespace cdnet
