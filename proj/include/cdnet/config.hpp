#pragma once

// JSON run configuration. Every key is optional and falls back to the
// documented default; unknown keys and wrongly typed values are rejected
// with the dotted path of the offending field.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdnet/data.hpp"
#include "cdnet/error.hpp"
#include "cdnet/manipulation.hpp"
#include "cdnet/network.hpp"
#include "cdnet/trainer.hpp"

namespace cdnet {

using nlohmann::json;

enum class DatasetKind { glyph, idx };

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
  std::size_t train_count = 50000;
  std::size_t validation_count = 10000;
  std::size_t test_count = 10000;
  std::uint64_t split_seed = 0;
  std::optional<std::size_t> num_classes;
};

struct DatasetConfig {
  DatasetKind kind = DatasetKind::glyph;
  GlyphConfig glyph;
  IdxSource idx;
};

struct ProtocolConfig {
  std::vector<std::string> attributes{"thick", "large"};
  double grid_lo = -1.5;
  double grid_hi = 3.0;
  std::size_t grid_points = 10;
  std::size_t classifier_seeds = 5;
};

struct RunConfig {
  LabelMode mode = LabelMode::multiclass;
  DatasetConfig dataset;
  NetworkSpec network;  // image_dim and target_dim are filled from the data
  TrainConfig training;
  EditInterval edit_interval;
  ProtocolConfig protocol;
};

namespace detail {

// Reads fields of one JSON object and remembers which keys were consumed.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be a JSON object");
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  const json* get(std::string_view key) {
    seen_.insert(std::string(key));
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  template <class T>
  void read(std::string_view key, T& out) {
    if (const json* v = get(key)) out = convert<T>(*v, field(key));
  }

  template <class T>
  void read(std::string_view key, std::optional<T>& out) {
    if (const json* v = get(key)) out = v->is_null() ? std::nullopt : std::optional<T>(convert<T>(*v, field(key)));
  }

  template <class E>
  void read_enum(std::string_view key, E& out, std::initializer_list<std::pair<std::string_view, E>> names) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(field(key), "must be a string");
    const auto s = v->get<std::string>();
    for (const auto& [name, value] : names) {
      if (s == name) {
        out = value;
        return;
      }
    }
    std::string allowed;
    for (const auto& [name, _] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
    throw ConfigError(field(key), "unknown value '" + s + "' (expected one of " + allowed + ")");
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where, "must be an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        throw ConfigError(where, "must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "must be a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      if (!v.is_string()) throw ConfigError(where, "must be a path string");
      return std::filesystem::path(v.get<std::string>());
    } else {
      // std::vector<U>
      using U = typename T::value_type;
      if (!v.is_array()) throw ConfigError(where, "must be an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<U>(v[i], where + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

inline void read_mode(FieldReader& r, LabelMode& out) {
  r.read_enum("mode", out, {{"multiclass", LabelMode::multiclass}, {"multilabel", LabelMode::multilabel}});
}

inline void parse_dataset(const json& j, RunConfig& rc) {
  FieldReader r(j, "dataset");
  r.read_enum("kind", rc.dataset.kind, {{"glyph", DatasetKind::glyph}, {"idx", DatasetKind::idx}});
  if (rc.dataset.kind == DatasetKind::glyph) {
    GlyphConfig& g = rc.dataset.glyph;
    r.read("side", g.side);
    r.read("shapes", g.shapes);
    r.read("thickness", g.thickness);
    r.read("slant", g.slant);
    r.read("scale", g.scale);
    r.read("offset", g.offset);
    r.read("train_count", g.train_count);
    r.read("validation_count", g.validation_count);
    r.read("test_count", g.test_count);
    r.read("noise", g.noise);
    r.read("seed", g.seed);
    r.read("thick_min_thickness", g.thick_min_thickness);
    r.read("slanted_min_abs_slant", g.slanted_min_abs_slant);
    r.read("large_min_scale", g.large_min_scale);
    g.mode = rc.mode;
    r.finish();
    g.validate();
  } else {
    IdxSource& s = rc.dataset.idx;
    r.read("images", s.images);
    r.read("labels", s.labels);
    r.read("train_count", s.train_count);
    r.read("validation_count", s.validation_count);
    r.read("test_count", s.test_count);
    r.read("split_seed", s.split_seed);
    r.read("num_classes", s.num_classes);
    r.finish();
    if (s.images.empty()) throw ConfigError("dataset.images", "required for idx datasets");
    if (s.labels.empty()) throw ConfigError("dataset.labels", "required for idx datasets");
    if (s.train_count == 0 || s.validation_count == 0 || s.test_count == 0) {
      throw ConfigError("dataset", "split counts must be positive");
    }
  }
}

inline void parse_network(const json& j, RunConfig& rc) {
  FieldReader r(j, "network");
  NetworkSpec& n = rc.network;
  r.read("latent_dim", n.latent_dim);
  r.read("encoder_hidden", n.encoder_hidden);
  r.read("decoder_hidden", n.decoder_hidden);
  r.read("discriminator_hidden", n.discriminator_hidden);
  r.read("dropout", n.dropout);
  r.read_enum("activation", n.activation,
              {{"relu", Activation::relu}, {"tanh", Activation::tanh}, {"sigmoid", Activation::sigmoid}});
  r.read_enum("image_range", n.image_range, {{"unit", ImageRange::unit}, {"symmetric", ImageRange::symmetric}});
  r.read("feature_layer", n.feature_layer);
  r.finish();
}

inline void parse_training(const json& j, RunConfig& rc) {
  FieldReader r(j, "training");
  TrainConfig& t = rc.training;
  r.read_enum("decorrelation", t.decorrelation,
              {{"dcov2", Decorrelation::dcov2}, {"xcov", Decorrelation::xcov}, {"none", Decorrelation::none}});
  r.read("lambda_rec", t.weights.lambda_rec);
  r.read("lambda_dcorr", t.weights.lambda_dcorr_target);
  r.read("lambda_adv", t.weights.lambda_adv);
  r.read("warmup_iterations", t.weights.warmup_iterations);
  r.read("learning_rate", t.learning_rate);
  r.read("pretrain_learning_rate", t.pretrain_learning_rate);
  r.read("batch_size", t.batch_size);
  r.read("pretrain_epochs", t.pretrain_epochs);
  r.read("pretrain_patience", t.pretrain_patience);
  r.read("joint_iterations", t.joint_iterations);
  r.read("rmsprop_decay", t.rmsprop_decay);
  r.read("rmsprop_epsilon", t.rmsprop_epsilon);
  r.read_enum("ablation", t.ablation,
              {{"M1", Ablation::m1}, {"M2", Ablation::m2}, {"M3", Ablation::m3}, {"full", Ablation::full}});
  r.read_enum("generator_loss", t.generator_loss,
              {{"saturating", GeneratorLoss::saturating}, {"non_saturating", GeneratorLoss::non_saturating}});
  r.read("checkpoint_interval", t.checkpoint_interval);
  r.finish();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("training." + e.field(), e.message());
  }
}

inline void parse_editing(const json& j, RunConfig& rc) {
  FieldReader r(j, "editing");
  std::optional<std::vector<double>> interval;
  r.read("interval", interval);
  r.finish();
  if (interval) {
    if (interval->size() != 2) throw ConfigError("editing.interval", "must be [lo, hi]");
    rc.edit_interval = {(*interval)[0], (*interval)[1]};
    try {
      rc.edit_interval.validate();
    } catch (const ConfigError&) {
      throw ConfigError("editing.interval", "needs finite bounds with lo < hi");
    }
  }
}

inline void parse_protocol(const json& j, RunConfig& rc) {
  FieldReader r(j, "protocol");
  ProtocolConfig& p = rc.protocol;
  r.read("attributes", p.attributes);
  std::optional<std::vector<double>> range;
  r.read("grid", range);
  r.read("grid_points", p.grid_points);
  r.read("classifier_seeds", p.classifier_seeds);
  r.finish();
  if (range) {
    if (range->size() != 2 || !((*range)[1] > (*range)[0])) throw ConfigError("protocol.grid", "must be [lo, hi] with lo < hi");
    p.grid_lo = (*range)[0];
    p.grid_hi = (*range)[1];
  }
  if (p.grid_points == 0) throw ConfigError("protocol.grid_points", "must be >= 1");
  if (p.classifier_seeds == 0) throw ConfigError("protocol.classifier_seeds", "must be >= 1");
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  detail::FieldReader r(j, "");
  detail::read_mode(r, rc.mode);
  if (const json* seed = r.get("seed")) rc.training.seed = detail::FieldReader::convert<std::uint64_t>(*seed, "seed");
  rc.training.mode = rc.mode;
  rc.network.mode = rc.mode;
  rc.dataset.glyph.mode = rc.mode;
  if (const json* v = r.get("dataset")) detail::parse_dataset(*v, rc);
  if (const json* v = r.get("network")) detail::parse_network(*v, rc);
  if (const json* v = r.get("training")) detail::parse_training(*v, rc);
  if (const json* v = r.get("editing")) detail::parse_editing(*v, rc);
  if (const json* v = r.get("protocol")) detail::parse_protocol(*v, rc);
  r.finish();
  rc.training.mode = rc.mode;
  rc.network.mode = rc.mode;
  return rc;
}

inline RunConfig parse_run_config_text(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str());
}

// Serialization mirrors the parser, so parse(to_json(c)) reproduces c.

inline json to_json(const NetworkSpec& n) {
  json j{{"image_dim", n.image_dim},
         {"target_dim", n.target_dim},
         {"latent_dim", n.latent_dim},
         {"mode", to_string(n.mode)},
         {"encoder_hidden", n.encoder_hidden},
         {"decoder_hidden", n.decoder_hidden},
         {"discriminator_hidden", n.discriminator_hidden},
         {"dropout", n.dropout},
         {"activation", to_string(n.activation)},
         {"image_range", to_string(n.image_range)}};
  j["feature_layer"] = n.feature_layer ? json(*n.feature_layer) : json(nullptr);
  return j;
}

inline NetworkSpec network_spec_from_json(const json& j) {
  RunConfig rc;
  detail::FieldReader r(j, "network");
  std::size_t image_dim = 0, target_dim = 0;
  r.read("image_dim", image_dim);
  r.read("target_dim", target_dim);
  detail::read_mode(r, rc.network.mode);
  json rest = j;
  for (const char* k : {"image_dim", "target_dim", "mode"}) rest.erase(k);
  const LabelMode mode = rc.network.mode;
  detail::parse_network(rest, rc);
  rc.network.image_dim = image_dim;
  rc.network.target_dim = target_dim;
  rc.network.mode = mode;
  rc.network.validate();
  return rc.network;
}

inline json training_to_json(const TrainConfig& t) {
  json j{{"decorrelation", to_string(t.decorrelation)},
         {"lambda_rec", t.weights.lambda_rec},
         {"lambda_dcorr", t.weights.lambda_dcorr_target},
         {"lambda_adv", t.weights.lambda_adv},
         {"warmup_iterations", t.weights.warmup_iterations},
         {"learning_rate", t.learning_rate},
         {"batch_size", t.batch_size},
         {"pretrain_epochs", t.pretrain_epochs},
         {"pretrain_patience", t.pretrain_patience},
         {"joint_iterations", t.joint_iterations},
         {"rmsprop_decay", t.rmsprop_decay},
         {"rmsprop_epsilon", t.rmsprop_epsilon},
         {"ablation", to_string(t.ablation)},
         {"generator_loss", to_string(t.generator_loss)},
         {"checkpoint_interval", t.checkpoint_interval}};
  j["pretrain_learning_rate"] = t.pretrain_learning_rate ? json(*t.pretrain_learning_rate) : json(nullptr);
  return j;
}

inline json to_json(const RunConfig& rc) {
  json dataset;
  if (rc.dataset.kind == DatasetKind::glyph) {
    const GlyphConfig& g = rc.dataset.glyph;
    dataset = {{"kind", "glyph"},
               {"side", g.side},
               {"shapes", g.shapes},
               {"thickness", g.thickness},
               {"slant", g.slant},
               {"scale", g.scale},
               {"offset", g.offset},
               {"train_count", g.train_count},
               {"validation_count", g.validation_count},
               {"test_count", g.test_count},
               {"noise", g.noise},
               {"seed", g.seed},
               {"thick_min_thickness", g.thick_min_thickness},
               {"slanted_min_abs_slant", g.slanted_min_abs_slant},
               {"large_min_scale", g.large_min_scale}};
  } else {
    const IdxSource& s = rc.dataset.idx;
    dataset = {{"kind", "idx"},
               {"images", s.images.string()},
               {"labels", s.labels.string()},
               {"train_count", s.train_count},
               {"validation_count", s.validation_count},
               {"test_count", s.test_count},
               {"split_seed", s.split_seed}};
    dataset["num_classes"] = s.num_classes ? json(*s.num_classes) : json(nullptr);
  }
  json network = to_json(rc.network);
  for (const char* k : {"image_dim", "target_dim", "mode"}) network.erase(k);
  return {{"mode", to_string(rc.mode)},
          {"seed", rc.training.seed},
          {"dataset", dataset},
          {"network", network},
          {"training", training_to_json(rc.training)},
          {"editing", {{"interval", {rc.edit_interval.lo, rc.edit_interval.hi}}}},
          {"protocol",
           {{"attributes", rc.protocol.attributes},
            {"grid", {rc.protocol.grid_lo, rc.protocol.grid_hi}},
            {"grid_points", rc.protocol.grid_points},
            {"classifier_seeds", rc.protocol.classifier_seeds}}}};
}

/// Loads or generates the configured data and returns the three splits.
inline DatasetSplits load_splits(const DatasetConfig& cfg, LabelMode mode) {
  if (cfg.kind == DatasetKind::glyph) {
    GlyphConfig g = cfg.glyph;
    g.mode = mode;
    return generate_glyph_splits(g);
  }
  const Dataset pool = load_idx(cfg.idx.images, cfg.idx.labels, cfg.idx.num_classes);
  if (pool.mode != mode) throw ConfigError("mode", "does not match the label file of the idx dataset");
  return split_dataset(pool, cfg.idx.train_count, cfg.idx.validation_count, cfg.idx.test_count, cfg.idx.split_seed);
}

/// Network spec with data-dependent extents filled in.
inline NetworkSpec resolve_network(const RunConfig& rc, const Dataset& train) {
  NetworkSpec spec = rc.network;
  spec.image_dim = train.images.cols();
  spec.target_dim = train.labels.cols();
  spec.mode = rc.mode;
  spec.image_range = train.range.lo < 0.0 ? ImageRange::symmetric : ImageRange::unit;
  spec.validate();
  return spec;
}

}  // namespace cdnet
