#pragma once

// Command-line front end: train, eval, edit, protocol, export, serve.
// Exit codes: 0 ok, 1 runtime failure, 2 malformed config or arguments,
// 3 missing checkpoint, 4 output directory locked by another run.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cdnet/checkpoint.hpp"
#include "cdnet/config.hpp"
#include "cdnet/evaluation.hpp"
#include "cdnet/manipulation.hpp"
#include "cdnet/service.hpp"
#include "cdnet/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace cdnet {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int bad_config = 2;
inline constexpr int missing_checkpoint = 3;
inline constexpr int locked = 4;
}  // namespace exit_code

class LockHeld : public Error {
 public:
  using Error::Error;
};

class MissingCheckpoint : public Error {
 public:
  using Error::Error;
};

/// Exclusive lock file inside a directory, removed on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".cdnet.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw LockHeld("output directory " + dir.string() + " is locked (" + path_.string() + " exists)");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
};

/// Binary PGM of images laid out in a grid, each pixel upscaled `zoom` times.
inline void write_pgm_grid(const std::filesystem::path& path, const std::vector<Tensor>& images, ImageShape shape,
                           ValueRange range, std::size_t columns, std::size_t zoom = 4) {
  if (images.empty()) throw Error("write_pgm_grid: no images");
  columns = std::max<std::size_t>(1, std::min(columns, images.size()));
  const std::size_t rows = (images.size() + columns - 1) / columns;
  const std::size_t pad = 1;
  const std::size_t cell_w = shape.width * zoom + pad, cell_h = shape.height * zoom + pad;
  const std::size_t w = columns * cell_w + pad, h = rows * cell_h + pad;
  std::vector<std::uint8_t> px(w * h, 128);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != shape.pixels()) throw ShapeError("write_pgm_grid: image size mismatch");
    const std::size_t ox = pad + (i % columns) * cell_w, oy = pad + (i / columns) * cell_h;
    for (std::size_t r = 0; r < shape.height * zoom; ++r)
      for (std::size_t c = 0; c < shape.width * zoom; ++c)
        px[(oy + r) * w + ox + c] = detail::quantize(images[i][(r / zoom) * shape.width + c / zoom], range);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

namespace detail {

inline Checkpoint open_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingCheckpoint("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

inline const Dataset& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  if (name == "test") return s.test;
  throw ConfigError("--split", "must be train, validation or test");
}

inline std::size_t resolve_attribute(const std::vector<std::string>& names, const std::string& key) {
  auto it = std::find(names.begin(), names.end(), key);
  if (it != names.end()) return static_cast<std::size_t>(it - names.begin());
  try {
    std::size_t used = 0;
    const std::size_t idx = std::stoul(key, &used);
    if (used == key.size() && idx < names.size()) return idx;
  } catch (const std::exception&) {
  }
  throw ConfigError("--attribute", "unknown attribute '" + key + "'");
}

/// "lo:hi:count" -> evenly spaced grid.
inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() != 3) throw ConfigError("--grid", "expected lo:hi:count");
  try {
    const double lo = std::stod(parts[0]), hi = std::stod(parts[1]);
    const long count = std::stol(parts[2]);
    if (count < 1) throw ConfigError("--grid", "count must be >= 1");
    return linear_grid(lo, hi, static_cast<std::size_t>(count));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("--grid", std::string("malformed: ") + e.what());
  }
}

/// "name=value" or "index=value".
inline AttributeEdit parse_set(const std::string& spec, const std::vector<std::string>& names) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("--set", "expected attribute=value, got '" + spec + "'");
  AttributeEdit e;
  e.index = resolve_attribute(names, spec.substr(0, eq));
  try {
    e.value = std::stod(spec.substr(eq + 1));
  } catch (const std::exception&) {
    throw ConfigError("--set", "malformed value in '" + spec + "'");
  }
  return e;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

struct TrainArgs {
  std::string config, out = "run";
  std::optional<std::uint64_t> seed;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  if (a.seed) rc.training.seed = *a.seed;
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  DirectoryLock lock(dir);

  const DatasetSplits splits = load_splits(rc.dataset, rc.mode);
  const NetworkSpec spec = resolve_network(rc, splits.train);
  write_json_file(dir / "config.json", to_json(rc));

  auto make_checkpoint = [&](const ModelParams& params, std::size_t iteration) {
    Checkpoint ck;
    ck.config = rc;
    ck.spec = spec;
    ck.params = params;
    ck.label_names = splits.train.label_names;
    ck.image_shape = splits.train.image_shape;
    ck.range = splits.train.range;
    ck.iteration = iteration;
    return ck;
  };
  const CheckpointCallback periodic = [&](const ModelParams& params, std::size_t iteration) {
    save_checkpoint(dir / ("checkpoint-" + std::to_string(iteration) + ".bin"), make_checkpoint(params, iteration));
  };

  Model model{spec, initialize_params(spec, derive_seed(rc.training.seed, {hash_name("init")}))};
  const TrainLog pre = pretrain_enc_y(rc.training, splits.train, splits.validation, model);
  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  pre.write_jsonl(log);
  try {
    const TrainLog joint = train_joint(rc.training, splits.train, model, periodic);
    joint.write_jsonl(log);
  } catch (const TrainingAborted& e) {
    save_checkpoint(dir / "checkpoint-last-good.bin", make_checkpoint(e.last_good(), e.diagnostic().iteration));
    log << to_json(e.diagnostic()).dump() << '\n';
    throw;
  }
  const auto final_path = dir / "checkpoint.bin";
  save_checkpoint(final_path, make_checkpoint(model.params, rc.training.joint_iterations));
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", checkpoint_checksum(final_path));
  out << nlohmann::json{{"kind", "train"},
                        {"checkpoint", final_path.string()},
                        {"crc32", crc},
                        {"validation_accuracy", classification_accuracy(model, splits.validation)}}
             .dump()
      << '\n';
  return exit_code::ok;
}

struct EvalArgs {
  std::string checkpoint, split = "validation", grid;
  std::size_t grid_count = 16;
};

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const DatasetSplits splits = load_splits(ck.config.dataset, ck.config.mode);
  const Dataset& ds = pick_split(splits, a.split);
  const Model model = ck.model();
  const Tensor x_hat = reconstruct(model, ds.images);
  nlohmann::json j = to_json(image_metrics(ds.images, x_hat, ds.image_shape, ds.range.width()));
  j["split"] = a.split;
  j["classification_accuracy"] = classification_accuracy(model, ds);
  const Tensor y_hat = encode_y(model, ds.images), z = encode_z(model, ds.images);
  j["dcov2"] = dcov2(y_hat, z);
  j["dcorr"] = dcorr(y_hat, z);
  out << j.dump() << '\n';
  if (!a.grid.empty()) {
    std::vector<Tensor> cells;
    const std::size_t n = std::min(a.grid_count, ds.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx[] = {i};
      cells.push_back(ds.images.gather_rows(idx));
      cells.push_back(x_hat.gather_rows(idx));
    }
    write_pgm_grid(a.grid, cells, ds.image_shape, ds.range, 2);
  }
  return exit_code::ok;
}

struct EditArgs {
  std::string checkpoint, split = "test", out = "edit.pgm", sweep;
  std::size_t index = 0;
  std::vector<std::string> sets;
  std::optional<std::size_t> target_class;
};

inline int run_edit(const EditArgs& a, std::ostream& out) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const DatasetSplits splits = load_splits(ck.config.dataset, ck.config.mode);
  const Dataset& ds = pick_split(splits, a.split);
  if (a.index >= ds.size()) throw ConfigError("--index", "out of range for split '" + a.split + "'");
  const std::size_t row[] = {a.index};
  const Tensor x = ds.images.gather_rows(row);
  const Model model = ck.model();

  std::vector<EditRequest> requests;
  std::vector<double> sweep_values;
  if (!a.sweep.empty()) {
    // attribute:lo:hi:count
    const auto colon = a.sweep.find(':');
    if (colon == std::string::npos) throw ConfigError("--sweep", "expected attribute:lo:hi:count");
    const std::size_t attr = resolve_attribute(ck.label_names, a.sweep.substr(0, colon));
    sweep_values = parse_grid(a.sweep.substr(colon + 1));
    for (double v : sweep_values) requests.push_back({ck.spec.mode, 0, {{attr, v}}});
  } else {
    EditRequest r;
    r.mode = ck.spec.mode;
    if (r.mode == LabelMode::multiclass) {
      if (!a.target_class) throw ConfigError("--target-class", "required for multiclass models");
      r.target_class = *a.target_class;
    } else {
      for (const auto& s : a.sets) r.edits.push_back(parse_set(s, ck.label_names));
    }
    requests.push_back(r);
  }

  std::vector<Tensor> cells{x, reconstruct(model, x)};
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : requests) {
    const Synthesis s = synthesize(model, x, r, ck.config.edit_interval);
    cells.push_back(s.x_edit);
    double mean = 0.0;
    for (double v : s.x_edit.values()) mean += v / static_cast<double>(s.x_edit.size());
    records.push_back({{"y_hat", s.y_hat.storage()}, {"y_hat_edited", s.y_hat_edited.storage()}, {"mean_intensity", mean}});
  }
  write_pgm_grid(a.out, cells, ck.image_shape, ck.range, cells.size());
  out << nlohmann::json{{"kind", "edit"}, {"grid", a.out}, {"index", a.index}, {"split", a.split}, {"results", records}}.dump()
      << '\n';
  return exit_code::ok;
}

struct ProtocolArgs {
  std::string checkpoint, grid;
  std::vector<std::string> attributes;
  std::optional<std::size_t> seeds;
  std::optional<std::uint64_t> seed;
};

inline int run_protocol(const ProtocolArgs& a, std::ostream& out) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const ProtocolConfig& pc = ck.config.protocol;
  const DatasetSplits splits = load_splits(ck.config.dataset, ck.config.mode);
  const std::vector<double> grid = a.grid.empty() ? linear_grid(pc.grid_lo, pc.grid_hi, pc.grid_points) : parse_grid(a.grid);
  ProtocolOptions opt;
  opt.classifier_seeds = a.seeds.value_or(pc.classifier_seeds);
  opt.interval = ck.config.edit_interval;
  const auto& names = a.attributes.empty() ? pc.attributes : a.attributes;
  const Model model = ck.model();
  for (const auto& name : names) {
    const std::size_t attr = resolve_attribute(ck.label_names, name);
    const ProtocolResult r =
        disentanglement_protocol(model, splits.train, splits.test, attr, grid, a.seed.value_or(ck.config.training.seed), opt);
    nlohmann::json j = to_json(r);
    if (grid.size() >= 2) j["spearman"] = spearman(r.intensities, r.error_rates);
    out << j.dump() << '\n';
  }
  return exit_code::ok;
}

struct ExportArgs {
  std::string config, out = "export";
};

/// Writes every split as IDX image/label files plus a factor metadata sidecar.
inline int run_export(const ExportArgs& a, std::ostream& out) {
  const RunConfig rc = load_run_config(a.config);
  if (rc.dataset.kind != DatasetKind::glyph) throw ConfigError("dataset.kind", "export needs a glyph dataset");
  GlyphConfig g = rc.dataset.glyph;
  g.mode = rc.mode;
  const DatasetSplits splits = generate_glyph_splits(g);
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  nlohmann::json meta{{"label_names", splits.train.label_names},
                      {"mode", to_string(rc.mode)},
                      {"side", g.side},
                      {"shapes", g.shapes},
                      {"thresholds",
                       {{"thick_min_thickness", g.thick_min_thickness},
                        {"slanted_min_abs_slant", g.slanted_min_abs_slant},
                        {"large_min_scale", g.large_min_scale}}},
                      {"seed", g.seed},
                      {"noise", g.noise}};
  for (const auto& [name, ds] : {std::pair<const char*, const Dataset*>{"train", &splits.train},
                                 {"validation", &splits.validation},
                                 {"test", &splits.test}}) {
    write_idx_images(dir / (std::string(name) + "-images.idx"), *ds);
    write_idx_labels(dir / (std::string(name) + "-labels.idx"), *ds);
    nlohmann::json factors = nlohmann::json::array();
    for (std::size_t i = 0; i < ds->factors.size(); ++i) {
      const auto& f = ds->factors[i];
      factors.push_back({{"source_index", ds->source_indices[i]},
                         {"shape", g.shapes[f.shape]},
                         {"thickness", f.thickness},
                         {"slant", f.slant},
                         {"scale", f.scale},
                         {"offset_x", f.offset_x},
                         {"offset_y", f.offset_y},
                         {"noise_key", f.noise_key}});
    }
    meta["splits"][name] = factors;
  }
  write_json_file(dir / "factors.json", meta);
  out << nlohmann::json{{"kind", "export"}, {"directory", dir.string()}}.dump() << '\n';
  return exit_code::ok;
}

struct ServeArgs {
  std::string checkpoint, host = "127.0.0.1";
  int port = 8080;
};

inline int run_serve(const ServeArgs& a, std::ostream& out) {
  InferenceService service(open_checkpoint(a.checkpoint));
  httplib::Server server;
  mount(server, service);
  out << "serving " << a.checkpoint << " on http://" << a.host << ":" << a.port << std::endl;
  if (!server.listen(a.host, a.port)) throw Error("cannot bind " + a.host + ":" + std::to_string(a.port));
  return exit_code::ok;
}

}  // namespace detail

inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cdnet: controllable disentanglement workbench"};
  app.require_subcommand(1);

  detail::TrainArgs train;
  auto* t = app.add_subcommand("train", "pretrain the target encoder, then train jointly");
  t->add_option("--config", train.config, "JSON run configuration")->required();
  t->add_option("--out", train.out, "output directory");
  t->add_option("--seed", train.seed, "override the master seed");

  detail::EvalArgs eval;
  auto* e = app.add_subcommand("eval", "reconstruction metrics of a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--split", eval.split);
  e->add_option("--grid", eval.grid, "write input/reconstruction pairs as a PGM grid");
  e->add_option("--grid-count", eval.grid_count);

  detail::EditArgs edit;
  auto* d = app.add_subcommand("edit", "edit the soft target of one image");
  d->add_option("--checkpoint", edit.checkpoint)->required();
  d->add_option("--split", edit.split);
  d->add_option("--index", edit.index, "image index within the split");
  d->add_option("--set", edit.sets, "attribute=value (multilabel, repeatable)");
  d->add_option("--target-class", edit.target_class, "class to swap in (multiclass)");
  d->add_option("--sweep", edit.sweep, "attribute:lo:hi:count intensity sweep");
  d->add_option("--out", edit.out, "PGM grid: input, reconstruction, edits");

  detail::ProtocolArgs protocol;
  auto* p = app.add_subcommand("protocol", "classifier-based disentanglement scores");
  p->add_option("--checkpoint", protocol.checkpoint)->required();
  p->add_option("--attribute", protocol.attributes, "attribute name or index (repeatable)");
  p->add_option("--grid", protocol.grid, "lo:hi:count");
  p->add_option("--classifier-seeds", protocol.seeds);
  p->add_option("--seed", protocol.seed);

  detail::ExportArgs exp;
  auto* x = app.add_subcommand("export", "write the glyph dataset as IDX files with factor metadata");
  x->add_option("--config", exp.config)->required();
  x->add_option("--out", exp.out);

  detail::ServeArgs serve;
  auto* s = app.add_subcommand("serve", "HTTP inference service");
  s->add_option("--checkpoint", serve.checkpoint)->required();
  s->add_option("--host", serve.host);
  s->add_option("--port", serve.port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return exit_code::ok;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code::bad_config;
  }

  try {
    if (t->parsed()) return detail::run_train(train, out);
    if (e->parsed()) return detail::run_eval(eval, out);
    if (d->parsed()) return detail::run_edit(edit, out);
    if (p->parsed()) return detail::run_protocol(protocol, out);
    if (x->parsed()) return detail::run_export(exp, out);
    if (s->parsed()) return detail::run_serve(serve, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return exit_code::bad_config;
  } catch (const MissingCheckpoint& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code::missing_checkpoint;
  } catch (const LockHeld& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code::locked;
  } catch (const EditRangeError& ex) {
    err << "edit error: " << ex.what() << '\n';
    return exit_code::bad_config;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code::failure;
  }
  return exit_code::failure;
}

}  // namespace cdnet
