#pragma once

// Datasets: IDX (MNIST container) ingestion and export, a procedural glyph
// dataset with known generative factors, splits, and seeded minibatching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdnet/error.hpp"
#include "cdnet/losses.hpp"
#include "cdnet/random.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pixels() const noexcept { return height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;
  double width() const noexcept { return hi - lo; }
  friend bool operator==(const ValueRange&, const ValueRange&) = default;
};

struct GlyphFactors {
  std::size_t shape = 0;
  int thickness = 1;
  int slant = 0;
  double scale = 1.0;
  int offset_x = 0;
  int offset_y = 0;
  std::uint64_t noise_key = 0;
};

struct Dataset {
  Tensor images;  // count x M, within `range`
  Tensor labels;  // count x C, one-hot or binary
  LabelMode mode = LabelMode::multiclass;
  ImageShape image_shape;
  ValueRange range;
  std::vector<std::string> label_names;
  std::vector<GlyphFactors> factors;        // synthetic data only
  std::vector<std::size_t> source_indices;  // position in the generated/loaded pool

  std::size_t size() const noexcept { return images.rows(); }

  std::optional<std::size_t> label_index(std::string_view name) const {
    auto it = std::find(label_names.begin(), label_names.end(), name);
    if (it == label_names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - label_names.begin());
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw Error("empty dataset subset");
    Dataset out;
    out.images = images.gather_rows(indices);
    out.labels = labels.gather_rows(indices);
    out.mode = mode;
    out.image_shape = image_shape;
    out.range = range;
    out.label_names = label_names;
    for (std::size_t i : indices) {
      if (!factors.empty()) out.factors.push_back(factors[i]);
      out.source_indices.push_back(source_indices.empty() ? i : source_indices[i]);
    }
    return out;
  }
};

struct DatasetSplits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Splits a pool into consecutive train/validation/test blocks after a seeded shuffle.
inline DatasetSplits split_dataset(const Dataset& pool, std::size_t train, std::size_t validation, std::size_t test,
                                   std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  if (train + validation + test > pool.size()) {
    throw Error("split sizes exceed dataset size " + std::to_string(pool.size()));
  }
  if (train == 0 || validation == 0 || test == 0) throw Error("every split needs at least one sample");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  auto block = [&](std::size_t begin, std::size_t n) {
    return pool.subset(std::span<const std::size_t>(order).subspan(begin, n));
  };
  return {block(0, train), block(train, validation), block(train + validation, test)};
}

// ---------------------------------------------------------------------------
// Glyphs

struct GlyphConfig {
  std::size_t side = 16;
  std::vector<std::string> shapes{"bar", "box", "cross", "diagonal"};
  std::vector<int> thickness{1, 2, 3};
  std::vector<int> slant{-2, -1, 0, 1, 2};
  std::vector<double> scale{0.6, 0.8, 1.0};
  std::vector<int> offset{-1, 0, 1};
  std::size_t train_count = 3000;
  std::size_t validation_count = 500;
  std::size_t test_count = 500;
  double noise = 0.0;
  std::uint64_t seed = 1;
  LabelMode mode = LabelMode::multiclass;
  // Binarization of style factors into multilabel attributes.
  int thick_min_thickness = 2;
  int slanted_min_abs_slant = 2;
  double large_min_scale = 0.8;

  std::size_t total() const noexcept { return train_count + validation_count + test_count; }

  void validate() const {
    if (side < 8) throw ConfigError("dataset.side", "must be >= 8");
    static const std::array<std::string_view, 4> known{"bar", "box", "cross", "diagonal"};
    if (shapes.empty()) throw ConfigError("dataset.shapes", "must not be empty");
    for (const auto& s : shapes)
      if (std::find(known.begin(), known.end(), s) == known.end())
        throw ConfigError("dataset.shapes", "unknown shape '" + s + "'");
    if (thickness.empty()) throw ConfigError("dataset.thickness", "must not be empty");
    for (int t : thickness)
      if (t < 1) throw ConfigError("dataset.thickness", "values must be >= 1");
    if (slant.empty()) throw ConfigError("dataset.slant", "must not be empty");
    if (scale.empty()) throw ConfigError("dataset.scale", "must not be empty");
    for (double s : scale)
      if (!(s > 0.0)) throw ConfigError("dataset.scale", "values must be positive");
    if (offset.empty()) throw ConfigError("dataset.offset", "must not be empty");
    if (total() == 0) throw ConfigError("dataset", "needs at least one sample");
    if (!(noise >= 0.0)) throw ConfigError("dataset.noise", "must be >= 0");
  }

  std::vector<std::string> label_names() const {
    std::vector<std::string> names = shapes;
    if (mode == LabelMode::multilabel) {
      names.insert(names.end(), {"thick", "slanted", "large"});
    }
    return names;
  }
};

namespace detail {

struct Segment {
  double x0, y0, x1, y1;
};

inline std::vector<Segment> shape_segments(std::string_view shape) {
  // Unit square [-1, 1]^2, y pointing down.
  if (shape == "bar") return {{0, -1, 0, 1}};
  if (shape == "box") return {{-1, -1, 1, -1}, {1, -1, 1, 1}, {1, 1, -1, 1}, {-1, 1, -1, -1}};
  if (shape == "cross") return {{0, -1, 0, 1}, {-1, 0, 1, 0}};
  if (shape == "diagonal") return {{-1, 1, 1, -1}};
  throw Error("unknown glyph shape '" + std::string(shape) + "'");
}

inline double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (s.x0 + t * dx), ey = py - (s.y0 + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Rasterizes one glyph. Pure function of (factors, config); intensity is an
/// antialiased stroke coverage, clamp(thickness/2 + 1/2 - distance, 0, 1).
inline std::vector<double> render_glyph(const GlyphFactors& f, const GlyphConfig& config) {
  const std::size_t side = config.side;
  const double centre = static_cast<double>(side / 2);
  const double half_extent = f.scale * 0.3 * static_cast<double>(side);
  std::vector<detail::Segment> segs;
  for (auto s : detail::shape_segments(config.shapes.at(f.shape))) {
    // Shear displaces the top of the glyph by +slant pixels and the bottom by -slant.
    auto map = [&](double u, double v, double& x, double& y) {
      x = centre + f.offset_x + half_extent * u - f.slant * v;
      y = centre + f.offset_y + half_extent * v;
    };
    detail::Segment out{};
    map(s.x0, s.y0, out.x0, out.y0);
    map(s.x1, s.y1, out.x1, out.y1);
    segs.push_back(out);
  }
  const double radius = 0.5 * f.thickness;
  std::vector<double> pixels(side * side, 0.0);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      double best = 1e300;
      for (const auto& s : segs) best = std::min(best, detail::segment_distance(double(c), double(r), s));
      pixels[r * side + c] = std::clamp(radius + 0.5 - best, 0.0, 1.0);
    }
  }
  if (config.noise > 0.0) {
    std::mt19937_64 rng(f.noise_key);
    std::normal_distribution<double> gauss(0.0, config.noise);
    for (double& p : pixels) p = std::clamp(p + gauss(rng), 0.0, 1.0);
  }
  return pixels;
}

inline std::vector<double> glyph_labels(const GlyphFactors& f, const GlyphConfig& config) {
  std::vector<double> labels(config.label_names().size(), 0.0);
  labels[f.shape] = 1.0;
  if (config.mode == LabelMode::multilabel) {
    const std::size_t base = config.shapes.size();
    labels[base + 0] = f.thickness >= config.thick_min_thickness ? 1.0 : 0.0;
    labels[base + 1] = std::abs(f.slant) >= config.slanted_min_abs_slant ? 1.0 : 0.0;
    labels[base + 2] = f.scale >= config.large_min_scale ? 1.0 : 0.0;
  }
  return labels;
}

/// Generates train_count + validation_count + test_count glyphs in one pool.
inline Dataset generate_glyphs(const GlyphConfig& config) {
  config.validate();
  const std::size_t n = config.total();
  const std::size_t m = config.side * config.side;
  const auto names = config.label_names();
  std::mt19937_64 rng(derive_seed(config.seed, {hash_name("glyphs")}));
  auto pick = [&rng](const auto& grid) { return grid[std::uniform_int_distribution<std::size_t>(0, grid.size() - 1)(rng)]; };

  Dataset ds;
  ds.mode = config.mode;
  ds.image_shape = {config.side, config.side};
  ds.range = {0.0, 1.0};
  ds.label_names = names;
  std::vector<double> images, labels;
  images.reserve(n * m);
  labels.reserve(n * names.size());
  for (std::size_t i = 0; i < n; ++i) {
    GlyphFactors f;
    f.shape = std::uniform_int_distribution<std::size_t>(0, config.shapes.size() - 1)(rng);
    f.thickness = pick(config.thickness);
    f.slant = pick(config.slant);
    f.scale = pick(config.scale);
    f.offset_x = pick(config.offset);
    f.offset_y = pick(config.offset);
    f.noise_key = derive_seed(config.seed, {hash_name("noise"), i});
    const auto px = render_glyph(f, config);
    images.insert(images.end(), px.begin(), px.end());
    const auto lb = glyph_labels(f, config);
    labels.insert(labels.end(), lb.begin(), lb.end());
    ds.factors.push_back(f);
    ds.source_indices.push_back(i);
  }
  ds.images = Tensor({n, m}, std::move(images));
  ds.labels = Tensor({n, names.size()}, std::move(labels));
  return ds;
}

inline DatasetSplits generate_glyph_splits(const GlyphConfig& config) {
  return split_dataset(generate_glyphs(config), config.train_count, config.validation_count, config.test_count);
}

// ---------------------------------------------------------------------------
// IDX container (big-endian header, unsigned byte payload)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
inline constexpr std::uint32_t kIdxLabelMatrixMagic = 0x00000802;

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, std::string_view what) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated IDX header reading " + std::string(what), bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::uint8_t quantize(double v, const ValueRange& range) {
  const double unit = (v - range.lo) / range.width();
  return static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Parses an IDX byte buffer whose magic must equal `expected_magic`.
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint32_t expected_magic) {
  const std::uint32_t magic = detail::read_be32(bytes, 0, "magic");
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08X, expected 0x%08X", magic, expected_magic);
    throw FormatError(buf, 0);
  }
  IdxArray arr;
  const std::size_t rank = magic & 0xFF;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::read_be32(bytes, 4 + 4 * i, "dimension " + std::to_string(i));
    if (d == 0) throw FormatError("IDX dimension " + std::to_string(i) + " is zero", 4 + 4 * i);
    arr.dims.push_back(d);
    payload *= d;
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header + payload) {
    throw FormatError("truncated IDX payload: expected " + std::to_string(payload) + " bytes, found " +
                          std::to_string(bytes.size() - header),
                      bytes.size());
  }
  arr.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(header + payload));
  return arr;
}

/// Loads an IDX image file (magic 0x803) and label file: 0x801 class indices
/// (one-hot encoded) or 0x802 binary attribute matrix (multilabel).
inline Dataset load_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                        std::optional<std::size_t> num_classes = std::nullopt) {
  const auto image_bytes = detail::read_file(image_path);
  const IdxArray images = parse_idx(image_bytes, kIdxImagesMagic);
  const auto label_bytes = detail::read_file(label_path);
  const std::uint32_t label_magic = detail::read_be32(label_bytes, 0, "label magic");
  if (label_magic != kIdxLabelsMagic && label_magic != kIdxLabelMatrixMagic) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "bad IDX label magic 0x%08X, expected 0x00000801 or 0x00000802", label_magic);
    throw FormatError(buf, 0);
  }
  const IdxArray labels = parse_idx(label_bytes, label_magic);
  const std::size_t count = images.dims[0];
  if (labels.dims[0] != count) {
    throw FormatError("label count " + std::to_string(labels.dims[0]) + " does not match image count " +
                          std::to_string(count),
                      4);
  }

  Dataset ds;
  ds.range = {0.0, 1.0};
  ds.image_shape = {images.dims[1], images.dims[2]};
  const std::size_t m = ds.image_shape.pixels();
  std::vector<double> px(images.bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(images.bytes[i]) / 255.0;
  ds.images = Tensor({count, m}, std::move(px));

  if (label_magic == kIdxLabelsMagic) {
    ds.mode = LabelMode::multiclass;
    const std::size_t max_label = *std::max_element(labels.bytes.begin(), labels.bytes.end());
    const std::size_t classes = num_classes.value_or(std::max<std::size_t>(10, max_label + 1));
    if (max_label >= classes) {
      throw FormatError("label value " + std::to_string(max_label) + " exceeds class count", 8);
    }
    Tensor onehot({count, classes}, 0.0);
    for (std::size_t i = 0; i < count; ++i) onehot(i, labels.bytes[i]) = 1.0;
    ds.labels = std::move(onehot);
    for (std::size_t c = 0; c < classes; ++c) ds.label_names.push_back(std::to_string(c));
  } else {
    ds.mode = LabelMode::multilabel;
    const std::size_t attrs = labels.dims[1];
    std::vector<double> lb(count * attrs);
    for (std::size_t i = 0; i < lb.size(); ++i) {
      if (labels.bytes[i] > 1) throw FormatError("multilabel entries must be 0 or 1", 12 + i);
      lb[i] = labels.bytes[i];
    }
    ds.labels = Tensor({count, attrs}, std::move(lb));
    for (std::size_t c = 0; c < attrs; ++c) ds.label_names.push_back("attr" + std::to_string(c));
  }
  ds.source_indices.resize(count);
  std::iota(ds.source_indices.begin(), ds.source_indices.end(), std::size_t{0});
  return ds;
}

/// Writes images quantized to bytes over the dataset's value range.
inline void write_idx_images(const std::filesystem::path& path, const Dataset& ds) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxImagesMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.image_shape.height));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.image_shape.width));
  for (double v : ds.images.values()) out.push_back(detail::quantize(v, ds.range));
  detail::write_file(path, out);
}

inline void write_idx_labels(const std::filesystem::path& path, const Dataset& ds) {
  std::vector<std::uint8_t> out;
  if (ds.mode == LabelMode::multiclass) {
    detail::put_be32(out, kIdxLabelsMagic);
    detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto row = ds.labels.row(r);
      out.push_back(static_cast<std::uint8_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  } else {
    detail::put_be32(out, kIdxLabelMatrixMagic);
    detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
    detail::put_be32(out, static_cast<std::uint32_t>(ds.labels.cols()));
    for (double v : ds.labels.values()) out.push_back(v > 0.5 ? 1 : 0);
  }
  detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Minibatches

/// Seeded permutation per epoch; the final short batch is dropped.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t dataset_size, std::size_t batch_size,
                                                         std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw Error("batch size must be >= 2");
  if (batch_size > dataset_size) {
    throw Error("batch size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(dataset_size));
  }
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {hash_name("epoch"), epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b + batch_size <= dataset_size; b += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(b + batch_size));
  }
  return batches;
}

}  // namespace cdnet
