#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "packptq/error.hpp"
#include "packptq/rng.hpp"
#include "packptq/tensor.hpp"

namespace packptq {

/// Which synthetic distribution to draw from. `dim` is the flat feature count;
/// with `image` set the features are laid out as [1, s, s] (dim must be s*s).
struct DatasetSpec {
  std::string kind = "two-moons-10class";
  std::size_t classes = 10;
  std::size_t dim = 2;
  bool image = false;

  static DatasetSpec defaults_for(const std::string& kind) {
    if (kind == "gaussian-blobs") return {kind, 4, 2, false};
    if (kind == "concentric-rings") return {kind, 3, 2, false};
    if (kind == "two-moons-10class") return {kind, 10, 2, false};
    throw ConfigError("unknown dataset kind '" + kind +
                      "'; expected gaussian-blobs, concentric-rings or two-moons-10class");
  }

  Shape input_shape() const {
    if (!image) return Shape{dim};
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dim))));
    return Shape{1, side, side};
  }
};

struct LabeledSet {
  Tensor inputs;  // [N, ...input_shape]
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }

  LabeledSet subset(std::span<const std::size_t> rows) const {
    LabeledSet out;
    out.inputs = inputs.take_rows(rows);
    for (std::size_t r : rows) out.labels.push_back(labels.at(r));
    return out;
  }

  LabeledSet head(std::size_t count) const {
    LabeledSet out;
    out.inputs = inputs.rows(0, count);
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
    return out;
  }
};

/// A calibration split and a disjoint held-out test split drawn from one seed.
struct Dataset {
  DatasetSpec spec;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  LabeledSet calibration;
  LabeledSet test;
};

namespace detail {

inline void validate_spec(const DatasetSpec& spec) {
  (void)DatasetSpec::defaults_for(spec.kind);
  if (spec.classes < 2) throw ConfigError("dataset: need at least 2 classes");
  if (spec.dim == 0) throw ConfigError("dataset: dim must be positive");
  if ((spec.kind == "concentric-rings" || spec.kind == "two-moons-10class") && spec.dim != 2) {
    throw ConfigError("dataset: " + spec.kind + " is two-dimensional");
  }
  if (spec.kind == "two-moons-10class" && spec.classes != 10) {
    throw ConfigError("dataset: two-moons-10class has exactly 10 classes");
  }
  if (spec.image) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(spec.dim))));
    if (side * side != spec.dim) throw ConfigError("dataset: image layout needs a square dim");
  }
}

// Class centres are a property of the distribution, not of the draw, so they
// come from a fixed stream shared by every seed.
inline std::vector<double> blob_centres(const DatasetSpec& spec) {
  Rng rng(0xB10B5ULL + 131 * spec.classes + spec.dim);
  std::vector<double> c(spec.classes * spec.dim);
  for (double& v : c) v = rng.uniform(-3.0, 3.0);
  return c;
}

inline void draw_sample(const DatasetSpec& spec, int label, const std::vector<double>& centres, Rng& rng,
                        double* out) {
  constexpr double pi = std::numbers::pi;
  if (spec.kind == "gaussian-blobs") {
    for (std::size_t d = 0; d < spec.dim; ++d) {
      out[d] = centres[static_cast<std::size_t>(label) * spec.dim + d] + 0.6 * rng.normal();
    }
  } else if (spec.kind == "concentric-rings") {
    const double radius = 1.0 + static_cast<double>(label) + 0.12 * rng.normal();
    const double theta = rng.uniform(0.0, 2.0 * pi);
    out[0] = radius * std::cos(theta);
    out[1] = radius * std::sin(theta);
  } else {
    // Five interleaved moon pairs spread around a circle of radius 4.
    const int pair = label / 2;
    const bool lower = label % 2 == 1;
    const double theta = rng.uniform(0.0, pi);
    double x = lower ? 1.0 - std::cos(theta) : std::cos(theta);
    double y = lower ? 0.5 - std::sin(theta) : std::sin(theta);
    x -= 0.5;
    y -= 0.25;
    const double phi = 2.0 * pi * pair / 5.0;
    out[0] = 4.0 * std::cos(phi) + x + 0.1 * rng.normal();
    out[1] = 4.0 * std::sin(phi) + y + 0.1 * rng.normal();
  }
}

inline LabeledSet draw_split(const DatasetSpec& spec, std::size_t n, Rng rng) {
  const auto centres = spec.kind == "gaussian-blobs" ? blob_centres(spec) : std::vector<double>{};
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.classes);
  rng.shuffle(labels.begin(), labels.end());
  Shape shape{n};
  const Shape in = spec.input_shape();
  shape.insert(shape.end(), in.begin(), in.end());
  LabeledSet set;
  set.inputs = Tensor(shape, 0.0);
  for (std::size_t i = 0; i < n; ++i) draw_sample(spec, labels[i], centres, rng, set.inputs.data().data() + i * spec.dim);
  set.labels = std::move(labels);
  return set;
}

}  // namespace detail

/// Balanced calibration split of `n` samples plus a test split of `test_n`
/// (default `n`). Deterministic in (spec, n, seed).
inline Dataset generate_dataset(const DatasetSpec& spec, std::size_t n, std::uint64_t seed, std::size_t test_n = 0) {
  detail::validate_spec(spec);
  if (n < 64) throw ConfigError("generate_dataset: N must be at least 64, got " + std::to_string(n));
  Dataset ds;
  ds.spec = spec;
  ds.n = n;
  ds.seed = seed;
  ds.calibration = detail::draw_split(spec, n, Rng::derive(seed, 1));
  ds.test = detail::draw_split(spec, test_n ? test_n : n, Rng::derive(seed, 2));
  return ds;
}

inline std::vector<std::size_t> class_counts(const LabeledSet& set, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (int y : set.labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

}  // namespace packptq
