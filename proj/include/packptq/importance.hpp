#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "packptq/autodiff.hpp"
#include "packptq/dataset.hpp"
#include "packptq/error.hpp"
#include "packptq/model.hpp"
#include "packptq/parallel.hpp"
#include "packptq/rng.hpp"

namespace packptq {

/// Maps a batch of block outputs [B, ...] to one loss value per row, [B].
using RowLoss = std::function<Var(Tape&, const Var& z)>;

/// One expansion point z (shape [1, ...]) with the loss surface around it.
struct ProbePoint {
  Tensor z;
  RowLoss loss;
};

struct PerturbationConfig {
  /// Noise standard deviation relative to RMS(z) of the block; ignored when
  /// `sigma` is set.
  double sigma_ratio = 0.01;
  std::optional<double> sigma;
  std::size_t num_samples = 2048;
  /// Calibration items the samples are spread over.
  std::size_t items = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (sigma && !(*sigma > 0.0)) throw ConfigError("perturbation: sigma must be positive");
    if (!sigma && !(sigma_ratio > 0.0)) throw ConfigError("perturbation: sigma_ratio must be positive");
    if (num_samples < 1) throw ConfigError("perturbation: num_samples must be >= 1");
    if (items < 1) throw ConfigError("perturbation: items must be >= 1");
  }
};

/// Monte-Carlo estimate of the mean Hessian diagonal of the loss with respect
/// to one block's output.
struct BlockScore {
  std::size_t block = 0;  // 0-based
  double score = 0.0;
  double numerator = 0.0;    // mean of 2 (L(z + dz) - L(z) - dz . g)
  double denominator = 0.0;  // mean of dz . dz
  double stderr_numerator = 0.0;
  double stderr_score = 0.0;  // delta-method standard error of the ratio
  std::size_t n = 0;          // dimension of z
  double sigma = 0.0;
  std::size_t samples = 0;

  friend bool operator==(const BlockScore&, const BlockScore&) = default;
};

using BlockScoreReport = std::vector<BlockScore>;

inline std::vector<double> scores_of(const BlockScoreReport& r) {
  std::vector<double> s;
  for (const auto& b : r) s.push_back(b.score);
  return s;
}

namespace detail {

struct PointGradient {
  double loss = 0.0;
  Tensor grad;
};

inline PointGradient loss_and_gradient(const ProbePoint& p) {
  Tape tape;
  const Var z = tape.param(p.z);
  const Var rows = p.loss(tape, z);
  tape.backward(ops::sum(rows));
  return {rows.value()[0], tape.grad(z)};
}

inline std::vector<double> row_losses(const ProbePoint& p, const Tensor& batch) {
  Tape tape;
  return p.loss(tape, tape.constant(batch)).value().values();
}

inline Tensor repeat_row(const Tensor& row, std::size_t count) {
  Shape s = row.shape();
  s[0] = count;
  Tensor out(s, 0.0);
  const std::size_t d = row.size();
  for (std::size_t i = 0; i < count; ++i) std::copy(row.data().begin(), row.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  return out;
}

}  // namespace detail

/// Importance score from Gaussian perturbations: `draws_per_point` i.i.d.
/// N(0, sigma^2) draws at every point, pooled over all points.
inline BlockScore estimate_score(std::span<const ProbePoint> points, double sigma, std::size_t draws_per_point,
                                 std::uint64_t seed, std::size_t chunk = 512) {
  if (points.empty()) throw ConfigError("estimate_score: no expansion points");
  if (!(sigma > 0.0)) throw ConfigError("estimate_score: sigma must be positive");
  if (draws_per_point == 0) throw ConfigError("estimate_score: need at least one draw per point");
  std::vector<double> num, den;
  num.reserve(points.size() * draws_per_point);
  den.reserve(points.size() * draws_per_point);
  const std::size_t dim = points.front().z.size();
  try {
    for (std::size_t pi = 0; pi < points.size(); ++pi) {
      const ProbePoint& p = points[pi];
      if (p.z.dim(0) != 1) throw ShapeError("estimate_score: expansion point must have a leading batch dim of 1");
      const auto [l0, g] = detail::loss_and_gradient(p);
      Rng rng = Rng::derive(seed, pi);
      for (std::size_t first = 0; first < draws_per_point; first += chunk) {
        const std::size_t count = std::min(chunk, draws_per_point - first);
        Tensor dz = detail::repeat_row(p.z, count);
        for (double& v : dz.data()) v = sigma * rng.normal();
        Tensor batch = detail::repeat_row(p.z, count);
        for (std::size_t i = 0; i < batch.size(); ++i) batch[i] += dz[i];
        const auto losses = detail::row_losses(p, batch);
        for (std::size_t r = 0; r < count; ++r) {
          double lin = 0.0, sq = 0.0;
          for (std::size_t j = 0; j < dim; ++j) {
            const double d = dz[r * dim + j];
            lin += d * g[j];
            sq += d * d;
          }
          const double v = 2.0 * (losses[r] - l0 - lin);
          if (!std::isfinite(v)) throw NumericalError("non-finite perturbed loss");
          if (!std::isfinite(sq)) throw NumericalError("non-finite perturbation energy");
          num.push_back(v);
          den.push_back(sq);
        }
      }
    }
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("estimate_score: ") + e.what() + " at sigma=" + std::to_string(sigma) +
                         "; sigma is likely too large for the local expansion");
  }
  const auto count = static_cast<double>(num.size());
  const double mnum = std::accumulate(num.begin(), num.end(), 0.0) / count;
  const double mden = std::accumulate(den.begin(), den.end(), 0.0) / count;
  if (mden < 1e-30) throw NumericalError("estimate_score: perturbation energy vanished (sigma too small)");
  const double score = mnum / mden;
  double vnum = 0.0, vratio = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    vnum += (num[i] - mnum) * (num[i] - mnum);
    const double r = (num[i] - score * den[i]) / mden;
    vratio += r * r;
  }
  const double denom = count > 1 ? count - 1 : 1;
  BlockScore out;
  out.score = score;
  out.numerator = mnum;
  out.denominator = mden;
  out.stderr_numerator = std::sqrt(vnum / denom / count);
  out.stderr_score = std::sqrt(vratio / denom / count);
  out.n = dim;
  out.sigma = sigma;
  out.samples = num.size();
  return out;
}

/// Mean diagonal of the Hessian, averaged over points, by second central differences.
inline double hessian_mean_fd(std::span<const ProbePoint> points, double h) {
  if (!(h > 0.0)) throw ConfigError("hessian_mean_fd: step must be positive");
  double total = 0.0;
  for (const ProbePoint& p : points) {
    const std::size_t d = p.z.size();
    Tensor batch = detail::repeat_row(p.z, 2 * d + 1);
    for (std::size_t i = 0; i < d; ++i) {
      batch[(2 * i) * d + i] += h;
      batch[(2 * i + 1) * d + i] -= h;
    }
    const auto l = detail::row_losses(p, batch);
    const double l0 = l[2 * d];
    double diag = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double second = (l[2 * i] - 2.0 * l0 + l[2 * i + 1]) / (h * h);
      if (!std::isfinite(second)) throw NumericalError("hessian_mean_fd: non-finite second difference");
      diag += second;
    }
    total += diag / static_cast<double>(d);
  }
  return total / static_cast<double>(points.size());
}

// ---------------------------------------------------------------------------
// Network-level entry points. Block indices are 0-based.

/// Task loss (per row) as a function of block `b`'s output, running blocks
/// b+1..n and the head of the full-precision network.
inline RowLoss downstream_loss(const Network& net, std::size_t b, std::vector<int> labels_per_row) {
  return [&net, b, labels = std::move(labels_per_row)](Tape& tape, const Var& z) {
    const Var out = head_forward(tape, net, run_blocks(tape, net, z, b + 1, net.block_count()));
    const std::size_t rows = z.shape()[0];
    if (labels.size() == 1 && rows != 1) {
      const std::vector<int> rep(rows, labels[0]);
      return ops::softmax_cross_entropy_rows(out, rep);
    }
    return ops::softmax_cross_entropy_rows(out, labels);
  };
}

inline void check_block_index(const Network& net, std::size_t b) {
  if (b >= net.block_count()) {
    throw ConfigError("block index " + std::to_string(b + 1) + " out of range 1.." + std::to_string(net.block_count()));
  }
}

/// L(z_b + dz) - L(z_b) for the batch-mean task loss; the baseline comes from the capture.
inline double block_quant_loss(const Network& net, const CaptureRecord& capture, std::span<const int> labels,
                               std::size_t b, const Tensor& dz) {
  check_block_index(net, b);
  const Tensor& z = capture.block_outputs.at(b);
  if (dz.shape() != z.shape()) {
    throw ShapeError("block_quant_loss: perturbation " + to_string(dz.shape()) + " vs block output " + to_string(z.shape()));
  }
  Tensor zp = z;
  for (std::size_t i = 0; i < zp.size(); ++i) zp[i] += dz[i];
  Tape tape;
  const Var logits = head_forward(tape, net, run_blocks(tape, net, tape.constant(zp), b + 1, net.block_count()));
  return ops::softmax_cross_entropy(logits, labels).value().item() - capture.loss;
}

/// d L / d z_b for the batch-mean task loss, by reverse mode through blocks b+1..n and the head.
inline Tensor block_output_gradient(const Network& net, const CaptureRecord& capture, std::span<const int> labels,
                                    std::size_t b) {
  check_block_index(net, b);
  Tape tape;
  const Var z = tape.param(capture.block_outputs.at(b));
  const Var logits = head_forward(tape, net, run_blocks(tape, net, z, b + 1, net.block_count()));
  tape.backward(ops::softmax_cross_entropy(logits, labels));
  return tape.grad(z);
}

/// Calibration rows used as expansion points, chosen by the config seed.
inline std::vector<std::size_t> probe_rows(const LabeledSet& calibration, const PerturbationConfig& cfg) {
  std::vector<std::size_t> idx(calibration.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng::derive(cfg.seed, 0x5C0E);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(cfg.items, idx.size()));
  return idx;
}

inline std::vector<ProbePoint> block_probe_points(const Network& net, const LabeledSet& calibration, std::size_t b,
                                                  const PerturbationConfig& cfg) {
  check_block_index(net, b);
  const auto rows = probe_rows(calibration, cfg);
  const LabeledSet items = calibration.subset(rows);
  const CaptureRecord cap = forward_capture(net, items.inputs, items.labels);
  std::vector<ProbePoint> points;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    points.push_back({cap.block_outputs[b].rows(i, 1), downstream_loss(net, b, {items.labels[i]})});
  }
  return points;
}

inline double rms(std::span<const ProbePoint> points) {
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& p : points) {
    for (double v : p.z.data()) ss += v * v;
    n += p.z.size();
  }
  return std::sqrt(ss / static_cast<double>(n));
}

inline BlockScore estimate_block_score(const Network& net, const LabeledSet& calibration, std::size_t b,
                                       const PerturbationConfig& cfg) {
  cfg.validate();
  const auto points = block_probe_points(net, calibration, b, cfg);
  double sigma = cfg.sigma ? *cfg.sigma : cfg.sigma_ratio * rms(points);
  if (!(sigma > 0.0)) sigma = cfg.sigma_ratio;  // all-zero block output
  const std::size_t draws = (cfg.num_samples + points.size() - 1) / points.size();
  BlockScore s = estimate_score(points, sigma, draws, cfg.seed);
  s.block = b;
  return s;
}

/// Scores for every block. Each block reuses the same noise streams so that
/// blocks facing identical loss landscapes get identical scores.
inline BlockScoreReport score_all_blocks(const Network& net, const LabeledSet& calibration,
                                         const PerturbationConfig& cfg) {
  cfg.validate();
  BlockScoreReport report(net.block_count());
  parallel_for(net.block_count(), [&](std::size_t b) { report[b] = estimate_block_score(net, calibration, b, cfg); });
  return report;
}

/// tr(H)/n of the task loss with respect to block `b`'s output, averaged over
/// the same expansion points the estimator uses.
inline double hessian_mean_oracle(const Network& net, const LabeledSet& calibration, std::size_t b, double h,
                                  const PerturbationConfig& cfg) {
  const auto points = block_probe_points(net, calibration, b, cfg);
  if (points.front().z.size() > 512) throw ConfigError("hessian_mean_oracle: block output dimension exceeds 512");
  return hessian_mean_fd(points, h);
}

}  // namespace packptq
