#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "packptq/autodiff.hpp"
#include "packptq/error.hpp"
#include "packptq/tensor.hpp"

namespace packptq {

/// Bit-width that switches a site off entirely.
inline constexpr int kBypassBits = 32;

/// Uniform affine quantizer x_q = clamp(round(x / s + z0), 0, 2^k - 1).
///
/// `scale` and `zero_point` hold one entry per channel (along `axis`) when
/// `per_channel` is set, otherwise exactly one entry. The zero point is kept
/// continuous. `rounding_offsets`, when present, has the quantized tensor's
/// shape and replaces round-half-to-even with floor(v + 0.5 + offset).
struct QuantParams {
  std::vector<double> scale{1.0};
  std::vector<double> zero_point{0.0};
  int bits = 8;
  bool per_channel = false;
  std::size_t axis = 0;
  std::optional<Tensor> rounding_offsets;

  bool bypass() const noexcept { return bits >= kBypassBits; }
  double qmax() const { return std::ldexp(1.0, bits) - 1.0; }
  std::size_t channels() const noexcept { return scale.size(); }

  static QuantParams bypassed() {
    QuantParams p;
    p.bits = kBypassBits;
    return p;
  }

  void validate() const {
    if (bits < 2) throw ConfigError("quant params: bits must be >= 2, got " + std::to_string(bits));
    if (bypass()) return;
    if (scale.empty() || scale.size() != zero_point.size()) {
      throw ConfigError("quant params: scale/zero-point length mismatch");
    }
    if (!per_channel && scale.size() != 1) throw ConfigError("quant params: per-tensor params need one scale");
    for (double s : scale) {
      if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("quant params: scale must be positive and finite");
    }
    for (double z : zero_point) {
      if (!std::isfinite(z)) throw ConfigError("quant params: zero point must be finite");
    }
    if (rounding_offsets) {
      for (double o : rounding_offsets->data()) {
        if (!(o >= -0.5 && o <= 0.5)) throw ConfigError("quant params: rounding offset outside [-0.5, 0.5]");
      }
    }
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

namespace detail {

/// Maps each flat element index of `shape` to its channel along `axis`.
struct ChannelIndexer {
  std::size_t inner = 1;
  std::size_t count = 1;
  bool per_channel = false;

  ChannelIndexer(const Shape& shape, const QuantParams& p) : per_channel(p.per_channel) {
    if (!per_channel) return;
    if (p.axis >= shape.size()) throw ShapeError("quantizer: channel axis out of range for " + to_string(shape));
    count = shape[p.axis];
    for (std::size_t d = p.axis + 1; d < shape.size(); ++d) inner *= shape[d];
    if (count != p.channels()) {
      throw ShapeError("quantizer: " + std::to_string(p.channels()) + " channel params for axis of size " +
                       std::to_string(count));
    }
  }
  std::size_t operator()(std::size_t i) const { return per_channel ? (i / inner) % count : 0; }
};

inline void check_offsets(const QuantParams& p, const Shape& shape) {
  if (p.rounding_offsets && p.rounding_offsets->shape() != shape) {
    throw ShapeError("quantizer: rounding offsets " + to_string(p.rounding_offsets->shape()) + " vs tensor " +
                     to_string(shape));
  }
}

/// Unclamped integer level for element value v in units of the grid.
inline double level(double v, double offset, bool has_offset) {
  return has_offset ? std::floor(v + 0.5 + offset) : std::nearbyint(v);
}

}  // namespace detail

/// MinMax calibration over the whole tensor or per channel along `axis`.
/// s = (max - min) / (2^k - 1), z0 = -min / s; a constant slice gets s = 1.
inline QuantParams calibrate_minmax(const Tensor& x, int bits, bool per_channel = false, std::size_t axis = 0) {
  if (x.empty()) throw ConfigError("calibrate_minmax: empty tensor");
  if (bits < 2) throw ConfigError("calibrate_minmax: bits must be >= 2");
  if (bits >= kBypassBits) return QuantParams::bypassed();
  QuantParams p;
  p.bits = bits;
  p.per_channel = per_channel;
  p.axis = axis;
  std::size_t channels = 1;
  if (per_channel) {
    if (axis >= x.rank()) throw ShapeError("calibrate_minmax: axis out of range for " + to_string(x.shape()));
    channels = x.dim(axis);
  }
  std::vector<double> lo(channels, INFINITY), hi(channels, -INFINITY);
  p.scale.assign(channels, 1.0);
  p.zero_point.assign(channels, 0.0);
  const detail::ChannelIndexer ch(x.shape(), p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = ch(i);
    lo[c] = std::min(lo[c], x[i]);
    hi[c] = std::max(hi[c], x[i]);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    if (hi[c] > lo[c]) {
      p.scale[c] = (hi[c] - lo[c]) / p.qmax();
      p.zero_point[c] = -lo[c] / p.scale[c];
    } else {
      p.scale[c] = 1.0;
      p.zero_point[c] = -lo[c];
    }
  }
  return p;
}

/// Per-tensor params from an explicit range (used for averaged activation ranges).
inline QuantParams params_from_range(double lo, double hi, int bits) {
  if (bits >= kBypassBits) return QuantParams::bypassed();
  QuantParams p;
  p.bits = bits;
  if (hi > lo) {
    p.scale = {(hi - lo) / p.qmax()};
    p.zero_point = {-lo / p.scale[0]};
  } else {
    p.scale = {1.0};
    p.zero_point = {-lo};
  }
  return p;
}

struct QuantizedTensor {
  std::vector<std::int64_t> ints;
  QuantParams params;
  Shape original_shape;
};

inline QuantizedTensor quantize(const Tensor& x, const QuantParams& p) {
  p.validate();
  if (p.bypass()) throw ConfigError("quantize: bypass params do not define an integer grid");
  detail::check_offsets(p, x.shape());
  const detail::ChannelIndexer ch(x.shape(), p);
  const double qmax = p.qmax();
  QuantizedTensor q{std::vector<std::int64_t>(x.size()), p, x.shape()};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = ch(i);
    const double off = p.rounding_offsets ? (*p.rounding_offsets)[i] : 0.0;
    const double v = detail::level(x[i] / p.scale[c] + p.zero_point[c], off, p.rounding_offsets.has_value());
    q.ints[i] = static_cast<std::int64_t>(std::clamp(v, 0.0, qmax));
  }
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.original_shape, 0.0);
  const detail::ChannelIndexer ch(q.original_shape, q.params);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = ch(i);
    out[i] = q.params.scale[c] * (static_cast<double>(q.ints[i]) - q.params.zero_point[c]);
  }
  return out;
}

/// Value-only quantize/dequantize; identity for bypass params.
inline Tensor fake_quant_value(const Tensor& x, const QuantParams& p) {
  if (p.bypass()) return x;
  return dequantize(quantize(x, p));
}

/// Differentiable quantize/dequantize with straight-through gradients.
///
/// d out / d x is 1 where the level was not clamped and 0 where it was. When
/// `offsets` is given it overrides p.rounding_offsets and receives s * grad on
/// unclamped elements. When `scale` is given it overrides p.scale and receives
/// the step-size gradient (q - z0) - x / s (unclamped) or (q_clamped - z0).
inline Var fake_quant(const Var& x, const QuantParams& p, const std::optional<Var>& offsets = std::nullopt,
                      const std::optional<Var>& scale = std::nullopt) {
  if (p.bypass()) return x;
  p.validate();
  const Tensor& xv = x.value();
  const detail::ChannelIndexer ch(xv.shape(), p);
  const bool has_offsets = offsets.has_value() || p.rounding_offsets.has_value();
  const Tensor off = offsets ? offsets->value() : (p.rounding_offsets ? *p.rounding_offsets : Tensor());
  if (has_offsets && off.shape() != xv.shape()) {
    throw ShapeError("fake_quant: offsets " + to_string(off.shape()) + " vs input " + to_string(xv.shape()));
  }
  std::vector<double> s = p.scale;
  if (scale) {
    if (scale->value().size() != p.channels()) throw ShapeError("fake_quant: learnable scale has wrong length");
    s = scale->value().values();
    for (double v : s) {
      if (!(v > 0.0)) throw NumericalError("fake_quant: learnable scale became non-positive");
    }
  }
  const double qmax = p.qmax();
  Tensor out(xv.shape(), 0.0);
  Tensor level_used(xv.shape(), 0.0);
  std::vector<std::uint8_t> in_range(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t c = ch(i);
    const double v = detail::level(xv[i] / s[c] + p.zero_point[c], has_offsets ? off[i] : 0.0, has_offsets);
    const double q = std::clamp(v, 0.0, qmax);
    in_range[i] = v == q;
    level_used[i] = q;
    out[i] = s[c] * (q - p.zero_point[c]);
  }
  std::vector<Var> parents{x};
  if (offsets) parents.push_back(*offsets);
  if (scale) parents.push_back(*scale);
  const bool learn_offsets = offsets.has_value();
  const bool learn_scale = scale.has_value();
  const std::vector<double> z0 = p.zero_point;
  return x.tape()->record(
      std::move(out), "fake_quant", std::move(parents),
      [xv, ch, s, z0, level_used, in_range, learn_offsets, learn_scale](const Tensor& g,
                                                                         std::span<Tensor* const> pg) {
        Tensor* gx = pg[0];
        Tensor* goff = learn_offsets ? pg[1] : nullptr;
        Tensor* gs = learn_scale ? pg[learn_offsets ? 2 : 1] : nullptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t c = ch(i);
          if (in_range[i]) {
            if (gx) (*gx)[i] += g[i];
            if (goff) (*goff)[i] += g[i] * s[c];
            if (gs) (*gs)[c] += g[i] * ((level_used[i] - z0[c]) - xv[i] / s[c]);
          } else if (gs) {
            (*gs)[c] += g[i] * (level_used[i] - z0[c]);
          }
        }
      });
}

}  // namespace packptq
