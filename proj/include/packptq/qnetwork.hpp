#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "packptq/dataset.hpp"
#include "packptq/model.hpp"
#include "packptq/quant.hpp"

namespace packptq {

/// Bit-widths for every site of a network.
struct QuantSpec {
  std::vector<int> block_weight_bits;  // one per block
  int activation_bits = 8;             // block input activations
  int edge_bits = 8;                   // stem weights, head weights and head input

  static QuantSpec uniform(std::size_t blocks, int weight_bits, int activation_bits, int edge_bits) {
    return QuantSpec{std::vector<int>(blocks, weight_bits), activation_bits, edge_bits};
  }
  static QuantSpec bypass(std::size_t blocks) { return uniform(blocks, kBypassBits, kBypassBits, kBypassBits); }
};

struct BlockQuant {
  QuantParams input;
  QuantParams first;
  QuantParams second;
};

/// Activation-range calibration protocol: `samples` rows split into
/// `sub_batches` equal chunks whose min and max are averaged.
struct ActivationCalibration {
  std::size_t samples = 256;
  std::size_t sub_batches = 8;
};

/// A network together with quantization parameters for every site. Acts as
/// the SiteHooks that apply fake quantization during forward passes.
class QuantizedNetwork : public SiteHooks {
 public:
  QuantizedNetwork() = default;
  QuantizedNetwork(std::shared_ptr<const Network> net, QuantParams stem, std::vector<BlockQuant> blocks,
                   QuantParams head_input, QuantParams head)
      : net_(std::move(net)),
        stem_(std::move(stem)),
        blocks_(std::move(blocks)),
        head_input_(std::move(head_input)),
        head_(std::move(head)) {
    if (blocks_.size() != net_->block_count()) throw ConfigError("quantized network: block parameter count mismatch");
  }

  const Network& network() const { return *net_; }
  std::shared_ptr<const Network> network_ptr() const { return net_; }

  Var weight(Tape& tape, const SiteKey& k, const Tensor& w) const override {
    return fake_quant(tape.constant(w), params(k));
  }
  Var activation(Tape&, const SiteKey& k, const Var& x) const override { return fake_quant(x, params(k)); }

  const QuantParams& params(const SiteKey& k) const {
    return const_cast<QuantizedNetwork*>(this)->params(k);
  }
  QuantParams& params(const SiteKey& k) {
    switch (k.part) {
      case SitePart::stem:
        if (k.activation) throw ConfigError("network input is not a quantization site");
        return stem_;
      case SitePart::head:
        return k.activation ? head_input_ : head_;
      case SitePart::block:
        break;
    }
    BlockQuant& b = blocks_.at(k.block);
    if (k.activation) return b.input;
    return k.layer == 1 ? b.first : b.second;
  }

  BlockQuant& block(std::size_t b) { return blocks_.at(b); }
  const BlockQuant& block(std::size_t b) const { return blocks_.at(b); }

  /// Every site in forward order.
  std::vector<SiteKey> sites() const {
    std::vector<SiteKey> out{SiteKey::stem_weight()};
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      out.push_back(SiteKey::block_input(b));
      out.push_back(SiteKey::block_weight(b, 1));
      out.push_back(SiteKey::block_weight(b, 2));
    }
    out.push_back(SiteKey::head_input());
    out.push_back(SiteKey::head_weight());
    return out;
  }

  /// Effective weight bits averaged over block parameters.
  double average_block_weight_bits() const {
    double bits = 0.0, params = 0.0;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const double p = static_cast<double>(net_->blocks[b].param_count());
      bits += p * blocks_[b].first.bits;
      params += p;
    }
    return bits / params;
  }

  friend bool operator==(const QuantizedNetwork& a, const QuantizedNetwork& b) {
    return a.stem_ == b.stem_ && a.head_ == b.head_ && a.head_input_ == b.head_input_ &&
           a.blocks_.size() == b.blocks_.size() &&
           std::equal(a.blocks_.begin(), a.blocks_.end(), b.blocks_.begin(), [](const BlockQuant& x, const BlockQuant& y) {
             return x.input == y.input && x.first == y.first && x.second == y.second;
           });
  }

 private:
  std::shared_ptr<const Network> net_;
  QuantParams stem_;
  std::vector<BlockQuant> blocks_;
  QuantParams head_input_;
  QuantParams head_;
};

namespace detail {

inline QuantParams weight_params(const Layer& l, int bits) {
  return calibrate_minmax(l.weight, bits, /*per_channel=*/true, l.channel_axis());
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Averaged sub-batch min/max of every block input and the head input, from a
/// full-precision forward pass.
inline std::vector<Range> activation_ranges(const Network& net, const Tensor& inputs, const ActivationCalibration& cal) {
  const std::size_t rows = std::min(cal.samples, inputs.dim(0));
  const std::size_t subs = std::max<std::size_t>(1, std::min(cal.sub_batches, rows));
  const std::size_t per = rows / subs;
  std::vector<Range> acc(net.block_count() + 1);
  for (std::size_t s = 0; s < subs; ++s) {
    Tape tape;
    std::vector<Tensor> seen;
    Var x = stem_forward(tape, net, tape.constant(inputs.rows(s * per, per)));
    for (std::size_t b = 0; b < net.block_count(); ++b) {
      seen.push_back(x.value());
      x = block_forward(tape, net, b, x);
    }
    seen.push_back(x.shape().size() == 4 ? ops::global_avg_pool(x).value() : x.value());
    for (std::size_t i = 0; i < seen.size(); ++i) {
      const auto [mn, mx] = std::minmax_element(seen[i].data().begin(), seen[i].data().end());
      acc[i].lo += *mn / static_cast<double>(subs);
      acc[i].hi += *mx / static_cast<double>(subs);
    }
  }
  return acc;
}

}  // namespace detail

/// MinMax quantization of a network: per-channel weights at each block's
/// bit-width, per-tensor activations from the calibration batch.
inline QuantizedNetwork quantize_network(std::shared_ptr<const Network> net, const QuantSpec& spec,
                                         const Tensor& calibration_inputs, const ActivationCalibration& cal = {}) {
  if (spec.block_weight_bits.size() != net->block_count()) {
    throw ConfigError("quantize_network: bit allocation covers " + std::to_string(spec.block_weight_bits.size()) +
                      " blocks, network has " + std::to_string(net->block_count()));
  }
  const auto ranges = detail::activation_ranges(*net, calibration_inputs, cal);
  std::vector<BlockQuant> blocks;
  for (std::size_t b = 0; b < net->block_count(); ++b) {
    const int wb = spec.block_weight_bits[b];
    blocks.push_back(BlockQuant{params_from_range(ranges[b].lo, ranges[b].hi, spec.activation_bits),
                                detail::weight_params(net->blocks[b].first, wb),
                                detail::weight_params(net->blocks[b].second, wb)});
  }
  const detail::Range& head_range = ranges.back();
  return QuantizedNetwork(net, detail::weight_params(net->stem, spec.edge_bits), std::move(blocks),
                          params_from_range(head_range.lo, head_range.hi, spec.edge_bits),
                          detail::weight_params(net->head, spec.edge_bits));
}

}  // namespace packptq
