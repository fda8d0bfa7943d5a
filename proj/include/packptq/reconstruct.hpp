#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "packptq/dataset.hpp"
#include "packptq/error.hpp"
#include "packptq/model.hpp"
#include "packptq/optim.hpp"
#include "packptq/packer.hpp"
#include "packptq/qnetwork.hpp"
#include "packptq/rng.hpp"

namespace packptq {

enum class InputSource { quantized_upstream, full_precision };

inline const char* to_string(InputSource s) {
  return s == InputSource::quantized_upstream ? "quantized-upstream" : "full-precision";
}

inline InputSource parse_input_source(const std::string& s) {
  if (s == "quantized-upstream") return InputSource::quantized_upstream;
  if (s == "full-precision") return InputSource::full_precision;
  throw ConfigError("unknown input_source '" + s + "'; expected quantized-upstream or full-precision");
}

struct ReconstructionConfig {
  std::size_t iterations = 500;
  std::size_t batch_size = 32;
  /// Learning rate of the activation scales.
  double base_lr = 4e-5;
  /// Learning rate of the weight rounding offsets.
  double offset_lr = 1e-3;
  InputSource input_source = InputSource::quantized_upstream;
  std::size_t log_interval = 10;
  std::uint64_t seed = 0;

  void validate(std::size_t calibration_size) const {
    if (iterations < 1) throw ConfigError("reconstruction: iterations must be >= 1");
    if (batch_size < 1 || batch_size > calibration_size) {
      throw ConfigError("reconstruction: batch_size must be in 1.." + std::to_string(calibration_size));
    }
    if (log_interval < 1) throw ConfigError("reconstruction: log_interval must be >= 1");
    if (!(base_lr >= 0.0) || !(offset_lr >= 0.0)) throw ConfigError("reconstruction: learning rates must be >= 0");
  }
};

struct PackTrace {
  PackRange pack;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> curve;  // mean minibatch loss per logging interval
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

/// Learnable state of one pack: rounding offsets of every quantized weight and
/// the scale of every quantized block input.
struct PackLearnables {
  std::vector<SiteKey> offset_sites;
  std::vector<Tensor> offsets;
  std::vector<SiteKey> scale_sites;
  std::vector<Tensor> scales;
};

inline PackLearnables collect_learnables(const QuantizedNetwork& q, PackRange pack) {
  PackLearnables l;
  const Network& net = q.network();
  for (std::size_t b = pack.first; b <= pack.last; ++b) {
    for (int layer : {1, 2}) {
      const SiteKey k = SiteKey::block_weight(b, layer);
      const QuantParams& p = q.params(k);
      if (p.bypass()) continue;
      const Tensor& w = layer == 1 ? net.blocks[b].first.weight : net.blocks[b].second.weight;
      l.offset_sites.push_back(k);
      l.offsets.push_back(p.rounding_offsets ? *p.rounding_offsets : Tensor(w.shape(), 0.0));
    }
    const SiteKey in = SiteKey::block_input(b);
    const QuantParams& p = q.params(in);
    if (p.bypass()) continue;
    l.scale_sites.push_back(in);
    l.scales.push_back(Tensor(Shape{p.scale.size()}, p.scale));
  }
  return l;
}

/// Quantized hooks with the pack's learnable tensors bound to tape parameters.
class LearnableHooks final : public SiteHooks {
 public:
  LearnableHooks(const QuantizedNetwork& q, std::map<std::string, Var> offsets, std::map<std::string, Var> scales)
      : q_(q), offsets_(std::move(offsets)), scales_(std::move(scales)) {}

  Var weight(Tape& tape, const SiteKey& k, const Tensor& w) const override {
    auto it = offsets_.find(k.str());
    if (it == offsets_.end()) return q_.weight(tape, k, w);
    return fake_quant(tape.constant(w), q_.params(k), it->second);
  }
  Var activation(Tape& tape, const SiteKey& k, const Var& x) const override {
    auto it = scales_.find(k.str());
    if (it == scales_.end()) return q_.activation(tape, k, x);
    return fake_quant(x, q_.params(k), std::nullopt, it->second);
  }

 private:
  const QuantizedNetwork& q_;
  std::map<std::string, Var> offsets_;
  std::map<std::string, Var> scales_;
};

inline double rec_loss_value(const Network& net, const SiteHooks& hooks, PackRange pack, const Tensor& x,
                             const Tensor& target) {
  Tape tape;
  const Var out = run_blocks(tape, net, tape.constant(x), pack.first, pack.last + 1, hooks);
  return ops::mean(ops::sample_norms(ops::sub(out, tape.constant(target)))).value().item();
}

}  // namespace detail

/// Input to block `b` for every row of `inputs`, through either the quantized
/// or the full-precision upstream network.
inline Tensor pack_input(const QuantizedNetwork& q, std::size_t b, const Tensor& inputs, InputSource source) {
  const SiteHooks& hooks = source == InputSource::quantized_upstream ? static_cast<const SiteHooks&>(q) : full_precision();
  Tape tape;
  const Var x = stem_forward(tape, q.network(), tape.constant(inputs), hooks);
  return run_blocks(tape, q.network(), x, 0, b, hooks).value();
}

/// Seed used for a pack; depends only on the run seed and the pack's first block.
inline std::uint64_t pack_seed(std::uint64_t seed, const PackRange& pack) {
  return Rng::derive(seed, 0x9ACC0000ULL + pack.first).next();
}

/// Optimises the pack's rounding offsets and activation scales so that the
/// quantized pack reproduces the full-precision pack on the same inputs,
/// minimising the batch mean of per-sample Frobenius distances.
inline PackTrace reconstruct_pack(QuantizedNetwork& q, PackRange pack, const LabeledSet& calibration,
                                  const ReconstructionConfig& cfg) {
  cfg.validate(calibration.size());
  const Network& net = q.network();
  if (pack.last >= net.block_count() || pack.first > pack.last) throw ConfigError("reconstruct_pack: invalid pack range");
  const auto start = std::chrono::steady_clock::now();

  const Tensor inputs = pack_input(q, pack.first, calibration.inputs, cfg.input_source);
  const Tensor targets = [&] {
    Tape tape;
    return run_blocks(tape, net, tape.constant(inputs), pack.first, pack.last + 1).value();
  }();

  PackTrace trace;
  trace.pack = pack;
  trace.seed = pack_seed(cfg.seed, pack);
  trace.initial_loss = detail::rec_loss_value(net, q, pack, inputs, targets);

  detail::PackLearnables learn = detail::collect_learnables(q, pack);
  AdamState offset_adam(learn.offsets, AdamConfig{cfg.offset_lr, 0.9, 0.999, 1e-8, cfg.iterations});
  AdamState scale_adam(learn.scales, AdamConfig{cfg.base_lr, 0.9, 0.999, 1e-8, cfg.iterations});
  std::vector<double> scale_floor;
  for (const Tensor& s : learn.scales) scale_floor.push_back(1e-6 * *std::max_element(s.data().begin(), s.data().end()));

  Rng rng(trace.seed);
  std::vector<std::size_t> order(calibration.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double interval_sum = 0.0;
  std::size_t interval_count = 0, diverged_logs = 0;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    // Partial Fisher-Yates: the first batch_size entries become a fresh sample.
    for (std::size_t i = 0; i < cfg.batch_size; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    const std::span<const std::size_t> rows(order.data(), cfg.batch_size);
    const Tensor xb = inputs.take_rows(rows);
    const Tensor yb = targets.take_rows(rows);

    Tape tape;
    std::map<std::string, Var> off_vars, scale_vars;
    std::vector<Var> off_list, scale_list;
    for (std::size_t i = 0; i < learn.offsets.size(); ++i) {
      off_list.push_back(tape.param(learn.offsets[i]));
      off_vars.emplace(learn.offset_sites[i].str(), off_list.back());
    }
    for (std::size_t i = 0; i < learn.scales.size(); ++i) {
      scale_list.push_back(tape.param(learn.scales[i]));
      scale_vars.emplace(learn.scale_sites[i].str(), scale_list.back());
    }
    const detail::LearnableHooks hooks(q, std::move(off_vars), std::move(scale_vars));
    const Var out = run_blocks(tape, net, tape.constant(xb), pack.first, pack.last + 1, hooks);
    const Var loss = ops::mean(ops::sample_norms(ops::sub(out, tape.constant(yb))));
    tape.backward(loss);

    std::vector<Tensor> off_grads, scale_grads;
    for (const Var& v : off_list) off_grads.push_back(tape.grad(v));
    for (const Var& v : scale_list) scale_grads.push_back(tape.grad(v));
    offset_adam.apply(learn.offsets, off_grads);
    scale_adam.apply(learn.scales, scale_grads);
    for (Tensor& o : learn.offsets)
      for (double& v : o.data()) v = std::clamp(v, -0.5, 0.5);
    for (std::size_t i = 0; i < learn.scales.size(); ++i)
      for (double& v : learn.scales[i].data()) v = std::max(v, scale_floor[i]);

    interval_sum += loss.value().item();
    if (++interval_count == cfg.log_interval) {
      const double mean = interval_sum / static_cast<double>(interval_count);
      trace.curve.push_back(mean);
      interval_sum = 0.0;
      interval_count = 0;
      diverged_logs = (trace.initial_loss > 0.0 && mean > 1e3 * trace.initial_loss) ? diverged_logs + 1 : 0;
      if (diverged_logs >= 50) {
        throw NumericalError("reconstruct_pack: blocks " + std::to_string(pack.first + 1) + ".." +
                             std::to_string(pack.last + 1) + " diverged (loss " + std::to_string(mean) +
                             " vs initial " + std::to_string(trace.initial_loss) + ")");
      }
    }
  }

  for (std::size_t i = 0; i < learn.offsets.size(); ++i) q.params(learn.offset_sites[i]).rounding_offsets = learn.offsets[i];
  for (std::size_t i = 0; i < learn.scales.size(); ++i) q.params(learn.scale_sites[i]).scale = learn.scales[i].values();

  trace.final_loss = detail::rec_loss_value(net, q, pack, inputs, targets);
  trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

struct ReconstructionResult {
  QuantizedNetwork model;
  std::vector<PackTrace> traces;
};

/// Sequential pack-wise reconstruction starting from an already quantized network.
inline ReconstructionResult reconstruct_network(QuantizedNetwork q, const PackPlan& plan, const LabeledSet& calibration,
                                                const ReconstructionConfig& cfg) {
  if (!is_partition(plan.packs, q.network().block_count())) {
    throw ConfigError("reconstruct_network: pack plan does not partition the network's blocks");
  }
  ReconstructionResult r{std::move(q), {}};
  for (const PackRange& pack : plan.packs) r.traces.push_back(reconstruct_pack(r.model, pack, calibration, cfg));
  return r;
}

/// Block-wise reconstruction: every block optimised on its own.
inline ReconstructionResult reconstruct_blockwise(QuantizedNetwork q, const LabeledSet& calibration,
                                                  const ReconstructionConfig& cfg) {
  ReconstructionResult r{std::move(q), {}};
  for (std::size_t b = 0; b < r.model.network().block_count(); ++b) {
    r.traces.push_back(reconstruct_pack(r.model, PackRange{b, b}, calibration, cfg));
  }
  return r;
}

}  // namespace packptq
