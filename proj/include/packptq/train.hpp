#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "packptq/dataset.hpp"
#include "packptq/evaluate.hpp"
#include "packptq/model.hpp"
#include "packptq/optim.hpp"

namespace packptq {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  double target_accuracy = 0.95;
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::size_t epochs_run = 0;
  double train_accuracy = 0.0;
  bool reached_target = false;
};

namespace detail {

/// Exposes every weight and bias of a network as a tape parameter.
class TrainableHooks final : public SiteHooks {
 public:
  TrainableHooks(Tape& tape, const Network& net) {
    auto add = [&](const SiteKey& k, const Layer& l) {
      weights_.emplace(k.str(), tape.param(l.weight));
      biases_.emplace(k.str(), tape.param(l.bias));
    };
    add(SiteKey::stem_weight(), net.stem);
    for (std::size_t b = 0; b < net.block_count(); ++b) {
      add(SiteKey::block_weight(b, 1), net.blocks[b].first);
      add(SiteKey::block_weight(b, 2), net.blocks[b].second);
    }
    add(SiteKey::head_weight(), net.head);
  }
  Var weight(Tape&, const SiteKey& k, const Tensor&) const override { return weights_.at(k.str()); }
  Var bias(Tape&, const SiteKey& k, const Tensor&) const override { return biases_.at(k.str()); }

  /// Gradients in the order of `layers()`: weight then bias for each layer.
  std::vector<Tensor> grads(const Tape& tape, const Network& net) const {
    std::vector<Tensor> g;
    for (const auto& key : keys(net)) {
      g.push_back(tape.grad(weights_.at(key)));
      g.push_back(tape.grad(biases_.at(key)));
    }
    return g;
  }

  static std::vector<std::string> keys(const Network& net) {
    std::vector<std::string> k{SiteKey::stem_weight().str()};
    for (std::size_t b = 0; b < net.block_count(); ++b) {
      k.push_back(SiteKey::block_weight(b, 1).str());
      k.push_back(SiteKey::block_weight(b, 2).str());
    }
    k.push_back(SiteKey::head_weight().str());
    return k;
  }

 private:
  std::map<std::string, Var> weights_;
  std::map<std::string, Var> biases_;
};

inline std::vector<Layer*> layers_of(Network& net) {
  std::vector<Layer*> out{&net.stem};
  for (Block& b : net.blocks) {
    out.push_back(&b.first);
    out.push_back(&b.second);
  }
  out.push_back(&net.head);
  return out;
}

}  // namespace detail

/// Minibatch Adam with cosine decay on softmax cross-entropy. Stops early once
/// training accuracy reaches the target (checked after each epoch).
inline TrainResult train_model(Network& net, const LabeledSet& train, const TrainConfig& cfg) {
  if (train.size() < cfg.batch_size) throw ConfigError("train_model: fewer samples than one batch");
  const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
  std::vector<Tensor> params;
  for (Layer* l : detail::layers_of(net)) {
    params.push_back(l->weight);
    params.push_back(l->bias);
  }
  AdamState adam(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.epochs * steps_per_epoch});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::span<const std::size_t> rows(order.data() + s * cfg.batch_size, cfg.batch_size);
      const LabeledSet batch = train.subset(rows);
      Tape tape;
      detail::TrainableHooks hooks(tape, net);
      const Var loss = ops::softmax_cross_entropy(forward(tape, net, tape.constant(batch.inputs), hooks), batch.labels);
      tape.backward(loss);
      const auto grads = hooks.grads(tape, net);
      adam.apply(params, grads);
      std::size_t i = 0;
      for (Layer* l : detail::layers_of(net)) {
        l->weight = params[i++];
        l->bias = params[i++];
      }
    }
    result.epochs_run = epoch + 1;
    result.train_accuracy = evaluate_model(net, train).top1;
    if (result.train_accuracy >= cfg.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

}  // namespace packptq
