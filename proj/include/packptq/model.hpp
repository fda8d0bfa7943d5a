#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "packptq/autodiff.hpp"
#include "packptq/error.hpp"
#include "packptq/rng.hpp"
#include "packptq/tensor.hpp"

namespace packptq {

enum class LayerKind { linear, conv2d };

inline const char* to_string(LayerKind k) { return k == LayerKind::linear ? "linear" : "conv2d"; }

/// Linear weights are [in, out] (y = x W + b); conv kernels are [out, in, k, k]
/// with "same" zero padding.
struct Layer {
  LayerKind kind = LayerKind::linear;
  Tensor weight;
  Tensor bias;

  std::size_t weight_count() const { return weight.size(); }
  std::size_t channel_axis() const { return kind == LayerKind::linear ? 1 : 0; }
  std::size_t out_channels() const { return weight.dim(channel_axis()); }
  std::size_t in_channels() const { return weight.dim(kind == LayerKind::linear ? 0 : 1); }
};

enum class BlockKind { mlp, conv };

inline const char* to_string(BlockKind k) { return k == BlockKind::mlp ? "mlp" : "conv"; }

/// Two layers with a nonlinearity between them (GELU for mlp, ReLU for conv)
/// and an optional identity skip.
struct Block {
  BlockKind kind = BlockKind::mlp;
  bool residual = true;
  Layer first;
  Layer second;

  /// Quantizable weight scalars. Biases stay full precision and are not counted.
  std::size_t param_count() const { return first.weight_count() + second.weight_count(); }
};

struct Network {
  std::string name;
  Shape input_shape;
  std::size_t class_count = 0;
  Layer stem;
  std::vector<Block> blocks;
  Layer head;
  std::map<std::string, std::string> metadata;

  std::size_t block_count() const noexcept { return blocks.size(); }

  std::vector<std::size_t> block_param_counts() const {
    std::vector<std::size_t> p;
    for (const Block& b : blocks) p.push_back(b.param_count());
    return p;
  }
};

enum class SitePart { stem, block, head };

/// Names one quantization site: a layer's weights or a block/head input activation.
struct SiteKey {
  SitePart part = SitePart::stem;
  std::size_t block = 0;  // 0-based, only for SitePart::block
  int layer = 0;          // 1 or 2 inside a block; 0 for the input activation
  bool activation = false;

  std::string str() const {
    switch (part) {
      case SitePart::stem:
        return activation ? "stem.in" : "stem.w";
      case SitePart::head:
        return activation ? "head.in" : "head.w";
      case SitePart::block:
        break;
    }
    const std::string b = "block" + std::to_string(block + 1);
    return activation ? b + ".in" : b + ".l" + std::to_string(layer) + ".w";
  }

  static SiteKey stem_weight() { return {SitePart::stem, 0, 0, false}; }
  static SiteKey head_weight() { return {SitePart::head, 0, 0, false}; }
  static SiteKey head_input() { return {SitePart::head, 0, 0, true}; }
  static SiteKey block_weight(std::size_t b, int layer) { return {SitePart::block, b, layer, false}; }
  static SiteKey block_input(std::size_t b) { return {SitePart::block, b, 0, true}; }
};

/// Intercepts every weight and activation the forward pass touches. The
/// default implementation is the full-precision network.
class SiteHooks {
 public:
  virtual ~SiteHooks() = default;
  virtual Var weight(Tape& tape, const SiteKey&, const Tensor& w) const { return tape.constant(w); }
  virtual Var bias(Tape& tape, const SiteKey&, const Tensor& b) const { return tape.constant(b); }
  virtual Var activation(Tape&, const SiteKey&, const Var& x) const { return x; }
};

inline const SiteHooks& full_precision() {
  static const SiteHooks hooks;
  return hooks;
}

inline Var apply_layer(const Layer& layer, const Var& x, const Var& w, const Var& b) {
  if (layer.kind == LayerKind::linear) return ops::bias_add(ops::matmul(x, w), b);
  return ops::bias_add(ops::conv2d(x, w, layer.weight.dim(2) / 2), b);
}

inline Var layer_forward(Tape& tape, const Layer& layer, const SiteKey& site, const Var& x, const SiteHooks& hooks) {
  return apply_layer(layer, x, hooks.weight(tape, site, layer.weight), hooks.bias(tape, site, layer.bias));
}

inline Var stem_forward(Tape& tape, const Network& net, const Var& input, const SiteHooks& hooks = full_precision()) {
  const Shape expect = [&] {
    Shape s{input.shape().empty() ? 0 : input.shape()[0]};
    s.insert(s.end(), net.input_shape.begin(), net.input_shape.end());
    return s;
  }();
  if (input.shape() != expect) {
    throw ShapeError("forward: input " + to_string(input.shape()) + " does not match network input shape " +
                     to_string(net.input_shape));
  }
  return layer_forward(tape, net.stem, SiteKey::stem_weight(), input, hooks);
}

/// Output of block `b` (0-based). The quantized input feeds the residual
/// branch; the skip connection carries the unquantized input.
inline Var block_forward(Tape& tape, const Network& net, std::size_t b, const Var& x,
                         const SiteHooks& hooks = full_precision()) {
  const Block& blk = net.blocks.at(b);
  const Var xin = hooks.activation(tape, SiteKey::block_input(b), x);
  Var h = layer_forward(tape, blk.first, SiteKey::block_weight(b, 1), xin, hooks);
  h = blk.kind == BlockKind::mlp ? ops::gelu(h) : ops::relu(h);
  Var out = layer_forward(tape, blk.second, SiteKey::block_weight(b, 2), h, hooks);
  if (blk.residual) out = ops::add(x, out);
  return out;
}

inline Var head_forward(Tape& tape, const Network& net, const Var& z, const SiteHooks& hooks = full_precision()) {
  Var h = z.shape().size() == 4 ? ops::global_avg_pool(z) : z;
  h = hooks.activation(tape, SiteKey::head_input(), h);
  return layer_forward(tape, net.head, SiteKey::head_weight(), h, hooks);
}

/// Runs blocks [first, last) starting from `x`.
inline Var run_blocks(Tape& tape, const Network& net, Var x, std::size_t first, std::size_t last,
                      const SiteHooks& hooks = full_precision()) {
  for (std::size_t b = first; b < last; ++b) x = block_forward(tape, net, b, x, hooks);
  return x;
}

/// Called after each block with its output; may return a replacement.
using BlockObserver = std::function<Var(Tape&, std::size_t block, const Var& out)>;

/// Logits for a batch. `observer`, when set, sees (and may replace) each block output.
inline Var forward(Tape& tape, const Network& net, const Var& input, const SiteHooks& hooks = full_precision(),
                   const BlockObserver& observer = {}) {
  Var x = stem_forward(tape, net, input, hooks);
  for (std::size_t b = 0; b < net.block_count(); ++b) {
    x = block_forward(tape, net, b, x, hooks);
    if (observer) x = observer(tape, b, x);
  }
  return head_forward(tape, net, x, hooks);
}

inline Tensor predict_logits(const Network& net, const Tensor& batch, const SiteHooks& hooks = full_precision()) {
  Tape tape;
  return forward(tape, net, tape.constant(batch), hooks).value();
}

/// Value snapshots of one forward pass.
struct CaptureRecord {
  Tensor stem_output;
  std::vector<Tensor> block_outputs;
  Tensor logits;
  std::vector<double> sample_losses;
  double loss = 0.0;
};

inline CaptureRecord forward_capture(const Network& net, const Tensor& batch, std::span<const int> labels,
                                     const SiteHooks& hooks = full_precision()) {
  Tape tape;
  CaptureRecord rec;
  Var x = stem_forward(tape, net, tape.constant(batch), hooks);
  rec.stem_output = x.value();
  for (std::size_t b = 0; b < net.block_count(); ++b) {
    x = block_forward(tape, net, b, x, hooks);
    rec.block_outputs.push_back(x.value());
  }
  const Var logits = head_forward(tape, net, x, hooks);
  rec.logits = logits.value();
  const Var losses = ops::softmax_cross_entropy_rows(logits, labels);
  rec.sample_losses = losses.value().values();
  double s = 0.0;
  for (double v : rec.sample_losses) s += v;
  rec.loss = s / static_cast<double>(rec.sample_losses.size());
  return rec;
}

// ---------------------------------------------------------------------------
// Architecture registry

inline const std::vector<std::string>& registered_architectures() {
  static const std::vector<std::string> names = {"resmlp-<blocks>x<width>  (e.g. resmlp-8x32, resmlp-4x16)",
                                                 "convnet-<blocks>         (e.g. convnet-6; 8 channels, 3x3 kernels)"};
  return names;
}

struct ArchitectureSpec {
  std::string name;
  BlockKind kind = BlockKind::mlp;
  std::size_t blocks = 0;
  std::size_t width = 0;  // hidden width or channel count
};

inline ArchitectureSpec parse_architecture(const std::string& name) {
  static const std::regex mlp(R"(resmlp-(\d+)x(\d+))");
  static const std::regex conv(R"(convnet-(\d+))");
  std::smatch m;
  ArchitectureSpec spec;
  spec.name = name;
  if (std::regex_match(name, m, mlp)) {
    spec.kind = BlockKind::mlp;
    spec.blocks = std::stoul(m[1]);
    spec.width = std::stoul(m[2]);
  } else if (std::regex_match(name, m, conv)) {
    spec.kind = BlockKind::conv;
    spec.blocks = std::stoul(m[1]);
    spec.width = 8;
  } else {
    std::string msg = "unknown architecture '" + name + "'; registered:";
    for (const auto& r : registered_architectures()) msg += "\n  " + r;
    throw ConfigError(msg);
  }
  if (spec.blocks < 2) throw ConfigError("architecture '" + name + "': at least 2 blocks are required");
  if (spec.width == 0) throw ConfigError("architecture '" + name + "': width must be positive");
  return spec;
}

namespace detail {

inline Tensor gaussian_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Layer make_linear(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  return Layer{LayerKind::linear, gaussian_tensor(Shape{in, out}, stddev, rng), Tensor(Shape{out}, 0.0)};
}

inline Layer make_conv(std::size_t in, std::size_t out, std::size_t k, double stddev, Rng& rng) {
  return Layer{LayerKind::conv2d, gaussian_tensor(Shape{out, in, k, k}, stddev, rng), Tensor(Shape{out}, 0.0)};
}

}  // namespace detail

/// Randomly initialised network. Residual branches are scaled down by the
/// block count so deep stacks start close to the identity.
inline Network build_model(const std::string& arch, const Shape& input_shape, std::size_t class_count,
                           std::uint64_t seed) {
  const ArchitectureSpec spec = parse_architecture(arch);
  if (class_count < 2) throw ConfigError("build_model: class_count must be >= 2");
  Rng rng(seed);
  Network net;
  net.name = arch;
  net.input_shape = input_shape;
  net.class_count = class_count;
  const double branch_gain = 1.0 / std::sqrt(static_cast<double>(spec.blocks));
  const std::size_t w = spec.width;
  if (spec.kind == BlockKind::mlp) {
    if (input_shape.size() != 1) throw ConfigError(arch + ": expects a flat input shape, got " + to_string(input_shape));
    const std::size_t in = input_shape[0];
    net.stem = detail::make_linear(in, w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      Block blk;
      blk.kind = BlockKind::mlp;
      blk.first = detail::make_linear(w, w, std::sqrt(2.0 / static_cast<double>(w)), rng);
      blk.second = detail::make_linear(w, w, branch_gain / std::sqrt(static_cast<double>(w)), rng);
      net.blocks.push_back(std::move(blk));
    }
  } else {
    if (input_shape.size() != 3) throw ConfigError(arch + ": expects a [C, H, W] input, got " + to_string(input_shape));
    const std::size_t cin = input_shape[0];
    net.stem = detail::make_conv(cin, w, 3, 1.0 / std::sqrt(9.0 * static_cast<double>(cin)), rng);
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      Block blk;
      blk.kind = BlockKind::conv;
      blk.first = detail::make_conv(w, w, 3, std::sqrt(2.0 / (9.0 * static_cast<double>(w))), rng);
      blk.second = detail::make_conv(w, w, 3, branch_gain / std::sqrt(9.0 * static_cast<double>(w)), rng);
      net.blocks.push_back(std::move(blk));
    }
  }
  net.head = detail::make_linear(w, class_count, 1.0 / std::sqrt(static_cast<double>(w)), rng);
  net.metadata["init_seed"] = std::to_string(seed);
  return net;
}

/// Structural check used by the deserializer and by build_model callers.
inline void validate_network(const Network& net) {
  if (net.blocks.size() < 2) throw ConfigError("network '" + net.name + "': needs at least 2 blocks");
  if (net.class_count < 2) throw ConfigError("network '" + net.name + "': class_count must be >= 2");
  auto check_layer = [](const Layer& l, const std::string& where) {
    const std::size_t rank = l.kind == LayerKind::linear ? 2 : 4;
    if (l.weight.rank() != rank) throw ShapeError(where + ": weight rank " + std::to_string(l.weight.rank()));
    if (l.bias.rank() != 1 || l.bias.dim(0) != l.out_channels()) {
      throw ShapeError(where + ": bias " + to_string(l.bias.shape()) + " vs " + std::to_string(l.out_channels()) +
                       " output channels");
    }
    if (l.kind == LayerKind::conv2d && (l.weight.dim(2) % 2 == 0 || l.weight.dim(2) != l.weight.dim(3))) {
      throw ShapeError(where + ": conv kernels must be square with odd size");
    }
  };
  check_layer(net.stem, "stem");
  check_layer(net.head, "head");
  std::size_t width = net.stem.out_channels();
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const Block& blk = net.blocks[b];
    const std::string where = "block " + std::to_string(b + 1);
    check_layer(blk.first, where + " layer 1");
    check_layer(blk.second, where + " layer 2");
    if (blk.first.in_channels() != width || blk.second.in_channels() != blk.first.out_channels()) {
      throw ShapeError(where + ": channel counts do not chain");
    }
    if (blk.residual && blk.second.out_channels() != width) {
      throw ShapeError(where + ": residual block must preserve width");
    }
    width = blk.second.out_channels();
  }
  if (net.head.in_channels() != width || net.head.out_channels() != net.class_count) {
    throw ShapeError("head: expected [" + std::to_string(width) + ", " + std::to_string(net.class_count) + "]");
  }
}

}  // namespace packptq
