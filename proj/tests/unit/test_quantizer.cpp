#include <gtest/gtest.h>

#include <memory>

#include "../support/properties.hpp"
#include "packptq/evaluate.hpp"
#include "packptq/serialize.hpp"

using namespace packptq;

namespace {

QuantParams grid(double s, double z0, int bits) {
  QuantParams p;
  p.scale = {s};
  p.zero_point = {z0};
  p.bits = bits;
  return p;
}

std::shared_ptr<const Network> fixture_4x16() {
  static const auto net = std::make_shared<const Network>(load_model(std::string(PACKPTQ_FIXTURES) + "/resmlp-4x16.json"));
  return net;
}

const Dataset& moons() {
  static const Dataset ds = generate_dataset(DatasetSpec::defaults_for("two-moons-10class"), 1024, 7, 2048);
  return ds;
}

}  // namespace

TEST(MinMax, PerTensorExamples) {
  QuantParams p = calibrate_minmax(Tensor::vector({0, 1, 3}), 2);
  EXPECT_DOUBLE_EQ(p.scale[0], 1.0);
  EXPECT_DOUBLE_EQ(p.zero_point[0], 0.0);

  p = calibrate_minmax(Tensor::vector({-1, 0.2, 1}), 2);
  EXPECT_DOUBLE_EQ(p.scale[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(p.zero_point[0], 1.5);
}

TEST(MinMax, ConstantTensorRoundTrips) {
  const Tensor x = Tensor::vector({5, 5, 5});
  const QuantParams p = calibrate_minmax(x, 4);
  EXPECT_EQ(p.scale[0], 1.0);
  EXPECT_EQ(fake_quant_value(x, p), x);
}

TEST(MinMax, PerChannelAlongAxis) {
  const Tensor w = Tensor::matrix({{0, 10}, {3, 40}});
  const QuantParams p = calibrate_minmax(w, 2, true, 1);
  ASSERT_EQ(p.channels(), 2u);
  EXPECT_DOUBLE_EQ(p.scale[0], 1.0);
  EXPECT_DOUBLE_EQ(p.scale[1], 10.0);
  EXPECT_EQ(fake_quant_value(w, p), w);
}

TEST(Quantize, HandCases) {
  const QuantParams p = grid(0.5, 0.0, 2);
  EXPECT_EQ(quantize(Tensor::vector({0.6}), p).ints[0], 1);
  EXPECT_EQ(quantize(Tensor::vector({100.0}), p).ints[0], 3);
  EXPECT_EQ(quantize(Tensor::vector({-7.0}), p).ints[0], 0);
  EXPECT_EQ(fake_quant_value(Tensor::vector({0.6}), p)[0], 0.5);
  // Exact grid points are fixed points.
  EXPECT_EQ(fake_quant_value(Tensor::vector({0, 0.5, 1.0, 1.5}), p), Tensor::vector({0, 0.5, 1.0, 1.5}));
}

TEST(Quantize, HalvesRoundToEven) {
  const QuantParams p = grid(1.0, 0.0, 3);
  EXPECT_EQ(quantize(Tensor::vector({0.5, 1.5, 2.5}), p).ints, (std::vector<std::int64_t>{0, 2, 2}));
}

TEST(Quantize, RoundingOffsetShiftsLevel) {
  QuantParams p = grid(0.5, 0.0, 2);
  p.rounding_offsets = Tensor::vector({0.5});
  EXPECT_EQ(quantize(Tensor::vector({0.24}), p).ints[0], 1);
  p.rounding_offsets = Tensor::vector({-0.5});
  EXPECT_EQ(quantize(Tensor::vector({0.74}), p).ints[0], 1);
}

TEST(Quantize, InvalidParamsRejected) {
  EXPECT_THROW(quantize(Tensor::vector({1}), grid(0.0, 0.0, 4)), ConfigError);
  EXPECT_THROW(quantize(Tensor::vector({1}), grid(1.0, 0.0, 1)), ConfigError);
  QuantParams p = grid(1.0, 0.0, 4);
  p.rounding_offsets = Tensor::vector({0.7});
  EXPECT_THROW(quantize(Tensor::vector({1}), p), ConfigError);
}

TEST(FakeQuant, StraightThroughGradient) {
  Tape t;
  const Var x = t.param(Tensor::vector({0.1, 0.4, 0.9, 5.0, -2.0}));
  t.backward(ops::sum(fake_quant(x, grid(0.5, 0.0, 2))));
  // Clipped elements (5.0 above, -2.0 below) pass no gradient.
  EXPECT_EQ(t.grad(x), Tensor::vector({1, 1, 1, 0, 0}));
}

TEST(FakeQuant, OffsetGradientIsScaled) {
  Tape t;
  const Var x = t.constant(Tensor::vector({0.24, 9.0}));
  const Var off = t.param(Tensor::vector({0.0, 0.0}));
  t.backward(ops::sum(fake_quant(x, grid(0.5, 0.0, 2), off)));
  EXPECT_EQ(t.grad(off), Tensor::vector({0.5, 0.0}));
}

TEST(FakeQuant, BypassIsIdentity) {
  Tape t;
  const Var x = t.constant(Tensor::vector({0.123456789, -1e9}));
  EXPECT_EQ(fake_quant(x, QuantParams::bypassed()).value(), x.value());
}

TEST(Properties, RandomDraws) {
  Rng rng(2024);
  for (int i = 0; i < 2000; ++i) {
    const auto d = testkit::random_quant_draw(rng);
    const std::string e = testkit::check_quant_draw(d);
    ASSERT_TRUE(e.empty()) << "draw " << i << ": " << e;
  }
}

TEST(Network, BypassMatchesFullPrecision) {
  const auto net = fixture_4x16();
  const auto q = quantize_network(net, QuantSpec::bypass(net->block_count()), moons().calibration.inputs, {});
  EXPECT_EQ(predict_logits(*net, moons().test.inputs), predict_logits(*net, moons().test.inputs, q));
}

TEST(Network, W4A4WithinToleranceOfFullPrecision) {
  const auto net = fixture_4x16();
  const double fp = evaluate_model(*net, moons().test).top1;
  const auto q = quantize_network(net, QuantSpec::uniform(net->block_count(), 4, 4, 8), moons().calibration.inputs, {});
  const double acc = evaluate_model(*net, moons().test, q).top1;
  EXPECT_GE(acc, fp - 0.15);
  EXPECT_LE(acc, fp + 0.01);
}

TEST(Network, FewerBitsCostMore) {
  const auto net = fixture_4x16();
  const auto& cal = moons().calibration;
  const double fp = forward_capture(*net, cal.inputs, cal.labels).loss;
  auto loss_at = [&](int bits) {
    const auto q = quantize_network(net, QuantSpec::uniform(net->block_count(), bits, bits, 8), cal.inputs, {});
    return forward_capture(*net, cal.inputs, cal.labels, q).loss - fp;
  };
  EXPECT_GT(loss_at(2), loss_at(4));
}

TEST(Network, AverageBits) {
  const auto net = fixture_4x16();
  QuantSpec spec = QuantSpec::uniform(4, 3, 3, 4);
  spec.block_weight_bits = {2, 3, 4, 3};
  const auto q = quantize_network(net, spec, moons().calibration.inputs, {});
  EXPECT_DOUBLE_EQ(q.average_block_weight_bits(), 3.0);
}

TEST(Serialization, QuantizedModelRoundTrip) {
  const auto net = fixture_4x16();
  auto q = quantize_network(net, QuantSpec::uniform(4, 3, 3, 4), moons().calibration.inputs, {});
  Tensor off(net->blocks[1].first.weight.shape(), 0.25);
  q.block(1).first.rounding_offsets = off;
  const json doc = json::parse(quantized_model_to_json(q).dump());
  const QuantizedNetwork back = quantized_model_from_json(doc);
  EXPECT_TRUE(back == q);
  EXPECT_EQ(predict_logits(*net, moons().test.inputs, q), predict_logits(back.network(), moons().test.inputs, back));
}
