#include <gtest/gtest.h>

#include "../support/quadratics.hpp"
#include "packptq/serialize.hpp"

using namespace packptq;

namespace {

const Network& fixture() {
  static const Network net = load_model(std::string(PACKPTQ_FIXTURES) + "/resmlp-4x16.json");
  return net;
}

const Dataset& moons() {
  static const Dataset ds = generate_dataset(DatasetSpec::defaults_for("two-moons-10class"), 1024, 7);
  return ds;
}

PerturbationConfig small_config(std::uint64_t seed = 1) {
  PerturbationConfig c;
  c.num_samples = 512;
  c.items = 8;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(QuantLoss, ZeroPerturbationIsZero) {
  const auto& cal = moons().calibration.head(64);
  const CaptureRecord cap = forward_capture(fixture(), cal.inputs, cal.labels);
  EXPECT_EQ(block_quant_loss(fixture(), cap, cal.labels, 1, Tensor(cap.block_outputs[1].shape(), 0.0)), 0.0);
}

TEST(QuantLoss, MatchesQuadraticThroughIdentityHead) {
  // Zero-branch blocks and an identity head: the loss seen from block 1 is
  // cross-entropy of z itself, so a tiny shift agrees with the gradient.
  Network net = build_model("resmlp-2x3", Shape{2}, 3, 1);
  for (Block& b : net.blocks) b.second.weight = Tensor(b.second.weight.shape(), 0.0);
  net.head.weight = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const LabeledSet cal = generate_dataset(DatasetSpec{"gaussian-blobs", 3, 2, false}, 64, 2).calibration;
  const CaptureRecord cap = forward_capture(net, cal.inputs, cal.labels);
  const Tensor g = block_output_gradient(net, cap, cal.labels, 0);
  Tensor dz(g.shape(), 0.0);
  double lin = 0.0;
  for (std::size_t i = 0; i < dz.size(); ++i) {
    dz[i] = 1e-6 * static_cast<double>(i % 5) - 2e-6;
    lin += dz[i] * g[i];
  }
  EXPECT_NEAR(block_quant_loss(net, cap, cal.labels, 0, dz), lin, 1e-10);
}

TEST(Gradient, MatchesFiniteDifferences) {
  const LabeledSet cal = moons().calibration.head(16);
  const CaptureRecord cap = forward_capture(fixture(), cal.inputs, cal.labels);
  const Tensor g = block_output_gradient(fixture(), cap, cal.labels, 1);
  const Tensor fd = finite_diff_gradient(
      [&](const Tensor& z) {
        Tensor dz = z;
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] -= cap.block_outputs[1][i];
        return block_quant_loss(fixture(), cap, cal.labels, 1, dz);
      },
      cap.block_outputs[1], 1e-5);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], fd[i], std::max(1e-7, 1e-4 * std::abs(fd[i])));
}

TEST(Gradient, ZeroHeadGivesZero) {
  Network net = fixture();
  net.head.weight = Tensor(net.head.weight.shape(), 0.0);
  const LabeledSet cal = moons().calibration.head(16);
  const CaptureRecord cap = forward_capture(net, cal.inputs, cal.labels);
  EXPECT_EQ(block_output_gradient(net, cap, cal.labels, 2), Tensor(cap.block_outputs[2].shape(), 0.0));
}

TEST(Estimator, IndefiniteQuadratic) {
  // On a quadratic the second-order residual is exactly dz^T A dz. The trace
  // nearly cancels here, so judge the estimate by its own standard error.
  const auto q = testkit::random_quadratic(6, 3, true);
  const auto pts = testkit::quadratic_points(q, 4, 9);
  const BlockScore s = estimate_score(pts, 0.3, 4000, 5);
  EXPECT_LE(std::abs(s.score - q.trace_over_n), 3.0 * s.stderr_score);
}

TEST(Estimator, KnownTwoByTwo) {
  const Tensor a = Tensor::matrix({{2, 1}, {1, 2}});
  const std::vector<ProbePoint> pts{{Tensor::matrix({{0.3, -0.2}}), testkit::quadratic_loss(a, Tensor(Shape{2, 1}, 0.5))}};
  const BlockScore s = estimate_score(pts, 0.1, 20000, 11);
  EXPECT_LT(std::abs(s.score - 2.0), 0.05);
  EXPECT_NEAR(hessian_mean_fd(pts, 1e-3), 2.0, 1e-6);
}

TEST(Estimator, LinearLossScoresZero) {
  const std::vector<ProbePoint> pts{{Tensor::matrix({{1.0, 2.0, 3.0}}), [](Tape&, const Var& z) { return ops::row_sum(z); }}};
  EXPECT_NEAR(estimate_score(pts, 0.1, 1000, 1).score, 0.0, 1e-10);
}

TEST(Estimator, IdentityQuadraticScoresOne) {
  const Tensor a = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const std::vector<ProbePoint> pts{{Tensor::matrix({{0.5, 0.5, 0.5}}), testkit::quadratic_loss(a, Tensor(Shape{3, 1}, 0.0))}};
  EXPECT_NEAR(estimate_score(pts, 0.2, 100, 3).score, 1.0, 1e-10);
}

TEST(Estimator, StandardErrorShrinksWithSamples) {
  const auto q = testkit::random_quadratic(8, 4, false);
  const auto pts = testkit::quadratic_points(q, 4, 2);
  const double se1 = estimate_score(pts, 0.2, 1000, 1).stderr_score;
  const double se4 = estimate_score(pts, 0.2, 4000, 1).stderr_score;
  EXPECT_NEAR(se4 / se1, 0.5, 0.1);
}

TEST(Estimator, RejectsBadArguments) {
  const std::vector<ProbePoint> none;
  EXPECT_THROW(estimate_score(none, 0.1, 10, 1), ConfigError);
  const auto pts = testkit::quadratic_points(testkit::random_quadratic(2, 1, false), 1, 1);
  EXPECT_THROW(estimate_score(pts, 0.0, 10, 1), ConfigError);
}

TEST(Estimator, HugeSigmaReportsSigma) {
  PerturbationConfig cfg = small_config();
  cfg.sigma = 1e300;
  try {
    estimate_block_score(fixture(), moons().calibration, 0, cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("sigma"), std::string::npos);
  }
}

TEST(Network, ScoreMatchesOracle) {
  PerturbationConfig cfg = small_config(3);
  cfg.num_samples = 8000;
  for (std::size_t b : {0u, 3u}) {
    const BlockScore s = estimate_block_score(fixture(), moons().calibration, b, cfg);
    const double oracle = hessian_mean_oracle(fixture(), moons().calibration, b, 1e-3, cfg);
    EXPECT_LE(std::abs(s.score - oracle), 3.0 * s.stderr_score + 1e-6) << "block " << b + 1;
  }
}

TEST(Network, IdentityTailGivesEqualScores) {
  Network net = fixture();
  for (std::size_t b = 1; b < net.block_count(); ++b) {
    net.blocks[b].second.weight = Tensor(net.blocks[b].second.weight.shape(), 0.0);
    net.blocks[b].second.bias = Tensor(net.blocks[b].second.bias.shape(), 0.0);
  }
  const auto report = score_all_blocks(net, moons().calibration, small_config());
  // Blocks 1..n all feed the same function (the head) at the same points.
  for (std::size_t b = 1; b < report.size(); ++b) EXPECT_EQ(report[b].score, report[0].score);
}

TEST(Network, ReportShapeAndDeterminism) {
  const auto a = score_all_blocks(fixture(), moons().calibration, small_config(4));
  const auto b = score_all_blocks(fixture(), moons().calibration, small_config(4));
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].block, i);
    EXPECT_EQ(a[i].n, 16u);
    EXPECT_GE(a[i].samples, 512u);
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(scores_to_json(a).dump(), scores_to_json(scores_from_json(scores_to_json(a))).dump());
}

TEST(Network, BlockIndexChecked) {
  EXPECT_THROW(estimate_block_score(fixture(), moons().calibration, 4, small_config()), ConfigError);
}
