// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include "../support/properties.hpp"
#include "../support/quadratics.hpp"
#include "../support/random_graphs.hpp"
#include "packptq/pipeline.hpp"

using namespace packptq;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = PACKPTQ_FIXTURES;
const fs::path kConfigs = fs::path(PACKPTQ_FIXTURES).parent_path() / "configs";

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void fail(const std::string& why) {
    if (pass) detail.str("");
    if (!pass) detail << "; ";
    pass = false;
    detail << why;
  }
};

int failures = 0;

void criterion(int id, const char* title, double limit_seconds, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.fail(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > limit_seconds) {
    std::ostringstream s;
    s << "took " << secs << " s, limit " << limit_seconds << " s";
    o.fail(s.str());
  }
  if (!o.pass) ++failures;
  std::printf("criterion %d: %s  %s [%.1f s / %.0f s] %s\n", id, o.pass ? "PASS" : "FAIL", title, secs, limit_seconds,
              o.detail.str().c_str());
  std::fflush(stdout);
}

RunConfig reference_config(std::uint64_t seed, const std::string& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> o{"model=" + kFixtures + "/resmlp-8x32.json", "seed=" + std::to_string(seed), "out=" + out};
  o.insert(o.end(), extra.begin(), extra.end());
  return load_run_config(kConfigs / "w3a3_hada_mp.json", o);
}

std::string scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("packptq_acceptance_" + name);
  fs::remove_all(p);
  return p.string();
}

// ---------------------------------------------------------------------------

void score_estimator(Outcome& o) {
  constexpr std::size_t kSamples = 20000;
  double worst_rel = 0.0, worst_z = 0.0;
  std::size_t d_index = 0;
  for (std::size_t d : {4u, 8u, 16u, 32u, 64u}) {
    for (bool indefinite : {false, true}) {
      const auto q = testkit::random_quadratic(d, 100 + d_index++, indefinite);
      const auto pts = testkit::quadratic_points(q, 16, d);
      const BlockScore s = estimate_score(pts, 0.05, kSamples / pts.size(), 7 + d);
      const double rel = std::abs(s.score - q.trace_over_n) / std::abs(q.trace_over_n);
      const double z = std::abs(s.score - q.trace_over_n) / s.stderr_score;
      worst_rel = std::max(worst_rel, rel);
      worst_z = std::max(worst_z, z);
      if (rel > 0.05) o.fail("quadratic d=" + std::to_string(d) + " relative error " + std::to_string(rel));
      if (z > 3.0) o.fail("quadratic d=" + std::to_string(d) + " off by " + std::to_string(z) + " SE");
    }
  }
  const Dataset ds = generate_dataset(DatasetSpec::defaults_for("two-moons-10class"), 1024, 7);
  double worst_net_z = 0.0;
  std::size_t blocks = 0;
  for (const char* name : {"resmlp-8x32.json", "resmlp-4x16.json"}) {
    const Network net = load_model(kFixtures + "/" + name);
    PerturbationConfig cfg;
    cfg.num_samples = kSamples;
    cfg.seed = 11;
    for (std::size_t b = 0; b < net.block_count(); ++b, ++blocks) {
      const BlockScore s = estimate_block_score(net, ds.calibration, b, cfg);
      if (s.n > 64) o.fail(std::string(name) + ": block output dim exceeds 64");
      const double h1 = hessian_mean_oracle(net, ds.calibration, b, 1e-3, cfg);
      const double h2 = hessian_mean_oracle(net, ds.calibration, b, 2e-3, cfg);
      // Second differences are O(h^2) accurate; the step-halving gap bounds that error.
      const double oracle_se = std::abs(h2 - h1) / 3.0;
      const double se = std::hypot(s.stderr_score, oracle_se);
      const double z = std::abs(s.score - h1) / se;
      worst_net_z = std::max(worst_net_z, z);
      if (z > 3.0) {
        o.fail(std::string(name) + " block " + std::to_string(b + 1) + ": estimate " + std::to_string(s.score) +
               " vs oracle " + std::to_string(h1) + " (" + std::to_string(z) + " SE)");
      }
    }
  }
  if (o.pass) {
    o.detail << "10 quadratics worst rel err " << worst_rel << ", worst " << worst_z << " SE; " << blocks
             << " fixture blocks worst " << worst_net_z << " combined SE";
  }
}

void gradients(Outcome& o) {
  double worst_rel = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto g = testkit::smooth_random_graph(2024, i, 1e-3);
    const auto r = testkit::check_graph_gradients(g, 1e-5, 1e-4, 1e-7);
    worst_rel = std::max(worst_rel, r.worst_rel);
    checked += r.checked;
    if (!r.ok) o.fail("graph " + std::to_string(i) + " (" + g.description + ") rel " + std::to_string(r.worst_rel));
  }
  if (o.pass) o.detail << "50 graphs, " << checked << " partials, worst rel " << worst_rel;
}

void packing(Outcome& o) {
  auto expect = [&](const std::vector<double>& s, std::vector<PackRange> want, const char* label) {
    if (!(partition_hada(s).packs == want)) o.fail(std::string("hand case ") + label);
  };
  expect({0.5, 0.1, 0.9, 0.2, 0.7}, {{0, 0}, {1, 4}}, "[0.5,0.1,0.9,0.2,0.7]");
  expect({0.1, 0.2, 0.3, 0.4, 0.5}, {{0, 4}}, "increasing");
  expect({0.5, 0.4, 0.3, 0.2, 0.1}, {{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}}, "decreasing");
  if (auto e = testkit::check_packing_properties(31337, 1000); !e.empty()) o.fail(e);
  if (o.pass) o.detail << "3 hand cases, 1000 random vectors";
}

void allocator(Outcome& o) {
  if (auto e = testkit::check_allocator_properties(4242, 1000); !e.empty()) o.fail(e);
  if (o.pass) o.detail << "1000 instances vs enumeration, monotone in budget";
}

void quantizer(Outcome& o) {
  Rng rng(555);
  for (int i = 0; i < 10000; ++i) {
    const auto d = testkit::random_quant_draw(rng);
    if (auto e = testkit::check_quant_draw(d); !e.empty()) {
      o.fail("draw " + std::to_string(i) + ": " + e);
      break;
    }
  }
  QuantParams p;
  p.scale = {0.5};
  p.zero_point = {0.0};
  p.bits = 2;
  if (quantize(Tensor::vector({0.6}), p).ints[0] != 1) o.fail("0.6 at s=0.5,k=2 did not map to 1");
  if (quantize(Tensor::vector({100.0}), p).ints[0] != 3) o.fail("large value not clipped at 3");
  if (o.pass) o.detail << "10000 draws, hand cases exact";
}

void descent(Outcome& o) {
  std::size_t packs = 0;
  double worst_ratio = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Session s(reference_config(seed, scratch("descent")));
    for (const PackTrace& t : s.reconstructed().traces) {
      ++packs;
      const double ratio = t.initial_loss > 0 ? t.final_loss / t.initial_loss : 0.0;
      worst_ratio = std::max(worst_ratio, ratio);
      if (t.final_loss > 1.01 * t.initial_loss) {
        o.fail("seed " + std::to_string(seed) + " blocks " + std::to_string(t.pack.first + 1) + ".." +
               std::to_string(t.pack.last + 1) + ": " + std::to_string(t.initial_loss) + " -> " +
               std::to_string(t.final_loss));
      }
    }
  }
  if (o.pass) o.detail << packs << " packs over 5 seeds, worst final/initial " << worst_ratio;
}

void ablation(Outcome& o) {
  const RunConfig c = load_run_config(kConfigs / "ablation_w3a3.json",
                                      {"model=" + kFixtures + "/resmlp-8x32.json", "out=" + scratch("ablation")});
  const AblationResult r = run_ablation(c);
  auto med = [&](const char* id) {
    const auto m = r.row(id).median();
    if (!m) throw NumericalError(std::string("no successful runs for ") + id);
    return *m;
  };
  const double minmax = med("minmax/uniform"), none = med("none/uniform"), random = med("random/uniform"),
               hada = med("hada/uniform"), mp = med("hada/mp");
  if (!(minmax <= none)) o.fail("MinMax above block-wise");
  if (!(none <= hada)) o.fail("block-wise above HAda");
  if (!(hada >= none)) o.fail("HAda below none");
  if (!(mp >= hada)) o.fail("HAda+MP below HAda");
  o.detail << (o.pass ? "" : "; ") << "medians: minmax " << minmax << ", none " << none << ", random " << random << ", hada " << hada
           << ", hada+mp " << mp;
}

void degenerate(Outcome& o) {
  const Dataset ds = generate_dataset(DatasetSpec::defaults_for("two-moons-10class"), 1024, 7, 2048);
  for (const char* name : {"resmlp-8x32.json", "resmlp-4x16.json"}) {
    const auto net = std::make_shared<const Network>(load_model(kFixtures + "/" + name));
    const auto q = quantize_network(net, QuantSpec::bypass(net->block_count()), ds.calibration.inputs, {});
    if (!(evaluate_model(*net, ds.test) == evaluate_model(*net, ds.test, q))) o.fail(std::string(name) + ": bypass accuracy differs");
    if (!(predict_logits(*net, ds.test.inputs) == predict_logits(*net, ds.test.inputs, q))) o.fail(std::string(name) + ": bypass logits differ");
  }
  const auto net = std::make_shared<const Network>(load_model(kFixtures + "/resmlp-8x32.json"));
  const auto base = quantize_network(net, QuantSpec::uniform(net->block_count(), 3, 3, 4), ds.calibration.inputs, {});
  ReconstructionConfig rc;
  rc.iterations = 100;
  rc.seed = 3;
  const auto a = reconstruct_network(base, partition_none(net->block_count()), ds.calibration, rc);
  const auto b = reconstruct_blockwise(base, ds.calibration, rc);
  if (!(a.model == b.model)) o.fail("singleton plan parameters differ from block-wise");
  if (!(predict_logits(*net, ds.test.inputs, a.model) == predict_logits(*net, ds.test.inputs, b.model))) {
    o.fail("singleton plan outputs differ from block-wise");
  }
  if (o.pass) o.detail << "bypass exact on 2 fixtures; singleton plan bit-identical to block-wise";
}

void determinism(Outcome& o) {
  std::string first;
  for (int run = 0; run < 2; ++run) {
    // Same output directory both times so the echoed config is identical.
    const RunConfig c = reference_config(1, scratch("determinism"));
    Session s(c);
    cmd_pipeline(s);
    const std::string report = strip_timing(read_json_file(c.out / "report.json")).dump();
    if (run == 0) first = report;
    else if (report != first) o.fail("reports differ after removing timing");
  }
  if (o.pass) o.detail << "two runs byte-identical (" << first.size() << " bytes)";
}

}  // namespace

int main() {
  std::printf("packptq %s acceptance\n", kVersion);
  criterion(1, "score estimator vs Hessian-mean oracle", 120, score_estimator);
  criterion(2, "reverse mode vs central differences", 60, gradients);
  criterion(3, "packing hand cases and properties", 10, packing);
  criterion(4, "allocator vs exhaustive search", 30, allocator);
  criterion(5, "quantizer properties and hand cases", 10, quantizer);
  criterion(6, "reconstruction descent, W3/A3, 5 seeds", 300, descent);
  criterion(7, "ablation ordering at W3/A3", 1200, ablation);
  criterion(8, "degenerate equivalences", 120, degenerate);
  criterion(9, "end-to-end determinism", 600, determinism);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
