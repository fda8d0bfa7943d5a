#pragma once

// Randomised property checks shared by the unit suites and the acceptance
// runner. Each returns an empty string on success, otherwise a description of
// the first violation.

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "packptq/allocator.hpp"
#include "packptq/packer.hpp"
#include "packptq/quant.hpp"
#include "packptq/rng.hpp"

namespace packptq::testkit {

// ---------------------------------------------------------------------------
// Quantizer

struct QuantDraw {
  Tensor x;
  QuantParams params;
};

/// A random tensor (rank 1 or 2, at most 64 elements) with either MinMax or
/// arbitrary per-tensor/per-channel parameters.
inline QuantDraw random_quant_draw(Rng& rng) {
  QuantDraw d;
  const bool matrix = rng.below(2) == 0;
  const std::size_t rows = matrix ? 1 + rng.below(8) : 1 + rng.below(64);
  const std::size_t cols = matrix ? 1 + rng.below(8) : 1;
  d.x = matrix ? Tensor(Shape{rows, cols}, 0.0) : Tensor(Shape{rows}, 0.0);
  const double spread = std::exp(rng.uniform(-4.0, 4.0));
  const double centre = rng.uniform(-2.0, 2.0) * spread;
  for (double& v : d.x.data()) v = centre + spread * rng.normal();
  const int bits = 2 + static_cast<int>(rng.below(7));
  const bool per_channel = matrix && rng.below(2) == 0;
  const std::size_t axis = per_channel ? rng.below(2) : 0;
  if (rng.below(2) == 0) {
    d.params = calibrate_minmax(d.x, bits, per_channel, axis);
  } else {
    d.params.bits = bits;
    d.params.per_channel = per_channel;
    d.params.axis = axis;
    const std::size_t channels = per_channel ? d.x.dim(axis) : 1;
    d.params.scale.clear();
    d.params.zero_point.clear();
    for (std::size_t c = 0; c < channels; ++c) {
      d.params.scale.push_back(spread * std::exp(rng.uniform(-3.0, 1.0)));
      d.params.zero_point.push_back(rng.uniform(-0.5, 1.5) * d.params.qmax());
    }
  }
  return d;
}

/// Idempotence, per-channel monotonicity, the s/2 bound inside the clipping
/// range, and at most 2^k distinct levels per channel.
inline std::string check_quant_draw(const QuantDraw& d) {
  const QuantParams& p = d.params;
  const Tensor y = fake_quant_value(d.x, p);
  const QuantizedTensor q = quantize(d.x, p);
  const double qmax = p.qmax();
  const std::size_t channels = p.channels();
  auto channel_of = [&](std::size_t i) {
    if (!p.per_channel) return std::size_t{0};
    const std::size_t cols = d.x.rank() == 2 ? d.x.dim(1) : 1;
    return p.axis == 0 ? i / cols : i % cols;
  };
  std::ostringstream err;

  const Tensor yy = fake_quant_value(y, p);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::abs(yy[i] - y[i]) > 1e-9 * std::max(1.0, std::abs(y[i]))) {
      err << "not idempotent at " << i << ": " << y[i] << " -> " << yy[i];
      return err.str();
    }
  }

  std::vector<std::set<std::int64_t>> levels(channels);
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const std::size_t c = channel_of(i);
    if (q.ints[i] < 0 || static_cast<double>(q.ints[i]) > qmax) {
      err << "integer " << q.ints[i] << " outside [0, " << qmax << "]";
      return err.str();
    }
    levels[c].insert(q.ints[i]);
    const double s = p.scale[c], z = p.zero_point[c];
    const double lo = s * (0.0 - z), hi = s * (qmax - z);
    if (d.x[i] >= lo && d.x[i] <= hi && std::abs(d.x[i] - y[i]) > 0.5 * s * (1.0 + 1e-9)) {
      err << "error " << std::abs(d.x[i] - y[i]) << " exceeds s/2 = " << 0.5 * s;
      return err.str();
    }
    for (std::size_t j = 0; j < d.x.size(); ++j) {
      if (channel_of(j) == c && d.x[i] <= d.x[j] && y[i] > y[j]) {
        err << "not monotone: x " << d.x[i] << " <= " << d.x[j] << " but q " << y[i] << " > " << y[j];
        return err.str();
      }
    }
  }
  for (const auto& l : levels) {
    if (static_cast<double>(l.size()) > std::ldexp(1.0, p.bits)) {
      err << l.size() << " distinct levels at " << p.bits << " bits";
      return err.str();
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Packing

/// Reference characterisation of a HAda plan: every pack starts at the
/// leftmost minimum of the scores up to and including its last block.
inline std::string check_hada_plan(const std::vector<double>& scores, const PackPlan& plan) {
  if (!is_partition(plan.packs, scores.size())) return "not a partition";
  for (const PackRange& r : plan.packs) {
    std::size_t best = 0;
    for (std::size_t t = 1; t <= r.last; ++t)
      if (scores[t] < scores[best]) best = t;
    if (best != r.first) {
      return "pack [" + std::to_string(r.first + 1) + ", " + std::to_string(r.last + 1) +
             "] does not start at the prefix minimum " + std::to_string(best + 1);
    }
  }
  return {};
}

inline std::vector<double> random_scores(Rng& rng, std::size_t n) {
  std::vector<double> s(n);
  const bool coarse = rng.below(3) == 0;  // force ties
  for (double& v : s) v = coarse ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 1.0);
  return s;
}

/// Validity, replay determinism and the prefix-minimum characterisation on
/// `trials` random score vectors with n <= 64.
inline std::string check_packing_properties(std::uint64_t seed, std::size_t trials) {
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rng.below(64);
    const auto scores = random_scores(rng, n);
    const PackPlan a = partition_hada(scores);
    if (!(a == partition_hada(scores))) return "replay differs at trial " + std::to_string(t);
    if (auto e = check_hada_plan(scores, a); !e.empty()) return "trial " + std::to_string(t) + ": " + e;

    const std::size_t cap = 1 + rng.below(6);
    const PackPlan c = partition_hada(scores, cap);
    if (!is_partition(c.packs, n)) return "capped plan is not a partition at trial " + std::to_string(t);
    for (const PackRange& r : c.packs)
      if (r.size() > cap) return "cap exceeded at trial " + std::to_string(t);

    const std::size_t target = 1 + rng.below(n);
    const PackPlan r1 = partition_random(n, target, t), r2 = partition_random(n, target, t);
    if (!is_partition(r1.packs, n) || r1.packs.size() != target) return "random plan invalid at trial " + std::to_string(t);
    if (!(r1 == r2)) return "random replay differs at trial " + std::to_string(t);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Bit allocation

inline AllocationProblem random_mckp(Rng& rng) {
  AllocationProblem pr;
  const std::size_t m = 1 + rng.below(8);
  const std::size_t kcount = 1 + rng.below(4);
  std::vector<int> pool{2, 3, 4, 5, 6, 8};
  rng.shuffle(pool.begin(), pool.end());
  pr.candidates.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(kcount));
  for (std::size_t j = 0; j < m; ++j) {
    pr.params.push_back(1 + rng.below(200));
    pr.omega.push_back(rng.below(5) == 0 ? 0.0 : rng.uniform(-0.2, 1.0));
  }
  const int kmin = *std::min_element(pr.candidates.begin(), pr.candidates.end());
  const int kmax = *std::max_element(pr.candidates.begin(), pr.candidates.end());
  std::uint64_t lo = 0, hi = 0;
  for (auto p : pr.params) {
    lo += static_cast<std::uint64_t>(kmin) * p;
    hi += static_cast<std::uint64_t>(kmax) * p;
  }
  pr.budget = lo + rng.below(hi - lo + 50);
  return pr;
}

struct Enumerated {
  std::vector<int> bits;
  double objective = 0.0;
  std::uint64_t cost = 0;
};

/// Exhaustive search with the same tie rule as the solver: highest
/// objective, then lowest cost, then the lexicographically smallest vector.
inline Enumerated enumerate_mckp(const AllocationProblem& pr) {
  std::vector<int> k = pr.candidates;
  std::sort(k.begin(), k.end());
  const std::size_t m = pr.packs();
  Enumerated best;
  bool found = false;
  std::vector<int> cur(m);
  auto visit = [&](auto&& self, std::size_t j, double obj, std::uint64_t cost) -> void {
    if (cost > pr.budget) return;
    if (j == m) {
      const double tol = 1e-12 * std::max({1.0, std::abs(obj), std::abs(best.objective)});
      const bool better = !found || obj > best.objective + tol || (std::abs(obj - best.objective) <= tol && cost < best.cost);
      if (better) {
        best = {cur, obj, cost};
        found = true;
      }
      return;
    }
    for (int b : k) {
      cur[j] = b;
      self(self, j + 1, obj + b * pr.omega[j], cost + static_cast<std::uint64_t>(b) * pr.params[j]);
    }
  };
  visit(visit, 0, 0.0, 0);
  return best;
}

/// DP against enumeration (objective and vector) and budget monotonicity.
inline std::string check_allocator_properties(std::uint64_t seed, std::size_t trials) {
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const AllocationProblem pr = random_mckp(rng);
    const BitAllocation dp = allocate_bits(pr);
    const Enumerated ex = enumerate_mckp(pr);
    const double tol = 1e-9 * std::max(1.0, std::abs(ex.objective));
    if (std::abs(dp.objective - ex.objective) > tol) {
      return "trial " + std::to_string(t) + ": objective " + std::to_string(dp.objective) + " vs " +
             std::to_string(ex.objective);
    }
    if (dp.bits != ex.bits) return "trial " + std::to_string(t) + ": bit vector differs from enumeration";
    if (dp.cost > pr.budget) return "trial " + std::to_string(t) + ": over budget";

    AllocationProblem wider = pr;
    wider.budget += 1 + rng.below(400);
    if (allocate_bits(wider).objective < dp.objective - tol) {
      return "trial " + std::to_string(t) + ": objective fell when the budget grew";
    }
  }
  return {};
}

}  // namespace packptq::testkit
