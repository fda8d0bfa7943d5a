#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "packptq/error.hpp"
#include "packptq/packer.hpp"
#include "packptq/qnetwork.hpp"
#include "packptq/quant.hpp"

namespace packptq {

struct PackSensitivity {
  PackRange range;
  double omega = 0.0;
  std::vector<double> scores;       // S of each block in the pack
  std::vector<double> quant_losses; // per-block quantization loss
};

using SensitivityReport = std::vector<PackSensitivity>;

/// Omega_j = mean over the pack's blocks of S[i] * Lq[i].
inline SensitivityReport compute_sensitivities(const PackPlan& plan, std::span<const double> scores,
                                               std::span<const double> quant_losses) {
  const std::size_t n = plan.block_count();
  if (scores.size() != n || quant_losses.size() != n) {
    throw ConfigError("compute_sensitivities: plan covers " + std::to_string(n) + " blocks but got " +
                      std::to_string(scores.size()) + " scores and " + std::to_string(quant_losses.size()) +
                      " quantization losses");
  }
  SensitivityReport report;
  for (const PackRange& r : plan.packs) {
    PackSensitivity s;
    s.range = r;
    double acc = 0.0;
    for (std::size_t b = r.first; b <= r.last; ++b) {
      s.scores.push_back(scores[b]);
      s.quant_losses.push_back(quant_losses[b]);
      acc += scores[b] * quant_losses[b];
    }
    s.omega = acc / static_cast<double>(r.size());
    report.push_back(std::move(s));
  }
  return report;
}

/// One instance of the pack bit-width problem:
/// maximise sum b_j * omega_j subject to sum b_j * p_j <= budget, b_j in candidates.
struct AllocationProblem {
  std::vector<double> omega;
  std::vector<std::uint64_t> params;
  std::vector<int> candidates;
  std::uint64_t budget = 0;

  std::size_t packs() const { return omega.size(); }

  void validate() const {
    if (omega.empty()) throw ConfigError("allocate_bits: no packs");
    if (params.size() != omega.size()) throw ConfigError("allocate_bits: parameter counts do not match packs");
    if (candidates.empty()) throw ConfigError("allocate_bits: empty candidate bit-width set");
    for (int k : candidates) {
      if (k < 1) throw ConfigError("allocate_bits: candidate bit-widths must be positive");
    }
    for (double w : omega) {
      if (!std::isfinite(w)) throw NumericalError("allocate_bits: non-finite pack sensitivity");
    }
  }

  /// Cost of giving every pack the smallest candidate.
  std::uint64_t min_cost() const {
    const int kmin = *std::min_element(candidates.begin(), candidates.end());
    std::uint64_t c = 0;
    for (std::uint64_t p : params) c += static_cast<std::uint64_t>(kmin) * p;
    return c;
  }
};

struct BitAllocation {
  std::vector<int> bits;
  std::vector<int> candidates;
  std::uint64_t budget = 0;
  std::vector<std::uint64_t> params;
  std::vector<double> omega;
  double objective = 0.0;
  std::uint64_t cost = 0;

  double average_bits() const {
    const auto total = std::accumulate(params.begin(), params.end(), std::uint64_t{0});
    return total ? static_cast<double>(cost) / static_cast<double>(total) : 0.0;
  }

  friend bool operator==(const BitAllocation&, const BitAllocation&) = default;
};

namespace detail {

// Objectives within this relative distance count as ties.
inline bool objective_equal(double a, double b) {
  return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}

/// Ordering: larger objective, then smaller cost.
inline bool better(double obj_a, std::uint64_t cost_a, double obj_b, std::uint64_t cost_b) {
  if (!objective_equal(obj_a, obj_b)) return obj_a > obj_b;
  return cost_a < cost_b;
}

inline std::vector<int> sorted_candidates(std::vector<int> k) {
  std::sort(k.begin(), k.end());
  k.erase(std::unique(k.begin(), k.end()), k.end());
  return k;
}

inline BitAllocation finish(const AllocationProblem& pr, std::vector<int> bits) {
  BitAllocation a;
  a.bits = std::move(bits);
  a.candidates = sorted_candidates(pr.candidates);
  a.budget = pr.budget;
  a.params = pr.params;
  a.omega = pr.omega;
  for (std::size_t j = 0; j < a.bits.size(); ++j) {
    a.objective += a.bits[j] * pr.omega[j];
    a.cost += static_cast<std::uint64_t>(a.bits[j]) * pr.params[j];
  }
  return a;
}

inline void check_feasible(const AllocationProblem& pr) {
  const std::uint64_t min_cost = pr.min_cost();
  if (min_cost > pr.budget) {
    throw ConfigError("allocate_bits: budget " + std::to_string(pr.budget) + " is infeasible; minimum achievable cost is " +
                      std::to_string(min_cost));
  }
}

}  // namespace detail

/// Exact multiple-choice knapsack by dynamic programming over the remaining
/// budget. Costs are divided by the gcd of all item costs. Ties go to the
/// lower cost, then to the lexicographically smallest bit vector.
inline BitAllocation allocate_bits(const AllocationProblem& pr) {
  pr.validate();
  detail::check_feasible(pr);
  const auto k = detail::sorted_candidates(pr.candidates);
  const std::size_t m = pr.packs();

  std::uint64_t g = 0;
  for (std::size_t j = 0; j < m; ++j)
    for (int b : k) g = std::gcd(g, static_cast<std::uint64_t>(b) * pr.params[j]);
  if (g == 0) g = 1;  // all packs empty
  // Spending more than the unconstrained maximum is pointless, so cap the table.
  std::uint64_t max_useful = 0;
  for (std::size_t j = 0; j < m; ++j) max_useful += static_cast<std::uint64_t>(k.back()) * pr.params[j];
  const std::size_t width = static_cast<std::size_t>(std::min(pr.budget, max_useful) / g) + 1;
  if (width > (std::size_t{1} << 26) / (m + 1)) throw ConfigError("allocate_bits: budget grid too large for the exact solver");

  // best[j][c]: best (objective, cost) for packs j..m-1 with c budget units left.
  struct Cell {
    double obj = -std::numeric_limits<double>::infinity();
    std::uint64_t cost = 0;
    bool feasible = false;
  };
  std::vector<std::vector<Cell>> best(m + 1, std::vector<Cell>(width));
  for (auto& cell : best[m]) cell = {0.0, 0, true};
  for (std::size_t j = m; j-- > 0;) {
    for (std::size_t c = 0; c < width; ++c) {
      Cell& cell = best[j][c];
      for (int b : k) {
        const std::uint64_t units = static_cast<std::uint64_t>(b) * pr.params[j] / g;
        if (units > c) break;
        const Cell& rest = best[j + 1][c - units];
        if (!rest.feasible) continue;
        const double obj = b * pr.omega[j] + rest.obj;
        const std::uint64_t cost = static_cast<std::uint64_t>(b) * pr.params[j] + rest.cost;
        if (!cell.feasible || detail::better(obj, cost, cell.obj, cell.cost)) cell = {obj, cost, true};
      }
    }
  }
  // Forward pass: the smallest bit-width that still attains the optimum.
  std::vector<int> bits;
  std::size_t c = width - 1;
  for (std::size_t j = 0; j < m; ++j) {
    const Cell& target = best[j][c];
    bool chosen = false;
    for (int b : k) {
      const std::uint64_t units = static_cast<std::uint64_t>(b) * pr.params[j] / g;
      if (units > c) break;
      const Cell& rest = best[j + 1][c - units];
      if (!rest.feasible) continue;
      const double obj = b * pr.omega[j] + rest.obj;
      const std::uint64_t cost = static_cast<std::uint64_t>(b) * pr.params[j] + rest.cost;
      if (detail::objective_equal(obj, target.obj) && cost == target.cost) {
        bits.push_back(b);
        c -= units;
        chosen = true;
        break;
      }
    }
    if (!chosen) throw NumericalError("allocate_bits: reconstruction of the optimal vector failed");
  }
  return detail::finish(pr, std::move(bits));
}

/// Exhaustive enumeration in lexicographic order with the same tie rules.
inline BitAllocation allocate_bits_bruteforce(const AllocationProblem& pr) {
  pr.validate();
  detail::check_feasible(pr);
  const auto k = detail::sorted_candidates(pr.candidates);
  const std::size_t m = pr.packs();
  double combos = std::pow(static_cast<double>(k.size()), static_cast<double>(m));
  if (combos > 1e6) throw ConfigError("allocate_bits_bruteforce: instance too large (" + std::to_string(combos) + " combinations)");
  std::vector<std::size_t> idx(m, 0);
  std::vector<int> best_bits;
  double best_obj = 0.0;
  std::uint64_t best_cost = 0;
  while (true) {
    double obj = 0.0;
    std::uint64_t cost = 0;
    for (std::size_t j = 0; j < m; ++j) {
      obj += k[idx[j]] * pr.omega[j];
      cost += static_cast<std::uint64_t>(k[idx[j]]) * pr.params[j];
    }
    if (cost <= pr.budget && (best_bits.empty() || detail::better(obj, cost, best_obj, best_cost))) {
      best_bits.clear();
      for (std::size_t j = 0; j < m; ++j) best_bits.push_back(k[idx[j]]);
      best_obj = obj;
      best_cost = cost;
    }
    std::size_t pos = m;
    while (pos > 0 && ++idx[pos - 1] == k.size()) idx[--pos] = 0;
    if (pos == 0) break;
  }
  return detail::finish(pr, std::move(best_bits));
}

inline AllocationProblem make_problem(const SensitivityReport& report, std::span<const std::uint64_t> pack_params,
                                      std::vector<int> candidates, std::uint64_t budget) {
  if (pack_params.size() != report.size()) throw ConfigError("allocate_bits: parameter counts do not match packs");
  AllocationProblem pr;
  for (const auto& s : report) pr.omega.push_back(s.omega);
  pr.params.assign(pack_params.begin(), pack_params.end());
  pr.candidates = std::move(candidates);
  pr.budget = budget;
  return pr;
}

/// Weight parameters per pack, from per-block counts.
inline std::vector<std::uint64_t> pack_param_counts(const PackPlan& plan, std::span<const std::size_t> block_params) {
  std::vector<std::uint64_t> out;
  for (const PackRange& r : plan.packs) {
    std::uint64_t p = 0;
    for (std::size_t b = r.first; b <= r.last; ++b) p += block_params[b];
    out.push_back(p);
  }
  return out;
}

/// Candidate set bracketing a nominal width: {2,3,4} for 3, {3,4,8} for 4,
/// otherwise {k-1, k, k+1} clamped to >= 2.
inline std::vector<int> default_candidates(int nominal) {
  if (nominal >= kBypassBits) return {nominal};
  if (nominal == 3) return {2, 3, 4};
  if (nominal == 4) return {3, 4, 8};
  return {std::max(2, nominal - 1), nominal, nominal + 1};
}

/// Increase of the mean task loss on `calibration` when only block `b` is
/// MinMax-quantized (weights and input activation) at `bits`.
inline double pack_quant_loss(std::shared_ptr<const Network> net, const LabeledSet& calibration, std::size_t b, int bits,
                              const ActivationCalibration& cal = {}) {
  if (b >= net->block_count()) throw ConfigError("pack_quant_loss: block index out of range");
  if (bits >= kBypassBits) return 0.0;
  QuantSpec spec = QuantSpec::bypass(net->block_count());
  spec.block_weight_bits[b] = bits;
  spec.activation_bits = bits;
  QuantizedNetwork q = quantize_network(net, spec, calibration.inputs, cal);
  // Only this block's input is quantized; every other activation stays exact.
  for (std::size_t o = 0; o < net->block_count(); ++o)
    if (o != b) q.block(o).input = QuantParams::bypassed();
  const double fp = forward_capture(*net, calibration.inputs, calibration.labels).loss;
  return forward_capture(*net, calibration.inputs, calibration.labels, q).loss - fp;
}

/// Per-block bit-widths implied by a pack plan and its allocation.
inline std::vector<int> block_bits(const PackPlan& plan, const BitAllocation& alloc) {
  if (alloc.bits.size() != plan.packs.size()) {
    throw ConfigError("bit allocation has " + std::to_string(alloc.bits.size()) + " entries for " +
                      std::to_string(plan.packs.size()) + " packs");
  }
  std::vector<int> out(plan.block_count());
  for (std::size_t j = 0; j < plan.packs.size(); ++j)
    for (std::size_t b = plan.packs[j].first; b <= plan.packs[j].last; ++b) out[b] = alloc.bits[j];
  return out;
}

}  // namespace packptq
