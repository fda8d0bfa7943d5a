#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "packptq/error.hpp"
#include "packptq/rng.hpp"

namespace packptq {

/// Inclusive 0-based block range.
struct PackRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const noexcept { return last - first + 1; }
  friend bool operator==(const PackRange&, const PackRange&) = default;
};

enum class PackStrategy { none, hada, random, fixed };

inline const char* to_string(PackStrategy s) {
  switch (s) {
    case PackStrategy::none: return "none";
    case PackStrategy::hada: return "hada";
    case PackStrategy::random: return "random";
    case PackStrategy::fixed: return "fixed";
  }
  return "?";
}

inline PackStrategy parse_strategy(const std::string& s) {
  if (s == "none") return PackStrategy::none;
  if (s == "hada") return PackStrategy::hada;
  if (s == "random") return PackStrategy::random;
  if (s == "fixed") return PackStrategy::fixed;
  throw ConfigError("unknown packing strategy '" + s + "'; expected none, hada, random or fixed");
}

struct PackPlan {
  std::vector<PackRange> packs;  // ascending, contiguous, covering every block
  std::vector<double> scores;    // block scores the plan was derived from (may be empty)
  PackStrategy strategy = PackStrategy::none;
  std::uint64_t seed = 0;        // random strategy
  std::size_t fixed_size = 0;    // fixed strategy
  std::size_t max_pack_size = 0; // 0 = uncapped
  bool capped = false;           // the size cap split at least one pack

  std::size_t block_count() const { return packs.empty() ? 0 : packs.back().last + 1; }

  /// Index of the pack holding block b.
  std::size_t pack_of(std::size_t b) const {
    for (std::size_t i = 0; i < packs.size(); ++i)
      if (b >= packs[i].first && b <= packs[i].last) return i;
    throw ConfigError("pack plan does not cover block " + std::to_string(b + 1));
  }

  friend bool operator==(const PackPlan&, const PackPlan&) = default;
};

/// True when `packs` are ascending, contiguous, disjoint and cover 0..n-1.
inline bool is_partition(const std::vector<PackRange>& packs, std::size_t n) {
  std::size_t next = 0;
  for (const PackRange& p : packs) {
    if (p.first != next || p.last < p.first) return false;
    next = p.last + 1;
  }
  return next == n && n > 0;
}

namespace detail {

/// Leftmost minimum of scores[lo..hi].
inline std::size_t argmin(const std::vector<double>& scores, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t t = lo + 1; t <= hi; ++t)
    if (scores[t] < scores[best]) best = t;
  return best;
}

inline void split_oversized(const std::vector<double>& scores, PackRange r, std::size_t cap,
                            std::vector<PackRange>& out, bool& capped) {
  if (cap == 0 || r.size() <= cap) {
    out.push_back(r);
    return;
  }
  capped = true;
  const std::size_t cut = argmin(scores, r.first + 1, r.last);
  split_oversized(scores, {r.first, cut - 1}, cap, out, capped);
  split_oversized(scores, {cut, r.last}, cap, out, capped);
}

}  // namespace detail

/// Hessian-guided adaptive packing. The search window starts as the whole
/// network; each round cuts at the lowest-scoring block t_min of the window
/// (leftmost on ties), emits [t_min, end] as a pack and shrinks the window's
/// end to t_min - 1.
inline PackPlan partition_hada(const std::vector<double>& scores, std::size_t max_pack_size = 0) {
  if (scores.empty()) throw ConfigError("partition_hada: no block scores");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw NumericalError("partition_hada: score of block " + std::to_string(i + 1) + " is NaN");
    if (!std::isfinite(scores[i])) throw NumericalError("partition_hada: score of block " + std::to_string(i + 1) + " is not finite");
  }
  std::vector<PackRange> reversed;
  const std::size_t start = 0;
  std::size_t end = scores.size() - 1;
  while (true) {
    const std::size_t t_min = detail::argmin(scores, start, end);
    reversed.push_back({t_min, end});
    if (t_min == start) break;
    end = t_min - 1;
  }
  PackPlan plan;
  plan.strategy = PackStrategy::hada;
  plan.scores = scores;
  plan.max_pack_size = max_pack_size;
  for (auto it = reversed.rbegin(); it != reversed.rend(); ++it) {
    detail::split_oversized(scores, *it, max_pack_size, plan.packs, plan.capped);
  }
  return plan;
}

/// `target` contiguous packs with cut points drawn uniformly without replacement.
inline PackPlan partition_random(std::size_t n, std::size_t target, std::uint64_t seed) {
  if (n == 0 || target < 1 || target > n) {
    throw ConfigError("partition_random: pack count " + std::to_string(target) + " not in 1.." + std::to_string(n));
  }
  std::vector<std::size_t> cuts;
  for (std::size_t t = 1; t < n; ++t) cuts.push_back(t);  // a cut at t starts a pack at block t
  Rng rng = Rng::derive(seed, 0xBAC);
  rng.shuffle(cuts.begin(), cuts.end());
  cuts.resize(target - 1);
  std::sort(cuts.begin(), cuts.end());
  PackPlan plan;
  plan.strategy = PackStrategy::random;
  plan.seed = seed;
  std::size_t first = 0;
  for (std::size_t c : cuts) {
    plan.packs.push_back({first, c - 1});
    first = c;
  }
  plan.packs.push_back({first, n - 1});
  return plan;
}

inline PackPlan partition_fixed(std::size_t n, std::size_t size) {
  if (n == 0) throw ConfigError("partition_fixed: no blocks");
  if (size < 1) throw ConfigError("partition_fixed: size must be >= 1");
  PackPlan plan;
  plan.strategy = PackStrategy::fixed;
  plan.fixed_size = size;
  for (std::size_t first = 0; first < n; first += size) plan.packs.push_back({first, std::min(first + size, n) - 1});
  return plan;
}

/// Every block its own pack: block-wise reconstruction.
inline PackPlan partition_none(std::size_t n) {
  PackPlan plan = partition_fixed(n, 1);
  plan.strategy = PackStrategy::none;
  plan.fixed_size = 0;
  return plan;
}

}  // namespace packptq
