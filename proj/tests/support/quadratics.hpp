#pragma once

// Quadratic losses with known Hessians, expressed as RowLoss callbacks.

#include <cmath>
#include <vector>

#include "packptq/importance.hpp"
#include "packptq/rng.hpp"

namespace packptq::testkit {

struct Quadratic {
  Tensor a;  // [d, d], symmetric
  Tensor b;  // [d, 1]
  double trace_over_n = 0.0;
};

/// L(z) = 0.5 z^T A z + b^T z, one value per row.
inline RowLoss quadratic_loss(const Tensor& a, const Tensor& b) {
  return [a, b](Tape& t, const Var& z) {
    const Var az = ops::matmul(z, t.constant(a));
    const Var quad = ops::scale(ops::row_sum(ops::mul(az, z)), 0.5);
    return ops::add(quad, ops::reshape(ops::matmul(z, t.constant(b)), Shape{z.shape()[0]}));
  };
}

/// A = Q^T D Q / d with a random Q and a spectrum that may contain negative
/// eigenvalues when `indefinite` is set.
inline Quadratic random_quadratic(std::size_t d, std::uint64_t seed, bool indefinite) {
  Rng rng(seed);
  Tensor q(Shape{d, d}, 0.0);
  for (double& v : q.data()) v = rng.normal();
  std::vector<double> spec(d);
  for (double& v : spec) v = indefinite ? rng.uniform(-1.0, 2.0) : rng.uniform(0.1, 2.0);
  Quadratic out;
  out.a = Tensor(Shape{d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += q[k * d + i] * spec[k] * q[k * d + j];
      out.a[i * d + j] = s / static_cast<double>(d);
    }
  out.b = Tensor(Shape{d, 1}, 0.0);
  for (double& v : out.b.data()) v = rng.normal();
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) tr += out.a[i * d + i];
  out.trace_over_n = tr / static_cast<double>(d);
  return out;
}

inline std::vector<ProbePoint> quadratic_points(const Quadratic& q, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = q.a.dim(0);
  std::vector<ProbePoint> pts;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor z(Shape{1, d}, 0.0);
    for (double& v : z.data()) v = rng.normal();
    pts.push_back({z, quadratic_loss(q.a, q.b)});
  }
  return pts;
}

}  // namespace packptq::testkit
