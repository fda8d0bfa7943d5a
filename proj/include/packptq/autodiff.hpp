#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "packptq/error.hpp"
#include "packptq/tensor.hpp"

namespace packptq {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape it came from is alive and has not been cleared.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id, std::uint64_t generation) : tape_(tape), id_(id), generation_(generation) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
/// them backwards is a valid topological traversal.
class Tape {
 public:
  /// Accumulates the node's output gradient into its parents' gradients.
  /// Entries of `parent_grads` are null for parents that need no gradient.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), "constant", {}, nullptr, false); }

  Var param(Tensor value) { return push(std::move(value), "param", {}, nullptr, true); }

  Var record(Tensor value, std::string op, std::vector<Var> parents, BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const Var& p : parents) {
      check_owned(p, op);
      needs = needs || nodes_[p.id_].requires_grad;
      ids.push_back(p.id_);
    }
    if (!value.all_finite()) {
      throw NumericalError(op + ": produced non-finite values");
    }
    return push(std::move(value), std::move(op), std::move(ids), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor& value(const Var& v) const {
    check_owned(v, "value");
    return nodes_[v.id_].value;
  }

  bool requires_grad(const Var& v) const {
    check_owned(v, "requires_grad");
    return nodes_[v.id_].requires_grad;
  }

  /// Populates gradients of every requires_grad node reachable from `loss`.
  void backward(const Var& loss) {
    if (!loss.valid()) throw Error("backward: loss was not produced by a forward pass");
    check_owned(loss, "backward");
    const Tensor& lv = nodes_[loss.id_].value;
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss.id_].grad = Tensor(lv.shape(), 1.0);
    std::vector<Tensor*> pgrads;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      pgrads.clear();
      for (std::size_t pid : n.parents) {
        Node& p = nodes_[pid];
        if (!p.requires_grad) {
          pgrads.push_back(nullptr);
          continue;
        }
        if (p.grad.empty()) p.grad = Tensor(p.value.shape(), 0.0);
        pgrads.push_back(&p.grad);
      }
      n.backward(n.grad, pgrads);
    }
    has_grads_ = true;
  }

  /// Gradient from the last backward pass; zeros for nodes it never reached.
  Tensor grad(const Var& v) const {
    check_owned(v, "grad");
    const Node& n = nodes_[v.id_];
    if (!has_grads_ || n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const std::string& op_name(const Var& v) const { return nodes_.at(v.id_).op; }

  void clear() {
    nodes_.clear();
    has_grads_ = false;
    ++generation_;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string op;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Var push(Tensor value, std::string op, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(op), std::move(parents), std::move(fn)});
    return Var(this, nodes_.size() - 1, generation_);
  }

  void check_owned(const Var& v, const std::string& where) const {
    if (v.tape_ != this) throw Error(where + ": variable belongs to a different tape or none");
    if (v.generation_ != generation_ || v.id_ >= nodes_.size()) {
      throw Error(where + ": variable refers to a cleared tape");
    }
  }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
  bool has_grads_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("Var: not bound to a tape");
  return tape_->value(*this);
}

namespace ops {

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw Error("op applied to an unbound variable");
  return *a.tape();
}

inline void require_same(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same("add", a, b);
  Tensor out = a.value();
  detail::axpy(out, b.value());
  return detail::tape_of(a).record(std::move(out), "add", {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) detail::axpy(*pg[0], g);
    if (pg[1]) detail::axpy(*pg[1], g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same("sub", a, b);
  Tensor out = a.value();
  detail::axpy(out, b.value(), -1.0);
  return detail::tape_of(a).record(std::move(out), "sub", {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) detail::axpy(*pg[0], g);
    if (pg[1]) detail::axpy(*pg[1], g, -1.0);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const Tensor av = a.value();
  const Tensor bv = b.value();
  return detail::tape_of(a).record(std::move(out), "mul", {a, b},
                                   [av, bv](const Tensor& g, std::span<Tensor* const> pg) {
                                     for (std::size_t i = 0; i < g.size(); ++i) {
                                       if (pg[0]) (*pg[0])[i] += g[i] * bv[i];
                                       if (pg[1]) (*pg[1])[i] += g[i] * av[i];
                                     }
                                   });
}

inline Var scale(const Var& a, double alpha) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= alpha;
  return detail::tape_of(a).record(std::move(out), "scale", {a}, [alpha](const Tensor& g, std::span<Tensor* const> pg) {
    detail::axpy(*pg[0], g, alpha);
  });
}

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const Tensor av = a.value();
  const Tensor bv = b.value();
  Tensor out(Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return detail::tape_of(a).record(
      std::move(out), "matmul", {a, b}, [av, bv, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) {
          Tensor& ga = *pg[0];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += s;
            }
        }
        if (pg[1]) {
          Tensor& gb = *pg[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

/// x: [N, C, ...], bias: [C]; broadcast over every axis but 1.
inline Var bias_add(const Var& x, const Var& bias) {
  const Shape& sx = x.shape();
  if (sx.size() < 2 || bias.shape().size() != 1 || bias.shape()[0] != sx[1]) {
    throw ShapeError("bias_add: bias " + to_string(bias.shape()) + " does not match channels of " + to_string(sx));
  }
  const std::size_t n = sx[0], c = sx[1];
  const std::size_t inner = shape_numel(sx) / (n * c);
  Tensor out = x.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < inner; ++r) out[(i * c + ch) * inner + r] += bv[ch];
  return detail::tape_of(x).record(std::move(out), "bias_add", {x, bias},
                                   [n, c, inner](const Tensor& g, std::span<Tensor* const> pg) {
                                     if (pg[0]) detail::axpy(*pg[0], g);
                                     if (pg[1]) {
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t ch = 0; ch < c; ++ch)
                                           for (std::size_t r = 0; r < inner; ++r)
                                             (*pg[1])[ch] += g[(i * c + ch) * inner + r];
                                     }
                                   });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const Tensor xv = x.value();
  return detail::tape_of(x).record(std::move(out), "relu", {x}, [xv](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*pg[0])[i] += g[i];
  });
}

/// Exact GELU: x * Phi(x).
inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v * detail::normal_cdf(v);
  const Tensor xv = x.value();
  return detail::tape_of(x).record(std::move(out), "gelu", {x}, [xv](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      (*pg[0])[i] += g[i] * (detail::normal_cdf(v) + v * detail::normal_pdf(v));
    }
  });
}

/// Stride-1 2D convolution. x: [N, Cin, H, W], w: [Cout, Cin, KH, KW], zero
/// padding `pad` on every side.
inline Var conv2d(const Var& x, const Var& w, std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
    throw ShapeError("conv2d: incompatible input " + to_string(sx) + " and kernel " + to_string(sw));
  }
  const std::size_t n = sx[0], cin = sx[1], h = sx[2], wd = sx[3];
  const std::size_t cout = sw[0], kh = sw[2], kw = sw[3];
  if (h + 2 * pad < kh || wd + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  const Tensor xv = x.value();
  const Tensor wv = w.value();
  Tensor out(Shape{n, cout, oh, ow}, 0.0);

  // Visits every (output, input, weight) index triple that touches real input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const std::size_t widx = ((co * cin + ci) * kh + ki) * kw + kj;
              for (std::size_t oi = 0; oi < oh; ++oi) {
                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) - static_cast<std::ptrdiff_t>(pad);
                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t oj = 0; oj < ow; ++oj) {
                  const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) - static_cast<std::ptrdiff_t>(pad);
                  if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                  const std::size_t xidx = ((b * cin + ci) * h + static_cast<std::size_t>(ii)) * wd + static_cast<std::size_t>(jj);
                  const std::size_t oidx = ((b * cout + co) * oh + oi) * ow + oj;
                  fn(oidx, xidx, widx);
                }
              }
            }
  };
  for_each_tap([&](std::size_t o, std::size_t xi, std::size_t wi) { out[o] += xv[xi] * wv[wi]; });
  return detail::tape_of(x).record(std::move(out), "conv2d", {x, w},
                                   [xv, wv, for_each_tap](const Tensor& g, std::span<Tensor* const> pg) {
                                     Tensor* gx = pg[0];
                                     Tensor* gw = pg[1];
                                     for_each_tap([&](std::size_t o, std::size_t xi, std::size_t wi) {
                                       if (gx) (*gx)[xi] += g[o] * wv[wi];
                                       if (gw) (*gw)[wi] += g[o] * xv[xi];
                                     });
                                   });
}

/// [N, C, H, W] -> [N, C], mean over spatial positions.
inline Var global_avg_pool(const Var& x) {
  const Shape& sx = x.shape();
  if (sx.size() != 4) throw ShapeError("global_avg_pool: expected rank 4, got " + to_string(sx));
  const std::size_t nc = sx[0] * sx[1], hw = sx[2] * sx[3];
  Tensor out(Shape{sx[0], sx[1]}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < hw; ++r) s += xv[i * hw + r];
    out[i] = s / static_cast<double>(hw);
  }
  return detail::tape_of(x).record(std::move(out), "global_avg_pool", {x},
                                   [nc, hw](const Tensor& g, std::span<Tensor* const> pg) {
                                     const double inv = 1.0 / static_cast<double>(hw);
                                     for (std::size_t i = 0; i < nc; ++i)
                                       for (std::size_t r = 0; r < hw; ++r) (*pg[0])[i * hw + r] += g[i] * inv;
                                   });
}

inline Var reshape(const Var& x, Shape shape) {
  const Shape original = x.shape();
  Tensor out = x.value().reshaped(std::move(shape));
  return detail::tape_of(x).record(std::move(out), "reshape", {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    detail::axpy(*pg[0], g);
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return detail::tape_of(x).record(Tensor::scalar(s), "sum", {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    for (double& v : pg[0]->data()) v += g[0];
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return detail::tape_of(x).record(Tensor::scalar(s / n), "mean", {x}, [n](const Tensor& g, std::span<Tensor* const> pg) {
    for (double& v : pg[0]->data()) v += g[0] / n;
  });
}

/// [N, ...] -> [N], sum of each sample's elements.
inline Var row_sum(const Var& x) {
  const Shape& sx = x.shape();
  if (sx.empty()) throw ShapeError("row_sum: scalar input");
  const std::size_t n = sx[0], stride = x.value().size() / n;
  Tensor out(Shape{n}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < stride; ++r) out[i] += xv[i * stride + r];
  return detail::tape_of(x).record(std::move(out), "row_sum", {x}, [n, stride](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < stride; ++r) (*pg[0])[i * stride + r] += g[i];
  });
}

/// Frobenius norm of the whole tensor. The subgradient at 0 is taken as 0.
inline Var frobenius_norm(const Var& x) {
  double ss = 0.0;
  for (double v : x.value().data()) ss += v * v;
  const double norm = std::sqrt(ss);
  const Tensor xv = x.value();
  return detail::tape_of(x).record(Tensor::scalar(norm), "frobenius_norm", {x},
                                   [xv, norm](const Tensor& g, std::span<Tensor* const> pg) {
                                     if (norm == 0.0) return;
                                     for (std::size_t i = 0; i < xv.size(); ++i) (*pg[0])[i] += g[0] * xv[i] / norm;
                                   });
}

/// [N, ...] -> [N], Frobenius norm of each sample.
inline Var sample_norms(const Var& x) {
  const Shape& sx = x.shape();
  if (sx.empty()) throw ShapeError("sample_norms: scalar input");
  const std::size_t n = sx[0], stride = x.value().size() / n;
  const Tensor xv = x.value();
  Tensor out(Shape{n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t r = 0; r < stride; ++r) ss += xv[i * stride + r] * xv[i * stride + r];
    out[i] = std::sqrt(ss);
  }
  const Tensor norms = out;
  return detail::tape_of(x).record(std::move(out), "sample_norms", {x},
                                   [xv, norms, n, stride](const Tensor& g, std::span<Tensor* const> pg) {
                                     for (std::size_t i = 0; i < n; ++i) {
                                       if (norms[i] == 0.0) continue;
                                       const double f = g[i] / norms[i];
                                       for (std::size_t r = 0; r < stride; ++r)
                                         (*pg[0])[i * stride + r] += f * xv[i * stride + r];
                                     }
                                   });
}

/// Per-sample softmax cross-entropy. logits: [N, C]; returns [N].
inline Var softmax_cross_entropy_rows(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s[0], c = s[1];
  const Tensor& lv = logits.value();
  Tensor probs(Shape{n, c}, 0.0);
  Tensor out(Shape{n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    double mx = lv[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv[i * c + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(lv[i * c + j] - lse);
    out[i] = lse - lv[i * c + static_cast<std::size_t>(y)];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::tape_of(logits).record(std::move(out), "softmax_cross_entropy", {logits},
                                        [probs, ys, n, c](const Tensor& g, std::span<Tensor* const> pg) {
                                          for (std::size_t i = 0; i < n; ++i)
                                            for (std::size_t j = 0; j < c; ++j) {
                                              const double t = (static_cast<std::size_t>(ys[i]) == j) ? 1.0 : 0.0;
                                              (*pg[0])[i * c + j] += g[i] * (probs[i * c + j] - t);
                                            }
                                        });
}

/// Batch-mean softmax cross-entropy.
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  return mean(softmax_cross_entropy_rows(logits, labels));
}

}  // namespace ops

/// Central-difference gradient of a scalar function.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error("finite_diff_gradient: step must be positive");
  Tensor grad(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_gradient: non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace packptq
