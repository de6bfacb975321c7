#pragma once

// Reverse-mode automatic differentiation over dense tensors. A Tape records
// primitive operations in execution order; backward() replays them in reverse,
// accumulating adjoints additively into every tracked node. One tape is
// single-threaded; independent tapes may run on independent threads.

#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pspopt/nmath.hpp"
#include "pspopt/tensor.hpp"

namespace psp::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* t, std::size_t idx) : tape_(t), idx_(idx) {}
  const Tensor& value() const;
  const Tensor& grad() const;
  bool tracked() const;
  std::size_t index() const { return idx_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t idx_ = 0;
};

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool tracked = false;
    bool has_grad = false;
    std::function<void(Tape&)> back;
  };

  Var leaf(Tensor value, bool requires_grad = true) {
    return Var(this, push(std::move(value), requires_grad, nullptr));
  }
  Var constant(Tensor value) { return Var(this, push(std::move(value), false, nullptr)); }
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  std::size_t push(Tensor value, bool tracked, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor(), tracked, false, std::move(back)});
    return nodes_.size() - 1;
  }

  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  Node& node(std::size_t i) { return nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }

  void add_grad(std::size_t i, const Tensor& g) {
    Node& n = nodes_[i];
    if (!n.tracked) return;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    double* dst = n.grad.data();
    const double* src = g.data();
    const std::size_t m = n.grad.size();
    for (std::size_t k = 0; k < m; ++k) dst[k] += src[k];
  }

  const Tensor& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Reverse pass from a scalar output. Each tracked leaf receives
  /// d(out)/d(leaf), accumulated across all paths. Calling it a second
  /// time without reset_grads() is an error.
  void backward(const Var& out) {
    if (out.tape() != this) throw ShapeError("backward: output belongs to a different tape");
    if (nodes_[out.index()].value.size() != 1)
      throw ShapeError("backward: output is not a scalar, shape " +
                       shape_str(nodes_[out.index()].value.shape()));
    if (backward_done_)
      throw NumericError("backward: called twice on the same tape without reset_grads()");
    backward_done_ = true;
    Node& o = nodes_[out.index()];
    if (!o.tracked) return;  // nothing depends on a tracked leaf
    o.grad = Tensor(o.value.shape(), std::vector<double>{1.0});
    o.has_grad = true;
    for (std::size_t i = out.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.back) n.back(*this);
    }
  }

  void reset_grads() {
    for (auto& n : nodes_) {
      n.grad = Tensor();
      n.has_grad = false;
    }
    backward_done_ = false;
  }

 private:
  // deque keeps references from value()/grad() stable across pushes
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(idx_); }
inline const Tensor& Var::grad() const { return tape_->grad(idx_); }
inline bool Var::tracked() const { return tape_->node(idx_).tracked; }

// ---------------------------------------------------------------------------
// broadcasting helpers (numpy trailing-dimension rules)

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` as seen from coordinates of `out` (0 on broadcast axes).
inline std::vector<std::size_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - in.size());
    st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= in[i];
  }
  return st;
}

/// Sum-reduces `g` (shaped like `out`) back onto `target` shape.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor r(target);
  const Shape& os = g.shape();
  const auto st = bcast_strides(target, os);
  std::vector<std::size_t> coord(os.size(), 0);
  const double* gp = g.data();
  double* rp = r.data();
  for (std::size_t lin = 0; lin < g.size(); ++lin) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < os.size(); ++d) src += coord[d] * st[d];
    rp[src] += gp[lin];
    for (std::size_t d = os.size(); d-- > 0;) {
      if (++coord[d] < os[d]) break;
      coord[d] = 0;
    }
  }
  return r;
}

namespace detail {

inline void check_same_tape(const char* op, const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ShapeError(std::string(op) + ": operands on different tapes");
}

template <typename FwdFn>
Var binary_elementwise(const char* op, const Var& a, const Var& b, FwdFn f,
                       const std::function<void(Tape&, std::size_t, std::size_t, std::size_t)>& back) {
  check_same_tape(op, a, b);
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out;
  if (av.same_shape(bv)) {
    out = Tensor(av.shape());
    const double* ap = av.data();
    const double* bp = bv.data();
    double* op_ = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) op_[i] = f(ap[i], bp[i]);
  } else {
    const Shape os = broadcast_shape(op, av.shape(), bv.shape());
    out = Tensor(os);
    const auto sa = bcast_strides(av.shape(), os);
    const auto sb = bcast_strides(bv.shape(), os);
    std::vector<std::size_t> coord(os.size(), 0);
    double* op_ = out.data();
    for (std::size_t lin = 0; lin < out.size(); ++lin) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < os.size(); ++d) {
        ia += coord[d] * sa[d];
        ib += coord[d] * sb[d];
      }
      op_[lin] = f(av[ia], bv[ib]);
      for (std::size_t d = os.size(); d-- > 0;) {
        if (++coord[d] < os[d]) break;
        coord[d] = 0;
      }
    }
  }
  const bool tracked = a.tracked() || b.tracked();
  std::size_t out_idx = t.push(std::move(out), tracked, nullptr);
  if (tracked) {
    t.node(out_idx).back = [back, ai = a.index(), bi = b.index(), out_idx](Tape& tp) {
      back(tp, out_idx, ai, bi);
    };
  }
  return Var(&t, out_idx);
}

// Maps output linear index -> parent linear index under broadcasting.
struct BcastIndex {
  std::vector<std::size_t> strides;
  Shape out;
  BcastIndex(const Shape& in, const Shape& o) : strides(bcast_strides(in, o)), out(o) {}
  std::size_t operator()(std::size_t lin) const {
    std::size_t idx = 0;
    for (std::size_t d = out.size(); d-- > 0;) {
      const std::size_t c = lin % out[d];
      lin /= out[d];
      idx += c * strides[d];
    }
    return idx;
  }
};

template <typename FwdFn, typename DerivFn>
Var unary_elementwise(const Var& x, FwdFn f, DerivFn df) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const double* xp = xv.data();
  double* op_ = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op_[i] = f(xp[i]);
  const bool tracked = x.tracked();
  std::size_t out_idx = t.push(std::move(out), tracked, nullptr);
  if (tracked) {
    t.node(out_idx).back = [xi = x.index(), out_idx, df](Tape& tp) {
      const Tensor& g = tp.grad(out_idx);
      const Tensor& xv2 = tp.value(xi);
      const Tensor& yv = tp.value(out_idx);
      Tensor contrib(g.shape());
      const double* gp = g.data();
      const double* xp2 = xv2.data();
      const double* yp = yv.data();
      double* cp = contrib.data();
      for (std::size_t i = 0; i < g.size(); ++i) cp[i] = gp[i] * df(xp2[i], yp[i]);
      tp.add_grad(xi, contrib);
    };
  }
  return Var(&t, out_idx);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

inline Var add(const Var& a, const Var& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](Tape& t, std::size_t out, std::size_t ai, std::size_t bi) {
        const Tensor& g = t.grad(out);
        t.add_grad(ai, reduce_to(g, t.value(ai).shape()));
        t.add_grad(bi, reduce_to(g, t.value(bi).shape()));
      });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](Tape& t, std::size_t out, std::size_t ai, std::size_t bi) {
        const Tensor& g = t.grad(out);
        t.add_grad(ai, reduce_to(g, t.value(ai).shape()));
        Tensor neg(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        t.add_grad(bi, reduce_to(neg, t.value(bi).shape()));
      });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](Tape& t, std::size_t out, std::size_t ai, std::size_t bi) {
        const Tensor& g = t.grad(out);
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        const detail::BcastIndex ia(av.shape(), g.shape());
        const detail::BcastIndex ib(bv.shape(), g.shape());
        Tensor ca(g.shape()), cb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ca[i] = g[i] * bv[ib(i)];
          cb[i] = g[i] * av[ia(i)];
        }
        t.add_grad(ai, reduce_to(ca, av.shape()));
        t.add_grad(bi, reduce_to(cb, bv.shape()));
      });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](Tape& t, std::size_t out, std::size_t ai, std::size_t bi) {
        const Tensor& g = t.grad(out);
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        const detail::BcastIndex ia(av.shape(), g.shape());
        const detail::BcastIndex ib(bv.shape(), g.shape());
        Tensor ca(g.shape()), cb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bvv = bv[ib(i)];
          ca[i] = g[i] / bvv;
          cb[i] = -g[i] * av[ia(i)] / (bvv * bvv);
        }
        t.add_grad(ai, reduce_to(ca, av.shape()));
        t.add_grad(bi, reduce_to(cb, bv.shape()));
      });
}

inline Var mul_const(const Var& a, double c) { return mul(a, a.tape()->constant(c)); }
inline Var add_const(const Var& a, double c) { return add(a, a.tape()->constant(c)); }
inline Var neg(const Var& a) { return mul_const(a, -1.0); }

// ---------------------------------------------------------------------------
// nonlinearities

inline Var leaky_relu(const Var& x, double slope = 0.01) {
  return detail::unary_elementwise(
      x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

inline Var tanh(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return std::tanh(v); },
                                   [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return std::exp(v); },
                                   [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return std::log(v); },
                                   [](double v, double) { return 1.0 / v; });
}

inline Var erf(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return erf_approx(v); },
                                   [](double v, double) { return erf_deriv(v); });
}

inline Var cos(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return std::cos(v); },
                                   [](double v, double) { return -std::sin(v); });
}

inline Var softplus(const Var& x) {
  return detail::unary_elementwise(x, [](double v) { return psp::softplus(v); },
                                   [](double v, double) { return psp::sigmoid(v); });
}

/// log(sigmoid(x)), numerically stable at both tails.
inline Var logsigmoid(const Var& x) { return neg(softplus(neg(x))); }

inline Var softmax(const Var& x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 1) throw ShapeError("softmax: expects rank-1 input, got " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  double mx = xv[0];
  for (std::size_t i = 1; i < xv.size(); ++i) mx = std::max(mx, xv[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = std::exp(xv[i] - mx);
    s += out[i];
  }
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] /= s;
  const bool tracked = x.tracked();
  std::size_t oi = t.push(std::move(out), tracked, nullptr);
  if (tracked) {
    t.node(oi).back = [xi = x.index(), oi](Tape& tp) {
      const Tensor& g = tp.grad(oi);
      const Tensor& y = tp.value(oi);
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
      Tensor c(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) c[i] = y[i] * (g[i] - dot);
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

// ---------------------------------------------------------------------------
// reductions and structure

inline Var sum(const Var& x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  std::size_t oi = t.push(Tensor::scalar(s), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi](Tape& tp) {
      const double g = tp.grad(oi)[0];
      Tensor c(tp.value(xi).shape(), g);
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return mul_const(sum(x), 1.0 / n);
}

inline Var reshape(const Var& x, Shape shape) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (shape_size(shape) != xv.size())
    throw ShapeError("reshape: cannot reshape " + shape_str(xv.shape()) + " to " + shape_str(shape));
  Tensor out(shape, xv.vec());
  std::size_t oi = t.push(std::move(out), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi](Tape& tp) {
      const Tensor& g = tp.grad(oi);
      Tensor c(tp.value(xi).shape(), g.vec());
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

/// Contiguous sub-range along axis 0.
inline Var slice(const Var& x, std::size_t start, std::size_t len) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() < 1 || start + len > xv.shape()[0])
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for " + shape_str(xv.shape()));
  Shape os = xv.shape();
  os[0] = len;
  const std::size_t inner = xv.size() / xv.shape()[0];
  Tensor out(os);
  std::copy(xv.data() + start * inner, xv.data() + (start + len) * inner, out.data());
  std::size_t oi = t.push(std::move(out), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi, start, inner](Tape& tp) {
      const Tensor& g = tp.grad(oi);
      Tensor c(tp.value(xi).shape());
      std::copy(g.data(), g.data() + g.size(), c.data() + start * inner);
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

inline Var broadcast(const Var& x, Shape shape) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const Shape os = broadcast_shape("broadcast", xv.shape(), shape);
  if (os != shape)
    throw ShapeError("broadcast: " + shape_str(xv.shape()) + " does not broadcast to " +
                     shape_str(shape));
  Tensor out(os);
  const detail::BcastIndex bi(xv.shape(), os);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[bi(i)];
  std::size_t oi = t.push(std::move(out), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi](Tape& tp) {
      tp.add_grad(xi, reduce_to(tp.grad(oi), tp.value(xi).shape()));
    };
  }
  return Var(&t, oi);
}

inline Var transpose(const Var& x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(xv.shape()));
  const std::size_t m = xv.shape()[0], n = xv.shape()[1];
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  std::size_t oi = t.push(std::move(out), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi, m, n](Tape& tp) {
      const Tensor& g = tp.grad(oi);  // [n,m]
      Tensor c(Shape{m, n});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) c[j * n + i] = g[i * m + j];
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check_same_tape("matmul", a, b);
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out(Shape{m, n});
  {
    const double* A = av.data();
    const double* B = bv.data();
    double* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      double* Ci = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* Bp = B + p * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
      }
    }
  }
  const bool tracked = a.tracked() || b.tracked();
  std::size_t oi = t.push(std::move(out), tracked, nullptr);
  if (tracked) {
    t.node(oi).back = [ai = a.index(), bi = b.index(), oi, m, k, n](Tape& tp) {
      const double* G = tp.grad(oi).data();
      const Tensor& av2 = tp.value(ai);
      const Tensor& bv2 = tp.value(bi);
      if (tp.node(ai).tracked) {
        Tensor da(Shape{m, k});
        double* DA = da.data();
        const double* B = bv2.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            if (g == 0.0) continue;
            const double* Bj = B + j;  // column j, stride n
            for (std::size_t p = 0; p < k; ++p) DA[i * k + p] += g * Bj[p * n];
          }
        tp.add_grad(ai, da);
      }
      if (tp.node(bi).tracked) {
        Tensor db(Shape{k, n});
        double* DB = db.data();
        const double* A = av2.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* Gi = G + i * n;
            double* DBp = DB + p * n;
            for (std::size_t j = 0; j < n; ++j) DBp[j] += aip * Gi[j];
          }
        tp.add_grad(bi, db);
      }
    };
  }
  return Var(&t, oi);
}

// ---------------------------------------------------------------------------
// convolution / pooling (NCHW layout)

inline Var conv2d_same(const Var& x, const Var& w, const Var& bias) {
  detail::check_same_tape("conv2d_same", x, w);
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] ||
      wv.shape()[2] % 2 == 0 || wv.shape()[2] != wv.shape()[3])
    throw ShapeError("conv2d_same: incompatible shapes " + shape_str(xv.shape()) + " and " +
                     shape_str(wv.shape()));
  const std::size_t N = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
  const std::size_t F = wv.shape()[0], K = wv.shape()[2];
  const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(K / 2);
  const bool has_bias = bias.valid();
  if (has_bias && (bias.value().rank() != 1 || bias.value().shape()[0] != F))
    throw ShapeError("conv2d_same: bias shape " + shape_str(bias.value().shape()) +
                     " does not match filters [" + std::to_string(F) + "]");

  Tensor out(Shape{N, F, H, W});
  {
    const double* X = xv.data();
    const double* Wt = wv.data();
    double* O = out.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t f = 0; f < F; ++f) {
        double* of = O + ((n * F + f) * H) * W;
        if (has_bias) {
          const double bv = bias.value()[f];
          for (std::size_t i = 0; i < H * W; ++i) of[i] = bv;
        }
        for (std::size_t c = 0; c < C; ++c) {
          const double* xc = X + ((n * C + c) * H) * W;
          for (std::size_t ki = 0; ki < K; ++ki) {
            const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - P;
            const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
            const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
            for (std::size_t kj = 0; kj < K; ++kj) {
              const double wgt = Wt[((f * C + c) * K + ki) * K + kj];
              if (wgt == 0.0) continue;
              const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - P;
              const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
              const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
              for (std::size_t i = i0; i < i1; ++i) {
                const double* xr = xc + (i + di) * W + dj;
                double* orow = of + i * W;
                for (std::size_t j = j0; j < j1; ++j) orow[j] += wgt * xr[j];
              }
            }
          }
        }
      }
  }
  const bool tracked = x.tracked() || w.tracked() || (has_bias && bias.tracked());
  std::size_t oi = t.push(std::move(out), tracked, nullptr);
  if (tracked) {
    const std::size_t bidx = has_bias ? bias.index() : 0;
    t.node(oi).back = [xi = x.index(), wi = w.index(), bidx, has_bias, oi, N, C, H, W, F, K,
                       P](Tape& tp) {
      const double* G = tp.grad(oi).data();
      const Tensor& xv2 = tp.value(xi);
      const Tensor& wv2 = tp.value(wi);
      const bool want_dx = tp.node(xi).tracked;
      const bool want_dw = tp.node(wi).tracked;
      Tensor dx, dw;
      if (want_dx) dx = Tensor(xv2.shape());
      if (want_dw) dw = Tensor(wv2.shape());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f) {
          const double* gf = G + ((n * F + f) * H) * W;
          for (std::size_t c = 0; c < C; ++c) {
            const double* xc = xv2.data() + ((n * C + c) * H) * W;
            double* dxc = want_dx ? dx.data() + ((n * C + c) * H) * W : nullptr;
            for (std::size_t ki = 0; ki < K; ++ki) {
              const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - P;
              const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
              const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
              for (std::size_t kj = 0; kj < K; ++kj) {
                const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - P;
                const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
                const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
                const double wgt = wv2[((f * C + c) * K + ki) * K + kj];
                double acc = 0.0;
                for (std::size_t i = i0; i < i1; ++i) {
                  const double* xr = xc + (i + di) * W + dj;
                  double* dxr = want_dx ? dxc + (i + di) * W + dj : nullptr;
                  const double* grow = gf + i * W;
                  if (want_dx && wgt != 0.0)
                    for (std::size_t j = j0; j < j1; ++j) dxr[j] += wgt * grow[j];
                  if (want_dw)
                    for (std::size_t j = j0; j < j1; ++j) acc += xr[j] * grow[j];
                }
                if (want_dw) dw[((f * C + c) * K + ki) * K + kj] += acc;
              }
            }
          }
        }
      if (want_dx) tp.add_grad(xi, dx);
      if (want_dw) tp.add_grad(wi, dw);
      if (has_bias && tp.node(bidx).tracked) {
        Tensor db(tp.value(bidx).shape());
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t f = 0; f < F; ++f) {
            const double* gf = G + ((n * F + f) * H) * W;
            double s = 0.0;
            for (std::size_t i = 0; i < H * W; ++i) s += gf[i];
            db[f] += s;
          }
        tp.add_grad(bidx, db);
      }
    };
  }
  return Var(&t, oi);
}

inline Var conv2d_same(const Var& x, const Var& w) { return conv2d_same(x, w, Var()); }

inline Var avgpool2x2(const Var& x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.shape()[2] % 2 != 0 || xv.shape()[3] % 2 != 0)
    throw ShapeError("avgpool2x2: expects [N,C,H,W] with even H,W, got " + shape_str(xv.shape()));
  const std::size_t N = xv.shape()[0], C = xv.shape()[1], H = xv.shape()[2], W = xv.shape()[3];
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out(Shape{N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* xp = xv.data() + nc * H * W;
    double* op_ = out.data() + nc * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const double* r0 = xp + (2 * i) * W + 2 * j;
        const double* r1 = r0 + W;
        op_[i * Wo + j] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  std::size_t oi = t.push(std::move(out), x.tracked(), nullptr);
  if (x.tracked()) {
    t.node(oi).back = [xi = x.index(), oi, N, C, H, W, Ho, Wo](Tape& tp) {
      const Tensor& g = tp.grad(oi);
      Tensor c(tp.value(xi).shape());
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* gp = g.data() + nc * Ho * Wo;
        double* cp = c.data() + nc * H * W;
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            const double q = 0.25 * gp[i * Wo + j];
            double* r0 = cp + (2 * i) * W + 2 * j;
            double* r1 = r0 + W;
            r0[0] += q;
            r0[1] += q;
            r1[0] += q;
            r1[1] += q;
          }
      }
      tp.add_grad(xi, c);
    };
  }
  return Var(&t, oi);
}

// ---------------------------------------------------------------------------
// small dense SPD solve / log-determinant (rank M x M, M modest)

namespace detail {

// Lower Cholesky factor of a dense SPD matrix; throws on non-SPD input.
inline std::vector<double> chol_lower(const double* A, std::size_t m) {
  std::vector<double> L(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = A[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= L[i * m + k] * L[j * m + k];
      if (i == j) {
        if (s <= 0.0) throw NumericError("spd factorization: matrix not positive definite");
        L[i * m + i] = std::sqrt(s);
      } else {
        L[i * m + j] = s / L[j * m + j];
      }
    }
  }
  return L;
}

inline void chol_solve(const std::vector<double>& L, std::size_t m, double* x) {
  for (std::size_t i = 0; i < m; ++i) {
    double s = x[i];
    for (std::size_t k = 0; k < i; ++k) s -= L[i * m + k] * x[k];
    x[i] = s / L[i * m + i];
  }
  for (std::size_t i = m; i-- > 0;) {
    double s = x[i];
    for (std::size_t k = i + 1; k < m; ++k) s -= L[k * m + i] * x[k];
    x[i] = s / L[i * m + i];
  }
}

}  // namespace detail

/// Solves A y = b for SPD A (shape [M,M], b [M] or [M,1]); differentiable in both.
inline Var spd_solve(const Var& a, const Var& b) {
  detail::check_same_tape("spd_solve", a, b);
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || av.shape()[0] != av.shape()[1])
    throw ShapeError("spd_solve: A must be square, got " + shape_str(av.shape()));
  const std::size_t m = av.shape()[0];
  if (bv.size() != m)
    throw ShapeError("spd_solve: rhs shape " + shape_str(bv.shape()) + " does not match A " +
                     shape_str(av.shape()));
  auto L = detail::chol_lower(av.data(), m);
  Tensor y(bv.shape(), bv.vec());
  detail::chol_solve(L, m, y.data());
  const bool tracked = a.tracked() || b.tracked();
  std::size_t oi = t.push(std::move(y), tracked, nullptr);
  if (tracked) {
    t.node(oi).back = [ai = a.index(), bi = b.index(), oi, m, L = std::move(L)](Tape& tp) {
      const Tensor& g = tp.grad(oi);
      std::vector<double> db(g.data(), g.data() + m);
      detail::chol_solve(L, m, db.data());  // A^{-1} g
      if (tp.node(bi).tracked) tp.add_grad(bi, Tensor(tp.value(bi).shape(), db));
      if (tp.node(ai).tracked) {
        const Tensor& yv = tp.value(oi);
        Tensor da(Shape{m, m});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) da[i * m + j] = -db[i] * yv[j];
        tp.add_grad(ai, da);
      }
    };
  }
  return Var(&t, oi);
}

/// log det(A) for SPD A; gradient is A^{-1}.
inline Var spd_logdet(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.shape()[0] != av.shape()[1])
    throw ShapeError("spd_logdet: A must be square, got " + shape_str(av.shape()));
  const std::size_t m = av.shape()[0];
  auto L = detail::chol_lower(av.data(), m);
  double ld = 0.0;
  for (std::size_t i = 0; i < m; ++i) ld += 2.0 * std::log(L[i * m + i]);
  std::size_t oi = t.push(Tensor::scalar(ld), a.tracked(), nullptr);
  if (a.tracked()) {
    t.node(oi).back = [ai = a.index(), oi, m, L = std::move(L)](Tape& tp) {
      const double g = tp.grad(oi)[0];
      Tensor da(Shape{m, m});
      // A^{-1} column by column
      std::vector<double> col(m);
      for (std::size_t j = 0; j < m; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[j] = 1.0;
        detail::chol_solve(L, m, col.data());
        for (std::size_t i = 0; i < m; ++i) da[i * m + j] = g * col[i];
      }
      tp.add_grad(ai, da);
    };
  }
  return Var(&t, oi);
}

}  // namespace psp::ad
