#pragma once

// Low-rank multivariate Gaussian variational family
//   q(z) = N(mu, diag(d) + L L^T),  L in R^{dz x M},  d stored as log d.
// Sampling uses the reparametrization z = mu + L e1 + sqrt(d) * e2; the
// log-density uses the Woodbury identity and the matrix-determinant lemma,
// so a draw plus its log q costs O(dz M^2) instead of O(dz^3).

#include <cmath>
#include <vector>

#include "pspopt/autodiff.hpp"
#include "pspopt/rng.hpp"

namespace psp::vbem {

struct VParams {
  Tensor mu;    // [dz]
  Tensor logd;  // [dz]
  Tensor l;     // [dz, M]

  static VParams standard(int dz, int rank) {
    VParams v;
    v.mu = Tensor(Shape{(std::size_t)dz});
    v.logd = Tensor(Shape{(std::size_t)dz});  // log d = 0 -> d = 1
    v.l = Tensor(Shape{(std::size_t)dz, (std::size_t)rank});
    return v;
  }

  int dim() const { return static_cast<int>(mu.size()); }
  int rank() const { return static_cast<int>(l.shape()[1]); }

  /// Dense covariance diag(d) + L L^T; small-dz diagnostics only.
  std::vector<double> dense_cov() const {
    const int dz = dim(), m = rank();
    std::vector<double> c(static_cast<std::size_t>(dz) * dz, 0.0);
    for (int i = 0; i < dz; ++i) {
      c[i * dz + i] = std::exp(logd[i]);
      for (int j = 0; j < dz; ++j)
        for (int k = 0; k < m; ++k) c[i * dz + j] += l[i * m + k] * l[j * m + k];
    }
    return c;
  }
};

struct VParamVars {
  ad::Var mu, logd, l;
};

inline VParamVars attach(ad::Tape& t, const VParams& p, bool tracked) {
  return {t.leaf(p.mu, tracked), t.leaf(p.logd, tracked), t.leaf(p.l, tracked)};
}

/// Reparametrized draw for given base noise (eps1 in R^M, eps2 in R^dz).
inline ad::Var sample_z(ad::Tape& t, const VParamVars& v, const std::vector<double>& eps1,
                        const std::vector<double>& eps2) {
  const std::size_t dz = v.mu.value().size();
  const std::size_t m = v.l.value().shape()[1];
  if (eps1.size() != m || eps2.size() != dz)
    throw ShapeError("sample_z: noise dimensions do not match the variational family");
  auto e1 = t.constant(Tensor(Shape{m, 1}, eps1));
  auto le1 = ad::reshape(ad::matmul(v.l, e1), Shape{dz});
  auto sd = ad::exp(ad::mul_const(v.logd, 0.5));
  auto e2 = t.constant(Tensor(Shape{dz}, eps2));
  return ad::add(ad::add(v.mu, le1), ad::mul(sd, e2));
}

/// log q(z) with Sigma = diag(d) + L L^T via Woodbury / determinant lemma.
inline ad::Var log_q(ad::Tape& t, const VParamVars& v, const ad::Var& z) {
  const std::size_t dz = v.mu.value().size();
  const std::size_t m = v.l.value().shape()[1];
  auto dinv = ad::exp(ad::neg(v.logd));                       // [dz]
  auto dl = ad::mul(v.l, ad::reshape(dinv, Shape{dz, 1}));    // D^-1 L
  Tensor eye(Shape{m, m});
  for (std::size_t i = 0; i < m; ++i) eye[i * m + i] = 1.0;
  auto cap = ad::add(ad::matmul(ad::transpose(v.l), dl), t.constant(eye));  // I + L^T D^-1 L
  auto logdet = ad::add(ad::spd_logdet(cap), ad::sum(v.logd));
  auto delta = ad::sub(z, v.mu);
  auto w = ad::mul(delta, dinv);
  auto u = ad::reshape(ad::matmul(ad::transpose(dl), ad::reshape(delta, Shape{dz, 1})), Shape{m});
  auto y = ad::spd_solve(cap, u);
  auto quad = ad::sub(ad::sum(ad::mul(delta, w)), ad::sum(ad::mul(u, y)));
  const double c = static_cast<double>(dz) * std::log(2.0 * M_PI);
  return ad::mul_const(ad::add_const(ad::add(logdet, quad), c), -0.5);
}

struct QSample {
  std::vector<std::vector<double>> z;
  std::vector<double> log_density;
};

/// n draws plus per-draw log q; plain evaluation of the tape path.
inline QSample q_sample(const VParams& p, int n, Rng& rng) {
  if (n < 1) throw ConfigError("q_sample: n must be >= 1");
  QSample out;
  out.z.reserve(n);
  out.log_density.reserve(n);
  for (int i = 0; i < n; ++i) {
    ad::Tape t;
    auto v = attach(t, p, false);
    auto zv = sample_z(t, v, rng.normals(p.rank()), rng.normals(p.dim()));
    auto lq = log_q(t, v, zv);
    out.z.push_back(zv.value().vec());
    out.log_density.push_back(lq.value().item());
  }
  return out;
}

/// Marginal draw of a contiguous block z[offset : offset+len).
inline std::vector<double> sample_block(const VParams& p, int offset, int len, Rng& rng) {
  const int m = p.rank();
  std::vector<double> e1 = rng.normals(m);
  std::vector<double> out(len);
  for (int i = 0; i < len; ++i) {
    double v = p.mu[offset + i];
    for (int k = 0; k < m; ++k) v += p.l[(offset + i) * m + k] * e1[k];
    v += std::exp(0.5 * p.logd[offset + i]) * rng.normal();
    out[i] = v;
  }
  return out;
}

/// Normalized effective sample size in (0, 1]: (sum w)^2 / (N sum w^2).
inline double ess(const std::vector<double>& w) {
  if (w.empty()) throw ConfigError("ess: empty weight vector");
  double s = 0.0, s2 = 0.0;
  for (double x : w) {
    if (x < 0.0) throw ConfigError("ess: negative weight");
    s += x;
    s2 += x * x;
  }
  if (s2 <= 0.0)
    throw NumericError("ess: all weights are zero (tempered domain unreachable)");
  return (s * s) / (static_cast<double>(w.size()) * s2);
}

}  // namespace psp::vbem
