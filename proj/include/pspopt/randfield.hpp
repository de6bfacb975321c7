#pragma once

// Process-structure link: an RBF spectral mixture parameterizes the spectral
// density of a stationary zero-mean Gaussian field; the field is synthesized
// by a two-family cosine spectral representation and thresholded into a
// two-phase microstructure. Everything is differentiable w.r.t. the process
// parameters phi and the transformed phase angles psi_t.

#include <cmath>
#include <cstdint>
#include <vector>

#include "pspopt/autodiff.hpp"
#include "pspopt/nmath.hpp"
#include "pspopt/rng.hpp"

namespace psp::field {

struct SdfConfig {
  int rbf_per_axis = 6;     // Q = rbf_per_axis^2 RBF centers on a uniform grid
  double sigma = 12.0;      // shared bandwidth
  double w_max = 65.0;      // wavenumber cap; centers live in [0, w_max]^2

  int count() const { return rbf_per_axis * rbf_per_axis; }

  void validate() const {
    if (rbf_per_axis < 1) throw ConfigError("sdf: rbf_per_axis must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sdf: sigma must be positive");
    if (!(w_max > 0.0)) throw ConfigError("sdf: w_max must be positive");
  }

  /// Center i as a wavenumber pair; row-major over the uniform grid.
  std::pair<double, double> center(int i) const {
    const int g = rbf_per_axis;
    const double step = g > 1 ? w_max / (g - 1) : 0.0;
    return {(i / g) * step, (i % g) * step};
  }
};

/// gamma_i = softmax(phi)_i; strictly positive and sums to one.
inline std::vector<double> sdf_weights(const std::vector<double>& phi) {
  ad::Tape t;
  auto g = ad::softmax(t.leaf(Tensor(Shape{phi.size()}, phi), false));
  return g.value().vec();
}

/// Spectral density value at w: convex mixture of 2D-normalized Gaussians.
inline double sdf_eval(const SdfConfig& cfg, const std::vector<double>& gamma, double w1, double w2) {
  const double norm = 1.0 / (6.283185307179586476925286766559 * cfg.sigma * cfg.sigma);
  double s = 0.0;
  for (int i = 0; i < cfg.count(); ++i) {
    const auto [c1, c2] = cfg.center(i);
    const double d2 = (w1 - c1) * (w1 - c1) + (w2 - c2) * (w2 - c2);
    s += gamma[i] * norm * std::exp(-0.5 * d2 / (cfg.sigma * cfg.sigma));
  }
  return s;
}

/// Cutoff so that Pr(x_g > x0) = vf for a unit-variance Gaussian pixel.
inline double cutoff_from_vf(double vf) {
  if (!(vf > 0.0 && vf < 1.0)) throw ConfigError("cutoff_from_vf: vf must lie in (0,1)");
  return norm_quantile(1.0 - vf);
}

inline double smooth_threshold_value(double xg, double x0, double eps) {
  return 0.5 * (std::tanh(eps * (xg - x0)) + 1.0);
}

class RandField {
 public:
  RandField(SdfConfig sdf, int n_pixels, int spectral_per_axis)
      : sdf_(sdf), np_(n_pixels), k_(spectral_per_axis) {
    sdf_.validate();
    if (np_ < 2) throw ConfigError("randfield: n_pixels must be >= 2");
    if (k_ < 1) throw ConfigError("randfield: spectral_per_axis must be >= 1");
    build_tables();
  }

  int n_pixels() const { return np_; }
  int spectral_nodes() const { return k_ * k_; }
  /// Length of the phase-angle vector: two cosine families per node.
  int psi_dim() const { return 2 * k_ * k_; }
  const SdfConfig& sdf() const { return sdf_; }

  /// Softmax weights as a tape node.
  ad::Var weights(ad::Tape& t, const ad::Var& phi) const {
    if (phi.value().rank() != 1 || phi.value().shape()[0] != static_cast<std::size_t>(sdf_.count()))
      throw ShapeError("randfield: phi shape " + shape_str(phi.value().shape()) + " != [" +
                       std::to_string(sdf_.count()) + "]");
    return ad::softmax(phi);
  }

  /// Normalized cosine amplitudes A_k (one per spectral node, shared by both
  /// families). Raw mass sqrt(2 G dw1 dw2) is rescaled so that
  /// n_fam * sum(A^2)/2 == 1 exactly, pinning the field variance to one.
  ad::Var amplitudes(ad::Tape& t, const ad::Var& phi) const {
    auto gamma = weights(t, phi);
    auto gcol = ad::reshape(gamma, Shape{static_cast<std::size_t>(sdf_.count()), 1});
    auto h = t.constant(h_table_);
    auto gvals = ad::matmul(h, gcol);  // [K2,1], strictly positive
    const double cell = w_max_step_ * w_max_step_;
    auto raw2 = ad::mul_const(gvals, 2.0 * cell);  // A_raw^2 = 2 G dw1 dw2
    auto total = ad::sum(raw2);
    // A^2 = (2/n_fam) * A_raw^2 / sum(A_raw^2) with n_fam = 2.
    auto log_amp = ad::mul_const(ad::sub(ad::log(raw2), ad::log(total)), 0.5);
    return ad::exp(log_amp);  // [K2,1]
  }

  /// Phase angles in [0, 2pi] from standard-normal latents: 2*pi*Phi(psi_t).
  ad::Var to_phase_angles(ad::Tape& t, const ad::Var& psi_t) const {
    auto u = ad::erf(ad::mul_const(psi_t, 0.70710678118654752440));
    return ad::mul_const(ad::add_const(u, 1.0), 3.1415926535897932384626433832795);
  }

  /// Gaussian field x_g on the pixel grid as a [np, np] tape node,
  /// differentiable in phi and psi_t.
  ad::Var gaussian_field(ad::Tape& t, const ad::Var& phi, const ad::Var& psi_t) const {
    const std::size_t k2 = static_cast<std::size_t>(k_ * k_);
    if (psi_t.value().rank() != 1 || psi_t.value().shape()[0] != 2 * k2)
      throw ShapeError("randfield: psi_t shape " + shape_str(psi_t.value().shape()) + " != [" +
                       std::to_string(2 * k2) + "]");
    auto amp = amplitudes(t, phi);  // [K2,1]
    auto psi = to_phase_angles(t, psi_t);
    auto amp_row = ad::transpose(amp);  // [1,K2]
    ad::Var total;
    for (int fam = 0; fam < 2; ++fam) {
      auto psi_f = ad::reshape(ad::slice(psi, fam * k2, k2), Shape{1, k2});
      auto u = ad::mul(amp_row, ad::cos(psi_f));
      auto v = ad::mul(amp_row, ad::cos(ad::add_const(psi_f, -1.5707963267948966)));  // sin
      auto part = ad::sub(ad::matmul(u, t.constant(fam == 0 ? cos_a_ : cos_b_)),
                          ad::matmul(v, t.constant(fam == 0 ? sin_a_ : sin_b_)));
      total = fam == 0 ? part : ad::add(total, part);
    }
    return ad::reshape(total, Shape{static_cast<std::size_t>(np_), static_cast<std::size_t>(np_)});
  }

  /// Smooth two-phase microstructure in (0,1): (tanh(eps(x_g - x0)) + 1)/2.
  ad::Var smooth_microstructure(ad::Tape& t, const ad::Var& phi, const ad::Var& psi_t, double x0,
                                double eps) const {
    auto xg = gaussian_field(t, phi, psi_t);
    return smooth_threshold(t, xg, x0, eps);
  }

  static ad::Var smooth_threshold(ad::Tape& t, const ad::Var& xg, double x0, double eps) {
    if (!(eps > 0.0)) throw ConfigError("smooth_threshold: eps must be positive");
    auto z = ad::mul_const(ad::add_const(xg, -x0), eps);
    return ad::mul_const(ad::add_const(ad::tanh(z), 1.0), 0.5);
  }

  /// Plain (non-tape) synthesis; same computational path with gradients off.
  std::vector<double> synthesize(const std::vector<double>& phi,
                                 const std::vector<double>& psi_t) const {
    ad::Tape t;
    auto f = gaussian_field(t, t.leaf(Tensor(Shape{phi.size()}, phi), false),
                            t.leaf(Tensor(Shape{psi_t.size()}, psi_t), false));
    return f.value().vec();
  }

  std::vector<std::uint8_t> hard_threshold(const std::vector<double>& xg, double x0) const {
    std::vector<std::uint8_t> b(xg.size());
    for (std::size_t i = 0; i < xg.size(); ++i) b[i] = xg[i] > x0 ? 1 : 0;
    return b;
  }

  /// Binary microstructure draw x ~ p(x | phi) via ancestral phase sampling.
  std::vector<std::uint8_t> sample_binary(const std::vector<double>& phi, double x0, Rng& rng) const {
    return hard_threshold(synthesize(phi, rng.normals(psi_dim())), x0);
  }

  /// Spectral node wavenumber (midpoint grid over [0, w_max]^2).
  std::pair<double, double> node(int idx) const {
    const double dw = sdf_.w_max / k_;
    return {(idx / k_ + 0.5) * dw, (idx % k_ + 0.5) * dw};
  }

  double node_cell_area() const {
    const double dw = sdf_.w_max / k_;
    return dw * dw;
  }

 private:
  void build_tables() {
    const int k2 = k_ * k_;
    const int q = sdf_.count();
    const double dw = sdf_.w_max / k_;
    w_max_step_ = dw;
    h_table_ = Tensor(Shape{static_cast<std::size_t>(k2), static_cast<std::size_t>(q)});
    const double norm = 1.0 / (6.283185307179586476925286766559 * sdf_.sigma * sdf_.sigma);
    for (int n = 0; n < k2; ++n) {
      const auto [w1, w2] = node(n);
      for (int i = 0; i < q; ++i) {
        const auto [c1, c2] = sdf_.center(i);
        const double d2 = (w1 - c1) * (w1 - c1) + (w2 - c2) * (w2 - c2);
        h_table_[n * q + i] = norm * std::exp(-0.5 * d2 / (sdf_.sigma * sdf_.sigma));
      }
    }
    const std::size_t np2 = static_cast<std::size_t>(np_) * np_;
    cos_a_ = Tensor(Shape{static_cast<std::size_t>(k2), np2});
    sin_a_ = Tensor(Shape{static_cast<std::size_t>(k2), np2});
    cos_b_ = Tensor(Shape{static_cast<std::size_t>(k2), np2});
    sin_b_ = Tensor(Shape{static_cast<std::size_t>(k2), np2});
    for (int n = 0; n < k2; ++n) {
      const auto [w1, w2] = node(n);
      for (int r = 0; r < np_; ++r) {
        const double s2 = (r + 0.5) / np_;  // row -> vertical coordinate
        for (int c = 0; c < np_; ++c) {
          const double s1 = (c + 0.5) / np_;  // column -> horizontal coordinate
          const std::size_t p = static_cast<std::size_t>(r) * np_ + c;
          const double ta = w1 * s1 + w2 * s2;
          const double tb = w1 * s1 - w2 * s2;
          cos_a_[n * np2 + p] = std::cos(ta);
          sin_a_[n * np2 + p] = std::sin(ta);
          cos_b_[n * np2 + p] = std::cos(tb);
          sin_b_[n * np2 + p] = std::sin(tb);
        }
      }
    }
  }

  SdfConfig sdf_;
  int np_;
  int k_;
  double w_max_step_ = 0.0;
  Tensor h_table_;                      // RBF values at spectral nodes [K2, Q]
  Tensor cos_a_, sin_a_, cos_b_, sin_b_;  // per-family phase tables [K2, np^2]
};

}  // namespace psp::field
