#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pspopt/common.hpp"

namespace psp {

// Rational erf approximation (|error| < 1.2e-7 over the real line), paired
// with the analytic derivative 2/sqrt(pi) * exp(-x^2) used by the autodiff
// layer. Self-contained so forward values and gradients come from one place.
inline double erf_approx(double x) {
  const double z = std::abs(x);
  const double t = 1.0 / (1.0 + 0.5 * z);
  const double tau =
      t * std::exp(-z * z - 1.26551223 +
                   t * (1.00002368 +
                        t * (0.37409196 +
                             t * (0.09678418 +
                                  t * (-0.18628806 +
                                       t * (0.27886807 +
                                            t * (-1.13520398 +
                                                 t * (1.48851587 +
                                                      t * (-0.82215223 + t * 0.17087277)))))))));
  const double e = 1.0 - tau;
  return x >= 0.0 ? e : -e;
}

inline double erf_deriv(double x) {
  return 1.1283791670955125738961589031 * std::exp(-x * x);  // 2/sqrt(pi)
}

/// Standard normal CDF.
inline double norm_cdf(double x) { return 0.5 * (1.0 + erf_approx(x * 0.70710678118654752440)); }

/// Standard normal quantile by bisection + Newton polish on erf_approx.
inline double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw NumericError("norm_quantile: p must lie in (0,1)");
  double lo = -12.0, hi = 12.0;
  for (int i = 0; i < 80; ++i) {
    const double mid = 0.5 * (lo + hi);
    (norm_cdf(mid) < p ? lo : hi) = mid;
  }
  double x = 0.5 * (lo + hi);
  const double inv_sqrt_2pi = 0.39894228040143267794;
  for (int i = 0; i < 4; ++i) {
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
    if (pdf < 1e-300) break;
    x -= (norm_cdf(x) - p) / pdf;
  }
  return x;
}

inline double norm_logpdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(6.283185307179586476925286766559 * var) + d * d / var);
}

/// Numerically stable log(1 + exp(x)).
inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Linear-interpolated percentile (q in [0,100]) of a copy of v.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw NumericError("percentile: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = (q / 100.0) * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - w) + v[hi] * w;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() > 1 ? v.size() - 1 : 1);
}

/// Gaussian product-kernel density with per-dimension Silverman bandwidths.
/// Evaluates log p_hat(x) over a d-dimensional cloud stored row-major.
class GaussianKde {
 public:
  GaussianKde(const std::vector<double>& cloud, std::size_t dim) : dim_(dim), cloud_(cloud) {
    const std::size_t n = cloud.size() / dim;
    if (n < 2) throw NumericError("GaussianKde: need at least 2 points");
    n_ = n;
    bw_.resize(dim);
    const double factor = std::pow(4.0 / ((static_cast<double>(dim) + 2.0) * static_cast<double>(n)),
                                   1.0 / (static_cast<double>(dim) + 4.0));
    for (std::size_t j = 0; j < dim; ++j) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = cloud[i * dim + j];
      double sd = std::sqrt(variance_of(col));
      if (sd <= 0.0) sd = 1e-12;
      bw_[j] = sd * factor;
    }
  }

  double log_density(const double* x) const {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim_; ++j)
      norm += std::log(6.283185307179586476925286766559) * 0.5 + std::log(bw_[j]);
    // log-sum-exp over kernel centers
    double best = -1e300;
    std::vector<double> expo(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double q = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double z = (x[j] - cloud_[i * dim_ + j]) / bw_[j];
        q += z * z;
      }
      expo[i] = -0.5 * q;
      best = std::max(best, expo[i]);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += std::exp(expo[i] - best);
    return best + std::log(s) - std::log(static_cast<double>(n_)) - norm;
  }

  const std::vector<double>& bandwidths() const { return bw_; }

 private:
  std::size_t dim_;
  std::size_t n_ = 0;
  std::vector<double> cloud_;
  std::vector<double> bw_;
};

}  // namespace psp
