#pragma once

// VB-EM optimizer core. The ELBO
//   F = E_q[ log u~(kappa) + log p_M(kappa | x(phi, Psi_t)) + log p(Psi_t) - log q ]
// is estimated by reparametrized Monte Carlo over a low-rank Gaussian q and
// ascended alternately in the variational parameters (E-step) and the process
// parameters phi (M-step). An ESS-driven bisection tempers the target domain
// (or utility sharpness / target samples) toward the final objective.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "pspopt/lowrank.hpp"
#include "pspopt/optim.hpp"
#include "pspopt/randfield.hpp"
#include "pspopt/surrogate.hpp"

namespace psp::vbem {

// ---------------------------------------------------------------------------
// noise and estimates

/// Base noise for n_mc reparametrized draws; fixed per E/M cycle so both
/// steps see common random numbers.
struct NoiseBlock {
  int n_mc = 0, rank = 0, dz = 0;
  std::vector<double> eps1, eps2;

  static NoiseBlock draw(int n_mc, int rank, int dz, Rng& rng) {
    NoiseBlock b;
    b.n_mc = n_mc;
    b.rank = rank;
    b.dz = dz;
    b.eps1 = rng.normals(static_cast<std::size_t>(n_mc) * rank);
    b.eps2 = rng.normals(static_cast<std::size_t>(n_mc) * dz);
    return b;
  }

  std::vector<double> eps1_at(int i) const {
    return {eps1.begin() + static_cast<std::ptrdiff_t>(i) * rank,
            eps1.begin() + static_cast<std::ptrdiff_t>(i + 1) * rank};
  }
  std::vector<double> eps2_at(int i) const {
    return {eps2.begin() + static_cast<std::ptrdiff_t>(i) * dz,
            eps2.begin() + static_cast<std::ptrdiff_t>(i + 1) * dz};
  }
};

/// Per-draw joint log density (everything except -log q). Implementations
/// are pure w.r.t. the tape: state changes only between cycles.
class ElboModel {
 public:
  virtual ~ElboModel() = default;
  virtual int z_dim() const = 0;
  virtual ad::Var log_joint(ad::Tape& t, const ad::Var& z, const ad::Var& phi) const = 0;
};

struct ElboEstimate {
  double value = 0.0;
  double std_error = 0.0;
  Tensor g_mu, g_logd, g_l, g_phi;
  std::vector<double> per_draw;
};

/// Monte Carlo ELBO with reparametrized gradients. Draws evaluate on
/// independent tapes (parallel across threads); accumulation is an ordered
/// reduction so the result is independent of the thread count.
inline ElboEstimate elbo_estimate(const ElboModel& model, const VParams& xi, const Tensor& phi,
                                  const NoiseBlock& noise, int threads, bool grad_xi,
                                  bool grad_phi) {
  const int n = noise.n_mc;
  struct DrawOut {
    double value = 0.0;
    Tensor g_mu, g_logd, g_l, g_phi;
    bool bad = false;
  };
  std::vector<DrawOut> outs(n);

  parallel_for(n, threads, [&](std::size_t i) {
    ad::Tape t;
    auto v = attach(t, xi, grad_xi);
    auto phiv = t.leaf(phi, grad_phi);
    auto z = sample_z(t, v, noise.eps1_at(static_cast<int>(i)), noise.eps2_at(static_cast<int>(i)));
    auto lj = model.log_joint(t, z, phiv);
    auto f = ad::sub(lj, log_q(t, v, z));
    DrawOut& o = outs[i];
    o.value = f.value().item();
    if (!std::isfinite(o.value)) {
      o.bad = true;
      return;
    }
    if (grad_xi || grad_phi) {
      t.backward(f);
      if (grad_xi) {
        o.g_mu = v.mu.grad();
        o.g_logd = v.logd.grad();
        o.g_l = v.l.grad();
      }
      if (grad_phi) o.g_phi = phiv.grad();
    }
  });

  for (int i = 0; i < n; ++i)
    if (outs[i].bad)
      throw NumericError("elbo: non-finite estimate at draw " + std::to_string(i));

  ElboEstimate est;
  est.per_draw.resize(n);
  if (grad_xi) {
    est.g_mu = Tensor(xi.mu.shape());
    est.g_logd = Tensor(xi.logd.shape());
    est.g_l = Tensor(xi.l.shape());
  }
  if (grad_phi) est.g_phi = Tensor(phi.shape());
  const double inv = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    est.per_draw[i] = outs[i].value;
    est.value += outs[i].value * inv;
    if (grad_xi) {
      for (std::size_t k = 0; k < est.g_mu.size(); ++k) est.g_mu[k] += outs[i].g_mu[k] * inv;
      for (std::size_t k = 0; k < est.g_logd.size(); ++k) est.g_logd[k] += outs[i].g_logd[k] * inv;
      for (std::size_t k = 0; k < est.g_l.size(); ++k) est.g_l[k] += outs[i].g_l[k] * inv;
    }
    if (grad_phi)
      for (std::size_t k = 0; k < est.g_phi.size(); ++k) est.g_phi[k] += outs[i].g_phi[k] * inv;
  }
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = outs[i].value - est.value;
    var += d * d;
  }
  est.std_error = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  return est;
}

// ---------------------------------------------------------------------------
// objective specification

enum class ObjectiveVariant { O1Box, O1Gaussian, O2 };

struct ObjectiveSpec {
  ObjectiveVariant variant = ObjectiveVariant::O1Box;
  surrogate::AxisBox box;                 // O1Box (physical units)
  std::vector<double> kappa_target;      // O1Gaussian
  double tau = 1.0;                      // O1Gaussian scale
  std::vector<double> target_mean;       // O2
  std::vector<double> target_cov;        // O2, row-major dk x dk, SPD
  int target_samples = 20;               // O2: S

  void validate(int dk) const {
    switch (variant) {
      case ObjectiveVariant::O1Box:
        box.validate();
        if (static_cast<int>(box.lo.size()) != dk)
          throw ConfigError("objective: box dimension != dk");
        break;
      case ObjectiveVariant::O1Gaussian:
        if (static_cast<int>(kappa_target.size()) != dk)
          throw ConfigError("objective: kappa_target dimension != dk");
        if (!(tau > 0)) throw ConfigError("objective: tau must be positive");
        break;
      case ObjectiveVariant::O2: {
        if (static_cast<int>(target_mean.size()) != dk)
          throw ConfigError("objective: target_mean dimension != dk");
        if (target_cov.size() != static_cast<std::size_t>(dk) * dk)
          throw ConfigError("objective: target_cov must be dk x dk");
        ad::detail::chol_lower(target_cov.data(), dk);  // throws unless SPD
        if (target_samples < 1) throw ConfigError("objective: target_samples must be >= 1");
        break;
      }
    }
  }

  /// Draws the S target samples kappa^(s) ~ N(mean, cov) (seed-logged by the caller).
  std::vector<std::vector<double>> draw_target_samples(int dk, Rng& rng) const {
    const auto chol = ad::detail::chol_lower(target_cov.data(), dk);
    std::vector<std::vector<double>> out;
    for (int s = 0; s < target_samples; ++s) {
      auto e = rng.normals(dk);
      std::vector<double> k(dk);
      for (int i = 0; i < dk; ++i) {
        double v = target_mean[i];
        for (int j = 0; j <= i; ++j) v += chol[i * dk + j] * e[j];
        k[i] = v;
      }
      out.push_back(std::move(k));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// production ELBO model: field synthesis -> surrogate -> utility

/// Joint model over z = (kappa_std, Psi_t) for O1 variants, or z = Psi_t for
/// one O2 target sample. Works in the surrogate's standardized kappa space.
class FieldModel : public ElboModel {
 public:
  FieldModel(const field::RandField& rf, const surrogate::Surrogate& sur, double x0,
             double eps_sharp)
      : rf_(&rf), sur_(&sur), x0_(x0), eps_(eps_sharp), dk_(sur.arch().dk) {}

  int z_dim() const override {
    return (mode_ == Mode::O2Sample ? 0 : dk_) + rf_->psi_dim();
  }

  // --- configuration of the utility part (standardized units) ---
  void set_box_utility(const std::vector<double>& lo_std, const std::vector<double>& hi_std,
                       double beta) {
    mode_ = Mode::Box;
    lo_ = lo_std;
    hi_ = hi_std;
    beta_ = beta;
  }
  void set_gaussian_utility(const std::vector<double>& target_std,
                            const std::vector<double>& tau_per_dim) {
    mode_ = Mode::Gaussian;
    target_ = target_std;
    tau_dim_ = tau_per_dim;
  }
  void set_o2_sample(const std::vector<double>& kappa_std) {
    mode_ = Mode::O2Sample;
    target_ = kappa_std;
  }

  ad::Var log_joint(ad::Tape& t, const ad::Var& z, const ad::Var& phi) const override {
    const int dkap = mode_ == Mode::O2Sample ? 0 : dk_;
    auto psi = ad::slice(z, dkap, rf_->psi_dim());
    auto x = rf_->smooth_microstructure(t, phi, psi, x0_, eps_);
    const std::size_t np = x.value().shape()[0];
    auto xin = ad::reshape(x, Shape{1, 1, np, np});
    auto params = sur_->attach(t, false);
    auto [m2, logv2] = sur_->forward_std(t, xin, params);
    auto m = ad::reshape(m2, Shape{(std::size_t)dk_});
    auto logv = ad::reshape(logv2, Shape{(std::size_t)dk_});

    ad::Var kap;
    if (mode_ == Mode::O2Sample) {
      kap = t.constant(Tensor(Shape{(std::size_t)dk_}, target_));
    } else {
      kap = ad::slice(z, 0, dk_);
    }

    // log p_M(kappa | x) for the diagonal Gaussian head
    auto diff = ad::sub(kap, m);
    auto quad = ad::mul(ad::mul(diff, diff), ad::exp(ad::neg(logv)));
    auto log_pm = ad::mul_const(
        ad::sum(ad::add_const(ad::add(logv, quad), std::log(2.0 * M_PI))), -0.5);

    // log p(Psi_t): standard normal prior
    auto log_prior = ad::mul_const(
        ad::sum(ad::add_const(ad::mul(psi, psi), std::log(2.0 * M_PI))), -0.5);

    auto total = ad::add(log_pm, log_prior);

    if (mode_ == Mode::Box) {
      auto lo = t.constant(Tensor(Shape{lo_.size()}, lo_));
      auto hi = t.constant(Tensor(Shape{hi_.size()}, hi_));
      auto a = ad::logsigmoid(ad::mul_const(ad::sub(kap, lo), beta_));
      auto b = ad::logsigmoid(ad::mul_const(ad::sub(hi, kap), beta_));
      total = ad::add(total, ad::sum(ad::add(a, b)));
    } else if (mode_ == Mode::Gaussian) {
      auto tgt = t.constant(Tensor(Shape{target_.size()}, target_));
      auto tv = t.constant(Tensor(Shape{tau_dim_.size()}, tau_dim_));
      auto d = ad::sub(kap, tgt);
      total = ad::sub(total, ad::sum(ad::mul(tv, ad::mul(d, d))));
    }
    return total;
  }

  const field::RandField& rfield() const { return *rf_; }
  const surrogate::Surrogate& sur() const { return *sur_; }
  double x0() const { return x0_; }
  double eps_sharp() const { return eps_; }

 private:
  enum class Mode { Box, Gaussian, O2Sample };
  const field::RandField* rf_;
  const surrogate::Surrogate* sur_;
  double x0_, eps_;
  int dk_;
  Mode mode_ = Mode::Box;
  std::vector<double> lo_, hi_, target_, tau_dim_;
  double beta_ = 2.0;
};

// ---------------------------------------------------------------------------
// tempering

struct TemperSettings {
  double ess_floor = 0.5;
  double beta_min = 2.0;
  double beta_max = 50.0;
  int n_weight_draws = 256;
  int max_stall = 3;
};

struct TemperEvent {
  int iteration = 0;
  double accepted_t = 0.0;
  double progress = 0.0;
  double ess_at_accept = 0.0;
};

/// Bisection schedule on the interpolation parameter t in [0,1] between the
/// current stage and the final objective, holding ESS above the floor.
class TemperSchedule {
 public:
  explicit TemperSchedule(TemperSettings s) : set_(s) {}

  double progress() const { return progress_; }
  bool complete() const { return progress_ >= 1.0; }
  int stalls() const { return stalls_; }
  bool stalled() const { return stalls_ >= set_.max_stall; }
  double beta() const {
    return set_.beta_min * std::pow(set_.beta_max / set_.beta_min, progress_);
  }
  const TemperSettings& settings() const { return set_; }

  /// weights_at(t) evaluates importance weights for a fixed draw ensemble at
  /// the domain interpolated a fraction t of the way to the final objective.
  /// Returns the accepted t (0 if none) and updates the progress.
  double try_advance(const std::function<std::vector<double>(double)>& weights_at) {
    if (complete()) return 0.0;
    const double e0 = ess(weights_at(0.0));
    if (e0 < set_.ess_floor) {
      ++stalls_;
      return 0.0;
    }
    double accepted;
    if (ess(weights_at(1.0)) >= set_.ess_floor) {
      accepted = 1.0;
    } else {
      double lo = 0.0, hi = 1.0;
      for (int guard = 0; guard < 8; ++guard) {
        for (int i = 0; i < 30; ++i) {
          const double mid = 0.5 * (lo + hi);
          (ess(weights_at(mid)) >= set_.ess_floor ? lo : hi) = mid;
        }
        // bisection certificate: t feasible, t + 0.05 infeasible
        if (lo + 0.05 >= 1.0 || ess(weights_at(lo + 0.05)) < set_.ess_floor) break;
        lo += 0.05;
        hi = 1.0;
      }
      accepted = lo;
    }
    if (accepted <= 1e-3) {
      ++stalls_;
      return 0.0;
    }
    stalls_ = 0;
    last_ess_ = ess(weights_at(accepted));
    progress_ += accepted * (1.0 - progress_);
    if (progress_ > 1.0 - 1e-12) progress_ = 1.0;
    return accepted;
  }

  double last_ess() const { return last_ess_; }

 private:
  TemperSettings set_;
  double progress_ = 0.0;
  int stalls_ = 0;
  double last_ess_ = 1.0;
};

// interpolated boxes: endpoint-wise linear between wide and final
inline surrogate::AxisBox interp_box(const surrogate::AxisBox& from, const surrogate::AxisBox& to,
                                     double t) {
  surrogate::AxisBox b;
  b.lo.resize(from.lo.size());
  b.hi.resize(from.hi.size());
  for (std::size_t j = 0; j < from.lo.size(); ++j) {
    b.lo[j] = (1.0 - t) * from.lo[j] + t * to.lo[j];
    b.hi[j] = (1.0 - t) * from.hi[j] + t * to.hi[j];
  }
  return b;
}

}  // namespace psp::vbem
