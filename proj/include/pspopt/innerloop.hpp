#pragma once

// Inner VB-EM loop: alternating stochastic-ascent E-steps (variational
// parameters) and M-steps (process parameters) on the Monte Carlo ELBO,
// with ESS-driven tempering of the design objective. One cycle draws a
// fresh base-noise block shared by its E and M steps (common random
// numbers across the alternation).

#include <chrono>
#include <cstdint>
#include <functional>
#include <vector>

#include "pspopt/vbem.hpp"

namespace psp::vbem {

struct InnerSettings {
  int n_mc = 32;
  int k_e = 50;
  int k_m = 10;
  double lr_xi = 1e-2;
  double lr_phi = 5e-3;
  int max_iters = 2000;
  int ma_window = 20;
  int conv_span = 50;
  double conv_rel = 1e-3;
  int rank = 50;
  int threads = 1;
  double o2_update_fraction = 1.0;  // fraction of q^(s) refreshed per E-step
  TemperSettings temper;

  void validate() const {
    if (n_mc < 1 || k_e < 1 || k_m < 1 || max_iters < 1 || rank < 1)
      throw ConfigError("vbem: counts must be positive");
    if (!(lr_xi > 0) || !(lr_phi > 0)) throw ConfigError("vbem: step sizes must be positive");
    if (!(temper.ess_floor > 0.0 && temper.ess_floor <= 1.0))
      throw ConfigError("vbem: ESS floor must lie in (0,1]");
    if (!(o2_update_fraction > 0.0 && o2_update_fraction <= 1.0))
      throw ConfigError("vbem: o2_update_fraction must lie in (0,1]");
  }
};

struct RunlogEntry {
  int iteration = 0;
  double elbo = 0.0;
  double temper_progress = 0.0;
  double phi_norm = 0.0;
  double wall_seconds = 0.0;
};
using RunlogFn = std::function<void(const RunlogEntry&)>;

struct InnerResult {
  std::vector<double> trace;
  bool converged = false;
  bool temper_stalled = false;
  int iterations = 0;
  std::vector<TemperEvent> temper_events;
  double final_ma = 0.0;
};

namespace detail {

inline void check_finite(const Tensor& g, const char* what, int iter) {
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!std::isfinite(g[i]))
      throw NumericError(std::string("vbem: non-finite gradient in ") + what + " at iteration " +
                         std::to_string(iter) + " (entry " + std::to_string(i) + ")");
}

inline double phi_norm(const Tensor& phi) {
  double s = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) s += phi[i] * phi[i];
  return std::sqrt(s);
}

inline double window_mean(const std::vector<double>& v, std::size_t end, std::size_t w) {
  double s = 0.0;
  for (std::size_t i = end - w; i < end; ++i) s += v[i];
  return s / static_cast<double>(w);
}

/// Moving-average plateau: improvement of the window mean over conv_span
/// iterations below conv_rel (relative).
inline bool trace_converged(const std::vector<double>& trace, const InnerSettings& set) {
  const std::size_t w = static_cast<std::size_t>(set.ma_window);
  const std::size_t span = static_cast<std::size_t>(set.conv_span);
  if (trace.size() < w + span) return false;
  const double now = window_mean(trace, trace.size(), w);
  const double before = window_mean(trace, trace.size() - span, w);
  const double rel = (now - before) / std::max(1.0, std::abs(before));
  return rel < set.conv_rel;
}

}  // namespace detail

/// One E-step: k stochastic-ascent updates of the variational parameters at
/// fixed phi. Returns the per-update ELBO estimates.
inline std::vector<double> e_step(const ElboModel& model, VParams& xi, const Tensor& phi,
                                  Adam& opt, int k, const NoiseBlock& noise, int threads,
                                  int iter_base = 0) {
  std::vector<double> trace;
  for (int s = 0; s < k; ++s) {
    auto est = elbo_estimate(model, xi, phi, noise, threads, true, false);
    detail::check_finite(est.g_mu, "e_step mu", iter_base + s);
    detail::check_finite(est.g_logd, "e_step logd", iter_base + s);
    detail::check_finite(est.g_l, "e_step L", iter_base + s);
    opt.step({&xi.mu, &xi.logd, &xi.l}, {&est.g_mu, &est.g_logd, &est.g_l}, true);
    trace.push_back(est.value);
  }
  return trace;
}

/// One M-step: k stochastic-ascent updates of phi at fixed q.
inline std::vector<double> m_step(const ElboModel& model, const VParams& xi, Tensor& phi,
                                  Adam& opt, int k, const NoiseBlock& noise, int threads,
                                  int iter_base = 0) {
  std::vector<double> trace;
  for (int s = 0; s < k; ++s) {
    auto est = elbo_estimate(model, xi, phi, noise, threads, false, true);
    detail::check_finite(est.g_phi, "m_step phi", iter_base + s);
    opt.step({&phi}, {&est.g_phi}, true);
    trace.push_back(est.value);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// production drivers

namespace detail {

/// Predictive ensemble for temper weights: N_w draws of Psi_t from the
/// current q, each mapped through the smooth microstructure and the
/// surrogate (standardized units).
struct PredEnsemble {
  std::vector<std::vector<double>> mean, sd;
};

inline PredEnsemble predictive_ensemble(const FieldModel& model, const VParams& xi, int kap_dims,
                                        const Tensor& phi, int n_draws, Rng& rng, int threads) {
  const auto& rf = model.rfield();
  const auto& sur = model.sur();
  const int dk = sur.arch().dk;
  PredEnsemble e;
  e.mean.assign(n_draws, std::vector<double>(dk));
  e.sd.assign(n_draws, std::vector<double>(dk));
  std::vector<std::vector<double>> psis(n_draws);
  for (int i = 0; i < n_draws; ++i) psis[i] = sample_block(xi, kap_dims, rf.psi_dim(), rng);
  parallel_for(n_draws, threads, [&](std::size_t i) {
    ad::Tape t;
    auto phiv = t.leaf(phi, false);
    auto psiv = t.leaf(Tensor(Shape{psis[i].size()}, psis[i]), false);
    auto x = rf.smooth_microstructure(t, phiv, psiv, model.x0(), model.eps_sharp());
    const std::size_t np = x.value().shape()[0];
    auto params = sur.attach(t, false);
    auto [m, logv] = sur.forward_std(t, ad::reshape(x, Shape{1, 1, np, np}), params);
    for (int j = 0; j < dk; ++j) {
      e.mean[i][j] = m.value()[j];
      e.sd[i][j] = std::exp(0.5 * logv.value()[j]);
    }
  });
  return e;
}

inline double box_weight(const std::vector<double>& m, const std::vector<double>& sd,
                         const surrogate::AxisBox& box) {
  double w = 1.0;
  for (std::size_t j = 0; j < box.lo.size(); ++j)
    w *= norm_cdf((box.hi[j] - m[j]) / sd[j]) - norm_cdf((box.lo[j] - m[j]) / sd[j]);
  return std::max(0.0, w);
}

inline double gaussian_utility_weight(const std::vector<double>& m, const std::vector<double>& sd,
                                      const std::vector<double>& target,
                                      const std::vector<double>& tau) {
  // E[ exp(-sum_j tau_j (k_j - t_j)^2) ] under the diagonal Gaussian
  double w = 1.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    const double v = sd[j] * sd[j];
    const double den = 1.0 + 2.0 * tau[j] * v;
    const double d = m[j] - target[j];
    w *= std::exp(-tau[j] * d * d / den) / std::sqrt(den);
  }
  return w;
}

inline double gauss_density_weight(const std::vector<double>& m, const std::vector<double>& sd,
                                   const std::vector<double>& kappa) {
  double lw = 0.0;
  for (std::size_t j = 0; j < kappa.size(); ++j)
    lw += norm_logpdf(kappa[j], m[j], sd[j] * sd[j]);
  return std::exp(lw);
}

}  // namespace detail

/// Inner optimization for O1 objectives. xi and phi are warm-startable and
/// updated in place.
inline InnerResult optimize_o1(const field::RandField& rf, const surrogate::Surrogate& sur,
                               const ObjectiveSpec& spec, double x0, double eps_sharp,
                               VParams& xi, Tensor& phi, const InnerSettings& set,
                               std::uint64_t seed, const RunlogFn& runlog = nullptr) {
  set.validate();
  const int dk = sur.arch().dk;
  spec.validate(dk);
  const auto& st = sur.standardizer();

  FieldModel model(rf, sur, x0, eps_sharp);
  const int dz = dk + rf.psi_dim();
  if (xi.dim() != dz) throw ConfigError("optimize_o1: xi dimension mismatch");

  // standardized final objective and wide starting stage
  surrogate::AxisBox final_std, wide_std;
  std::vector<double> target_std, tau_dim;
  if (spec.variant == ObjectiveVariant::O1Box) {
    final_std.lo = st.to_std(spec.box.lo);
    final_std.hi = st.to_std(spec.box.hi);
    wide_std.lo.resize(dk);
    wide_std.hi.resize(dk);
    for (int j = 0; j < dk; ++j) {
      wide_std.lo[j] = std::min(final_std.lo[j], -6.0);
      wide_std.hi[j] = std::max(final_std.hi[j], 6.0);
    }
  } else {
    target_std = st.to_std(spec.kappa_target);
    tau_dim.resize(dk);
    for (int j = 0; j < dk; ++j) tau_dim[j] = spec.tau * st.sd[j] * st.sd[j];
  }

  TemperSchedule temper(set.temper);
  Adam opt_xi(set.lr_xi), opt_phi(set.lr_phi);
  Rng rng(derive_seed(seed, "inner-o1"));
  InnerResult res;
  const auto t0 = std::chrono::steady_clock::now();

  auto refresh_model = [&] {
    if (spec.variant == ObjectiveVariant::O1Box) {
      const auto b = interp_box(wide_std, final_std, temper.progress());
      model.set_box_utility(b.lo, b.hi, temper.beta());
    } else {
      std::vector<double> tau_t(tau_dim);
      for (auto& v : tau_t) v *= temper.progress();
      model.set_gaussian_utility(target_std, tau_t);
    }
  };

  auto log_entry = [&](double elbo) {
    if (!runlog) return;
    RunlogEntry e;
    e.iteration = res.iterations;
    e.elbo = elbo;
    e.temper_progress = temper.progress();
    e.phi_norm = detail::phi_norm(phi);
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    runlog(e);
  };

  while (res.iterations < set.max_iters) {
    refresh_model();
    NoiseBlock nb = NoiseBlock::draw(set.n_mc, set.rank, dz, rng);
    for (double v : e_step(model, xi, phi, opt_xi, std::min(set.k_e, set.max_iters - res.iterations),
                           nb, set.threads, res.iterations)) {
      res.trace.push_back(v);
      ++res.iterations;
      log_entry(v);
    }
    if (res.iterations >= set.max_iters) break;
    for (double v : m_step(model, xi, phi, opt_phi, std::min(set.k_m, set.max_iters - res.iterations),
                           nb, set.threads, res.iterations)) {
      res.trace.push_back(v);
      ++res.iterations;
      log_entry(v);
    }

    if (!temper.complete()) {
      const auto ens = detail::predictive_ensemble(model, xi, dk, phi, set.temper.n_weight_draws,
                                                   rng, set.threads);
      const double cur = temper.progress();
      auto weights_at = [&](double t) {
        const double p = cur + t * (1.0 - cur);
        std::vector<double> w(ens.mean.size());
        if (spec.variant == ObjectiveVariant::O1Box) {
          const auto b = interp_box(wide_std, final_std, p);
          for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = detail::box_weight(ens.mean[i], ens.sd[i], b);
        } else {
          std::vector<double> tau_t(tau_dim);
          for (auto& v : tau_t) v *= p;
          for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = detail::gaussian_utility_weight(ens.mean[i], ens.sd[i], target_std, tau_t);
        }
        return w;
      };
      const double accepted = temper.try_advance(weights_at);
      if (accepted > 0.0) {
        res.temper_events.push_back(
            {res.iterations, accepted, temper.progress(), temper.last_ess()});
      }
    }

    if (temper.complete() && detail::trace_converged(res.trace, set)) {
      res.converged = true;
      break;
    }
  }
  res.temper_stalled = temper.stalled();
  if (!res.trace.empty())
    res.final_ma = detail::window_mean(
        res.trace, res.trace.size(),
        std::min<std::size_t>(res.trace.size(), static_cast<std::size_t>(set.ma_window)));
  return res;
}

/// Inner optimization for O2: one variational factor per target sample,
/// all sharing phi. Target samples are tempered from the label mean toward
/// their final values.
inline InnerResult optimize_o2(const field::RandField& rf, const surrogate::Surrogate& sur,
                               const std::vector<std::vector<double>>& target_samples,
                               double x0, double eps_sharp, std::vector<VParams>& xis,
                               Tensor& phi, const InnerSettings& set, std::uint64_t seed,
                               const RunlogFn& runlog = nullptr) {
  set.validate();
  const int dk = sur.arch().dk;
  const auto& st = sur.standardizer();
  const int S = static_cast<int>(target_samples.size());
  if (S < 1) throw ConfigError("optimize_o2: no target samples");
  if (static_cast<int>(xis.size()) != S) throw ConfigError("optimize_o2: xi set size != S");
  const int dz = rf.psi_dim();

  std::vector<std::vector<double>> samples_std(S);
  for (int s = 0; s < S; ++s) samples_std[s] = st.to_std(target_samples[s]);

  std::vector<FieldModel> models;
  models.reserve(S);
  for (int s = 0; s < S; ++s) models.emplace_back(rf, sur, x0, eps_sharp);

  TemperSchedule temper(set.temper);
  std::vector<Adam> opt_xi(S, Adam(set.lr_xi));
  Adam opt_phi(set.lr_phi);
  Rng rng(derive_seed(seed, "inner-o2"));
  InnerResult res;
  const auto t0 = std::chrono::steady_clock::now();
  int rotate = 0;

  auto tempered_sample = [&](int s, double progress) {
    // standardized label mean is the origin, so the interpolation is a scaling
    std::vector<double> k(samples_std[s]);
    for (auto& v : k) v *= progress;
    return k;
  };

  auto refresh_models = [&] {
    for (int s = 0; s < S; ++s) models[s].set_o2_sample(tempered_sample(s, temper.progress()));
  };

  auto log_entry = [&](double elbo) {
    if (!runlog) return;
    RunlogEntry e;
    e.iteration = res.iterations;
    e.elbo = elbo;
    e.temper_progress = temper.progress();
    e.phi_norm = detail::phi_norm(phi);
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    runlog(e);
  };

  const int n_update = std::max(1, static_cast<int>(std::ceil(set.o2_update_fraction * S)));

  while (res.iterations < set.max_iters) {
    refresh_models();
    std::vector<NoiseBlock> noise;
    noise.reserve(S);
    for (int s = 0; s < S; ++s) noise.push_back(NoiseBlock::draw(set.n_mc, set.rank, dz, rng));

    // E-step sweeps: each sweep updates the rotating subset of q^(s)
    for (int k = 0; k < set.k_e && res.iterations < set.max_iters; ++k) {
      std::vector<int> subset;
      for (int u = 0; u < n_update; ++u) subset.push_back((rotate + u) % S);
      rotate = (rotate + n_update) % S;
      std::vector<double> vals(subset.size());
      parallel_for(subset.size(), set.threads, [&](std::size_t idx) {
        const int s = subset[idx];
        auto est = elbo_estimate(models[s], xis[s], phi, noise[s], 1, true, false);
        detail::check_finite(est.g_mu, "e_step mu", res.iterations);
        detail::check_finite(est.g_logd, "e_step logd", res.iterations);
        detail::check_finite(est.g_l, "e_step L", res.iterations);
        opt_xi[s].step({&xis[s].mu, &xis[s].logd, &xis[s].l},
                       {&est.g_mu, &est.g_logd, &est.g_l}, true);
        vals[idx] = est.value;
      });
      const double v = mean_of(vals);
      res.trace.push_back(v);
      ++res.iterations;
      log_entry(v);
    }

    // M-step: phi gradient averaged over every target sample
    for (int k = 0; k < set.k_m && res.iterations < set.max_iters; ++k) {
      Tensor g(phi.shape());
      std::vector<double> vals(S);
      std::vector<Tensor> gs(S);
      parallel_for(S, set.threads, [&](std::size_t s) {
        auto est = elbo_estimate(models[s], xis[s], phi, noise[s], 1, false, true);
        gs[s] = est.g_phi;
        vals[s] = est.value;
      });
      for (int s = 0; s < S; ++s)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[s][i] / S;
      detail::check_finite(g, "m_step phi", res.iterations);
      opt_phi.step({&phi}, {&g}, true);
      const double v = mean_of(vals);
      res.trace.push_back(v);
      ++res.iterations;
      log_entry(v);
    }

    if (!temper.complete()) {
      std::vector<detail::PredEnsemble> ens(S);
      for (int s = 0; s < S; ++s)
        ens[s] = detail::predictive_ensemble(models[s], xis[s], 0, phi,
                                             set.temper.n_weight_draws, rng, set.threads);
      const double cur = temper.progress();
      auto weights_min_ess = [&](double t) {
        // per-sample ESS, aggregated by the worst sample: return weights of
        // the minimizing sample so the schedule keys on it
        const double p = cur + t * (1.0 - cur);
        double worst = 2.0;
        std::vector<double> worst_w;
        for (int s = 0; s < S; ++s) {
          const auto ks = tempered_sample(s, p);
          std::vector<double> w(ens[s].mean.size());
          for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = detail::gauss_density_weight(ens[s].mean[i], ens[s].sd[i], ks);
          double e;
          try {
            e = ess(w);
          } catch (const NumericError&) {
            e = 0.0;
            w.assign(w.size(), 0.0);
            w[0] = 1e-300;  // keep ESS defined and tiny
          }
          if (e < worst) {
            worst = e;
            worst_w = std::move(w);
          }
        }
        return worst_w;
      };
      const double accepted = temper.try_advance(weights_min_ess);
      if (accepted > 0.0)
        res.temper_events.push_back(
            {res.iterations, accepted, temper.progress(), temper.last_ess()});
    }

    if (temper.complete() && detail::trace_converged(res.trace, set)) {
      res.converged = true;
      break;
    }
  }
  res.temper_stalled = temper.stalled();
  if (!res.trace.empty())
    res.final_ma = detail::window_mean(
        res.trace, res.trace.size(),
        std::min<std::size_t>(res.trace.size(), static_cast<std::size_t>(set.ma_window)));
  return res;
}

}  // namespace psp::vbem
