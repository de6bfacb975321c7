#pragma once

// Command implementations behind the CLI: seeded data generation, the
// active-learning outer loop (Algorithm: inner VB-EM to convergence ->
// pool -> score -> label -> retrain), the random-acquisition baseline,
// Monte Carlo reference evaluation, and plot-ready exports. Every command
// is deterministic under a fixed master seed; stage seeds are derived by
// labeled hashing, so checkpoint resume reproduces uninterrupted runs.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "pspopt/active.hpp"
#include "pspopt/config.hpp"
#include "pspopt/innerloop.hpp"

namespace psp::cli {

namespace fs = std::filesystem;

inline fs::path data_dir_of(const RunConfig& cfg) {
  return cfg.data_dir.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(cfg.data_dir);
}

inline field::RandField make_field(const RunConfig& cfg) {
  return field::RandField(cfg.sdf, cfg.n_pixels, cfg.spectral_per_axis);
}

inline surrogate::ArchConfig make_arch(const RunConfig& cfg) {
  surrogate::ArchConfig a;
  a.np = cfg.n_pixels;
  a.dk = 2;
  return a;
}

/// Pins data-derived objective pieces (percentile box, shifted Gaussian
/// target) from the initial label distribution; idempotent once resolved.
inline void resolve_objective(RunConfig& cfg, const active::DataStore& d0) {
  const int dk = 2;
  if (cfg.is_case1()) {
    if (cfg.objective.variant == vbem::ObjectiveVariant::O1Box && cfg.box_from_percentiles &&
        cfg.objective.box.lo.empty()) {
      cfg.objective.box.lo.resize(dk);
      cfg.objective.box.hi.resize(dk);
      for (int j = 0; j < dk; ++j) {
        auto col = d0.label_column(j);
        cfg.objective.box.lo[j] = percentile(col, cfg.box_pct_lo);
        cfg.objective.box.hi[j] = percentile(col, cfg.box_pct_hi);
      }
    }
  } else if (cfg.target_from_data && cfg.objective.target_mean.empty()) {
    std::vector<double> mean(dk), sd(dk);
    for (int j = 0; j < dk; ++j) {
      auto col = d0.label_column(j);
      mean[j] = mean_of(col);
      sd[j] = std::sqrt(variance_of(col));
    }
    cfg.objective.target_mean.resize(dk);
    for (int j = 0; j < dk; ++j)
      cfg.objective.target_mean[j] = mean[j] + cfg.target_shift_sigmas[j] * sd[j];
    // scaled full label covariance
    cfg.objective.target_cov.assign(dk * dk, 0.0);
    const auto c0 = d0.label_column(0);
    const auto c1 = d0.label_column(1);
    const double m0 = mean_of(c0), m1 = mean_of(c1);
    double c00 = 0, c01 = 0, c11 = 0;
    for (std::size_t i = 0; i < c0.size(); ++i) {
      c00 += (c0[i] - m0) * (c0[i] - m0);
      c01 += (c0[i] - m0) * (c1[i] - m1);
      c11 += (c1[i] - m1) * (c1[i] - m1);
    }
    const double nrm = static_cast<double>(c0.size() - 1);
    cfg.objective.target_cov[0] = cfg.target_cov_scale * c00 / nrm;
    cfg.objective.target_cov[1] = cfg.objective.target_cov[2] = cfg.target_cov_scale * c01 / nrm;
    cfg.objective.target_cov[3] = cfg.target_cov_scale * c11 / nrm;
  }
  cfg.objective.validate(dk);
}

// ---------------------------------------------------------------------------
// generate-data

inline int cmd_generate_data(RunConfig cfg) {
  cfg.validate();
  const auto dir = data_dir_of(cfg);
  try {
    auto rf = make_field(cfg);
    const double x0 = field::cutoff_from_vf(cfg.volume_fraction);
    Rng rng(derive_seed(cfg.master_seed, "generate-data"));
    active::DataStore d(cfg.n_pixels, 2);
    d.begin_shard(0, derive_seed(cfg.master_seed, "generate-data"), {});
    std::vector<std::vector<std::uint8_t>> grids;
    grids.reserve(cfg.n_initial);
    std::set<std::uint64_t> seen;
    while (static_cast<int>(grids.size()) < cfg.n_initial) {
      // ancestral sampling: phi ~ N(0, I), then x ~ p(x | phi)
      const auto phi = rng.normals(cfg.sdf.count());
      auto g = rf.sample_binary(phi, x0, rng);
      const auto h = active::DataStore::hash_grid(g);
      if (!seen.insert(h).second) continue;
      grids.push_back(std::move(g));
    }
    const auto labels = homog::label_batch(cfg.n_pixels, cfg.material, cfg.is_case1(), grids,
                                           cfg.threads);
    for (std::size_t i = 0; i < grids.size(); ++i)
      d.add(grids[i], {labels[i][0], labels[i][1]});
    d.save(dir, cfg.to_json());
  } catch (...) {
    // partial-shard cleanup: never leave a half-written dataset behind
    std::error_code ec;
    fs::remove_all(dir, ec);
    throw;
  }
  std::cout << "generate-data: wrote " << cfg.n_initial << " labeled pairs to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Monte Carlo reference evaluation of the true objective

struct McResult {
  double value = 0.0;
  double std_error = 0.0;
  std::vector<std::array<double, 2>> kappa;
};

inline McResult mc_evaluate_objective(const RunConfig& cfg, const field::RandField& rf, double x0,
                                      const std::vector<double>& phi,
                                      const std::vector<std::vector<double>>& o2_targets,
                                      std::uint64_t seed) {
  Rng rng(seed);
  const int n = cfg.eval_samples;
  std::vector<std::vector<std::uint8_t>> grids(n);
  for (int i = 0; i < n; ++i) grids[i] = rf.sample_binary(phi, x0, rng);
  const auto labels = homog::label_batch(cfg.n_pixels, cfg.material, cfg.is_case1(), grids,
                                         cfg.threads);
  McResult r;
  r.kappa = labels;
  if (cfg.objective.variant == vbem::ObjectiveVariant::O1Box) {
    int hits = 0;
    for (const auto& k : labels) {
      bool in = true;
      for (int j = 0; j < 2; ++j)
        in = in && k[j] > cfg.objective.box.lo[j] && k[j] < cfg.objective.box.hi[j];
      hits += in;
    }
    r.value = static_cast<double>(hits) / n;
    r.std_error = std::sqrt(std::max(r.value * (1.0 - r.value), 1.0 / n) / n);
  } else if (cfg.objective.variant == vbem::ObjectiveVariant::O1Gaussian) {
    std::vector<double> u(n);
    for (int i = 0; i < n; ++i) {
      double q = 0.0;
      for (int j = 0; j < 2; ++j) {
        const double d = labels[i][j] - cfg.objective.kappa_target[j];
        q += d * d;
      }
      u[i] = std::exp(-cfg.objective.tau * q);
    }
    r.value = mean_of(u);
    r.std_error = std::sqrt(variance_of(u) / n);
  } else {
    // O2: mean log kernel-density of the target samples under the MC cloud
    std::vector<double> cloud(static_cast<std::size_t>(n) * 2);
    for (int i = 0; i < n; ++i) {
      cloud[2 * i] = labels[i][0];
      cloud[2 * i + 1] = labels[i][1];
    }
    GaussianKde kde(cloud, 2);
    auto score_of = [&](const GaussianKde& k) {
      double s = 0.0;
      for (const auto& t : o2_targets) s += k.log_density(t.data());
      return s / static_cast<double>(o2_targets.size());
    };
    r.value = score_of(kde);
    // delete-one jackknife over the MC cloud
    std::vector<double> theta(n);
    for (int i = 0; i < n; ++i) {
      std::vector<double> sub;
      sub.reserve((n - 1) * 2);
      for (int k2 = 0; k2 < n; ++k2) {
        if (k2 == i) continue;
        sub.push_back(cloud[2 * k2]);
        sub.push_back(cloud[2 * k2 + 1]);
      }
      GaussianKde kj(sub, 2);
      theta[i] = score_of(kj);
    }
    const double tm = mean_of(theta);
    double ss = 0.0;
    for (double t : theta) ss += (t - tm) * (t - tm);
    r.std_error = std::sqrt(ss * (n - 1.0) / n);
  }
  return r;
}

// ---------------------------------------------------------------------------
// optimize (and baseline) outer loop

struct OuterState {
  int next_step = 0;
  std::vector<double> phi;
  std::vector<double> phi_init;
  std::vector<vbem::VParams> xis;  // one entry for case1, S for case2
  std::vector<std::vector<double>> o2_targets;
  nlohmann::json step_reports = nlohmann::json::array();
};

namespace detail {

inline std::uint64_t config_fingerprint(const RunConfig& cfg) {
  return fnv1a64(cfg.to_json().dump());
}

inline void save_checkpoint(const fs::path& out, const RunConfig& cfg, const OuterState& st) {
  nlohmann::json j;
  j["config_fingerprint"] = config_fingerprint(cfg);
  j["next_step"] = st.next_step;
  j["phi"] = st.phi;
  j["phi_init"] = st.phi_init;
  j["o2_targets"] = st.o2_targets;
  j["resolved_objective"] = cfg.to_json().at("objective");
  j["step_reports"] = st.step_reports;
  std::vector<double> blob;
  std::vector<nlohmann::json> xj;
  for (const auto& xi : st.xis) {
    xj.push_back({{"dz", xi.dim()}, {"rank", xi.rank()}});
    blob.insert(blob.end(), xi.mu.vec().begin(), xi.mu.vec().end());
    blob.insert(blob.end(), xi.logd.vec().begin(), xi.logd.vec().end());
    blob.insert(blob.end(), xi.l.vec().begin(), xi.l.vec().end());
  }
  j["xi"] = xj;
  io::write_json(out / "checkpoint.json", j);
  io::write_f64(out / "checkpoint.bin", blob);
}

inline OuterState load_checkpoint(const fs::path& path, const RunConfig& cfg) {
  const fs::path dir = fs::is_directory(path) ? path : path.parent_path();
  const auto j = io::read_json(dir / "checkpoint.json");
  if (j.at("config_fingerprint").get<std::uint64_t>() != config_fingerprint(cfg))
    throw ConfigError("resume: checkpoint was produced by a different configuration");
  OuterState st;
  st.next_step = j.at("next_step").get<int>();
  st.phi = j.at("phi").get<std::vector<double>>();
  st.phi_init = j.at("phi_init").get<std::vector<double>>();
  st.o2_targets = j.at("o2_targets").get<std::vector<std::vector<double>>>();
  st.step_reports = j.at("step_reports");
  const auto blob = io::read_f64(dir / "checkpoint.bin");
  std::size_t off = 0;
  for (const auto& xj : j.at("xi")) {
    const int dz = xj.at("dz").get<int>();
    const int rank = xj.at("rank").get<int>();
    auto xi = vbem::VParams::standard(dz, rank);
    auto take = [&](Tensor& t) {
      std::copy(blob.begin() + off, blob.begin() + off + t.size(), t.vec().begin());
      off += t.size();
    };
    take(xi.mu);
    take(xi.logd);
    take(xi.l);
    st.xis.push_back(std::move(xi));
  }
  if (off != blob.size()) throw ConfigError("resume: checkpoint blob size mismatch");
  return st;
}

/// Surrogate-believed objective at the current (xi, phi), for run reports.
inline double believed_objective(const RunConfig& cfg, const field::RandField& rf,
                                 const surrogate::Surrogate& sur,
                                 const std::vector<vbem::VParams>& xis,
                                 const std::vector<double>& phi,
                                 const std::vector<std::vector<double>>& o2_targets,
                                 std::uint64_t seed, int threads) {
  Rng rng(seed);
  const double x0 = field::cutoff_from_vf(cfg.volume_fraction);
  vbem::FieldModel model(rf, sur, x0, cfg.smooth_epsilon);
  Tensor phi_t(Shape{phi.size()}, phi);
  const int n = 256;
  if (cfg.objective.variant != vbem::ObjectiveVariant::O2) {
    const auto ens = vbem::detail::predictive_ensemble(model, xis[0], 2, phi_t, n, rng, threads);
    const auto& st = sur.standardizer();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      if (cfg.objective.variant == vbem::ObjectiveVariant::O1Box) {
        surrogate::AxisBox b;
        b.lo = st.to_std(cfg.objective.box.lo);
        b.hi = st.to_std(cfg.objective.box.hi);
        acc += vbem::detail::box_weight(ens.mean[i], ens.sd[i], b);
      } else {
        std::vector<double> tgt = st.to_std(cfg.objective.kappa_target);
        std::vector<double> tau(2);
        for (int j = 0; j < 2; ++j) tau[j] = cfg.objective.tau * st.sd[j] * st.sd[j];
        acc += vbem::detail::gaussian_utility_weight(ens.mean[i], ens.sd[i], tgt, tau);
      }
    }
    return acc / n;
  }
  // O2: mean predictive log-score of the target samples under q-averaged x
  const auto& st = sur.standardizer();
  double acc = 0.0;
  for (std::size_t s = 0; s < xis.size(); ++s) {
    const auto ens = vbem::detail::predictive_ensemble(model, xis[s], 0, phi_t, 64, rng, threads);
    const auto ks = st.to_std(o2_targets[s]);
    double best = 0.0;
    for (std::size_t i = 0; i < ens.mean.size(); ++i) {
      double lw = 0.0;
      for (int j = 0; j < 2; ++j)
        lw += norm_logpdf(ks[j], ens.mean[i][j], ens.sd[i][j] * ens.sd[i][j]);
      best += lw / static_cast<double>(ens.mean.size());
    }
    acc += best / static_cast<double>(xis.size());
  }
  return acc;
}

}  // namespace detail

/// The full optimization run. `resume` optionally points at a checkpoint
/// directory. Budget-equality bookkeeping for baselines is driven by
/// n_steps = 0 with an enlarged initial dataset.
inline int cmd_optimize(RunConfig cfg, const std::string& resume = "") {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  auto rf = make_field(cfg);
  const double x0 = field::cutoff_from_vf(cfg.volume_fraction);
  auto d = active::DataStore::load(data_dir_of(cfg));
  if (d.n_pixels() != cfg.n_pixels)
    throw ConfigError("optimize: dataset grid size does not match the configuration");
  resolve_objective(cfg, d);

  const int q = cfg.sdf.count();
  const int dz1 = 2 + rf.psi_dim();
  OuterState st;
  if (!resume.empty()) {
    st = detail::load_checkpoint(resume, cfg);
  } else {
    Rng rng(derive_seed(cfg.master_seed, "phi-init"));
    st.phi = rng.normals(q);  // phi^(0) ~ N(0, I)
    st.phi_init = st.phi;
    if (cfg.is_case1()) {
      st.xis.push_back(vbem::VParams::standard(dz1, cfg.vbem.rank));
    } else {
      Rng trng(derive_seed(cfg.master_seed, "o2-targets"));
      st.o2_targets = cfg.objective.draw_target_samples(2, trng);
      for (int s = 0; s < cfg.objective.target_samples; ++s)
        st.xis.push_back(vbem::VParams::standard(rf.psi_dim(), cfg.vbem.rank));
    }
  }

  std::ofstream runlog(out / "runlog.jsonl", st.next_step == 0 ? std::ios::trunc : std::ios::app);
  auto settings = cfg.vbem;
  settings.threads = cfg.threads;

  io::write_json(out / "manifest.json", cfg.to_json());

  surrogate::TrainLog tlog;
  for (int l = st.next_step; l <= cfg.n_steps; ++l) {
    // retrain from scratch on the accumulated data
    auto tc = cfg.train;
    tc.seed = derive_seed(cfg.master_seed, "train", static_cast<std::uint64_t>(l));
    auto sur = surrogate::train(make_arch(cfg), tc, d.all_grids(), d.all_labels(), &tlog);
    sur.save(out / ("surrogate_l" + std::to_string(l)));

    Tensor phi_t(Shape{static_cast<std::size_t>(q)}, st.phi);
    auto log_cb = [&](const vbem::RunlogEntry& e) {
      nlohmann::json r{{"outer_step", l},
                       {"iteration", e.iteration},
                       {"elbo", e.elbo},
                       {"temper_stage", e.temper_progress},
                       {"phi_norm", e.phi_norm},
                       {"wall_seconds", e.wall_seconds}};
      runlog << r.dump() << "\n";
    };

    vbem::InnerResult res;
    if (cfg.is_case1()) {
      res = vbem::optimize_o1(rf, sur, cfg.objective, x0, cfg.smooth_epsilon, st.xis[0], phi_t,
                              settings, derive_seed(cfg.master_seed, "inner", l), log_cb);
    } else {
      res = vbem::optimize_o2(rf, sur, st.o2_targets, x0, cfg.smooth_epsilon, st.xis, phi_t,
                              settings, derive_seed(cfg.master_seed, "inner", l), log_cb);
    }
    runlog.flush();
    st.phi.assign(phi_t.vec().begin(), phi_t.vec().end());

    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : res.temper_events)
      events.push_back({{"iteration", e.iteration},
                        {"accepted_t", e.accepted_t},
                        {"progress", e.progress},
                        {"ess", e.ess_at_accept}});
    const double believed = detail::believed_objective(
        cfg, rf, sur, st.xis, st.phi, st.o2_targets,
        derive_seed(cfg.master_seed, "believed", l), cfg.threads);
    st.step_reports.push_back({{"step", l},
                               {"data_size", d.size()},
                               {"elbo_final_ma", res.final_ma},
                               {"iterations", res.iterations},
                               {"converged", res.converged},
                               {"temper_stalled", res.temper_stalled},
                               {"temper_events", events},
                               {"believed_objective", believed},
                               {"train_heldout_nll", tlog.heldout_nll},
                               {"train_baseline_nll", tlog.baseline_nll},
                               {"phi", st.phi}});

    if (l < cfg.n_steps) {
      // acquisition: pool from q, score, label, extend the store
      Rng prng(derive_seed(cfg.master_seed, "pool", l));
      std::function<std::vector<double>(Rng&)> sampler;
      if (cfg.is_case1()) {
        sampler = [&](Rng& r) { return vbem::sample_block(st.xis[0], 2, rf.psi_dim(), r); };
      } else {
        sampler = [&](Rng& r) {
          const auto s = r.below(st.xis.size());
          return vbem::sample_block(st.xis[s], 0, rf.psi_dim(), r);
        };
      }
      auto pool = active::propose_pool(rf, st.phi, x0, sampler, cfg.n_pool, prng, &d);
      std::vector<double> scores(pool.size());
      parallel_for(pool.size(), cfg.threads, [&](std::size_t i) {
        scores[i] = cfg.is_case1() ? active::acquisition_o1(pool[i], sur, cfg.objective)
                                   : active::acquisition_o2(pool[i], sur, st.o2_targets);
      });
      auto batch = active::select_and_label(pool, scores, cfg.n_add, cfg.n_pixels, cfg.material,
                                            cfg.is_case1(), cfg.threads);
      d.begin_shard(l + 1, derive_seed(cfg.master_seed, "pool", l), st.phi);
      for (std::size_t i = 0; i < batch.chosen.size(); ++i)
        d.add(pool[batch.chosen[i]].grid, batch.labels[i]);
      d.save(data_dir_of(cfg), cfg.to_json());
      st.next_step = l + 1;
      detail::save_checkpoint(out, cfg, st);
    }
  }

  // Monte Carlo reference at the initial and final process parameters
  const auto mc_star = mc_evaluate_objective(cfg, rf, x0, st.phi, st.o2_targets,
                                             derive_seed(cfg.master_seed, "mc-reference"));
  const auto mc_init = mc_evaluate_objective(cfg, rf, x0, st.phi_init, st.o2_targets,
                                             derive_seed(cfg.master_seed, "mc-reference"));

  nlohmann::json report;
  report["case"] = cfg.case_variant;
  report["resolved_config"] = cfg.to_json();
  report["budget"] = {{"initial", d.shards().front().count},
                      {"total", d.size()},
                      {"per_step_add", cfg.n_add},
                      {"steps", cfg.n_steps}};
  report["steps"] = st.step_reports;
  report["phi_init"] = st.phi_init;
  report["phi_star"] = st.phi;
  report["o2_target_samples"] = st.o2_targets;
  report["mc_reference"] = {
      {"n_samples", cfg.eval_samples},
      {"at_star", {{"value", mc_star.value}, {"std_error", mc_star.std_error}}},
      {"at_init", {{"value", mc_init.value}, {"std_error", mc_init.std_error}}}};
  report["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_json(out / "report.json", report);
  io::write_json(out / "phi_star.json", nlohmann::json{{"phi", st.phi}});
  io::write_json(out / "phi_init.json", nlohmann::json{{"phi", st.phi_init}});

  // final-state scatter for plotting
  {
    fs::create_directories(out / "eval");
    std::ostringstream csv;
    csv << "kappa1,kappa2\n";
    for (const auto& k : mc_star.kappa) csv << k[0] << "," << k[1] << "\n";
    io::write_text(out / "eval" / "kappa_scatter.csv", csv.str());
  }
  std::cout << "optimize: objective " << mc_init.value << " -> " << mc_star.value
            << " (MC reference, n=" << cfg.eval_samples << ")\n";
  return 0;
}

/// Random-acquisition control at the same total label budget.
inline int cmd_baseline(RunConfig cfg) {
  cfg.validate();
  const int total_budget = cfg.n_initial + cfg.n_steps * cfg.n_add;
  RunConfig bl = cfg;
  bl.n_initial = total_budget;
  bl.n_steps = 0;
  bl.master_seed = derive_seed(cfg.master_seed, "baseline");
  if (bl.data_dir.empty()) bl.data_dir = (fs::path(bl.out_dir) / "data").string();
  cmd_generate_data(bl);
  const int rc = cmd_optimize(bl);
  if (rc != 0) return rc;

  // budget equality is part of the report contract
  auto report = io::read_json(fs::path(bl.out_dir) / "report.json");
  const bool equal = report.at("budget").at("total").get<int>() == total_budget;
  report["budget_matches_active"] = equal;
  report["active_equivalent_budget"] = total_budget;
  if (!cfg.paired_with.empty()) {
    const auto active_rep = io::read_json(cfg.paired_with);
    std::ostringstream csv;
    csv << "seed,active_objective,baseline_objective\n";
    csv << cfg.master_seed << ","
        << active_rep.at("mc_reference").at("at_star").at("value").get<double>() << ","
        << report.at("mc_reference").at("at_star").at("value").get<double>() << "\n";
    io::write_text(fs::path(bl.out_dir) / "paired.csv", csv.str());
    report["paired_with"] = cfg.paired_with;
  }
  io::write_json(fs::path(bl.out_dir) / "report.json", report);
  return 0;
}

/// MC estimate of the true objective at a given phi.
inline int cmd_evaluate(RunConfig cfg) {
  cfg.validate();
  if (cfg.phi_file.empty()) throw ConfigError("evaluate: config must set phi_file");
  const auto pj = io::read_json(cfg.phi_file);
  const auto phi = pj.at("phi").get<std::vector<double>>();
  if (static_cast<int>(phi.size()) != cfg.sdf.count())
    throw ConfigError("evaluate: phi dimension does not match the SDF configuration");
  auto rf = make_field(cfg);
  const double x0 = field::cutoff_from_vf(cfg.volume_fraction);
  auto d = active::DataStore::load(data_dir_of(cfg));
  resolve_objective(cfg, d);
  std::vector<std::vector<double>> targets;
  if (!cfg.is_case1()) {
    Rng trng(derive_seed(cfg.master_seed, "o2-targets"));
    targets = cfg.objective.draw_target_samples(2, trng);
  }
  const auto mc = mc_evaluate_objective(cfg, rf, x0, phi, targets,
                                        derive_seed(cfg.master_seed, "evaluate"));
  const fs::path out(cfg.out_dir);
  fs::create_directories(out / "eval");
  nlohmann::json rj{{"value", mc.value},
                    {"std_error", mc.std_error},
                    {"n_samples", cfg.eval_samples},
                    {"objective", cfg.to_json().at("objective")},
                    {"phi_file", cfg.phi_file}};
  io::write_json(out / "eval" / "result.json", rj);
  std::ostringstream csv;
  csv << "kappa1,kappa2\n";
  for (const auto& k : mc.kappa) csv << k[0] << "," << k[1] << "\n";
  io::write_text(out / "eval" / "kappa_scatter.csv", csv.str());
  std::cout << "evaluate: " << mc.value << " +- " << mc.std_error << " (n=" << cfg.eval_samples
            << ")\n";
  return 0;
}

/// CSV/JSON series for plotting; pure function of the run directory.
inline int cmd_export_plots(const RunConfig& cfg) {
  const fs::path out(cfg.out_dir);
  std::vector<std::string> missing;
  if (!fs::exists(out / "report.json")) missing.push_back("report.json");
  if (!fs::exists(out / "runlog.jsonl")) missing.push_back("runlog.jsonl");
  if (!missing.empty()) {
    std::string msg = "export-plots: missing inputs in " + out.string() + ":";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  fs::create_directories(out / "plots");

  // ELBO trace from the run log
  {
    std::ifstream in(out / "runlog.jsonl");
    std::ostringstream csv;
    csv << "outer_step,iteration,elbo,temper_stage,phi_norm\n";
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      csv << j.at("outer_step").get<int>() << "," << j.at("iteration").get<int>() << ","
          << j.at("elbo").get<double>() << "," << j.at("temper_stage").get<double>() << ","
          << j.at("phi_norm").get<double>() << "\n";
    }
    io::write_text(out / "plots" / "elbo_trace.csv", csv.str());
  }

  const auto report = io::read_json(out / "report.json");
  {
    std::ostringstream csv;
    csv << "step,data_size,believed_objective,elbo_final_ma\n";
    for (const auto& s : report.at("steps"))
      csv << s.at("step").get<int>() << "," << s.at("data_size").get<std::size_t>() << ","
          << s.at("believed_objective").get<double>() << "," << s.at("elbo_final_ma").get<double>()
          << "\n";
    io::write_text(out / "plots" / "objective_vs_budget.csv", csv.str());
  }

  // kappa scatter with the target overlay
  if (fs::exists(out / "eval" / "kappa_scatter.csv")) {
    io::write_text(out / "plots" / "kappa_scatter.csv",
                   io::read_text(out / "eval" / "kappa_scatter.csv"));
  }
  {
    const auto& obj = report.at("resolved_config").at("objective");
    std::ostringstream csv;
    if (obj.contains("box")) {
      csv << "lo1,hi1,lo2,hi2\n";
      csv << obj.at("box").at("lo")[0].get<double>() << "," << obj.at("box").at("hi")[0].get<double>()
          << "," << obj.at("box").at("lo")[1].get<double>() << ","
          << obj.at("box").at("hi")[1].get<double>() << "\n";
    } else if (obj.contains("target_mean")) {
      csv << "mean1,mean2,cov11,cov12,cov22\n";
      csv << obj.at("target_mean")[0].get<double>() << "," << obj.at("target_mean")[1].get<double>()
          << "," << obj.at("target_cov")[0].get<double>() << ","
          << obj.at("target_cov")[1].get<double>() << "," << obj.at("target_cov")[3].get<double>()
          << "\n";
    } else if (obj.contains("kappa_target")) {
      csv << "target1,target2,tau\n";
      csv << obj.at("kappa_target")[0].get<double>() << "," << obj.at("kappa_target")[1].get<double>()
          << "," << obj.at("tau").get<double>() << "\n";
    }
    io::write_text(out / "plots" / "target_overlay.csv", csv.str());
  }
  std::cout << "export-plots: wrote series to " << (out / "plots") << "\n";
  return 0;
}

}  // namespace psp::cli
