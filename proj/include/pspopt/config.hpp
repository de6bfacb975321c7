#pragma once

// Run configuration: one JSON file exposing every pipeline hyperparameter.
// Desk-scale defaults keep a full run in the minutes range; the settings the
// larger experiments use (N_p=64, Q=100, bigger budgets) are all reachable
// through the same file.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "pspopt/homog.hpp"
#include "pspopt/innerloop.hpp"
#include "pspopt/randfield.hpp"
#include "pspopt/surrogate.hpp"

namespace psp::cli {

struct RunConfig {
  std::string case_variant = "case1";  // "case1" (O1) or "case2" (O2)

  // objective; box/target may be auto-derived from the initial data
  vbem::ObjectiveSpec objective;
  bool box_from_percentiles = true;
  double box_pct_lo = 70.0, box_pct_hi = 90.0;
  bool target_from_data = true;
  std::vector<double> target_shift_sigmas{1.0, -1.0};
  double target_cov_scale = 0.25;

  // microstructure model
  int n_pixels = 32;
  double volume_fraction = 0.5;
  double smooth_epsilon = 25.0;
  field::SdfConfig sdf;           // rbf_per_axis=6 (Q=36), sigma=12, w_max=65
  int spectral_per_axis = 16;     // d_psi = 2 * 16^2 = 512

  homog::MaterialConfig material;
  surrogate::TrainConfig train;   // batch 128, wd 1e-5, dropout 0.05, 200 epochs
  vbem::InnerSettings vbem;       // n_mc 32, k_e 50, k_m 10, rank 50, ...

  // active-learning budgets
  int n_initial = 512;
  int n_pool = 512;
  int n_add = 128;
  int n_steps = 3;

  int eval_samples = 256;

  // data / phi sources for commands that need them
  std::string data_dir;       // defaults to <out>/data
  std::string phi_file;       // evaluate: JSON file with {"phi": [...]}
  std::string paired_with;    // baseline: path to an active run report for pairing

  // filled from the command line
  std::uint64_t master_seed = 0;
  std::string out_dir = "out";
  int threads = 1;

  bool is_case1() const { return case_variant == "case1"; }

  void validate() const {
    if (case_variant != "case1" && case_variant != "case2")
      throw ConfigError("config: case must be \"case1\" or \"case2\"");
    if (n_pixels % 16 != 0 || n_pixels < 16)
      throw ConfigError("config: n_pixels must be a positive multiple of 16");
    if (!(volume_fraction > 0.0 && volume_fraction < 1.0))
      throw ConfigError("config: volume_fraction must lie in (0,1)");
    if (!(smooth_epsilon > 0.0)) throw ConfigError("config: smooth_epsilon must be positive");
    if (n_initial < 1 || n_pool < 1 || n_add < 1 || n_steps < 0 || eval_samples < 2)
      throw ConfigError("config: budgets must be positive (eval_samples >= 2)");
    if (n_add > n_pool) throw ConfigError("config: n_add must not exceed n_pool");
    if (spectral_per_axis < 1) throw ConfigError("config: spectral_per_axis must be >= 1");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
    sdf.validate();
    material.validate();
    train.validate();
    vbem.validate();
    if (!is_case1() && objective.variant != vbem::ObjectiveVariant::O2 && !target_from_data)
      throw ConfigError("config: case2 requires an O2 objective");
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    auto get = [](const nlohmann::json& o, const char* k, auto def) {
      using T = decltype(def);
      return o.contains(k) ? o.at(k).get<T>() : def;
    };
    c.case_variant = get(j, "case", std::string("case1"));

    if (j.contains("objective")) {
      const auto& o = j.at("objective");
      const std::string var = get(o, "variant", std::string(c.case_variant == "case2" ? "o2" : "o1_box"));
      if (var == "o1_box")
        c.objective.variant = vbem::ObjectiveVariant::O1Box;
      else if (var == "o1_gaussian")
        c.objective.variant = vbem::ObjectiveVariant::O1Gaussian;
      else if (var == "o2")
        c.objective.variant = vbem::ObjectiveVariant::O2;
      else
        throw ConfigError("config: unknown objective variant " + var);
      if (o.contains("box")) {
        c.objective.box.lo = o.at("box").at("lo").get<std::vector<double>>();
        c.objective.box.hi = o.at("box").at("hi").get<std::vector<double>>();
        c.box_from_percentiles = false;
      }
      c.box_from_percentiles = get(o, "box_from_percentiles", c.box_from_percentiles);
      c.box_pct_lo = get(o, "box_percentile_lo", c.box_pct_lo);
      c.box_pct_hi = get(o, "box_percentile_hi", c.box_pct_hi);
      c.objective.kappa_target = get(o, "kappa_target", c.objective.kappa_target);
      c.objective.tau = get(o, "tau", c.objective.tau);
      if (o.contains("target_mean")) {
        c.objective.target_mean = o.at("target_mean").get<std::vector<double>>();
        c.target_from_data = false;
      }
      if (o.contains("target_cov"))
        c.objective.target_cov = o.at("target_cov").get<std::vector<double>>();
      c.target_from_data = get(o, "target_from_data", c.target_from_data);
      c.target_shift_sigmas = get(o, "target_shift_sigmas", c.target_shift_sigmas);
      c.target_cov_scale = get(o, "target_cov_scale", c.target_cov_scale);
      c.objective.target_samples = get(o, "target_samples", 20);
    } else if (c.case_variant == "case2") {
      c.objective.variant = vbem::ObjectiveVariant::O2;
    }

    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      c.n_pixels = get(g, "n_pixels", c.n_pixels);
      c.volume_fraction = get(g, "volume_fraction", c.volume_fraction);
      c.smooth_epsilon = get(g, "smooth_epsilon", c.smooth_epsilon);
    }
    if (j.contains("sdf")) {
      const auto& s = j.at("sdf");
      c.sdf.rbf_per_axis = get(s, "rbf_per_axis", c.sdf.rbf_per_axis);
      c.sdf.sigma = get(s, "sigma", c.sdf.sigma);
      c.sdf.w_max = get(s, "w_max", c.sdf.w_max);
    }
    c.spectral_per_axis = j.contains("spectral")
                              ? get(j.at("spectral"), "nodes_per_axis", c.spectral_per_axis)
                              : c.spectral_per_axis;
    if (j.contains("material")) {
      const auto& m = j.at("material");
      c.material.e0 = get(m, "e0", c.material.e0);
      c.material.e1 = get(m, "e1", c.material.e1);
      c.material.nu = get(m, "nu", c.material.nu);
      c.material.a0 = get(m, "a0", c.material.a0);
      c.material.a1 = get(m, "a1", c.material.a1);
      const std::string plane = get(m, "plane", std::string("strain"));
      if (plane == "strain")
        c.material.plane = homog::Plane::Strain;
      else if (plane == "stress")
        c.material.plane = homog::Plane::Stress;
      else
        throw ConfigError("config: material.plane must be \"strain\" or \"stress\"");
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.batch_size = get(t, "batch_size", c.train.batch_size);
      c.train.weight_decay = get(t, "weight_decay", c.train.weight_decay);
      c.train.dropout = get(t, "dropout", c.train.dropout);
      c.train.learning_rate = get(t, "learning_rate", c.train.learning_rate);
      c.train.epochs = get(t, "epochs", c.train.epochs);
    }
    if (j.contains("vbem")) {
      const auto& v = j.at("vbem");
      c.vbem.n_mc = get(v, "n_mc", c.vbem.n_mc);
      c.vbem.k_e = get(v, "k_e", c.vbem.k_e);
      c.vbem.k_m = get(v, "k_m", c.vbem.k_m);
      c.vbem.lr_xi = get(v, "lr_xi", c.vbem.lr_xi);
      c.vbem.lr_phi = get(v, "lr_phi", c.vbem.lr_phi);
      c.vbem.max_iters = get(v, "max_iters", c.vbem.max_iters);
      c.vbem.rank = get(v, "rank", c.vbem.rank);
      c.vbem.o2_update_fraction = get(v, "o2_update_fraction", c.vbem.o2_update_fraction);
      c.vbem.conv_rel = get(v, "conv_rel", c.vbem.conv_rel);
      c.vbem.temper.ess_floor = get(v, "ess_floor", c.vbem.temper.ess_floor);
      c.vbem.temper.beta_min = get(v, "beta_min", c.vbem.temper.beta_min);
      c.vbem.temper.beta_max = get(v, "beta_max", c.vbem.temper.beta_max);
      c.vbem.temper.n_weight_draws = get(v, "temper_draws", c.vbem.temper.n_weight_draws);
    }
    if (j.contains("active")) {
      const auto& a = j.at("active");
      c.n_initial = get(a, "n_initial", c.n_initial);
      c.n_pool = get(a, "n_pool", c.n_pool);
      c.n_add = get(a, "n_add", c.n_add);
      c.n_steps = get(a, "n_steps", c.n_steps);
    }
    c.eval_samples = j.contains("evaluate")
                         ? get(j.at("evaluate"), "n_samples", c.eval_samples)
                         : c.eval_samples;
    c.data_dir = get(j, "data_dir", std::string());
    c.phi_file = get(j, "phi_file", std::string());
    c.paired_with = get(j, "paired_with", std::string());
    return c;
  }

  /// Fully resolved configuration for manifests (self-describing outputs).
  nlohmann::json to_json() const {
    nlohmann::json o;
    o["case"] = case_variant;
    nlohmann::json obj;
    obj["variant"] = objective.variant == vbem::ObjectiveVariant::O1Box       ? "o1_box"
                     : objective.variant == vbem::ObjectiveVariant::O1Gaussian ? "o1_gaussian"
                                                                               : "o2";
    if (!objective.box.lo.empty()) obj["box"] = {{"lo", objective.box.lo}, {"hi", objective.box.hi}};
    if (!objective.kappa_target.empty()) obj["kappa_target"] = objective.kappa_target;
    obj["tau"] = objective.tau;
    if (!objective.target_mean.empty()) {
      obj["target_mean"] = objective.target_mean;
      obj["target_cov"] = objective.target_cov;
    }
    obj["target_samples"] = objective.target_samples;
    obj["box_from_percentiles"] = box_from_percentiles;
    obj["box_percentile_lo"] = box_pct_lo;
    obj["box_percentile_hi"] = box_pct_hi;
    obj["target_from_data"] = target_from_data;
    obj["target_shift_sigmas"] = target_shift_sigmas;
    obj["target_cov_scale"] = target_cov_scale;
    o["objective"] = obj;
    o["grid"] = {{"n_pixels", n_pixels},
                 {"volume_fraction", volume_fraction},
                 {"smooth_epsilon", smooth_epsilon}};
    o["sdf"] = {{"rbf_per_axis", sdf.rbf_per_axis}, {"sigma", sdf.sigma}, {"w_max", sdf.w_max}};
    o["spectral"] = {{"nodes_per_axis", spectral_per_axis}};
    o["material"] = {{"e0", material.e0}, {"e1", material.e1}, {"nu", material.nu},
                     {"a0", material.a0}, {"a1", material.a1},
                     {"plane", material.plane == homog::Plane::Strain ? "strain" : "stress"}};
    o["train"] = {{"batch_size", train.batch_size},
                  {"weight_decay", train.weight_decay},
                  {"dropout", train.dropout},
                  {"learning_rate", train.learning_rate},
                  {"epochs", train.epochs}};
    o["vbem"] = {{"n_mc", vbem.n_mc},       {"k_e", vbem.k_e},
                 {"k_m", vbem.k_m},         {"lr_xi", vbem.lr_xi},
                 {"lr_phi", vbem.lr_phi},   {"max_iters", vbem.max_iters},
                 {"rank", vbem.rank},       {"o2_update_fraction", vbem.o2_update_fraction},
                 {"conv_rel", vbem.conv_rel},
                 {"ess_floor", vbem.temper.ess_floor},
                 {"beta_min", vbem.temper.beta_min},
                 {"beta_max", vbem.temper.beta_max},
                 {"temper_draws", vbem.temper.n_weight_draws}};
    o["active"] = {{"n_initial", n_initial}, {"n_pool", n_pool}, {"n_add", n_add},
                   {"n_steps", n_steps}};
    o["evaluate"] = {{"n_samples", eval_samples}};
    if (!data_dir.empty()) o["data_dir"] = data_dir;
    if (!phi_file.empty()) o["phi_file"] = phi_file;
    if (!paired_with.empty()) o["paired_with"] = paired_with;
    o["master_seed"] = master_seed;
    o["threads"] = threads;
    return o;
  }
};

}  // namespace psp::cli
