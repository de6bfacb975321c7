#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>

#include "pspopt/runner.hpp"

using namespace psp;
namespace fs = std::filesystem;

namespace {

// Desk-smoke configuration: every knob small enough that a full command
// finishes in seconds.
cli::RunConfig smoke_config(const fs::path& out, std::uint64_t seed, const std::string& cse = "case1") {
  cli::RunConfig c;
  c.case_variant = cse;
  if (cse == "case2") {
    c.objective.variant = vbem::ObjectiveVariant::O2;
    c.objective.target_samples = 3;
  }
  c.n_pixels = 16;
  c.sdf.rbf_per_axis = 2;  // Q = 4
  c.spectral_per_axis = 4; // d_psi = 32
  c.n_initial = 48;
  c.n_pool = 16;
  c.n_add = 8;
  c.n_steps = 1;
  c.eval_samples = 16;
  c.train.batch_size = 16;
  c.train.epochs = 8;
  c.vbem.n_mc = 4;
  c.vbem.k_e = 10;
  c.vbem.k_m = 4;
  c.vbem.rank = 4;
  c.vbem.max_iters = 40;
  c.vbem.temper.n_weight_draws = 32;
  c.master_seed = seed;
  c.out_dir = out.string();
  c.threads = 2;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// JSON with volatile timing fields removed, for determinism comparisons.
nlohmann::json strip_wall(nlohmann::json j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end();) {
      if (it.key().rfind("wall", 0) == 0) {
        it = j.erase(it);
      } else {
        *it = strip_wall(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& e : j) e = strip_wall(e);
  }
  return j;
}

}  // namespace

TEST_CASE("generate-data") {
  SECTION("smoke run round-trips through the reader") {
    const auto out = fresh_dir("psp_cli_gen");
    auto cfg = smoke_config(out, 5);
    cfg.n_initial = 8;
    REQUIRE(cli::cmd_generate_data(cfg) == 0);
    auto d = active::DataStore::load(out / "data");
    REQUIRE(d.size() == 8);
    CHECK(d.n_pixels() == 16);

    SECTION("labels lie within the scalar Voigt/Reuss bounds") {
      for (std::size_t i = 0; i < d.size(); ++i) {
        double f1 = 0;
        for (auto v : d.grid(i)) f1 += v;
        f1 /= d.grid(i).size();
        const auto k = d.label(i);
        const double lo = homog::conductivity_reuss_bound(cfg.material, f1)(0, 0);
        const double hi = homog::conductivity_voigt_bound(cfg.material, f1)(0, 0);
        CHECK(k[0] >= lo * (1 - 1e-8));
        CHECK(k[0] <= hi * (1 + 1e-8));
      }
    }
  }

  SECTION("identical seed gives identical shard bytes") {
    const auto o1 = fresh_dir("psp_cli_gen_a");
    const auto o2 = fresh_dir("psp_cli_gen_b");
    auto c1 = smoke_config(o1, 77);
    auto c2 = smoke_config(o2, 77);
    c1.n_initial = c2.n_initial = 10;
    cli::cmd_generate_data(c1);
    cli::cmd_generate_data(c2);
    for (const char* f : {"shard_0.inputs.f64", "shard_0.labels.f64"}) {
      const auto a = io::read_f64(o1 / "data" / f);
      const auto b = io::read_f64(o2 / "data" / f);
      REQUIRE(a == b);
    }
  }
}

TEST_CASE("optimize smoke run") {
  const auto out = fresh_dir("psp_cli_opt");
  auto cfg = smoke_config(out, 11);
  REQUIRE(cli::cmd_generate_data(cfg) == 0);
  REQUIRE(cli::cmd_optimize(cfg) == 0);

  const auto report = io::read_json(out / "report.json");
  SECTION("report structure") {
    CHECK(report.at("phi_star").size() == 4);  // Q = 2^2
    CHECK(report.at("steps").size() == 2);     // l = 0, 1
    CHECK(report.at("budget").at("total").get<int>() == 48 + 8);
    CHECK(report.at("mc_reference").contains("at_star"));
    CHECK(report.at("mc_reference").at("at_star").contains("std_error"));
    CHECK(fs::exists(out / "runlog.jsonl"));
    CHECK(fs::exists(out / "surrogate_l1.json"));
    CHECK(fs::exists(out / "checkpoint.json"));
    CHECK(fs::exists(out / "phi_star.json"));
  }

  SECTION("runlog lines carry the documented fields") {
    std::ifstream in(out / "runlog.jsonl");
    std::string line;
    REQUIRE(std::getline(in, line));
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"outer_step", "iteration", "elbo", "temper_stage", "phi_norm",
                          "wall_seconds"})
      CHECK(j.contains(k));
  }

  SECTION("export-plots emits fixed headers with matching row counts, idempotently") {
    REQUIRE(cli::cmd_export_plots(cfg) == 0);
    const auto trace = io::read_text(out / "plots" / "elbo_trace.csv");
    CHECK(trace.rfind("outer_step,iteration,elbo,temper_stage,phi_norm\n", 0) == 0);
    std::size_t rows = std::count(trace.begin(), trace.end(), '\n') - 1;
    std::ifstream in(out / "runlog.jsonl");
    std::size_t loglines = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++loglines;
    CHECK(rows == loglines);

    const auto ob = io::read_text(out / "plots" / "objective_vs_budget.csv");
    CHECK(ob.rfind("step,data_size,believed_objective,elbo_final_ma\n", 0) == 0);
    CHECK(static_cast<std::size_t>(std::count(ob.begin(), ob.end(), '\n')) == 1 + report.at("steps").size());

    REQUIRE(cli::cmd_export_plots(cfg) == 0);  // re-export bit-identical
    CHECK(io::read_text(out / "plots" / "elbo_trace.csv") == trace);
    CHECK(io::read_text(out / "plots" / "objective_vs_budget.csv") == ob);
  }

  SECTION("export-plots on an empty directory lists the missing inputs") {
    auto cfg2 = smoke_config(fresh_dir("psp_cli_empty"), 1);
    try {
      cli::cmd_export_plots(cfg2);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("report.json") != std::string::npos);
      CHECK(msg.find("runlog.jsonl") != std::string::npos);
    }
  }
}

TEST_CASE("optimize is deterministic and resumable") {
  const auto oa = fresh_dir("psp_cli_det_a");
  const auto ob = fresh_dir("psp_cli_det_b");
  auto ca = smoke_config(oa, 21);
  auto cb = smoke_config(ob, 21);
  REQUIRE(cli::cmd_generate_data(ca) == 0);
  REQUIRE(cli::cmd_generate_data(cb) == 0);
  REQUIRE(cli::cmd_optimize(ca) == 0);
  REQUIRE(cli::cmd_optimize(cb) == 0);

  SECTION("bit-exact re-run (volatile wall-clock fields excluded)") {
    const auto ra = strip_wall(io::read_json(oa / "report.json"));
    const auto rb = strip_wall(io::read_json(ob / "report.json"));
    REQUIRE(ra == rb);
    // binary artifacts byte-identical
    const auto ba = io::read_f64(oa / "checkpoint.bin");
    const auto bb = io::read_f64(ob / "checkpoint.bin");
    REQUIRE(ba == bb);
    const auto sa = io::read_f64(oa / "data" / "shard_1.inputs.f64");
    const auto sb = io::read_f64(ob / "data" / "shard_1.inputs.f64");
    REQUIRE(sa == sb);
  }

  SECTION("checkpoint resume reproduces the uninterrupted run") {
    // replay the final stage from the stored checkpoint in a copied run dir
    const auto oc = fresh_dir("psp_cli_det_c");
    fs::copy(oa, oc, fs::copy_options::recursive);
    fs::remove(oc / "report.json");
    auto cc = smoke_config(oc, 21);
    cc.data_dir = (oc / "data").string();
    REQUIRE(cli::cmd_optimize(cc, oc.string()) == 0);
    const auto ra = strip_wall(io::read_json(oa / "report.json"));
    const auto rc = strip_wall(io::read_json(oc / "report.json"));
    // the resumed run re-executes only the last stage; phi and MC reference
    // must agree bit-exactly
    REQUIRE(ra.at("phi_star") == rc.at("phi_star"));
    REQUIRE(ra.at("mc_reference") == rc.at("mc_reference"));
    REQUIRE(ra.at("steps").back().at("elbo_final_ma") ==
            rc.at("steps").back().at("elbo_final_ma"));
  }

  SECTION("resume with a different configuration is rejected") {
    auto cbad = smoke_config(oa, 22);  // different seed -> different fingerprint
    CHECK_THROWS_AS(cli::cmd_optimize(cbad, oa.string()), ConfigError);
  }
}

TEST_CASE("evaluate") {
  const auto out = fresh_dir("psp_cli_eval");
  auto cfg = smoke_config(out, 31);
  cfg.n_initial = 24;
  REQUIRE(cli::cmd_generate_data(cfg) == 0);
  // fixed phi for evaluation
  io::write_json(out / "phi.json", nlohmann::json{{"phi", {0.1, -0.2, 0.3, 0.0}}});
  cfg.phi_file = (out / "phi.json").string();

  SECTION("the whole plane gives probability 1, an empty-measure box gives 0") {
    cfg.box_from_percentiles = false;
    cfg.objective.box = {{-1e12, -1e12}, {1e12, 1e12}};
    REQUIRE(cli::cmd_evaluate(cfg) == 0);
    auto r = io::read_json(out / "eval" / "result.json");
    CHECK(r.at("value").get<double>() == 1.0);

    cfg.objective.box = {{5.0, 5.0}, {5.0 + 1e-13, 5.0 + 1e-13}};
    REQUIRE(cli::cmd_evaluate(cfg) == 0);
    r = io::read_json(out / "eval" / "result.json");
    CHECK(r.at("value").get<double>() == 0.0);
  }

  SECTION("scatter file row count matches n_samples") {
    cfg.box_from_percentiles = true;
    cfg.objective.box = {};
    REQUIRE(cli::cmd_evaluate(cfg) == 0);
    const auto csv = io::read_text(out / "eval" / "kappa_scatter.csv");
    CHECK(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')) == 1 + cfg.eval_samples);
  }

  SECTION("standard error scales as 1/sqrt(n) within 20%") {
    cfg.box_from_percentiles = true;
    cfg.objective.box = {};
    cfg.eval_samples = 256;
    REQUIRE(cli::cmd_evaluate(cfg) == 0);
    const double se256 = io::read_json(out / "eval" / "result.json").at("std_error").get<double>();
    cfg.eval_samples = 1024;
    REQUIRE(cli::cmd_evaluate(cfg) == 0);
    const double se1024 = io::read_json(out / "eval" / "result.json").at("std_error").get<double>();
    CHECK(se256 / se1024 == Catch::Approx(2.0).epsilon(0.20));
  }
}

TEST_CASE("baseline") {
  const auto oa = fresh_dir("psp_cli_base_active");
  auto ca = smoke_config(oa, 41);
  REQUIRE(cli::cmd_generate_data(ca) == 0);
  REQUIRE(cli::cmd_optimize(ca) == 0);

  const auto ob = fresh_dir("psp_cli_base_ctrl");
  auto cb = smoke_config(ob, 41);
  cb.paired_with = (oa / "report.json").string();
  REQUIRE(cli::cmd_baseline(cb) == 0);

  const auto rep = io::read_json(ob / "report.json");
  SECTION("budget equality is asserted in the report") {
    CHECK(rep.at("budget_matches_active").get<bool>());
    CHECK(rep.at("budget").at("total").get<int>() == 48 + 1 * 8);
    CHECK(rep.at("steps").size() == 1);  // plain L = 0 optimization
  }

  SECTION("paired comparison table is emitted") {
    const auto csv = io::read_text(ob / "paired.csv");
    CHECK(csv.rfind("seed,active_objective,baseline_objective\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  }

  SECTION("baseline is deterministic under the same seed") {
    const auto oc = fresh_dir("psp_cli_base_ctrl2");
    auto cc = smoke_config(oc, 41);
    REQUIRE(cli::cmd_baseline(cc) == 0);
    const auto ra = strip_wall(io::read_json(ob / "report.json"));
    auto rc = strip_wall(io::read_json(oc / "report.json"));
    // the pairing fields differ by construction; everything else matches
    rc["paired_with"] = ra.at("paired_with");
    REQUIRE(ra == rc);
  }
}

TEST_CASE("case2 smoke run") {
  const auto out = fresh_dir("psp_cli_case2");
  auto cfg = smoke_config(out, 51, "case2");
  cfg.vbem.max_iters = 30;
  REQUIRE(cli::cmd_generate_data(cfg) == 0);
  REQUIRE(cli::cmd_optimize(cfg) == 0);
  const auto report = io::read_json(out / "report.json");
  CHECK(report.at("o2_target_samples").size() == 3);
  CHECK(report.at("phi_star").size() == 4);
  CHECK(report.at("mc_reference").at("at_star").contains("value"));

  // per-sample variational state persisted for all S factors
  const auto ck = io::read_json(out / "checkpoint.json");
  CHECK(ck.at("xi").size() == 3);
}

#ifdef PSPOPT_BIN
TEST_CASE("binary exit codes") {
  const std::string bin = PSPOPT_BIN;
  SECTION("bad config exits 2") {
    const auto dir = fresh_dir("psp_cli_exit");
    io::write_json(dir / "bad.json", nlohmann::json{{"grid", {{"n_pixels", 13}}}});
    const int rc = std::system(
        (bin + " generate-data --config " + (dir / "bad.json").string() + " --out " +
         (dir / "o").string() + " >/dev/null 2>&1")
            .c_str());
    CHECK(WEXITSTATUS(rc) == 2);
  }
  SECTION("missing subcommand exits nonzero") {
    const int rc = std::system((bin + " >/dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) != 0);
  }
}
#endif
