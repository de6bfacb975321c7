#include <catch2/catch_amalgamated.hpp>
#include <Eigen/Dense>
#include <cmath>

#include "pspopt/innerloop.hpp"
#include "test_support.hpp"

using namespace psp;
namespace vb = psp::vbem;
using testsup::fd_grad;

namespace {

// 2D analytic toy: z = (kappa, psi),
//   u(kappa) = exp(-tau (kappa - kt)^2)
//   p_M(kappa | psi) = N(kappa; a psi + phi, s2)
//   p(psi) = N(0, 1)
// Everything Gaussian, so log U(phi), the posterior, and argmax_phi are
// available in closed form; a trapezoid quadrature provides the independent
// oracle.
struct ToyModel : vb::ElboModel {
  double a = 0.8, s2 = 0.3, tau = 0.7, kt = 1.2;

  int z_dim() const override { return 2; }

  ad::Var log_joint(ad::Tape& t, const ad::Var& z, const ad::Var& phi) const override {
    auto kap = ad::slice(z, 0, 1);
    auto psi = ad::slice(z, 1, 1);
    auto mean = ad::add(ad::mul_const(psi, a), ad::reshape(phi, Shape{1}));
    auto dk = ad::sub(kap, mean);
    auto log_pm = ad::mul_const(
        ad::add_const(ad::mul_const(ad::mul(dk, dk), 1.0 / s2), std::log(2 * M_PI * s2)), -0.5);
    auto log_prior =
        ad::mul_const(ad::add_const(ad::mul(psi, psi), std::log(2 * M_PI)), -0.5);
    auto du = ad::add_const(kap, -kt);
    auto log_u = ad::mul_const(ad::mul(du, du), -tau);
    return ad::sum(ad::add(ad::add(log_pm, log_prior), log_u));
  }

  // closed-form log U(phi)
  double log_u_exact(double phi) const {
    const double c1 = 1.0 + 2.0 * tau * s2;
    const double alpha = tau / c1;
    const double c2 = 1.0 + 2.0 * alpha * a * a;
    return -0.5 * std::log(c1) - 0.5 * std::log(c2) - alpha * (phi - kt) * (phi - kt) / c2;
  }

  // independent quadrature oracle for log U(phi)
  double log_u_quadrature(double phi) const {
    const int n = 801;
    const double lo = -9.0, hi = 9.0, h = (hi - lo) / (n - 1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double kap = lo + i * h;
      const double wk = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      for (int j = 0; j < n; ++j) {
        const double psi = lo + j * h;
        const double wp = (j == 0 || j == n - 1) ? 0.5 : 1.0;
        const double m = a * psi + phi;
        const double val = std::exp(-tau * (kap - kt) * (kap - kt)) *
                           std::exp(-0.5 * (kap - m) * (kap - m) / s2) /
                           std::sqrt(2 * M_PI * s2) * std::exp(-0.5 * psi * psi) /
                           std::sqrt(2 * M_PI);
        total += wk * wp * val;
      }
    }
    return std::log(total * h * h);
  }

  // exact Gaussian posterior over (kappa, psi) given phi
  void posterior(double phi, Eigen::Vector2d& mean, Eigen::Matrix2d& cov) const {
    Eigen::Matrix2d prec;
    prec << 2 * tau + 1 / s2, -a / s2, -a / s2, a * a / s2 + 1;
    Eigen::Vector2d lin(2 * tau * kt + phi / s2, -a * phi / s2);
    cov = prec.inverse();
    mean = cov * lin;
  }
};

// exact rank-1 representation of a 2x2 covariance: diag(d) + l l^T
vb::VParams vparams_for(const Eigen::Vector2d& mean, const Eigen::Matrix2d& cov) {
  vb::VParams p = vb::VParams::standard(2, 1);
  p.mu[0] = mean(0);
  p.mu[1] = mean(1);
  const double c12 = cov(0, 1);
  const double r = std::sqrt(cov(0, 0) / cov(1, 1));
  const double l1 = std::sqrt(std::abs(c12) * r);
  const double l2 = (c12 >= 0 ? 1.0 : -1.0) * std::sqrt(std::abs(c12) / r);
  p.l[0] = l1;
  p.l[1] = l2;
  p.logd[0] = std::log(cov(0, 0) - l1 * l1);
  p.logd[1] = std::log(cov(1, 1) - l2 * l2);
  return p;
}

}  // namespace

TEST_CASE("q_sample and log_q") {
  SECTION("standard family: log q(0) = -dz/2 log(2 pi)") {
    auto p = vb::VParams::standard(5, 2);
    ad::Tape t;
    auto v = vb::attach(t, p, false);
    auto z = t.constant(Tensor(Shape{5}));
    CHECK(vb::log_q(t, v, z).value().item() ==
          Catch::Approx(-2.5 * std::log(2 * M_PI)).epsilon(1e-12));
  }

  SECTION("matrix-determinant lemma matches the dense log-density (dz=3, M=1)") {
    Rng rng(3);
    auto p = vb::VParams::standard(3, 1);
    for (int i = 0; i < 3; ++i) {
      p.mu[i] = rng.normal();
      p.logd[i] = 0.4 * rng.normal();
      p.l[i] = rng.normal();
    }
    Eigen::Matrix3d cov;
    const auto cv = p.dense_cov();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cov(i, j) = cv[i * 3 + j];
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::Vector3d z(rng.normal() * 2, rng.normal() * 2, rng.normal() * 2);
      Eigen::Vector3d mu(p.mu[0], p.mu[1], p.mu[2]);
      const double dense = -0.5 * (3 * std::log(2 * M_PI) + std::log(cov.determinant()) +
                                   (z - mu).transpose() * cov.inverse() * (z - mu));
      ad::Tape t;
      auto v = vb::attach(t, p, false);
      auto zv = t.constant(Tensor(Shape{3}, {z(0), z(1), z(2)}));
      CHECK(vb::log_q(t, v, zv).value().item() == Catch::Approx(dense).margin(1e-10));
    }
  }

  SECTION("sample covariance matches diag(d) + L L^T within 3 MC standard errors") {
    auto p = vb::VParams::standard(4, 2);
    Rng init(5);
    for (int i = 0; i < 4; ++i) {
      p.mu[i] = init.normal();
      p.logd[i] = 0.3 * init.normal();
      for (int k = 0; k < 2; ++k) p.l[i * 2 + k] = 0.6 * init.normal();
    }
    const int n = 100000;
    Rng rng(77);
    auto qs = vb::q_sample(p, n, rng);
    std::vector<double> mean(4, 0.0);
    for (const auto& z : qs.z)
      for (int i = 0; i < 4; ++i) mean[i] += z[i] / n;
    std::vector<double> cov(16, 0.0);
    for (const auto& z : qs.z)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) cov[i * 4 + j] += (z[i] - mean[i]) * (z[j] - mean[j]) / (n - 1);
    const auto truth = p.dense_cov();
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        // MC standard error of a covariance entry ~ sqrt((cii cjj + cij^2)/n)
        const double se = std::sqrt((truth[i * 4 + i] * truth[j * 4 + j] +
                                     truth[i * 4 + j] * truth[i * 4 + j]) /
                                    n);
        CHECK(std::abs(cov[i * 4 + j] - truth[i * 4 + j]) < 3.0 * se);
      }
  }

  SECTION("q_sample reports per-draw log densities") {
    auto p = vb::VParams::standard(3, 1);
    Rng rng(9);
    auto qs = vb::q_sample(p, 4, rng);
    REQUIRE(qs.z.size() == 4);
    REQUIRE(qs.log_density.size() == 4);
    for (int i = 0; i < 4; ++i) {
      double expect = 0.0;
      for (int j = 0; j < 3; ++j) expect += norm_logpdf(qs.z[i][j], 0.0, 1.0);
      CHECK(qs.log_density[i] == Catch::Approx(expect).margin(1e-10));
    }
  }
}

TEST_CASE("effective sample size") {
  SECTION("uniform weights give 1") {
    CHECK(vb::ess(std::vector<double>(37, 0.4)) == Catch::Approx(1.0).epsilon(1e-14));
  }
  SECTION("single nonzero weight among 100 gives 0.01") {
    std::vector<double> w(100, 0.0);
    w[17] = 3.3;
    CHECK(vb::ess(w) == Catch::Approx(0.01).epsilon(1e-14));
  }
  SECTION("random weights match the brute-force formula to 1e-12") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> w(64);
      for (auto& x : w) x = rng.uniform();
      double s = 0, s2 = 0;
      for (double x : w) {
        s += x;
        s2 += x * x;
      }
      CHECK(std::abs(vb::ess(w) - s * s / (64.0 * s2)) < 1e-12);
    }
  }
  SECTION("all-zero weights are an error") {
    CHECK_THROWS_AS(vb::ess(std::vector<double>(10, 0.0)), NumericError);
  }
}

TEST_CASE("toy ELBO: tightness, bound validity, gradients") {
  ToyModel toy;
  const double phi0 = 0.4;
  Tensor phi(Shape{1}, {phi0});

  SECTION("closed form and quadrature oracle agree") {
    CHECK(toy.log_u_exact(phi0) == Catch::Approx(toy.log_u_quadrature(phi0)).margin(1e-6));
  }

  SECTION("ELBO is exact and per-draw constant at the posterior") {
    Eigen::Vector2d mean;
    Eigen::Matrix2d cov;
    toy.posterior(phi0, mean, cov);
    auto xi = vparams_for(mean, cov);
    Rng rng(101);
    auto nb = vb::NoiseBlock::draw(64, 1, 2, rng);
    auto est = vb::elbo_estimate(toy, xi, phi, nb, 1, false, false);
    const double lu = toy.log_u_exact(phi0);
    CHECK(est.value == Catch::Approx(lu).margin(1e-9));
    for (double v : est.per_draw) CHECK(v == Catch::Approx(lu).margin(1e-9));
  }

  SECTION("ELBO lower-bounds log U for 100 random variational parameters") {
    const double lu = toy.log_u_quadrature(phi0);
    Rng rng(202);
    for (int rep = 0; rep < 100; ++rep) {
      auto xi = vb::VParams::standard(2, 1);
      for (int i = 0; i < 2; ++i) {
        xi.mu[i] = 1.5 * rng.normal();
        xi.logd[i] = 0.7 * rng.normal();
        xi.l[i] = 0.7 * rng.normal();
      }
      auto nb = vb::NoiseBlock::draw(400, 1, 2, rng);
      auto est = vb::elbo_estimate(toy, xi, phi, nb, 1, false, false);
      CHECK(est.value <= lu + 3.0 * est.std_error);
    }
  }

  SECTION("gradients w.r.t. (mu, phi) match finite differences with common random numbers") {
    auto xi = vb::VParams::standard(2, 1);
    xi.mu[0] = 0.7;
    xi.mu[1] = -0.3;
    xi.logd[0] = -0.4;
    xi.logd[1] = 0.2;
    xi.l[0] = 0.25;
    xi.l[1] = -0.35;
    Rng rng(303);
    auto nb = vb::NoiseBlock::draw(10000, 1, 2, rng);

    auto value_at = [&](const std::vector<double>& mu, double phival) {
      auto x2 = xi;
      x2.mu[0] = mu[0];
      x2.mu[1] = mu[1];
      Tensor p2(Shape{1}, {phival});
      return vb::elbo_estimate(toy, x2, p2, nb, 1, false, false).value;
    };

    auto est = vb::elbo_estimate(toy, xi, phi, nb, 1, true, true);
    auto fd_mu = fd_grad([&](const std::vector<double>& m) { return value_at(m, phi0); },
                         {xi.mu[0], xi.mu[1]}, 1e-5);
    CHECK(testsup::close(est.g_mu[0], fd_mu[0], 1e-2, 1e-6));
    CHECK(testsup::close(est.g_mu[1], fd_mu[1], 1e-2, 1e-6));
    auto fd_phi = fd_grad(
        [&](const std::vector<double>& pv) { return value_at({xi.mu[0], xi.mu[1]}, pv[0]); },
        {phi0}, 1e-5);
    CHECK(testsup::close(est.g_phi[0], fd_phi[0], 1e-2, 1e-6));
  }

  SECTION("non-finite draws are reported with their index") {
    struct BadModel : vb::ElboModel {
      int z_dim() const override { return 2; }
      ad::Var log_joint(ad::Tape& t, const ad::Var& z, const ad::Var&) const override {
        return ad::log(ad::sum(ad::mul(z, z)));  // fine
      }
    } bad;
    auto xi = vb::VParams::standard(2, 1);
    xi.mu[0] = std::numeric_limits<double>::quiet_NaN();
    Rng rng(5);
    auto nb = vb::NoiseBlock::draw(3, 1, 2, rng);
    Tensor p(Shape{1}, {0.0});
    CHECK_THROWS_AS(vb::elbo_estimate(bad, xi, p, nb, 1, false, false), NumericError);
  }
}

TEST_CASE("E and M steps on the toy") {
  ToyModel toy;

  SECTION("EM converges to the analytic argmax phi* = kt within 1e-2") {
    auto xi = vb::VParams::standard(2, 1);
    Tensor phi(Shape{1}, {-0.8});
    Adam opt_xi(0.05), opt_phi(0.05);
    Rng rng(404);
    for (int cycle = 0; cycle < 60; ++cycle) {
      auto nb = vb::NoiseBlock::draw(256, 1, 2, rng);
      vb::e_step(toy, xi, phi, opt_xi, 25, nb, 1);
      vb::m_step(toy, xi, phi, opt_phi, 10, nb, 1);
    }
    CHECK(phi[0] == Catch::Approx(toy.kt).margin(1e-2));

    // and the variational mean tracks the analytic posterior mean
    Eigen::Vector2d mean;
    Eigen::Matrix2d cov;
    toy.posterior(phi[0], mean, cov);
    CHECK(xi.mu[0] == Catch::Approx(mean(0)).margin(2e-2));
    CHECK(xi.mu[1] == Catch::Approx(mean(1)).margin(2e-2));
  }

  SECTION("at a symmetric stationary point updates vanish in expectation") {
    ToyModel sym;
    sym.a = 0.0;
    sym.tau = 0.0;
    sym.s2 = 1.0;
    sym.kt = 0.0;
    // q equal to the exact posterior N(0, I)
    auto xi = vb::VParams::standard(2, 1);
    Tensor phi(Shape{1}, {0.0});
    Rng rng(505);
    std::vector<double> gmu0, gmu1;
    for (int block = 0; block < 12; ++block) {
      auto nb = vb::NoiseBlock::draw(2000, 1, 2, rng);
      auto est = vb::elbo_estimate(sym, xi, phi, nb, 1, true, false);
      gmu0.push_back(est.g_mu[0]);
      gmu1.push_back(est.g_mu[1]);
    }
    for (auto* g : {&gmu0, &gmu1}) {
      const double m = mean_of(*g);
      const double se = std::sqrt(variance_of(*g) / g->size());
      CHECK(std::abs(m) < 3.5 * se + 1e-12);
    }
  }

  SECTION("with constant utility the optimal ELBO is zero") {
    ToyModel flat;
    flat.a = 0.0;
    flat.tau = 0.0;
    flat.s2 = 1.0;
    auto xi = vb::VParams::standard(2, 1);
    Rng init(7);
    for (int i = 0; i < 2; ++i) {
      xi.mu[i] = init.normal();
      xi.logd[i] = 0.5 * init.normal();
    }
    Tensor phi(Shape{1}, {0.0});
    Adam opt(0.05);
    Rng rng(606);
    for (int cycle = 0; cycle < 40; ++cycle) {
      auto nb = vb::NoiseBlock::draw(256, 1, 2, rng);
      vb::e_step(flat, xi, phi, opt, 25, nb, 1);
    }
    auto nb = vb::NoiseBlock::draw(4000, 1, 2, rng);
    auto est = vb::elbo_estimate(flat, xi, phi, nb, 1, false, false);
    CHECK(est.value == Catch::Approx(0.0).margin(3 * est.std_error + 5e-3));
  }
}

TEST_CASE("tempering schedule") {
  vb::TemperSettings ts;
  ts.ess_floor = 0.5;

  // weight family with smoothly degrading ESS: w_i(t) = exp(-t * c * i)
  auto weights_family = [](double c, int n) {
    return [c, n](double t) {
      std::vector<double> w(n);
      for (int i = 0; i < n; ++i) w[i] = std::exp(-t * c * i);
      return w;
    };
  };

  SECTION("if the final stage already satisfies the floor, jump straight to it") {
    vb::TemperSchedule sch(ts);
    const double acc = sch.try_advance(weights_family(0.001, 100));
    CHECK(acc == 1.0);
    CHECK(sch.complete());
  }

  SECTION("bisection certificate: accepted t feasible, t + 0.05 infeasible") {
    vb::TemperSchedule sch(ts);
    auto wf = weights_family(0.08, 100);
    const double acc = sch.try_advance(wf);
    REQUIRE(acc > 0.0);
    REQUIRE(acc < 1.0);
    CHECK(vb::ess(wf(acc)) >= ts.ess_floor);
    CHECK(vb::ess(wf(acc + 0.05)) < ts.ess_floor);
  }

  SECTION("floor of 1.0 blocks movement for non-uniform weights") {
    vb::TemperSettings strict = ts;
    strict.ess_floor = 1.0;
    vb::TemperSchedule sch(strict);
    CHECK(sch.try_advance(weights_family(0.05, 50)) == 0.0);
    CHECK(sch.progress() == 0.0);
    CHECK(sch.stalls() == 1);

    // uniform weights keep ESS at exactly 1, so even a floor of 1 passes
    vb::TemperSchedule sch2(strict);
    CHECK(sch2.try_advance([](double) { return std::vector<double>(50, 0.7); }) == 1.0);
  }

  SECTION("stall flag raises after three failed attempts") {
    vb::TemperSchedule sch(ts);
    auto hopeless = [](double) {
      std::vector<double> w(100, 0.0);
      w[0] = 1.0;  // ESS = 0.01 < floor even at t=0
      return w;
    };
    for (int i = 0; i < 3; ++i) {
      CHECK(sch.try_advance(hopeless) == 0.0);
    }
    CHECK(sch.stalled());
  }

  SECTION("beta ramps geometrically with progress") {
    vb::TemperSchedule sch(ts);
    CHECK(sch.beta() == Catch::Approx(2.0));
    sch.try_advance(weights_family(0.001, 100));  // completes
    CHECK(sch.beta() == Catch::Approx(50.0));
  }
}
