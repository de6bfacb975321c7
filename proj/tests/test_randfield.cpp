#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "pspopt/randfield.hpp"
#include "test_support.hpp"

using namespace psp;
using testsup::all_close;
using testsup::fd_grad;

namespace {

// Independent quantile oracle: bisection on std::erf (not the library's own
// erf approximation).
double quantile_oracle(double p) {
  double lo = -10, hi = 10;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * (1.0 + std::erf(mid / std::sqrt(2.0)));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

field::RandField small_field() {
  field::SdfConfig sdf;
  sdf.rbf_per_axis = 3;
  sdf.sigma = 12.0;
  sdf.w_max = 65.0;
  return field::RandField(sdf, 16, 4);
}

}  // namespace

TEST_CASE("sdf_weights lies on the simplex") {
  SECTION("zero vector gives uniform weights") {
    auto g = field::sdf_weights(std::vector<double>(100, 0.0));
    for (double x : g) CHECK(x == Catch::Approx(0.01).epsilon(1e-12));
  }

  SECTION("closed form (ln 2, 0) -> (2/3, 1/3)") {
    auto g = field::sdf_weights({std::log(2.0), 0.0});
    CHECK(g[0] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(g[1] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  SECTION("random phi sums to one within 1e-12 with positive entries") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
      auto g = field::sdf_weights(rng.normals(36));
      double s = 0.0;
      for (double x : g) {
        CHECK(x > 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("sdf_eval") {
  field::SdfConfig sdf;
  sdf.rbf_per_axis = 3;

  SECTION("weight concentrated on one RBF peaks at 1/(2 pi sigma^2)") {
    std::vector<double> gamma(sdf.count(), 0.0);
    gamma[4] = 1.0;
    const auto [c1, c2] = sdf.center(4);
    const double peak = field::sdf_eval(sdf, gamma, c1, c2);
    CHECK(peak == Catch::Approx(1.0 / (2.0 * M_PI * sdf.sigma * sdf.sigma)).epsilon(1e-12));
  }

  SECTION("always nonnegative") {
    Rng rng(5);
    auto gamma = field::sdf_weights(rng.normals(sdf.count()));
    for (int rep = 0; rep < 50; ++rep)
      CHECK(field::sdf_eval(sdf, gamma, 65.0 * rng.uniform(), 65.0 * rng.uniform()) >= 0.0);
  }

  SECTION("uniform weights give a density symmetric under coordinate swap") {
    std::vector<double> gamma(sdf.count(), 1.0 / sdf.count());
    Rng rng(6);
    for (int rep = 0; rep < 25; ++rep) {
      const double w1 = 65.0 * rng.uniform(), w2 = 65.0 * rng.uniform();
      CHECK(field::sdf_eval(sdf, gamma, w1, w2) ==
            Catch::Approx(field::sdf_eval(sdf, gamma, w2, w1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("cutoff_from_vf") {
  // symmetry; precision bounded by the 1.2e-7 rational erf
  CHECK(field::cutoff_from_vf(0.5) == Catch::Approx(0.0).margin(1e-6));
  CHECK(field::cutoff_from_vf(0.3) == Catch::Approx(quantile_oracle(0.7)).margin(1e-6));
  CHECK(field::cutoff_from_vf(0.3) == Catch::Approx(0.5244).margin(5e-4));
  CHECK_THROWS_AS(field::cutoff_from_vf(0.0), ConfigError);
  CHECK_THROWS_AS(field::cutoff_from_vf(1.0), ConfigError);
  CHECK_THROWS_AS(field::cutoff_from_vf(-0.2), ConfigError);
}

TEST_CASE("threshold transforms") {
  SECTION("smooth value at the cutoff is exactly one half") {
    CHECK(field::smooth_threshold_value(1.3, 1.3, 25.0) == Catch::Approx(0.5).margin(1e-15));
  }
  SECTION("saturation one unit above the cutoff") {
    CHECK(field::smooth_threshold_value(1.0, 0.0, 1e6) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("eps=25 at 0.2 above cutoff equals (tanh(5)+1)/2") {
    const double expected = 0.5 * (std::tanh(5.0) + 1.0);  // 0.99995460...
    CHECK(field::smooth_threshold_value(0.2, 0.0, 25.0) == Catch::Approx(expected).epsilon(1e-15));
    CHECK(expected == Catch::Approx(0.9999546).margin(5e-7));
  }
  SECTION("hard threshold embeds all-ones / all-zeros") {
    auto rf = small_field();
    std::vector<double> hi(16 * 16, 2.0), lo(16 * 16, -2.0);
    for (auto b : rf.hard_threshold(hi, 0.0)) CHECK(b == 1);
    for (auto b : rf.hard_threshold(lo, 0.0)) CHECK(b == 0);
  }
  SECTION("smooth rounds to hard away from the cutoff") {
    auto rf = small_field();
    Rng rng(9);
    auto phi = rng.normals(rf.sdf().count());
    auto psi = rng.normals(rf.psi_dim());
    auto xg = rf.synthesize(phi, psi);
    auto hard = rf.hard_threshold(xg, 0.1);
    for (std::size_t i = 0; i < xg.size(); ++i) {
      if (std::abs(xg[i] - 0.1) < 1e-6) continue;
      const double s = field::smooth_threshold_value(xg[i], 0.1, 25.0);
      CHECK((s > 0.5 ? 1 : 0) == hard[i]);
    }
  }
}

TEST_CASE("synthesize_field determinism and shape errors") {
  auto rf = small_field();
  Rng rng(13);
  auto phi = rng.normals(rf.sdf().count());
  auto psi = rng.normals(rf.psi_dim());
  auto a = rf.synthesize(phi, psi);
  auto b = rf.synthesize(phi, psi);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

  ad::Tape t;
  auto phiv = t.leaf(Tensor(Shape{phi.size()}, phi), false);
  auto bad = t.leaf(Tensor(Shape{7}, std::vector<double>(7, 0.0)), false);
  CHECK_THROWS_AS(rf.gaussian_field(t, phiv, bad), ShapeError);
}

TEST_CASE("field statistics: unit variance, volume fraction, homogeneity") {
  field::SdfConfig sdf;
  sdf.rbf_per_axis = 4;
  field::RandField rf(sdf, 32, 8);
  Rng rng(101);
  auto phi = rng.normals(rf.sdf().count());

  SECTION("ensemble pixel variance is 1 within 0.05") {
    double ss = 0.0, s = 0.0;
    std::size_t n = 0;
    for (int rep = 0; rep < 40; ++rep) {
      auto xg = rf.synthesize(phi, rng.normals(rf.psi_dim()));
      for (double v : xg) {
        s += v;
        ss += v * v;
        ++n;
      }
    }
    const double mean = s / n;
    const double var = ss / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(var == Catch::Approx(1.0).margin(0.05));
  }

  SECTION("empirical volume fraction tracks vf within 0.02") {
    for (double vf : {0.5, 0.3}) {
      const double x0 = field::cutoff_from_vf(vf);
      std::size_t ones = 0, n = 0;
      for (int rep = 0; rep < 100; ++rep) {
        auto b = rf.sample_binary(phi, x0, rng);
        for (auto v : b) ones += v;
        n += b.size();
      }
      CHECK(static_cast<double>(ones) / n == Catch::Approx(vf).margin(0.02));
    }
  }

  SECTION("pixel histograms at two fixed pixels agree (statistical homogeneity)") {
    const int reps = 4000;
    const std::size_t pa = 3 * 32 + 5, pb = 20 * 32 + 11;
    std::vector<double> va(reps), vb(reps);
    for (int rep = 0; rep < reps; ++rep) {
      auto xg = rf.synthesize(phi, rng.normals(rf.psi_dim()));
      va[rep] = xg[pa];
      vb[rep] = xg[pb];
    }
    const double edges[] = {-1e9, -1.0, -0.3, 0.3, 1.0, 1e9};
    for (int bin = 0; bin < 5; ++bin) {
      auto frac = [&](const std::vector<double>& v) {
        int c = 0;
        for (double x : v) c += (x > edges[bin] && x <= edges[bin + 1]);
        return static_cast<double>(c) / reps;
      };
      const double fa = frac(va), fb = frac(vb);
      const double p = 0.5 * (fa + fb);
      const double se = std::sqrt(std::max(p * (1 - p), 1e-6) * 2.0 / reps);
      CHECK(std::abs(fa - fb) < 4.0 * se);
    }
  }
}

TEST_CASE("autocovariance matches the discrete spectrum (Wiener-Khinchin)") {
  field::SdfConfig sdf;
  sdf.rbf_per_axis = 3;
  field::RandField rf(sdf, 16, 6);
  Rng rng(202);
  auto phi = rng.normals(rf.sdf().count());

  // Closed-form discrete autocovariance from the normalized amplitudes:
  // R(tau) = sum_k A_k^2 cos(w1 tau1) cos(w2 tau2)
  ad::Tape t;
  auto amp = rf.amplitudes(t, t.leaf(Tensor(Shape{static_cast<std::size_t>(sdf.count())}, phi), false));
  auto r_closed = [&](double tau1, double tau2) {
    double r = 0.0;
    for (int k = 0; k < rf.spectral_nodes(); ++k) {
      const auto [w1, w2] = rf.node(k);
      r += amp.value()[k] * amp.value()[k] * std::cos(w1 * tau1) * std::cos(w2 * tau2);
    }
    return r;
  };

  const int reps = 20000;
  // lags (in pixels): (0,0), (1,0), (0,2), (3,1)
  const std::pair<int, int> lags[] = {{0, 0}, {1, 0}, {0, 2}, {3, 1}};
  const std::size_t base = 4 * 16 + 4;
  std::vector<std::vector<double>> prods(4);
  for (int rep = 0; rep < reps; ++rep) {
    auto xg = rf.synthesize(phi, rng.normals(rf.psi_dim()));
    for (int l = 0; l < 4; ++l) {
      const auto [dc, dr] = lags[l];
      prods[l].push_back(xg[base] * xg[base + dr * 16 + dc]);
    }
  }
  for (int l = 0; l < 4; ++l) {
    const auto [dc, dr] = lags[l];
    const double tau1 = static_cast<double>(dc) / 16.0;
    const double tau2 = static_cast<double>(dr) / 16.0;
    const double mc = psp::mean_of(prods[l]);
    const double se = std::sqrt(psp::variance_of(prods[l]) / reps);
    INFO("lag " << dc << "," << dr);
    CHECK(std::abs(mc - r_closed(tau1, tau2)) < 3.0 * se);
  }
}

TEST_CASE("gradients of the smooth microstructure match finite differences") {
  field::SdfConfig sdf;
  sdf.rbf_per_axis = 2;
  field::RandField rf(sdf, 8, 3);
  Rng rng(303);
  auto phi = rng.normals(rf.sdf().count());
  auto psi = rng.normals(rf.psi_dim());
  const double x0 = field::cutoff_from_vf(0.5);

  auto eval = [&](const std::vector<double>& p, const std::vector<double>& s, std::vector<double>* gp = nullptr,
                  std::vector<double>* gs = nullptr) {
    ad::Tape t;
    auto pv = t.leaf(Tensor(Shape{p.size()}, p), true);
    auto sv = t.leaf(Tensor(Shape{s.size()}, s), true);
    auto x = rf.smooth_microstructure(t, pv, sv, x0, 25.0);
    auto m = ad::mean(x);
    const double val = m.value().item();
    if (gp) {
      t.backward(m);
      *gp = pv.grad().vec();
      *gs = sv.grad().vec();
    }
    return val;
  };

  std::vector<double> gp, gs;
  eval(phi, psi, &gp, &gs);
  auto np_ = fd_grad([&](const std::vector<double>& p) { return eval(p, psi); }, phi, 1e-5);
  auto ns_ = fd_grad([&](const std::vector<double>& s) { return eval(phi, s); }, psi, 1e-5);
  CHECK(all_close(gp, np_, 1e-3, 1e-8));
  CHECK(all_close(gs, ns_, 1e-3, 1e-8));
}
