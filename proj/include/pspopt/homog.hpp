#pragma once

// Structure-property oracle: FEM homogenization of binary pixel
// microstructures on the unit cell with periodic boundary conditions.
// Bilinear quads (one element per pixel), 2x2 Gauss quadrature, periodicity
// by DOF identification, rigid modes removed by pinning one node and
// recentering the fluctuation (equivalent to the mean-value Lagrange
// multiplier). Effective tensors follow from volume averages of stress/flux;
// every solve is validated against Hill's condition.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pspopt/common.hpp"

namespace psp::homog {

enum class Plane { Strain, Stress };

struct MaterialConfig {
  double e0 = 1.0;
  double e1 = 50.0;
  double nu = 0.3;
  double a0 = 1.0;
  double a1 = 50.0;
  Plane plane = Plane::Strain;

  void validate() const {
    if (!(e0 > 0.0 && e1 > 0.0 && a0 > 0.0 && a1 > 0.0))
      throw ConfigError("material: moduli and conductivities must be positive");
    if (!(nu > -1.0 && nu < 0.5)) throw ConfigError("material: nu must lie in (-1, 0.5)");
    const double ce = e1 / e0, ca = a1 / a0;
    if (std::abs(ce - ca) > 1e-9 * std::max(ce, ca))
      throw ConfigError("material: elastic and thermal contrast ratios must match");
  }

  /// Isotropic stiffness in Voigt notation (engineering shear strain).
  Eigen::Matrix3d stiffness(double e) const {
    Eigen::Matrix3d c = Eigen::Matrix3d::Zero();
    if (plane == Plane::Strain) {
      const double f = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
      c(0, 0) = c(1, 1) = f * (1.0 - nu);
      c(0, 1) = c(1, 0) = f * nu;
      c(2, 2) = f * (1.0 - 2.0 * nu) / 2.0;
    } else {
      const double f = e / (1.0 - nu * nu);
      c(0, 0) = c(1, 1) = f;
      c(0, 1) = c(1, 0) = f * nu;
      c(2, 2) = f * (1.0 - nu) / 2.0;
    }
    return c;
  }
};

struct SolveDiagnostics {
  double residual_rel = 0.0;
  double hill_rel = 0.0;
};

class Homogenizer {
 public:
  Homogenizer(int np, MaterialConfig mat) : np_(np), mat_(mat) {
    if (np_ < 2) throw ConfigError("homog: grid must be at least 2x2");
    mat_.validate();
    build_reference();
  }

  int n_pixels() const { return np_; }
  const MaterialConfig& material() const { return mat_; }

  /// a_eff: column j is the mean flux under unit mean gradient e_j.
  Eigen::Matrix2d effective_conductivity(const std::vector<std::uint8_t>& x) {
    check_grid(x);
    return solve_physics<ThermalPhysics>(x);
  }

  /// C_eff (Voigt): column c is the mean stress under elementary mode c.
  Eigen::Matrix3d effective_elasticity(const std::vector<std::uint8_t>& x) {
    check_grid(x);
    return solve_physics<ElasticPhysics>(x);
  }

  /// kappa = ( [a_eff]_11, (C_1111 + C_2222)/2 )
  std::array<double, 2> properties_case1(const std::vector<std::uint8_t>& x) {
    const auto a = effective_conductivity(x);
    const auto c = effective_elasticity(x);
    return {a(0, 0), 0.5 * (c(0, 0) + c(1, 1))};
  }

  /// kappa = ( [a_eff]_11, [a_eff]_22 )
  std::array<double, 2> properties_case2(const std::vector<std::uint8_t>& x) {
    const auto a = effective_conductivity(x);
    return {a(0, 0), a(1, 1)};
  }

  const SolveDiagnostics& last_diagnostics() const { return diag_; }

 private:
  // --- physics policies ------------------------------------------------
  // Shared assembly/averaging code paths; the policy supplies DOF count,
  // the element operator B at a quadrature point, the constitutive matrix,
  // and the number of elementary load cases.

  struct ThermalPhysics {
    static constexpr int kDofPerNode = 1;
    static constexpr int kStrainDim = 2;
    static constexpr int kCases = 2;
    using Mat = Eigen::Matrix2d;
    static Mat constitutive(const MaterialConfig& m, bool phase1) {
      return (phase1 ? m.a1 : m.a0) * Eigen::Matrix2d::Identity();
    }
    static Eigen::Vector2d unit_case(int c) { return Eigen::Vector2d::Unit(c); }
  };

  struct ElasticPhysics {
    static constexpr int kDofPerNode = 2;
    static constexpr int kStrainDim = 3;
    static constexpr int kCases = 3;
    using Mat = Eigen::Matrix3d;
    static Mat constitutive(const MaterialConfig& m, bool phase1) {
      return m.stiffness(phase1 ? m.e1 : m.e0);
    }
    static Eigen::Vector3d unit_case(int c) { return Eigen::Vector3d::Unit(c); }
  };

  void check_grid(const std::vector<std::uint8_t>& x) const {
    if (x.size() != static_cast<std::size_t>(np_) * np_)
      throw ShapeError("homog: grid size " + std::to_string(x.size()) + " != " +
                       std::to_string(np_) + "^2");
    for (auto v : x)
      if (v > 1) throw ConfigError("homog: grid must be binary {0,1}");
  }

  void build_reference() {
    // 2x2 Gauss points on [-1,1]^2; bilinear shape gradients in physical
    // coordinates (h = 1/np), plus quadrature weights in physical volume.
    const double g = 1.0 / std::sqrt(3.0);
    const double h = 1.0 / np_;
    const double xi[4] = {-g, g, g, -g};
    const double eta[4] = {-g, -g, g, g};
    for (int q = 0; q < 4; ++q) {
      // dN/dxi, dN/deta for nodes (bottom-left CCW order)
      const double dxi[4] = {-(1 - eta[q]) / 4, (1 - eta[q]) / 4, (1 + eta[q]) / 4,
                             -(1 + eta[q]) / 4};
      const double deta[4] = {-(1 - xi[q]) / 4, -(1 + xi[q]) / 4, (1 + xi[q]) / 4,
                              (1 - xi[q]) / 4};
      for (int a = 0; a < 4; ++a) {
        dndx_[q][a] = dxi[a] * 2.0 / h;
        dndy_[q][a] = deta[a] * 2.0 / h;
      }
      wq_[q] = h * h / 4.0;
    }
  }

  int node_id(int r, int c) const { return ((r % np_) + np_) % np_ * np_ + ((c % np_) + np_) % np_; }

  template <typename P>
  typename P::Mat solve_physics(const std::vector<std::uint8_t>& x) {
    constexpr int nd = P::kDofPerNode;
    constexpr int sd = P::kStrainDim;
    constexpr int nc = P::kCases;
    const int nn = np_ * np_;
    const int ndof = nn * nd;
    const int nred = ndof - nd;  // node 0 pinned: removes the rigid modes

    using EMat = Eigen::Matrix<double, 4 * nd, 4 * nd>;
    using ELoad = Eigen::Matrix<double, 4 * nd, sd>;

    // element operator rows at each quadrature point
    auto bmat = [&](int q) {
      Eigen::Matrix<double, sd, 4 * nd> B = Eigen::Matrix<double, sd, 4 * nd>::Zero();
      for (int a = 0; a < 4; ++a) {
        if constexpr (nd == 1) {
          B(0, a) = dndx_[q][a];
          B(1, a) = dndy_[q][a];
        } else {
          B(0, 2 * a) = dndx_[q][a];
          B(1, 2 * a + 1) = dndy_[q][a];
          B(2, 2 * a) = dndy_[q][a];
          B(2, 2 * a + 1) = dndx_[q][a];
        }
      }
      return B;
    };

    // per-phase element stiffness and load coupling
    EMat ke[2];
    ELoad pe[2];
    for (int ph = 0; ph < 2; ++ph) {
      ke[ph].setZero();
      pe[ph].setZero();
      const auto C = P::constitutive(mat_, ph == 1);
      for (int q = 0; q < 4; ++q) {
        const auto B = bmat(q);
        ke[ph] += wq_[q] * B.transpose() * C * B;
        pe[ph] += wq_[q] * B.transpose() * C;
      }
    }

    // assemble reduced stiffness (triplets, fixed deterministic order)
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(np_) * np_ * 16 * nd * nd);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nred, nc);
    auto red = [&](int dof) { return dof - nd; };  // dofs 0..nd-1 pinned

    for (int r = 0; r < np_; ++r)
      for (int c = 0; c < np_; ++c) {
        const int ph = x[static_cast<std::size_t>(r) * np_ + c];
        const int nids[4] = {node_id(r, c), node_id(r, c + 1), node_id(r + 1, c + 1),
                             node_id(r + 1, c)};
        int dofs[4 * nd];
        for (int a = 0; a < 4; ++a)
          for (int d = 0; d < nd; ++d) dofs[a * nd + d] = nids[a] * nd + d;
        for (int i = 0; i < 4 * nd; ++i) {
          if (dofs[i] < nd) continue;
          for (int j = 0; j < 4 * nd; ++j) {
            if (dofs[j] < nd) continue;
            trips.emplace_back(red(dofs[i]), red(dofs[j]), ke[ph](i, j));
          }
          for (int cse = 0; cse < nc; ++cse)
            rhs(red(dofs[i]), cse) -= pe[ph](i, cse);
        }
      }

    Eigen::SparseMatrix<double> K(nred, nred);
    K.setFromTriplets(trips.begin(), trips.end());

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    solver.compute(K);
    if (solver.info() != Eigen::Success) {
      // LDLT rejects indefinite/singular systems; rigid modes were already
      // pinned, so any leftover null space is a material/mesh defect.
      int null_dim = 0;
      const auto& D = solver.vectorD();
      for (int i = 0; i < D.size(); ++i)
        if (std::abs(D(i)) < 1e-12) ++null_dim;
      throw NumericError("homog: singular system beyond pinned rigid modes, null-space dimension " +
                         std::to_string(null_dim < 1 ? 1 : null_dim));
    }
    Eigen::MatrixXd v = solver.solve(rhs);

    const double rnorm = (K * v - rhs).norm();
    const double fnorm = rhs.norm();
    diag_.residual_rel = fnorm > 0.0 ? rnorm / fnorm : rnorm;
    if (diag_.residual_rel > 1e-10)
      throw NumericError("homog: solver residual " + std::to_string(diag_.residual_rel) +
                         " exceeds 1e-10");

    // averages and Hill check per load case via the quadrature loop
    typename P::Mat eff;
    double worst_hill = 0.0;
    Eigen::Matrix<double, sd, 4 * nd> Bq[4];
    for (int q = 0; q < 4; ++q) Bq[q] = bmat(q);
    const typename P::Mat Cph[2] = {P::constitutive(mat_, false), P::constitutive(mat_, true)};
    for (int cse = 0; cse < nc; ++cse) {
      Eigen::Matrix<double, sd, 1> mean_flux = Eigen::Matrix<double, sd, 1>::Zero();
      Eigen::Matrix<double, sd, 1> mean_grad = Eigen::Matrix<double, sd, 1>::Zero();
      const auto ehat = P::unit_case(cse);
      double energy = 0.0;
      for (int r = 0; r < np_; ++r)
        for (int c = 0; c < np_; ++c) {
          const int ph = x[static_cast<std::size_t>(r) * np_ + c];
          const auto& C = Cph[ph];
          const int nids[4] = {node_id(r, c), node_id(r, c + 1), node_id(r + 1, c + 1),
                               node_id(r + 1, c)};
          Eigen::Matrix<double, 4 * nd, 1> ve;
          for (int a = 0; a < 4; ++a)
            for (int d = 0; d < nd; ++d) {
              const int dof = nids[a] * nd + d;
              ve(a * nd + d) = dof < nd ? 0.0 : v(red(dof), cse);
            }
          for (int q = 0; q < 4; ++q) {
            Eigen::Matrix<double, sd, 1> eps = ehat + Bq[q] * ve;
            Eigen::Matrix<double, sd, 1> sig = C * eps;
            mean_flux += wq_[q] * sig;
            mean_grad += wq_[q] * eps;
            energy += wq_[q] * sig.dot(eps);
          }
        }
      // |Omega| = 1 so the weighted sums are already volume averages
      const double hill_gap = std::abs(energy - mean_flux.dot(mean_grad));
      worst_hill = std::max(worst_hill, hill_gap / std::max(std::abs(energy), 1e-300));
      eff.col(cse) = mean_flux;
    }
    diag_.hill_rel = worst_hill;
    if (worst_hill > 1e-8)
      throw NumericError("homog: Hill condition violated, relative gap " +
                         std::to_string(worst_hill));
    return eff;
  }

  int np_;
  MaterialConfig mat_;
  double dndx_[4][4], dndy_[4][4], wq_[4];
  SolveDiagnostics diag_;
};

/// Oracle labels for a batch of binary microstructures. Each worker owns its
/// solver; output order matches input order regardless of the thread count.
inline std::vector<std::array<double, 2>> label_batch(int np, const MaterialConfig& mat,
                                                      bool case1,
                                                      const std::vector<std::vector<std::uint8_t>>& grids,
                                                      int threads) {
  std::vector<std::array<double, 2>> out(grids.size());
  const int t = std::max(1, threads);
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mtx;
  const std::size_t chunk = (grids.size() + t - 1) / std::max<std::size_t>(1, t);
  for (int w = 0; w < t; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(grids.size(), lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      try {
        Homogenizer h(np, mat);
        for (std::size_t i = lo; i < hi; ++i)
          out[i] = case1 ? h.properties_case1(grids[i]) : h.properties_case2(grids[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mtx);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
  return out;
}

// Voigt / Reuss bounds on the effective tensors given the phase volume
// fraction f1 (used by tests and data sanity checks).
inline Eigen::Matrix2d conductivity_voigt_bound(const MaterialConfig& m, double f1) {
  return ((1.0 - f1) * m.a0 + f1 * m.a1) * Eigen::Matrix2d::Identity();
}
inline Eigen::Matrix2d conductivity_reuss_bound(const MaterialConfig& m, double f1) {
  return 1.0 / ((1.0 - f1) / m.a0 + f1 / m.a1) * Eigen::Matrix2d::Identity();
}
inline Eigen::Matrix3d elasticity_voigt_bound(const MaterialConfig& m, double f1) {
  return (1.0 - f1) * m.stiffness(m.e0) + f1 * m.stiffness(m.e1);
}
inline Eigen::Matrix3d elasticity_reuss_bound(const MaterialConfig& m, double f1) {
  const Eigen::Matrix3d s =
      (1.0 - f1) * m.stiffness(m.e0).inverse() + f1 * m.stiffness(m.e1).inverse();
  return s.inverse();
}

}  // namespace psp::homog
