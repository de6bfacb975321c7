#pragma once

// Objective-aware data acquisition: candidate pools drawn from the current
// variational density, acquisition scoring (utility variance for O1,
// predictive log-score for O2), deterministic top-k selection, and oracle
// labeling with skip-and-backfill on failures.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iostream>
#include <vector>

#include "pspopt/datastore.hpp"
#include "pspopt/homog.hpp"
#include "pspopt/randfield.hpp"
#include "pspopt/surrogate.hpp"
#include "pspopt/vbem.hpp"

namespace psp::active {

struct Candidate {
  std::vector<std::uint8_t> grid;
  std::uint64_t hash = 0;
};

/// Draws unique binary candidates: psi_sampler -> synthesize -> hard
/// threshold -> dedup by hash (against the pool and the existing store).
/// Refills until n_pool unique candidates or a 10x oversampling budget is
/// spent, in which case it returns what exists with a warning.
inline std::vector<Candidate> propose_pool(const field::RandField& rf,
                                           const std::vector<double>& phi, double x0,
                                           const std::function<std::vector<double>(Rng&)>& psi_sampler,
                                           int n_pool, Rng& rng,
                                           const DataStore* existing = nullptr) {
  std::vector<Candidate> pool;
  std::set<std::uint64_t> seen;
  long budget = 10L * n_pool;
  while (static_cast<int>(pool.size()) < n_pool && budget-- > 0) {
    auto grid = rf.hard_threshold(rf.synthesize(phi, psi_sampler(rng)), x0);
    const auto h = DataStore::hash_grid(grid);
    if (seen.count(h) || (existing && existing->contains(h))) continue;
    seen.insert(h);
    pool.push_back(Candidate{std::move(grid), h});
  }
  if (static_cast<int>(pool.size()) < n_pool)
    std::cerr << "[active] warning: only " << pool.size() << " unique candidates of " << n_pool
              << " requested after 10x oversampling\n";
  return pool;
}

/// O1 acquisition: Var[u(kappa)] under the predictive density. For the box
/// indicator this is p(1-p) in closed form; for the exponential-quadratic
/// utility a 256-draw Monte Carlo estimate seeded by the candidate hash.
inline double acquisition_o1(const Candidate& cand, const surrogate::Surrogate& sur,
                             const vbem::ObjectiveSpec& spec) {
  const auto d = sur.predict_binary(cand.grid);
  if (spec.variant == vbem::ObjectiveVariant::O1Box) {
    const double p = surrogate::Surrogate::prob_in_box_given(d, spec.box);
    return p * (1.0 - p);
  }
  if (spec.variant != vbem::ObjectiveVariant::O1Gaussian)
    throw ConfigError("acquisition_o1: objective is not an O1 variant");
  Rng rng(derive_seed(cand.hash, "acq-o1-mc"));
  const int n = 256;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double q = 0.0;
    for (std::size_t j = 0; j < d.mean.size(); ++j) {
      const double k = d.mean[j] + std::sqrt(d.var[j]) * rng.normal();
      const double dd = k - spec.kappa_target[j];
      q += dd * dd;
    }
    const double u = std::exp(-spec.tau * q);
    s += u;
    s2 += u * u;
  }
  const double m = s / n;
  return std::max(0.0, s2 / n - m * m);
}

/// O2 acquisition: mean predictive log-score over the target samples.
inline double acquisition_o2(const Candidate& cand, const surrogate::Surrogate& sur,
                             const std::vector<std::vector<double>>& target_samples) {
  const auto d = sur.predict_binary(cand.grid);
  double s = 0.0;
  for (const auto& k : target_samples) {
    for (std::size_t j = 0; j < k.size(); ++j) s += norm_logpdf(k[j], d.mean[j], d.var[j]);
  }
  return s / static_cast<double>(target_samples.size());
}

/// Indices of the top-k scores, ties broken by candidate hash (ascending),
/// so selection does not depend on pool ordering.
inline std::vector<std::size_t> select_top_k(const std::vector<Candidate>& pool,
                                             const std::vector<double>& scores, int k) {
  if (scores.size() != pool.size()) throw ShapeError("select: scores/pool size mismatch");
  if (k > static_cast<int>(pool.size()))
    throw ConfigError("select: N_add exceeds the pool size");
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return pool[a].hash < pool[b].hash;
  });
  idx.resize(k);
  return idx;
}

struct LabeledBatch {
  std::vector<std::size_t> chosen;            // pool indices actually labeled
  std::vector<std::vector<double>> labels;    // aligned with chosen
  int failures = 0;
};

/// Labels the top-N_add candidates with the FEM oracle; oracle failures are
/// skipped (logged) and backfilled from the next-ranked candidates.
inline LabeledBatch select_and_label(const std::vector<Candidate>& pool,
                                     const std::vector<double>& scores, int n_add, int np,
                                     const homog::MaterialConfig& mat, bool case1, int threads) {
  auto ranked = select_top_k(pool, scores, static_cast<int>(pool.size()));
  LabeledBatch out;
  std::size_t next = 0;
  while (static_cast<int>(out.chosen.size()) < n_add && next < ranked.size()) {
    const std::size_t want = n_add - out.chosen.size();
    std::vector<std::size_t> attempt;
    for (; attempt.size() < want && next < ranked.size(); ++next) attempt.push_back(ranked[next]);
    std::vector<std::vector<double>> results(attempt.size());
    std::vector<char> ok(attempt.size(), 0);
    parallel_for(attempt.size(), threads, [&](std::size_t i) {
      try {
        homog::Homogenizer h(np, mat);
        auto k = case1 ? h.properties_case1(pool[attempt[i]].grid)
                       : h.properties_case2(pool[attempt[i]].grid);
        results[i] = {k.begin(), k.end()};
        ok[i] = 1;
      } catch (const std::exception& e) {
        std::cerr << "[active] oracle failure on candidate " << attempt[i] << ": " << e.what()
                  << " (skipping)\n";
      }
    });
    for (std::size_t i = 0; i < attempt.size(); ++i) {
      if (ok[i]) {
        out.chosen.push_back(attempt[i]);
        out.labels.push_back(std::move(results[i]));
      } else {
        ++out.failures;
      }
    }
  }
  return out;
}

}  // namespace psp::active
