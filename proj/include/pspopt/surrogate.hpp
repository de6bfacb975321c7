#pragma once

// Probabilistic structure-property surrogate: a convolutional heteroscedastic
// Gaussian regressor p(kappa | x) = N(m(x), S(x)) with diagonal covariance.
// Four conv/pool blocks extract features, a shared dense layer feeds separate
// mean and log-variance heads. Trained by maximum likelihood with weight
// decay and dropout; inference is deterministic.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pspopt/autodiff.hpp"
#include "pspopt/io.hpp"
#include "pspopt/nmath.hpp"
#include "pspopt/optim.hpp"
#include "pspopt/rng.hpp"

namespace psp::surrogate {

struct ArchConfig {
  int np = 32;
  int dk = 2;
  std::array<int, 4> channels{4, 8, 12, 16};
  int hidden = 30;
  double leaky_slope = 0.01;

  void validate() const {
    if (np % 16 != 0 || np < 16)
      throw ConfigError("surrogate: n_pixels must be a positive multiple of 16");
    if (dk < 1) throw ConfigError("surrogate: dk must be >= 1");
  }

  int feature_dim() const {
    const int side = np / 16;
    return channels[3] * side * side;
  }
};

struct TrainConfig {
  int batch_size = 128;
  double weight_decay = 1e-5;
  double dropout = 0.05;
  double learning_rate = 1e-3;
  int epochs = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (weight_decay < 0 || dropout < 0 || dropout >= 1)
      throw ConfigError("train: rates must be >= 0 (dropout < 1)");
    if (epochs < 1) throw ConfigError("train: epochs must be positive");
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be positive");
  }
};

/// Label standardization, stored with the parameters.
struct Standardizer {
  std::vector<double> mean, sd;

  std::vector<double> to_std(const std::vector<double>& k) const {
    std::vector<double> r(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) r[j] = (k[j] - mean[j]) / sd[j];
    return r;
  }
  std::vector<double> from_std(const std::vector<double>& k) const {
    std::vector<double> r(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) r[j] = k[j] * sd[j] + mean[j];
    return r;
  }
};

struct PredictiveDensity {
  std::vector<double> mean;  // physical units
  std::vector<double> var;   // strictly positive, diagonal
};

struct AxisBox {
  std::vector<double> lo, hi;

  void validate() const {
    if (lo.size() != hi.size() || lo.empty()) throw ConfigError("box: lo/hi dimension mismatch");
    for (std::size_t j = 0; j < lo.size(); ++j)
      if (!(lo[j] < hi[j]))
        throw ConfigError("box: lo >= hi in dimension " + std::to_string(j));
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;
  double heldout_nll = 0.0;
  double baseline_nll = 0.0;  // constant Gaussian fit to training moments
  int heldout_count = 0;
};

class Surrogate {
 public:
  Surrogate() = default;

  Surrogate(ArchConfig arch, std::uint64_t init_seed) : arch_(arch) {
    arch_.validate();
    Rng rng(derive_seed(init_seed, "surrogate-init"));
    auto conv = [&](int f, int c) {
      const double s = std::sqrt(2.0 / (c * 9.0));
      Tensor w(Shape{(std::size_t)f, (std::size_t)c, 3, 3});
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * rng.normal();
      params_.push_back(std::move(w));
      params_.push_back(Tensor(Shape{(std::size_t)f}));
    };
    conv(arch_.channels[0], 1);
    conv(arch_.channels[1], arch_.channels[0]);
    conv(arch_.channels[2], arch_.channels[1]);
    conv(arch_.channels[3], arch_.channels[2]);
    auto dense = [&](int in, int out) {
      const double s = std::sqrt(2.0 / in);
      Tensor w(Shape{(std::size_t)in, (std::size_t)out});
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * rng.normal();
      params_.push_back(std::move(w));
      params_.push_back(Tensor(Shape{(std::size_t)out}));
    };
    dense(arch_.feature_dim(), arch_.hidden);
    dense(arch_.hidden, arch_.dk);
    dense(arch_.hidden, arch_.dk);
    stats_.mean.assign(arch_.dk, 0.0);
    stats_.sd.assign(arch_.dk, 1.0);
  }

  const ArchConfig& arch() const { return arch_; }
  const Standardizer& standardizer() const { return stats_; }
  void set_standardizer(Standardizer s) { stats_ = std::move(s); }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  /// Attaches all parameters to a tape (tracked when training).
  std::vector<ad::Var> attach(ad::Tape& t, bool tracked) const {
    std::vector<ad::Var> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(t.leaf(p, tracked));
    return v;
  }

  /// Forward pass from a unit-interval image batch [N,1,np,np] already on the
  /// tape. Phases are encoded as +-1 internally (2x - 1). Returns
  /// standardized mean and log-variance, both [N, dk].
  std::pair<ad::Var, ad::Var> forward_std(ad::Tape& t, const ad::Var& x01,
                                          const std::vector<ad::Var>& p,
                                          const Tensor* dropout_mask = nullptr) const {
    const Shape s = x01.value().shape();  // copy: the tape may reallocate
    if (s.size() != 4 || s[1] != 1 || s[2] != static_cast<std::size_t>(arch_.np) ||
        s[3] != static_cast<std::size_t>(arch_.np))
      throw ShapeError("surrogate: input shape " + shape_str(s) + " != [N,1," +
                       std::to_string(arch_.np) + "," + std::to_string(arch_.np) + "]");
    auto h = ad::add_const(ad::mul_const(x01, 2.0), -1.0);
    for (int b = 0; b < 4; ++b) {
      h = ad::avgpool2x2(ad::leaky_relu(ad::conv2d_same(h, p[2 * b], p[2 * b + 1]), arch_.leaky_slope));
    }
    auto feat = ad::reshape(h, Shape{s[0], static_cast<std::size_t>(arch_.feature_dim())});
    if (dropout_mask != nullptr) feat = ad::mul(feat, t.constant(*dropout_mask));
    auto hid = ad::leaky_relu(ad::add(ad::matmul(feat, p[8]), p[9]), arch_.leaky_slope);
    auto m = ad::add(ad::matmul(hid, p[10]), p[11]);
    auto logv = ad::add(ad::matmul(hid, p[12]), p[13]);
    return {m, logv};
  }

  /// Deterministic prediction in physical units.
  PredictiveDensity predict(const std::vector<double>& x01) const {
    ad::Tape t;
    auto p = attach(t, false);
    auto x = t.leaf(Tensor(Shape{1, 1, (std::size_t)arch_.np, (std::size_t)arch_.np}, x01), false);
    auto [m, logv] = forward_std(t, x, p);
    PredictiveDensity d;
    d.mean.resize(arch_.dk);
    d.var.resize(arch_.dk);
    for (int j = 0; j < arch_.dk; ++j) {
      d.mean[j] = m.value()[j] * stats_.sd[j] + stats_.mean[j];
      d.var[j] = std::exp(logv.value()[j]) * stats_.sd[j] * stats_.sd[j];
    }
    return d;
  }

  PredictiveDensity predict_binary(const std::vector<std::uint8_t>& x) const {
    std::vector<double> g(x.begin(), x.end());
    return predict(g);
  }

  /// log N(kappa*; m(x), S(x)) in physical units.
  double log_density(const std::vector<double>& kappa, const std::vector<double>& x01) const {
    const auto d = predict(x01);
    double ld = 0.0;
    for (int j = 0; j < arch_.dk; ++j) ld += norm_logpdf(kappa[j], d.mean[j], d.var[j]);
    return ld;
  }

  /// Pr(kappa in box | x) under the diagonal predictive Gaussian.
  double prob_in_box(const std::vector<double>& x01, const AxisBox& box) const {
    box.validate();
    const auto d = predict(x01);
    return prob_in_box_given(d, box);
  }

  static double prob_in_box_given(const PredictiveDensity& d, const AxisBox& box) {
    box.validate();
    double p = 1.0;
    for (std::size_t j = 0; j < box.lo.size(); ++j) {
      const double sd = std::sqrt(d.var[j]);
      p *= norm_cdf((box.hi[j] - d.mean[j]) / sd) - norm_cdf((box.lo[j] - d.mean[j]) / sd);
    }
    return std::min(1.0, std::max(0.0, p));
  }

  /// Training NLL on a tape: mean Gaussian negative log density over the
  /// batch (standardized labels) plus the weight-decay penalty.
  ad::Var nll(ad::Tape& t, const ad::Var& x01, const Tensor& labels_std,
              const std::vector<ad::Var>& p, double weight_decay,
              const Tensor* dropout_mask = nullptr) const {
    const std::size_t n = x01.value().shape()[0];
    if (labels_std.shape() != Shape{n, static_cast<std::size_t>(arch_.dk)})
      throw ShapeError("surrogate: label shape " + shape_str(labels_std.shape()) + " != [" +
                       std::to_string(n) + "," + std::to_string(arch_.dk) + "]");
    auto [m, logv] = forward_std(t, x01, p, dropout_mask);
    auto k = t.constant(labels_std);
    auto diff = ad::sub(k, m);
    auto quad = ad::mul(ad::mul(diff, diff), ad::exp(ad::neg(logv)));
    auto terms = ad::add_const(ad::add(logv, quad), std::log(2.0 * M_PI));
    auto data_nll = ad::mul_const(ad::sum(terms), 0.5 / static_cast<double>(n));
    if (weight_decay <= 0.0) return data_nll;
    ad::Var pen;
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto s = ad::sum(ad::mul(p[i], p[i]));
      pen = i == 0 ? s : ad::add(pen, s);
    }
    return ad::add(data_nll, ad::mul_const(pen, weight_decay));
  }

  // checkpoint: JSON manifest + raw float64 parameter blob
  void save(const std::filesystem::path& stem) const {
    nlohmann::json j{{"n_pixels", arch_.np},
                     {"dk", arch_.dk},
                     {"channels", arch_.channels},
                     {"hidden", arch_.hidden},
                     {"leaky_slope", arch_.leaky_slope},
                     {"standardizer_mean", stats_.mean},
                     {"standardizer_sd", stats_.sd},
                     {"seed", seed_}};
    std::vector<nlohmann::json> shapes;
    std::vector<double> blob;
    for (const auto& p : params_) {
      shapes.push_back(p.shape());
      blob.insert(blob.end(), p.vec().begin(), p.vec().end());
    }
    j["param_shapes"] = shapes;
    io::write_json(std::filesystem::path(stem).concat(".json"), j);
    io::write_f64(std::filesystem::path(stem).concat(".bin"), blob);
  }

  static Surrogate load(const std::filesystem::path& stem) {
    const auto j = io::read_json(std::filesystem::path(stem).concat(".json"));
    Surrogate s;
    s.arch_.np = j.at("n_pixels").get<int>();
    s.arch_.dk = j.at("dk").get<int>();
    s.arch_.channels = j.at("channels").get<std::array<int, 4>>();
    s.arch_.hidden = j.at("hidden").get<int>();
    s.arch_.leaky_slope = j.at("leaky_slope").get<double>();
    s.stats_.mean = j.at("standardizer_mean").get<std::vector<double>>();
    s.stats_.sd = j.at("standardizer_sd").get<std::vector<double>>();
    s.seed_ = j.at("seed").get<std::uint64_t>();
    const auto blob = io::read_f64(std::filesystem::path(stem).concat(".bin"));
    std::size_t off = 0;
    for (const auto& sh : j.at("param_shapes")) {
      Shape shape = sh.get<Shape>();
      const std::size_t n = shape_size(shape);
      if (off + n > blob.size()) throw ConfigError("surrogate checkpoint: blob too short");
      s.params_.emplace_back(shape,
                             std::vector<double>(blob.begin() + off, blob.begin() + off + n));
      off += n;
    }
    if (off != blob.size()) throw ConfigError("surrogate checkpoint: blob size mismatch");
    return s;
  }

  void set_seed(std::uint64_t s) { seed_ = s; }
  std::uint64_t seed() const { return seed_; }

 private:
  ArchConfig arch_;
  std::vector<Tensor> params_;
  Standardizer stats_;
  std::uint64_t seed_ = 0;
};

/// Thrown when training diverges; carries the last finite parameter state.
struct TrainDivergence : NumericError {
  TrainDivergence(const std::string& msg, Surrogate checkpoint)
      : NumericError(msg), last_finite(std::move(checkpoint)) {}
  Surrogate last_finite;
};

/// Maximum-likelihood training. Deterministic under a fixed config seed:
/// fixed split, fixed initialization, fixed shuffles and dropout masks,
/// single-threaded updates.
inline Surrogate train(const ArchConfig& arch, const TrainConfig& cfg,
                       const std::vector<std::vector<std::uint8_t>>& inputs,
                       const std::vector<std::vector<double>>& labels, TrainLog* log_out = nullptr) {
  arch.validate();
  cfg.validate();
  if (inputs.size() != labels.size() || inputs.empty())
    throw ConfigError("train: inputs/labels size mismatch or empty");
  if (static_cast<std::size_t>(cfg.batch_size) > inputs.size())
    throw ConfigError("train: batch size exceeds dataset size");

  const std::size_t n = inputs.size();
  const std::size_t np2 = static_cast<std::size_t>(arch.np) * arch.np;

  // deterministic 90/10 split (held-out part is diagnostic only)
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, "train-split"));
  split_rng.shuffle(order);
  const std::size_t n_held = n / 10;
  const std::size_t n_train = n - n_held;
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> held_idx(order.begin() + n_train, order.end());

  Surrogate s(arch, cfg.seed);
  s.set_seed(cfg.seed);

  // standardizer from the training split
  Standardizer st;
  st.mean.assign(arch.dk, 0.0);
  st.sd.assign(arch.dk, 0.0);
  for (auto i : train_idx)
    for (int j = 0; j < arch.dk; ++j) st.mean[j] += labels[i][j];
  for (int j = 0; j < arch.dk; ++j) st.mean[j] /= static_cast<double>(n_train);
  for (auto i : train_idx)
    for (int j = 0; j < arch.dk; ++j) {
      const double d = labels[i][j] - st.mean[j];
      st.sd[j] += d * d;
    }
  for (int j = 0; j < arch.dk; ++j) {
    st.sd[j] = std::sqrt(st.sd[j] / std::max<std::size_t>(1, n_train - 1));
    if (!(st.sd[j] > 1e-12)) st.sd[j] = 1.0;  // constant labels: no scaling
  }
  s.set_standardizer(st);

  Adam opt(cfg.learning_rate);
  Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "train-dropout"));

  TrainLog log;
  std::vector<Tensor> last_finite = s.params();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // step-size schedule: halve at each third of the run
    const int stage = (3 * epoch) / cfg.epochs;
    opt.set_lr(cfg.learning_rate * std::pow(0.5, stage));
    shuffle_rng.shuffle(train_idx);
    double ep_loss = 0.0;
    int ep_batches = 0;
    for (std::size_t b0 = 0; b0 < n_train; b0 += cfg.batch_size) {
      const std::size_t bs = std::min<std::size_t>(cfg.batch_size, n_train - b0);
      Tensor xin(Shape{bs, 1, (std::size_t)arch.np, (std::size_t)arch.np});
      Tensor lab(Shape{bs, (std::size_t)arch.dk});
      for (std::size_t i = 0; i < bs; ++i) {
        const auto& g = inputs[train_idx[b0 + i]];
        for (std::size_t k = 0; k < np2; ++k) xin[i * np2 + k] = g[k];
        const auto ks = st.to_std(labels[train_idx[b0 + i]]);
        for (int j = 0; j < arch.dk; ++j) lab[i * arch.dk + j] = ks[j];
      }
      Tensor mask;
      const Tensor* mask_ptr = nullptr;
      if (cfg.dropout > 0.0) {
        mask = Tensor(Shape{bs, (std::size_t)arch.feature_dim()});
        const double keep = 1.0 - cfg.dropout;
        for (std::size_t i = 0; i < mask.size(); ++i)
          mask[i] = dropout_rng.uniform() < keep ? 1.0 / keep : 0.0;
        mask_ptr = &mask;
      }
      ad::Tape t;
      auto p = s.attach(t, true);
      auto x = t.leaf(std::move(xin), false);
      auto loss = s.nll(t, x, lab, p, cfg.weight_decay, mask_ptr);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        Surrogate chk(arch, cfg.seed);
        chk.set_standardizer(st);
        chk.params() = last_finite;
        throw TrainDivergence("surrogate train: non-finite loss at epoch " +
                                  std::to_string(epoch),
                              std::move(chk));
      }
      t.backward(loss);
      std::vector<Tensor*> prm;
      std::vector<const Tensor*> grd;
      for (std::size_t i = 0; i < p.size(); ++i) {
        prm.push_back(&s.params()[i]);
        grd.push_back(&p[i].grad());
      }
      opt.step(prm, grd, false);
      ep_loss += lv;
      ++ep_batches;
    }
    log.epoch_loss.push_back(ep_loss / std::max(1, ep_batches));
    last_finite = s.params();
  }

  // held-out diagnostics vs the constant-Gaussian baseline on train moments
  log.heldout_count = static_cast<int>(held_idx.size());
  if (!held_idx.empty()) {
    double h_nll = 0.0, b_nll = 0.0;
    for (auto i : held_idx) {
      std::vector<double> g(inputs[i].begin(), inputs[i].end());
      const auto d = s.predict(g);
      for (int j = 0; j < arch.dk; ++j) {
        h_nll -= norm_logpdf(labels[i][j], d.mean[j], d.var[j]);
        b_nll -= norm_logpdf(labels[i][j], st.mean[j], st.sd[j] * st.sd[j]);
      }
    }
    log.heldout_nll = h_nll / held_idx.size();
    log.baseline_nll = b_nll / held_idx.size();
  }
  if (log_out) *log_out = log;
  return s;
}

}  // namespace psp::surrogate
