#pragma once

// Labeled (microstructure, property) pairs with acquisition provenance.
// On disk: a directory with manifest.json plus per-shard raw float64 blobs
// for inputs and labels. Grids are binary but stored as float64 per the
// dataset interface.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "pspopt/io.hpp"
#include "pspopt/nmath.hpp"

namespace psp::active {

struct Shard {
  int step = 0;  // acquisition step l (0 = initial ancestral data)
  std::uint64_t seed = 0;
  std::vector<double> phi;  // process parameters at generation (empty for ancestral)
  std::size_t count = 0;
};

class DataStore {
 public:
  DataStore() = default;
  DataStore(int np, int dk) : np_(np), dk_(dk) {}

  int n_pixels() const { return np_; }
  int label_dim() const { return dk_; }
  std::size_t size() const { return labels_.size() / std::max(1, dk_); }
  const std::vector<Shard>& shards() const { return shards_; }

  bool contains(std::uint64_t hash) const { return hashes_.count(hash) > 0; }

  static std::uint64_t hash_grid(const std::vector<std::uint8_t>& grid) {
    return fnv1a64(grid.data(), grid.size());
  }

  /// Opens a new provenance shard; subsequent add() calls append to it.
  void begin_shard(int step, std::uint64_t seed, std::vector<double> phi) {
    shards_.push_back(Shard{step, seed, std::move(phi), 0});
  }

  /// Appends one labeled pair. Returns false (and stores nothing) on a
  /// duplicate microstructure hash.
  bool add(const std::vector<std::uint8_t>& grid, const std::vector<double>& label) {
    if (grid.size() != static_cast<std::size_t>(np_) * np_)
      throw ShapeError("datastore: grid size mismatch");
    if (label.size() != static_cast<std::size_t>(dk_))
      throw ShapeError("datastore: label dimension mismatch");
    if (shards_.empty()) throw ConfigError("datastore: begin_shard before add");
    const auto h = hash_grid(grid);
    if (!hashes_.insert(h).second) return false;
    grids_.insert(grids_.end(), grid.begin(), grid.end());
    labels_.insert(labels_.end(), label.begin(), label.end());
    ++shards_.back().count;
    return true;
  }

  std::vector<std::uint8_t> grid(std::size_t i) const {
    const std::size_t n2 = static_cast<std::size_t>(np_) * np_;
    return {grids_.begin() + i * n2, grids_.begin() + (i + 1) * n2};
  }
  std::vector<double> label(std::size_t i) const {
    return {labels_.begin() + i * dk_, labels_.begin() + (i + 1) * dk_};
  }

  std::vector<std::vector<std::uint8_t>> all_grids() const {
    std::vector<std::vector<std::uint8_t>> v;
    v.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) v.push_back(grid(i));
    return v;
  }
  std::vector<std::vector<double>> all_labels() const {
    std::vector<std::vector<double>> v;
    v.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) v.push_back(label(i));
    return v;
  }

  /// Column j of the label matrix.
  std::vector<double> label_column(int j) const {
    std::vector<double> v(size());
    for (std::size_t i = 0; i < size(); ++i) v[i] = labels_[i * dk_ + j];
    return v;
  }

  void save(const std::filesystem::path& dir, const nlohmann::json& context = {}) const {
    std::filesystem::create_directories(dir);
    nlohmann::json man{{"n_pixels", np_}, {"label_dim", dk_}, {"count", size()}};
    if (!context.is_null() && !context.empty()) man["context"] = context;
    std::vector<nlohmann::json> sj;
    std::size_t off = 0;
    for (std::size_t si = 0; si < shards_.size(); ++si) {
      const auto& s = shards_[si];
      const std::string tag = "shard_" + std::to_string(si);
      std::vector<double> in(s.count * np_ * np_);
      for (std::size_t k = 0; k < s.count * np_ * np_; ++k)
        in[k] = grids_[off * np_ * np_ + k];
      io::write_f64(dir / (tag + ".inputs.f64"), in);
      io::write_f64(dir / (tag + ".labels.f64"),
                    std::vector<double>(labels_.begin() + off * dk_,
                                        labels_.begin() + (off + s.count) * dk_));
      sj.push_back({{"step", s.step},
                    {"seed", s.seed},
                    {"phi", s.phi},
                    {"count", s.count},
                    {"inputs", tag + ".inputs.f64"},
                    {"labels", tag + ".labels.f64"}});
      off += s.count;
    }
    man["shards"] = sj;
    // label statistics recorded for self-description
    if (size() > 1) {
      std::vector<double> mean(dk_, 0.0), sd(dk_, 0.0);
      for (int j = 0; j < dk_; ++j) {
        auto col = label_column(j);
        mean[j] = mean_of(col);
        sd[j] = std::sqrt(variance_of(col));
      }
      man["label_mean"] = mean;
      man["label_sd"] = sd;
    }
    io::write_json(dir / "manifest.json", man);
  }

  static DataStore load(const std::filesystem::path& dir) {
    const auto man = io::read_json(dir / "manifest.json");
    DataStore d(man.at("n_pixels").get<int>(), man.at("label_dim").get<int>());
    for (const auto& sj : man.at("shards")) {
      d.begin_shard(sj.at("step").get<int>(), sj.at("seed").get<std::uint64_t>(),
                    sj.at("phi").get<std::vector<double>>());
      const auto in = io::read_f64(dir / sj.at("inputs").get<std::string>());
      const auto lab = io::read_f64(dir / sj.at("labels").get<std::string>());
      const std::size_t n2 = static_cast<std::size_t>(d.np_) * d.np_;
      const std::size_t cnt = sj.at("count").get<std::size_t>();
      if (in.size() != cnt * n2 || lab.size() != cnt * d.dk_)
        throw ConfigError("datastore: shard blob size mismatch in " + dir.string());
      for (std::size_t i = 0; i < cnt; ++i) {
        std::vector<std::uint8_t> g(n2);
        for (std::size_t k = 0; k < n2; ++k) {
          const double v = in[i * n2 + k];
          if (v != 0.0 && v != 1.0) throw ConfigError("datastore: non-binary grid value");
          g[k] = static_cast<std::uint8_t>(v);
        }
        std::vector<double> l(lab.begin() + i * d.dk_, lab.begin() + (i + 1) * d.dk_);
        if (!d.add(g, l)) throw ConfigError("datastore: duplicate hash in stored shards");
      }
    }
    return d;
  }

 private:
  int np_ = 0, dk_ = 0;
  std::vector<std::uint8_t> grids_;
  std::vector<double> labels_;
  std::vector<Shard> shards_;
  std::set<std::uint64_t> hashes_;
};

}  // namespace psp::active
