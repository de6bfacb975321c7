#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pspopt/common.hpp"

namespace psp::io {

// All binary artifacts are raw little-endian float64 blobs. The build targets
// little-endian hosts; the byte-for-byte determinism contract is per-platform.

inline void write_f64(const std::filesystem::path& path, const std::vector<double>& v) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("io: cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  if (!f) throw ConfigError("io: short write: " + path.string());
}

inline std::vector<double> read_f64(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw ConfigError("io: cannot open: " + path.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes % 8 != 0) throw ConfigError("io: blob size not a multiple of 8: " + path.string());
  std::vector<double> v(bytes / 8);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw ConfigError("io: short read: " + path.string());
  return v;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("io: cannot open for writing: " + path.string());
  f << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("io: cannot open: " + path.string());
  nlohmann::json j;
  f >> j;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("io: cannot open for writing: " + path.string());
  f << s;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("io: cannot open: " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// Microstructure file: raw row-major float64 grid plus a JSON sidecar.
inline void write_microstructure(const std::filesystem::path& stem, const std::vector<double>& grid,
                                 int np, const std::string& mode, double vf, double x0,
                                 std::uint64_t seed) {
  write_f64(std::filesystem::path(stem).concat(".f64"), grid);
  nlohmann::json meta{{"n_pixels", np}, {"mode", mode}, {"vf", vf}, {"x0", x0}, {"seed", seed}};
  write_json(std::filesystem::path(stem).concat(".json"), meta);
}

struct MicroFile {
  std::vector<double> grid;
  int np = 0;
  std::string mode;
  double vf = 0.0, x0 = 0.0;
  std::uint64_t seed = 0;
};

inline MicroFile read_microstructure(const std::filesystem::path& stem) {
  MicroFile m;
  m.grid = read_f64(std::filesystem::path(stem).concat(".f64"));
  const auto meta = read_json(std::filesystem::path(stem).concat(".json"));
  m.np = meta.at("n_pixels").get<int>();
  m.mode = meta.at("mode").get<std::string>();
  m.vf = meta.at("vf").get<double>();
  m.x0 = meta.at("x0").get<double>();
  m.seed = meta.at("seed").get<std::uint64_t>();
  if (m.grid.size() != static_cast<std::size_t>(m.np) * m.np)
    throw ConfigError("microstructure: grid/sidecar size mismatch at " + stem.string());
  return m;
}

}  // namespace psp::io
