#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitvae/baselines.hpp"
#include "splitvae/datasets.hpp"
#include "splitvae/nn.hpp"

namespace splitvae {

// ---------------------------------------------------------------------------
// Parameter checkpoints
//
// Binary layout (native little-endian):
//   "SVAECKP1" | u64 config_hash | u32 stack_count
//   per stack:  u32 name_len | name | u32 layer_count
//   per layer:  u64 in | u64 out | u8 activation | in*out f64 weights | out f64 biases
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'S', 'V', 'A', 'E', 'C', 'K', 'P', '1'};

struct NamedStack {
  std::string name;
  MlpStack stack;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::vector<NamedStack> stacks;

  const MlpStack& get(const std::string& name) const {
    for (const auto& s : stacks)
      if (s.name == name) return s.stack;
    throw DataError("checkpoint has no stack named '" + name + "'");
  }
};

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& source) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw DataError(source + ": truncated checkpoint");
  }
  return v;
}

inline void put_doubles(std::ostream& os, const Tensor& t) {
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline void take_doubles(std::istream& is, Tensor& t, const std::string& source) {
  if (!is.read(reinterpret_cast<char*>(t.data().data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw DataError(source + ": truncated checkpoint");
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint64_t>(os, ck.config_hash);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.stacks.size()));
  for (const auto& [name, stack] : ck.stacks) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(stack.depth()));
    for (const auto& layer : stack.layers()) {
      detail::put<std::uint64_t>(os, layer.in_dim());
      detail::put<std::uint64_t>(os, layer.out_dim());
      detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(layer.activation()));
      detail::put_doubles(os, layer.weights());
      detail::put_doubles(os, layer.biases());
    }
  }
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& source = "<stream>") {
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError(source + ": not a checkpoint file");
  }
  Checkpoint ck;
  ck.config_hash = detail::take<std::uint64_t>(is, source);
  const auto n_stacks = detail::take<std::uint32_t>(is, source);
  for (std::uint32_t s = 0; s < n_stacks; ++s) {
    const auto name_len = detail::take<std::uint32_t>(is, source);
    if (name_len > 4096) throw DataError(source + ": corrupt stack name");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError(source + ": truncated checkpoint");
    const auto n_layers = detail::take<std::uint32_t>(is, source);
    std::vector<DenseLayer> layers;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      const auto in = detail::take<std::uint64_t>(is, source);
      const auto out = detail::take<std::uint64_t>(is, source);
      const auto act = detail::take<std::uint8_t>(is, source);
      if (act > static_cast<std::uint8_t>(Activation::sigmoid) || in == 0 || out == 0 ||
          in * out > (std::uint64_t{1} << 32)) {
        throw DataError(source + ": corrupt layer header");
      }
      Tensor w = Tensor::matrix(in, out);
      Tensor b = Tensor::vector(out);
      detail::take_doubles(is, w, source);
      detail::take_doubles(is, b, source);
      layers.emplace_back(std::move(w), std::move(b), static_cast<Activation>(act));
    }
    ck.stacks.push_back({std::move(name), MlpStack(std::move(layers))});
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing checkpoint " + path.string());
  return read_checkpoint(is, path.string());
}

/// FNV-1a, used to tie checkpoints to the config that produced them.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Structured-text helpers
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", t.data()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json to_json(const CopulaModel& m) {
  return nlohmann::json{{"marginals", m.marginals},
                        {"degenerate", m.degenerate},
                        {"correlation", to_json(m.correlation)}};
}

inline CopulaModel copula_from_json(const nlohmann::json& j) {
  CopulaModel m;
  m.marginals = j.at("marginals").get<std::vector<std::vector<double>>>();
  m.degenerate = j.at("degenerate").get<std::vector<bool>>();
  m.correlation = tensor_from_json(j.at("correlation"));
  m.factor = detail::psd_factor(m.correlation);
  return m;
}

inline nlohmann::json to_json(const NormStats& s) {
  return nlohmann::json{{"min", s.min}, {"max", s.max}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
  return NormStats{j.at("min").get<std::vector<double>>(), j.at("max").get<std::vector<double>>()};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path.string() + ": " + ex.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace splitvae
