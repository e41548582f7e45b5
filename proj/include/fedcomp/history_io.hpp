#pragma once

// Binary round-history snapshot ("record now, attack later").
//
//   offset  type          content
//   0       char[8]       "FEDCOMPH"
//   8       u32           format version (1)
//   12      u64           FNV-1a digest of the metadata bytes
//   20      u64           metadata length L
//   28      char[L]       metadata JSON (experiment spec, model shape,
//                         auxiliary set, ground truth)
//   ...     u64           round count T
//   per round:
//           u64           round index t
//           u64           user count U
//           u64[U]        dataset sizes D_i
//           f64[P]        theta_global^{t-1}
//           f64[U][P]     theta_i^t
//   ...     f64[P]        final global model
//
// Integers and doubles are little-endian; P is the model's parameter count
// in flatten_parameters order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "json.hpp"

#include "fedcomp/error.hpp"
#include "fedcomp/fl.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

static_assert(std::endian::native == std::endian::little, "history files assume a little-endian host");

inline constexpr char kHistoryMagic[8] = {'F', 'E', 'D', 'C', 'O', 'M', 'P', 'H'};
inline constexpr std::uint32_t kHistoryVersion = 1;

inline nlohmann::json model_shape_json(const Model& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"input_dim", l.spec.input_dim},
                      {"output_dim", l.spec.output_dim},
                      {"activation", to_string(l.spec.activation)},
                      {"slope", l.spec.activation.slope}});
  }
  return {{"classes", m.class_count}, {"layers", layers}};
}

inline Activation activation_from_string(const std::string& name, double slope) {
  if (name == "relu") return Activation::relu();
  if (name == "leaky_relu") return Activation::leaky_relu(slope);
  if (name == "identity") return Activation::identity();
  throw ConfigError("unknown activation '" + name + "'");
}

// A zero-initialized model with the recorded shape.
inline Model model_from_shape_json(const nlohmann::json& j) {
  std::vector<LayerSpec> specs;
  for (const auto& l : j.at("layers")) {
    specs.push_back({l.at("input_dim").get<std::size_t>(), l.at("output_dim").get<std::size_t>(),
                     activation_from_string(l.at("activation").get<std::string>(), l.at("slope").get<double>())});
  }
  const auto classes = j.at("classes").get<std::size_t>();
  validate_specs(specs, classes);
  Model m;
  m.class_count = classes;
  for (const auto& s : specs) {
    m.layers.push_back({Matrix::Zero(static_cast<Eigen::Index>(s.output_dim), static_cast<Eigen::Index>(s.input_dim)),
                        Vector::Zero(static_cast<Eigen::Index>(s.output_dim)), s});
  }
  return m;
}

namespace detail {

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(path + ": truncated history file");
  return v;
}

inline void put_model(std::ostream& out, const Model& m) {
  const Vector p = flatten_parameters(m);
  out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
}

inline Model get_model(std::istream& in, const Model& shape, const std::string& path) {
  Vector p(static_cast<Eigen::Index>(shape.parameter_count()));
  if (!in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(double))))
    throw FormatError(path + ": truncated model parameters");
  return unflatten_parameters(shape, p);
}

}  // namespace detail

struct HistoryFile {
  nlohmann::json metadata;  // must contain "model" (see model_shape_json)
  History history;
};

inline void write_history(const std::string& path, const HistoryFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  const std::string meta = file.metadata.dump();
  out.write(kHistoryMagic, sizeof(kHistoryMagic));
  detail::put(out, kHistoryVersion);
  detail::put(out, digest(meta));
  detail::put(out, static_cast<std::uint64_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put(out, static_cast<std::uint64_t>(file.history.rounds.size()));
  for (const auto& r : file.history.rounds) {
    detail::put(out, static_cast<std::uint64_t>(r.round));
    detail::put(out, static_cast<std::uint64_t>(r.locals.size()));
    for (auto s : r.sizes) detail::put(out, static_cast<std::uint64_t>(s));
    detail::put_model(out, r.global_prev);
    for (const auto& m : r.locals) detail::put_model(out, m);
  }
  detail::put_model(out, file.history.final_global);
  if (!out) throw FormatError(path + ": write failed");
}

inline HistoryFile read_history(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open history file");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kHistoryMagic, 8) != 0)
    throw FormatError(path + ": not a history file (bad magic)");
  const auto version = detail::get<std::uint32_t>(in, path);
  if (version != kHistoryVersion)
    throw FormatError(path + ": unsupported history version " + std::to_string(version));
  const auto hash = detail::get<std::uint64_t>(in, path);
  const auto len = detail::get<std::uint64_t>(in, path);
  std::string meta(len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(len))) throw FormatError(path + ": truncated metadata");
  if (digest(meta) != hash) throw FormatError(path + ": metadata digest mismatch");

  HistoryFile file;
  file.metadata = nlohmann::json::parse(meta);
  const Model shape = model_from_shape_json(file.metadata.at("model"));
  const auto rounds = detail::get<std::uint64_t>(in, path);
  for (std::uint64_t t = 0; t < rounds; ++t) {
    RoundRecord r;
    r.round = detail::get<std::uint64_t>(in, path);
    const auto users = detail::get<std::uint64_t>(in, path);
    for (std::uint64_t u = 0; u < users; ++u) r.sizes.push_back(detail::get<std::uint64_t>(in, path));
    r.global_prev = detail::get_model(in, shape, path);
    for (std::uint64_t u = 0; u < users; ++u) r.locals.push_back(detail::get_model(in, shape, path));
    file.history.rounds.push_back(std::move(r));
  }
  file.history.final_global = detail::get_model(in, shape, path);
  return file;
}

}  // namespace fedcomp
