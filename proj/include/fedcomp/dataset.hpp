#pragma once

// Labeled datasets, per-user composition partitioning and the server's
// auxiliary set.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcomp/error.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

struct Dataset {
  Matrix features;                 // samples x dim
  std::vector<int> labels;         // class indices
  std::vector<std::uint64_t> ids;  // provenance: index in the source dataset
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(class_count, 0);
    for (int y : labels) ++c[static_cast<std::size_t>(y)];
    return c;
  }

  Batch as_batch() const { return Batch{features, labels}; }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.class_count = class_count;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.reserve(rows.size());
    out.ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
      out.labels.push_back(labels[rows[i]]);
      out.ids.push_back(ids[rows[i]]);
    }
    return out;
  }

  // Row indices per class, in storage order.
  std::vector<std::vector<std::size_t>> rows_by_class() const {
    std::vector<std::vector<std::size_t>> out(class_count);
    for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(i);
    return out;
  }
};

// Per-class sample counts for one user; a null class is a zero entry.
struct CompositionSpec {
  std::vector<std::size_t> counts;

  static CompositionSpec from_counts(std::vector<std::size_t> counts) {
    CompositionSpec s{std::move(counts)};
    s.validate();
    return s;
  }

  // Largest-remainder rounding of proportions * total: exact total, every
  // class within 1 of its real-valued target, zeros stay zero.
  static CompositionSpec from_proportions(const std::vector<double>& proportions, std::size_t total) {
    if (proportions.empty()) throw ConfigError("composition: empty proportions");
    double sum = 0.0;
    for (double p : proportions) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("composition: proportions must be >= 0");
      sum += p;
    }
    if (!(sum > 0.0)) throw ConfigError("composition: at least one proportion must be positive");
    if (total == 0) throw ConfigError("composition: total size must be positive");
    const std::size_t n = proportions.size();
    std::vector<std::size_t> counts(n);
    std::vector<double> remainder(n);
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double exact = proportions[c] / sum * static_cast<double>(total);
      counts[c] = static_cast<std::size_t>(std::floor(exact));
      remainder[c] = exact - static_cast<double>(counts[c]);
      assigned += counts[c];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
      if (proportions[order[k]] > 0.0) {
        ++counts[order[k]];
        ++assigned;
      }
    }
    return from_counts(std::move(counts));
  }

  void validate() const {
    if (counts.empty()) throw ConfigError("composition: no classes");
    if (total() == 0) throw ConfigError("composition: at least one class count must be nonzero");
  }

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

  std::vector<double> proportions() const {
    const double t = static_cast<double>(total());
    std::vector<double> p(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) p[c] = static_cast<double>(counts[c]) / t;
    return p;
  }

  std::vector<int> null_classes() const {
    std::vector<int> out;
    for (std::size_t c = 0; c < counts.size(); ++c)
      if (counts[c] == 0) out.push_back(static_cast<int>(c));
    return out;
  }
};

// Random composition with exactly `null_count` null classes. Remaining
// classes get min_share + (1 - K*min_share) * Dirichlet(1) each.
inline CompositionSpec random_composition(std::size_t classes, std::size_t null_count, std::size_t total,
                                          double min_share, Engine& rng) {
  if (null_count >= classes) throw ConfigError("random_composition: at least one class must be present");
  const std::size_t present = classes - null_count;
  if (min_share < 0.0 || min_share * static_cast<double>(present) > 1.0)
    throw ConfigError("random_composition: min_share too large for the number of present classes");
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> p(classes, 0.0);
  double sum = 0.0;
  for (std::size_t k = null_count; k < classes; ++k) {
    p[static_cast<std::size_t>(order[k])] = expo(rng);
    sum += p[static_cast<std::size_t>(order[k])];
  }
  const double free_mass = 1.0 - min_share * static_cast<double>(present);
  for (std::size_t k = null_count; k < classes; ++k) {
    auto& v = p[static_cast<std::size_t>(order[k])];
    v = min_share + free_mass * v / sum;
  }
  return CompositionSpec::from_proportions(p, total);
}

// Server-held, class-balanced samples disjoint from every user.
struct AuxiliarySet {
  Dataset data;
  std::size_t per_class = 0;

  std::size_t class_count() const { return data.class_count; }

  // All auxiliary samples of the listed classes, as one batch.
  Batch batch_for(const std::vector<int>& classes) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (std::find(classes.begin(), classes.end(), data.labels[i]) != classes.end()) rows.push_back(i);
    if (rows.empty()) throw ConfigError("auxiliary: no samples for requested classes");
    return data.subset(rows).as_batch();
  }
};

// ---------------------------------------------------------------------------

struct SyntheticParams {
  std::size_t classes = 10;
  std::size_t dim = 20;
  std::size_t per_class = 100;
  double spread = 4.0;
  // Per-coordinate noise standard deviation relative to the class mean's
  // length; samples are spread * (e_{c mod dim} + noise * z), z ~ N(0, I).
  double noise = 0.15;
};

inline Dataset generate_synthetic(const SyntheticParams& p, std::uint64_t seed) {
  if (p.classes == 0 || p.dim == 0 || p.per_class == 0)
    throw ConfigError("synthetic: classes, dim and per_class must be positive");
  if (!(p.spread >= 0.0) || !(p.noise >= 0.0)) throw ConfigError("synthetic: spread and noise must be >= 0");
  Engine rng = make_engine(seed, "synthetic");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset ds;
  ds.class_count = p.classes;
  const std::size_t n = p.classes * p.per_class;
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p.dim));
  ds.labels.reserve(n);
  ds.ids.reserve(n);
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.classes; ++c) {
    for (std::size_t k = 0; k < p.per_class; ++k, ++row) {
      for (std::size_t d = 0; d < p.dim; ++d) {
        const double mean = d == c % p.dim ? 1.0 : 0.0;
        ds.features(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(d)) =
            p.spread * (mean + p.noise * gauss(rng));
      }
      ds.labels.push_back(static_cast<int>(c));
      ds.ids.push_back(row);
    }
  }
  return ds;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> shuffled_rows_by_class(const Dataset& ds, Engine& rng) {
  auto rows = ds.rows_by_class();
  for (auto& r : rows) std::shuffle(r.begin(), r.end(), rng);
  return rows;
}

}  // namespace detail

// Draws exactly `k_aux` samples of every class without replacement.
inline std::pair<AuxiliarySet, Dataset> reserve_auxiliary(const Dataset& ds, std::size_t k_aux,
                                                          std::uint64_t seed) {
  if (k_aux == 0) throw ConfigError("auxiliary: per-class count must be positive");
  Engine rng = make_engine(seed, "aux");
  const auto rows = detail::shuffled_rows_by_class(ds, rng);
  std::vector<std::size_t> aux_rows, rest_rows;
  for (std::size_t c = 0; c < rows.size(); ++c) {
    if (rows[c].size() < k_aux)
      throw CapacityError("auxiliary: class " + std::to_string(c) + " has " + std::to_string(rows[c].size()) +
                          " samples, " + std::to_string(k_aux) + " requested");
    aux_rows.insert(aux_rows.end(), rows[c].begin(), rows[c].begin() + static_cast<std::ptrdiff_t>(k_aux));
    rest_rows.insert(rest_rows.end(), rows[c].begin() + static_cast<std::ptrdiff_t>(k_aux), rows[c].end());
  }
  std::sort(rest_rows.begin(), rest_rows.end());
  AuxiliarySet aux{ds.subset(aux_rows), k_aux};
  return {std::move(aux), ds.subset(rest_rows)};
}

// User i receives exactly specs[i].counts[c] samples of class c, drawn
// without replacement; no sample is handed out twice.
inline std::vector<Dataset> partition(const Dataset& ds, const std::vector<CompositionSpec>& specs,
                                      std::uint64_t seed) {
  for (std::size_t u = 0; u < specs.size(); ++u) {
    specs[u].validate();
    if (specs[u].counts.size() != ds.class_count)
      throw ConfigError("partition: user " + std::to_string(u) + " spec has " +
                        std::to_string(specs[u].counts.size()) + " classes, dataset has " +
                        std::to_string(ds.class_count));
  }
  Engine rng = make_engine(seed, "partition");
  const auto rows = detail::shuffled_rows_by_class(ds, rng);
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    std::size_t need = 0;
    for (const auto& s : specs) need += s.counts[c];
    if (need > rows[c].size())
      throw CapacityError("partition: class " + std::to_string(c) + " needs " + std::to_string(need) +
                          " samples, only " + std::to_string(rows[c].size()) + " available");
  }
  std::vector<std::size_t> cursor(ds.class_count, 0);
  std::vector<Dataset> users;
  users.reserve(specs.size());
  for (const auto& s : specs) {
    std::vector<std::size_t> take;
    take.reserve(s.total());
    for (std::size_t c = 0; c < ds.class_count; ++c) {
      for (std::size_t k = 0; k < s.counts[c]; ++k) take.push_back(rows[c][cursor[c]++]);
    }
    users.push_back(ds.subset(take));
  }
  return users;
}

// ---------------------------------------------------------------------------
// IDX (MNIST layout): big-endian magic, dimension sizes, raw unsigned bytes.

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError(path + ": truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

inline std::vector<unsigned char> read_bytes(std::istream& in, std::size_t n, const std::string& path) {
  std::vector<unsigned char> buf(n);
  if (n > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    throw FormatError(path + ": truncated payload, expected " + std::to_string(n) + " bytes");
  return buf;
}

}  // namespace detail

// Features are raw bytes / 255. class_count is max label + 1 unless given.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::size_t class_count = 0) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw FormatError(images_path + ": cannot open");
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw FormatError(labels_path + ": cannot open");

  const auto img_magic = detail::read_be32(img, images_path);
  if (img_magic != kIdxImagesMagic) throw FormatError(images_path + ": bad magic number for IDX images");
  const auto lab_magic = detail::read_be32(lab, labels_path);
  if (lab_magic != kIdxLabelsMagic) throw FormatError(labels_path + ": bad magic number for IDX labels");

  const std::size_t n_img = detail::read_be32(img, images_path);
  const std::size_t rows = detail::read_be32(img, images_path);
  const std::size_t cols = detail::read_be32(img, images_path);
  const std::size_t n_lab = detail::read_be32(lab, labels_path);
  if (n_img != n_lab)
    throw FormatError("idx: image count " + std::to_string(n_img) + " != label count " + std::to_string(n_lab));
  const std::size_t dim = rows * cols;
  if (dim == 0) throw FormatError(images_path + ": zero-sized images");

  const auto pixels = detail::read_bytes(img, n_img * dim, images_path);
  const auto raw_labels = detail::read_bytes(lab, n_lab, labels_path);

  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n_img), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n_img; ++i)
    for (std::size_t d = 0; d < dim; ++d)
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = pixels[i * dim + d] / 255.0;
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n_lab; ++i) {
    ds.labels.push_back(raw_labels[i]);
    ds.ids.push_back(i);
    max_label = std::max<std::size_t>(max_label, raw_labels[i]);
  }
  ds.class_count = class_count > 0 ? class_count : max_label + 1;
  for (int y : ds.labels)
    if (static_cast<std::size_t>(y) >= ds.class_count)
      throw FormatError(labels_path + ": label " + std::to_string(y) + " exceeds class count");
  return ds;
}

inline nlohmann::json dataset_manifest(const Dataset& ds, std::uint64_t seed, const std::string& source) {
  return {{"class_counts", ds.class_counts()}, {"seed", seed}, {"source", source}};
}

}  // namespace fedcomp
