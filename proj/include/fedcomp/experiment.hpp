#pragma once

// Declarative experiments: JSON spec -> data -> FedAvg -> attack -> reports.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fedcomp/attack.hpp"
#include "fedcomp/dataset.hpp"
#include "fedcomp/defenses.hpp"
#include "fedcomp/error.hpp"
#include "fedcomp/fl.hpp"
#include "fedcomp/history_io.hpp"
#include "fedcomp/metrics.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

using nlohmann::json;

struct DatasetSection {
  std::string source = "synthetic";  // "synthetic" | "idx"
  SyntheticParams synthetic = [] {
    SyntheticParams p;
    p.per_class = 0;  // 0 = sized from user demand
    return p;
  }();
  std::size_t test_per_class = 100;
  std::size_t aux_per_class = 10;
  std::string images, labels, test_images, test_labels;  // idx only
  std::size_t classes = 10;
};

struct ModelSection {
  std::vector<std::size_t> hidden{128};
  Activation activation = Activation::relu();
};

struct UsersSection {
  std::size_t size = 1200;
  std::vector<CompositionSpec> compositions;
};

struct AttackSection {
  bool enabled = true;
  std::vector<std::size_t> rounds;  // empty = every round
  std::vector<std::size_t> users;   // empty = every user
  std::size_t multi_round_k = 0;    // 0 = no multi-round fusion
  AttackOptions options;
};

struct ExperimentSpec {
  DatasetSection dataset;
  ModelSection model;
  UsersSection users;
  FLConfig fl;
  AttackSection attack;
  std::string out_dir = "out";
};

// ---------------------------------------------------------------------------
// JSON <-> spec

namespace detail {

inline const json* member(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? nullptr : &*it;
}

template <typename T>
T read_field(const json& obj, const std::string& key, const std::string& path, T fallback) {
  const json* v = member(obj, key);
  if (!v) return fallback;
  const std::string where = path.empty() ? key : path + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v->is_boolean()) throw ConfigError(where + ": expected a boolean");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v->is_string()) throw ConfigError(where + ": expected a string");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v->is_number()) throw ConfigError(where + ": expected a number");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v->is_number_integer() || (std::is_unsigned_v<T> && v->get<long long>() < 0))
      throw ConfigError(where + ": expected a nonnegative integer");
  }
  return v->get<T>();
}

template <typename T>
std::vector<T> read_list(const json& obj, const std::string& key, const std::string& path, std::vector<T> fallback) {
  const json* v = member(obj, key);
  if (!v) return fallback;
  const std::string where = path.empty() ? key : path + "." + key;
  if (!v->is_array()) throw ConfigError(where + ": expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v->size(); ++i) {
    const auto& e = (*v)[i];
    if constexpr (std::is_integral_v<T>) {
      if (!e.is_number_integer() || e.get<long long>() < 0)
        throw ConfigError(where + "[" + std::to_string(i) + "]: expected a nonnegative integer");
    } else {
      if (!e.is_number()) throw ConfigError(where + "[" + std::to_string(i) + "]: expected a number");
    }
    out.push_back(e.get<T>());
  }
  return out;
}

inline const json& section(const json& root, const std::string& key) {
  static const json empty = json::object();
  const json* v = member(root, key);
  if (!v) return empty;
  if (!v->is_object()) throw ConfigError(key + ": expected an object");
  return *v;
}

inline void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError((path.empty() ? "" : path + ".") + it.key() + ": unknown field");
  }
}

}  // namespace detail

inline ExperimentSpec parse_spec(const json& root) {
  using namespace detail;
  if (!root.is_object()) throw ConfigError("spec: expected a JSON object");
  check_keys(root, "", {"$schema", "dataset", "model", "users", "fl", "attack", "defense", "output"});
  ExperimentSpec s;

  const json& d = section(root, "dataset");
  check_keys(d, "dataset", {"source", "classes", "dim", "per_class", "spread", "noise", "test_per_class",
                            "aux_per_class", "images", "labels", "test_images", "test_labels"});
  s.dataset.source = read_field<std::string>(d, "source", "dataset", "synthetic");
  if (s.dataset.source != "synthetic" && s.dataset.source != "idx")
    throw ConfigError("dataset.source: must be \"synthetic\" or \"idx\"");
  s.dataset.classes = read_field<std::size_t>(d, "classes", "dataset", 10);
  s.dataset.synthetic.classes = s.dataset.classes;
  s.dataset.synthetic.dim = read_field<std::size_t>(d, "dim", "dataset", 20);
  s.dataset.synthetic.per_class = read_field<std::size_t>(d, "per_class", "dataset", 0);
  s.dataset.synthetic.spread = read_field<double>(d, "spread", "dataset", 4.0);
  s.dataset.synthetic.noise = read_field<double>(d, "noise", "dataset", 0.15);
  s.dataset.test_per_class = read_field<std::size_t>(d, "test_per_class", "dataset", 100);
  s.dataset.aux_per_class = read_field<std::size_t>(d, "aux_per_class", "dataset", 10);
  s.dataset.images = read_field<std::string>(d, "images", "dataset", "");
  s.dataset.labels = read_field<std::string>(d, "labels", "dataset", "");
  s.dataset.test_images = read_field<std::string>(d, "test_images", "dataset", "");
  s.dataset.test_labels = read_field<std::string>(d, "test_labels", "dataset", "");
  if (s.dataset.classes == 0) throw ConfigError("dataset.classes: must be >= 1");
  if (s.dataset.synthetic.dim == 0) throw ConfigError("dataset.dim: must be >= 1");
  if (s.dataset.aux_per_class == 0) throw ConfigError("dataset.aux_per_class: must be >= 1");
  if (s.dataset.source == "idx") {
    if (s.dataset.images.empty() || s.dataset.labels.empty())
      throw ConfigError("dataset.images: idx source requires images and labels paths");
    for (const auto* p : {&s.dataset.images, &s.dataset.labels, &s.dataset.test_images, &s.dataset.test_labels})
      if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError("dataset: file not found: " + *p);
  }

  const json& m = section(root, "model");
  check_keys(m, "model", {"hidden", "activation", "slope"});
  s.model.hidden = read_list<std::size_t>(m, "hidden", "model", {128});
  const auto act = read_field<std::string>(m, "activation", "model", "relu");
  const double slope = read_field<double>(m, "slope", "model", 0.01);
  if (act != "relu" && act != "leaky_relu") throw ConfigError("model.activation: must be relu or leaky_relu");
  s.model.activation = act == "relu" ? Activation::relu() : Activation::leaky_relu(slope);
  for (auto h : s.model.hidden)
    if (h == 0) throw ConfigError("model.hidden: widths must be >= 1");

  const json& u = section(root, "users");
  check_keys(u, "users", {"size", "compositions"});
  s.users.size = read_field<std::size_t>(u, "size", "users", 1200);
  const json* comps = member(u, "compositions");
  if (!comps || !comps->is_array() || comps->empty())
    throw ConfigError("users.compositions: expected a nonempty array");
  for (std::size_t i = 0; i < comps->size(); ++i) {
    const std::string where = "users.compositions[" + std::to_string(i) + "]";
    const json& c = (*comps)[i];
    try {
      if (c.is_array()) {
        s.users.compositions.push_back(CompositionSpec::from_proportions(c.get<std::vector<double>>(), s.users.size));
      } else if (c.is_object() && member(c, "counts")) {
        s.users.compositions.push_back(CompositionSpec::from_counts(c.at("counts").get<std::vector<std::size_t>>()));
      } else if (c.is_object() && member(c, "proportions")) {
        const auto total = read_field<std::size_t>(c, "size", where, s.users.size);
        s.users.compositions.push_back(
            CompositionSpec::from_proportions(c.at("proportions").get<std::vector<double>>(), total));
      } else {
        throw ConfigError("expected an array of proportions or an object with counts/proportions");
      }
    } catch (const json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (s.users.compositions.back().counts.size() != s.dataset.classes)
      throw ConfigError(where + ": expected " + std::to_string(s.dataset.classes) + " entries");
  }

  const json& f = section(root, "fl");
  check_keys(f, "fl", {"rounds", "local_epochs", "batch_size", "learning_rate", "seed", "threads"});
  s.fl.rounds = read_field<std::size_t>(f, "rounds", "fl", 5);
  s.fl.local_epochs = read_field<std::size_t>(f, "local_epochs", "fl", 1);
  s.fl.batch_size = read_field<std::size_t>(f, "batch_size", "fl", 32);
  s.fl.learning_rate = read_field<double>(f, "learning_rate", "fl", 0.01);
  s.fl.seed = read_field<std::uint64_t>(f, "seed", "fl", 42);
  s.fl.threads = read_field<std::size_t>(f, "threads", "fl", 1);

  const json& def = section(root, "defense");
  check_keys(def, "defense", {"kind", "rate", "sigma", "clip"});
  const auto kind = read_field<std::string>(def, "kind", "defense", "none");
  if (kind == "none") {
    s.fl.defense = DefenseConfig::none();
  } else if (kind == "dropout") {
    s.fl.defense = DefenseConfig::dropout(read_field<double>(def, "rate", "defense", 0.2));
  } else if (kind == "dp") {
    s.fl.defense = DefenseConfig::dp(read_field<double>(def, "sigma", "defense", 1.0),
                                     read_field<double>(def, "clip", "defense", 1.0));
  } else {
    throw ConfigError("defense.kind: must be none, dropout or dp");
  }
  s.fl.validate();

  const json& a = section(root, "attack");
  check_keys(a, "attack", {"enabled", "rounds", "users", "multi_round_k", "threshold", "beta", "epochs",
                           "max_backoffs", "null_removal", "calibrator"});
  s.attack.enabled = read_field<bool>(a, "enabled", "attack", true);
  s.attack.rounds = read_list<std::size_t>(a, "rounds", "attack", {});
  s.attack.users = read_list<std::size_t>(a, "users", "attack", {});
  s.attack.multi_round_k = read_field<std::size_t>(a, "multi_round_k", "attack", 0);
  s.attack.options.threshold = read_field<double>(a, "threshold", "attack", 0.0);
  s.attack.options.decompose.beta = read_field<double>(a, "beta", "attack", 0.05);
  s.attack.options.decompose.epochs = read_field<std::size_t>(a, "epochs", "attack", 1000);
  s.attack.options.decompose.max_backoffs = read_field<std::size_t>(a, "max_backoffs", "attack", 10);
  s.attack.options.null_removal = read_field<bool>(a, "null_removal", "attack", true);
  s.attack.options.decompose.use_calibrator = read_field<bool>(a, "calibrator", "attack", true);
  if (s.attack.options.threshold < 0.0) throw ConfigError("attack.threshold: must be >= 0");
  if (!(s.attack.options.decompose.beta > 0.0)) throw ConfigError("attack.beta: must be > 0");
  if (s.attack.options.decompose.epochs == 0) throw ConfigError("attack.epochs: must be >= 1");
  for (auto r : s.attack.rounds)
    if (r < 1 || r > s.fl.rounds) throw ConfigError("attack.rounds: round " + std::to_string(r) + " outside 1..fl.rounds");
  for (auto id : s.attack.users)
    if (id >= s.users.compositions.size()) throw ConfigError("attack.users: user " + std::to_string(id) + " does not exist");

  const json& o = section(root, "output");
  check_keys(o, "output", {"dir"});
  s.out_dir = read_field<std::string>(o, "dir", "output", "out");
  return s;
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("spec: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("spec: " + path + ": " + e.what());
  }
  return parse_spec(j);
}

// Canonical form: compositions as resolved counts, every default explicit.
inline json spec_to_json(const ExperimentSpec& s) {
  json comps = json::array();
  for (const auto& c : s.users.compositions) comps.push_back({{"counts", c.counts}});
  json defense;
  switch (s.fl.defense.kind) {
    case DefenseKind::none: defense = {{"kind", "none"}}; break;
    case DefenseKind::dropout: defense = {{"kind", "dropout"}, {"rate", s.fl.defense.rate}}; break;
    case DefenseKind::dp:
      defense = {{"kind", "dp"}, {"sigma", s.fl.defense.sigma}, {"clip", s.fl.defense.clip_norm}};
      break;
  }
  json dataset = {{"source", s.dataset.source},
                  {"classes", s.dataset.classes},
                  {"dim", s.dataset.synthetic.dim},
                  {"per_class", s.dataset.synthetic.per_class},
                  {"spread", s.dataset.synthetic.spread},
                  {"noise", s.dataset.synthetic.noise},
                  {"test_per_class", s.dataset.test_per_class},
                  {"aux_per_class", s.dataset.aux_per_class}};
  if (s.dataset.source == "idx") {
    dataset["images"] = s.dataset.images;
    dataset["labels"] = s.dataset.labels;
    dataset["test_images"] = s.dataset.test_images;
    dataset["test_labels"] = s.dataset.test_labels;
  }
  return {
      {"dataset", dataset},
      {"model",
       {{"hidden", s.model.hidden}, {"activation", to_string(s.model.activation)}, {"slope", s.model.activation.slope}}},
      {"users", {{"size", s.users.size}, {"compositions", comps}}},
      {"fl",
       {{"rounds", s.fl.rounds},
        {"local_epochs", s.fl.local_epochs},
        {"batch_size", s.fl.batch_size},
        {"learning_rate", s.fl.learning_rate},
        {"seed", s.fl.seed},
        {"threads", s.fl.threads}}},
      {"defense", defense},
      {"attack",
       {{"enabled", s.attack.enabled},
        {"rounds", s.attack.rounds},
        {"users", s.attack.users},
        {"multi_round_k", s.attack.multi_round_k},
        {"threshold", s.attack.options.threshold},
        {"beta", s.attack.options.decompose.beta},
        {"epochs", s.attack.options.decompose.epochs},
        {"max_backoffs", s.attack.options.decompose.max_backoffs},
        {"null_removal", s.attack.options.null_removal},
        {"calibrator", s.attack.options.decompose.use_calibrator}}},
      {"output", {{"dir", s.out_dir}}},
  };
}

// Digest of the canonical spec, excluding settings that never change
// results (thread count, output directory).
inline std::uint64_t spec_digest(const ExperimentSpec& s) {
  json j = spec_to_json(s);
  j["fl"].erase("threads");
  j.erase("output");
  return digest(j.dump());
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Reference configuration: 10 synthetic classes, 10 users whose
// compositions are fixed uneven mixtures in percent (rows sum to 100).

inline std::vector<std::vector<double>> reference_proportions() {
  return {
      {10, 10, 10, 10, 10, 10, 10, 10, 10, 10},
      {6.67, 10, 8.33, 7.5, 13.33, 15.83, 5.83, 10, 12.5, 10},
      {15, 15.83, 7.5, 5, 15, 12.5, 13.33, 6.67, 4.17, 5},
      {13.33, 3.33, 2.5, 18.33, 10, 13.33, 5.83, 1.67, 8.33, 23.33},
      {5, 18.33, 0, 8.33, 10, 12.5, 25, 8.33, 6.67, 5.83},
      {6.67, 10.83, 15, 5, 16.67, 0, 12.5, 8.33, 25, 0},
      {16.67, 7.5, 13.33, 0, 7.5, 25, 0, 0, 26.67, 3.33},
      {0, 0, 33.33, 5, 0, 0, 26.67, 3.33, 0, 31.67},
      {0, 0, 0, 41.67, 0, 8.33, 0, 0, 0, 50},
      {0, 0, 0, 0, 0, 0, 0, 100, 0, 0},
  };
}

inline ExperimentSpec reference_spec() {
  ExperimentSpec s;
  s.dataset.synthetic.noise = 0.15;
  for (const auto& p : reference_proportions())
    s.users.compositions.push_back(CompositionSpec::from_proportions(p, s.users.size));
  s.fl.rounds = 5;
  s.fl.learning_rate = 0.01;
  s.fl.seed = 42;
  s.attack.rounds = {2, 3, 4, 5};
  s.attack.multi_round_k = 4;
  s.out_dir = "out";
  return s;
}

// ---------------------------------------------------------------------------
// Data preparation and simulation

struct PreparedData {
  Dataset test;
  AuxiliarySet aux;
  std::vector<Dataset> users;
  std::vector<Composition> truths;
  json manifest;
};

inline PreparedData prepare_data(const ExperimentSpec& s) {
  const std::uint64_t seed = s.fl.seed;
  const std::size_t n = s.dataset.classes;
  PreparedData out;
  Dataset full;
  if (s.dataset.source == "synthetic") {
    SyntheticParams p = s.dataset.synthetic;
    p.classes = n;
    if (p.per_class == 0) {
      std::size_t demand = 0;
      for (std::size_t c = 0; c < n; ++c) {
        std::size_t need = 0;
        for (const auto& comp : s.users.compositions) need += comp.counts[c];
        demand = std::max(demand, need);
      }
      p.per_class = demand + s.dataset.aux_per_class;
    }
    full = generate_synthetic(p, seed);
    SyntheticParams tp = p;
    tp.per_class = std::max<std::size_t>(1, s.dataset.test_per_class);
    out.test = generate_synthetic(tp, derive_seed(seed, "test"));
  } else {
    full = load_idx(s.dataset.images, s.dataset.labels, n);
    if (!s.dataset.test_images.empty() && !s.dataset.test_labels.empty())
      out.test = load_idx(s.dataset.test_images, s.dataset.test_labels, n);
  }
  auto [aux, rest] = reserve_auxiliary(full, s.dataset.aux_per_class, seed);
  out.aux = std::move(aux);
  out.users = partition(rest, s.users.compositions, seed);
  for (const auto& c : s.users.compositions) out.truths.push_back(c.proportions());
  out.manifest = dataset_manifest(full, seed, s.dataset.source);
  return out;
}

inline Model initial_model(const ExperimentSpec& s, std::size_t input_dim) {
  return make_model(mlp_specs(input_dim, s.model.hidden, s.dataset.classes, s.model.activation),
                    s.dataset.classes, s.fl.seed);
}

struct Simulation {
  PreparedData data;
  History history;
  std::vector<double> accuracy;  // global test accuracy after each round
};

inline Simulation simulate(const ExperimentSpec& s, const RoundObserver& observer = {}) {
  Simulation sim;
  sim.data = prepare_data(s);
  const Model init = initial_model(s, sim.data.users.front().dim());
  sim.history = run_federation(s.fl, init, sim.data.users, observer);
  if (sim.data.test.size() > 0) {
    for (std::size_t t = 1; t < sim.history.rounds.size(); ++t)
      sim.accuracy.push_back(accuracy(sim.history.rounds[t].global_prev, sim.data.test.features, sim.data.test.labels));
    sim.accuracy.push_back(accuracy(sim.history.final_global, sim.data.test.features, sim.data.test.labels));
  }
  return sim;
}

// Everything the server keeps besides the round snapshots.
inline json history_metadata(const ExperimentSpec& s, const Simulation& sim) {
  json aux_features = json::array();
  for (Eigen::Index i = 0; i < sim.data.aux.data.features.rows(); ++i) {
    std::vector<double> row(sim.data.aux.data.features.cols());
    for (Eigen::Index j = 0; j < sim.data.aux.data.features.cols(); ++j) row[static_cast<std::size_t>(j)] = sim.data.aux.data.features(i, j);
    aux_features.push_back(row);
  }
  return {{"format", "fedcomp-history/1"},
          {"spec", spec_to_json(s)},
          {"spec_digest", hex64(spec_digest(s))},
          {"model", model_shape_json(sim.history.final_global)},
          {"aux", {{"per_class", sim.data.aux.per_class},
                   {"labels", sim.data.aux.data.labels},
                   {"ids", sim.data.aux.data.ids},
                   {"features", aux_features}}},
          {"truths", sim.data.truths},
          {"accuracy", sim.accuracy},
          {"dataset", sim.data.manifest}};
}

inline AuxiliarySet aux_from_metadata(const json& meta, std::size_t classes) {
  const json& a = meta.at("aux");
  AuxiliarySet aux;
  aux.per_class = a.at("per_class").get<std::size_t>();
  aux.data.class_count = classes;
  aux.data.labels = a.at("labels").get<std::vector<int>>();
  aux.data.ids = a.at("ids").get<std::vector<std::uint64_t>>();
  const auto rows = a.at("features").get<std::vector<std::vector<double>>>();
  const std::size_t dim = rows.empty() ? 0 : rows.front().size();
  aux.data.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j)
      aux.data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return aux;
}

// ---------------------------------------------------------------------------
// Attacks over a recorded history

struct MultiRoundEntry {
  std::size_t user = 0;
  std::vector<std::size_t> rounds;
  Composition composition;
  std::optional<DistanceTriple> distance;
};

struct AttackRun {
  std::vector<AttackEntry> entries;  // ordered by (round, user)
  std::vector<MultiRoundEntry> multi_round;
};

inline AttackRun attack_history(const History& history, const AuxiliarySet& aux,
                                const std::vector<Composition>& truths, const ExperimentSpec& s) {
  AttackRun run;
  std::vector<std::size_t> rounds = s.attack.rounds;
  if (rounds.empty())
    for (const auto& r : history.rounds) rounds.push_back(r.round);
  std::vector<std::pair<const RoundRecord*, std::size_t>> jobs;
  for (auto t : rounds) {
    auto it = std::find_if(history.rounds.begin(), history.rounds.end(), [&](const RoundRecord& r) { return r.round == t; });
    if (it == history.rounds.end()) throw ConfigError("attack.rounds: round " + std::to_string(t) + " not in history");
    std::vector<std::size_t> users = s.attack.users;
    if (users.empty())
      for (std::size_t u = 0; u < it->locals.size(); ++u) users.push_back(u);
    for (auto u : users) jobs.emplace_back(&*it, u);
  }
  run.entries.resize(jobs.size());
  const std::size_t workers = std::clamp<std::size_t>(s.fl.threads, 1, std::max<std::size_t>(1, jobs.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < jobs.size(); i += workers) {
      const auto [rec, u] = jobs[i];
      std::optional<Composition> truth;
      if (u < truths.size()) truth = truths[u];
      run.entries[i] = attack_single_round(*rec, u, aux, s.fl.learning_rate, s.attack.options, truth);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }

  if (s.attack.multi_round_k > 0) {
    std::map<std::size_t, std::vector<const AttackEntry*>> by_user;
    for (const auto& e : run.entries)
      if (e.ok()) by_user[e.user].push_back(&e);
    for (auto& [user, list] : by_user) {
      std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->round < b->round; });
      MultiRoundEntry m;
      m.user = user;
      std::vector<Composition> comps;
      for (std::size_t i = 0; i < list.size() && i < s.attack.multi_round_k; ++i) {
        m.rounds.push_back(list[i]->round);
        comps.push_back(list[i]->decomposition.composition);
      }
      m.composition = attack_multi_round(comps);
      if (user < truths.size()) m.distance = distances(m.composition, truths[user]);
      run.multi_round.push_back(std::move(m));
    }
  }
  return run;
}

struct Aggregate {
  std::size_t attacks = 0;
  std::size_t anomalies = 0;
  std::size_t null_correct = 0;
  double l1 = 0.0, l2 = 0.0, linf = 0.0;  // means over non-anomalous attacks

  double null_accuracy() const {
    return attacks == 0 ? 0.0 : static_cast<double>(null_correct) / static_cast<double>(attacks);
  }
};

template <typename Pred>
Aggregate aggregate(const std::vector<AttackEntry>& entries, Pred keep) {
  Aggregate a;
  std::size_t scored = 0;
  for (const auto& e : entries) {
    if (!keep(e)) continue;
    ++a.attacks;
    if (!e.ok()) {
      ++a.anomalies;
      continue;
    }
    if (e.null_classes_correct.value_or(false)) ++a.null_correct;
    if (e.distance) {
      a.l1 += e.distance->l1;
      a.l2 += e.distance->l2;
      a.linf += e.distance->linf;
      ++scored;
    }
  }
  if (scored > 0) {
    a.l1 /= static_cast<double>(scored);
    a.l2 /= static_cast<double>(scored);
    a.linf /= static_cast<double>(scored);
  }
  return a;
}

inline Aggregate aggregate(const std::vector<AttackEntry>& entries) {
  return aggregate(entries, [](const AttackEntry&) { return true; });
}

// ---------------------------------------------------------------------------
// Reports

inline std::string sig6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline json entry_json(const AttackEntry& e) {
  json j = {{"user", e.user}, {"round", e.round}};
  j["anomaly"] = e.anomaly ? json(*e.anomaly) : json(nullptr);
  if (!e.ok()) return j;
  j["C_miss"] = e.nulls.missing;
  j["threshold"] = e.nulls.threshold;
  j["composition"] = e.decomposition.composition;
  j["eta"] = e.decomposition.eta;
  j["eta_u"] = e.decomposition.eta_u;
  j["loss"] = e.decomposition.loss;
  j["backoffs"] = e.decomposition.backoffs;
  j["monotone_violations"] = e.decomposition.monotone_violations;
  if (e.distance) {
    j["L1"] = e.distance->l1;
    j["L2"] = e.distance->l2;
    j["Linf"] = e.distance->linf;
  }
  if (e.null_classes_correct) j["cmiss_correct"] = *e.null_classes_correct;
  return j;
}

inline json results_json(const ExperimentSpec& s, const AttackRun& run, const std::string& label = "baseline") {
  json entries = json::array();
  for (const auto& e : run.entries) entries.push_back(entry_json(e));
  json multi = json::array();
  for (const auto& m : run.multi_round) {
    json j = {{"user", m.user}, {"rounds", m.rounds}, {"composition", m.composition}};
    if (m.distance) {
      j["L1"] = m.distance->l1;
      j["L2"] = m.distance->l2;
      j["Linf"] = m.distance->linf;
    }
    multi.push_back(j);
  }
  return {{"format", "fedcomp-results/1"},
          {"spec_digest", hex64(spec_digest(s))},
          {"seed", s.fl.seed},
          {"mode",
           {{"label", label},
            {"null_removal", s.attack.options.null_removal},
            {"calibrator", s.attack.options.decompose.use_calibrator}}},
          {"entries", entries},
          {"multi_round", multi}};
}

// Columns: user,round,L1,L2,Linf,cmiss_correct (floats with 6 significant
// digits; anomalous attacks carry nan distances and cmiss_correct=false).
inline std::string results_csv(const AttackRun& run) {
  std::ostringstream out;
  out << "user,round,L1,L2,Linf,cmiss_correct\n";
  for (const auto& e : run.entries) {
    out << e.user << ',' << e.round << ',';
    if (e.ok() && e.distance)
      out << sig6(e.distance->l1) << ',' << sig6(e.distance->l2) << ',' << sig6(e.distance->linf) << ',';
    else
      out << "nan,nan,nan,";
    out << (e.ok() && e.null_classes_correct.value_or(false) ? "true" : "false") << '\n';
  }
  return out.str();
}

inline std::string percent_cell(double v) {
  if (v == 0.0) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v;
  return s.str();
}

// Per user: ground-truth row over one inferred row per attacked round, in
// percent, '-' for null classes, then L1/L2/Linf (x 10^-2).
inline std::string summary_text(const ExperimentSpec& s, const AttackRun& run) {
  std::ostringstream out;
  const std::size_t n = s.dataset.classes;
  out << "Data composition (%) per user: ground truth over inferred rows\n";
  out << "spec " << hex64(spec_digest(s)) << "  seed " << s.fl.seed << "  null_removal "
      << (s.attack.options.null_removal ? "on" : "off") << "  calibrator "
      << (s.attack.options.decompose.use_calibrator ? "on" : "off") << "\n\n";
  auto row = [&](const std::string& label, const Composition& c, const std::string& tail) {
    out << std::left << std::setw(10) << label;
    for (std::size_t k = 0; k < n; ++k) out << std::right << std::setw(8) << percent_cell(c[k]);
    out << "  " << tail << '\n';
  };
  out << std::left << std::setw(10) << "class";
  for (std::size_t k = 0; k < n; ++k) out << std::right << std::setw(8) << k;
  out << "  L1/L2/Linf (x1e-2)\n";
  std::map<std::size_t, std::vector<const AttackEntry*>> by_user;
  for (const auto& e : run.entries) by_user[e.user].push_back(&e);
  for (const auto& [user, list] : by_user) {
    out << "user " << user + 1 << '\n';
    if (list.front()->truth) row("  truth", *list.front()->truth, "");
    for (const auto* e : list) {
      const std::string label = "  r" + std::to_string(e->round);
      if (!e->ok()) {
        out << std::left << std::setw(10) << label << "anomaly: " << *e->anomaly << '\n';
        continue;
      }
      std::string tail;
      if (e->distance) {
        std::ostringstream t;
        t << std::fixed << std::setprecision(2) << 100 * e->distance->l1 << '/' << 100 * e->distance->l2 << '/'
          << 100 * e->distance->linf;
        tail = t.str();
      }
      row(label, e->decomposition.composition, tail);
    }
  }
  for (const auto& m : run.multi_round) {
    std::ostringstream t;
    if (m.distance)
      t << std::fixed << std::setprecision(2) << 100 * m.distance->l1 << '/' << 100 * m.distance->l2 << '/'
        << 100 * m.distance->linf;
    row("u" + std::to_string(m.user + 1) + " k=" + std::to_string(m.rounds.size()), m.composition, t.str());
  }
  const auto agg = aggregate(run.entries);
  out << "\nattacks " << agg.attacks << "  anomalies " << agg.anomalies << "  null-class accuracy "
      << sig6(agg.null_accuracy()) << "  mean L1 " << sig6(agg.l1) << "  mean L2 " << sig6(agg.l2)
      << "  mean Linf " << sig6(agg.linf) << '\n';
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline void write_reports(const std::filesystem::path& dir, const ExperimentSpec& s, const AttackRun& run,
                          const std::string& label = "baseline") {
  std::filesystem::create_directories(dir);
  write_text(dir / "results.json", results_json(s, run, label).dump(2) + "\n");
  write_text(dir / "results.csv", results_csv(run));
  write_text(dir / "summary.txt", summary_text(s, run));
}

// ---------------------------------------------------------------------------
// Single-shot run and sweeps

struct ExperimentRun {
  Simulation sim;
  AttackRun attack;
};

inline ExperimentRun run_experiment(const ExperimentSpec& s) {
  ExperimentRun r;
  r.sim = simulate(s);
  if (s.attack.enabled) r.attack = attack_history(r.sim.history, r.sim.data.aux, r.sim.data.truths, s);
  return r;
}

// The first k stored samples of each class.
inline AuxiliarySet truncate_aux(const AuxiliarySet& aux, std::size_t k) {
  if (k == 0 || k > aux.per_class)
    throw ConfigError("aux count " + std::to_string(k) + " outside 1.." + std::to_string(aux.per_class));
  std::vector<std::size_t> rows;
  std::vector<std::size_t> taken(aux.data.class_count, 0);
  for (std::size_t i = 0; i < aux.data.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(aux.data.labels[i])];
    if (t < k) {
      rows.push_back(i);
      ++t;
    }
  }
  return {aux.data.subset(rows), k};
}

struct SweepVariant {
  std::string factor;  // "baseline", "null_removal", "calibrator", "aux_count", "last_layer", "dp", "dropout"
  std::string value;
  ExperimentSpec spec;
  AttackRun attack;
  std::vector<double> accuracy;
};

struct AblationOptions {
  bool no_null_removal = false;
  bool no_calibrator = false;
  std::vector<std::size_t> aux_counts;
  std::vector<std::size_t> last_layer;
};

// Attack-only variants reuse the baseline history. The aux-count sweep
// reserves the largest count once and truncates, so FL training is shared.
inline std::vector<SweepVariant> ablation_sweep(const ExperimentSpec& base, const AblationOptions& opt) {
  std::vector<SweepVariant> out;
  ExperimentSpec s = base;
  if (!opt.aux_counts.empty())
    s.dataset.aux_per_class = std::max(s.dataset.aux_per_class,
                                       *std::max_element(opt.aux_counts.begin(), opt.aux_counts.end()));
  const Simulation sim = simulate(s);
  const AuxiliarySet base_aux = truncate_aux(sim.data.aux, base.dataset.aux_per_class);
  auto attack_with = [&](const std::string& factor, const std::string& value, ExperimentSpec v, const AuxiliarySet& aux) {
    SweepVariant var{factor, value, v, attack_history(sim.history, aux, sim.data.truths, v), sim.accuracy};
    out.push_back(std::move(var));
  };
  attack_with("baseline", "-", base, base_aux);
  if (opt.no_null_removal) {
    ExperimentSpec v = base;
    v.attack.options.null_removal = false;
    attack_with("null_removal", "off", v, base_aux);
  }
  if (opt.no_calibrator) {
    ExperimentSpec v = base;
    v.attack.options.decompose.use_calibrator = false;
    attack_with("calibrator", "off", v, base_aux);
  }
  for (auto k : opt.aux_counts) {
    ExperimentSpec v = base;
    v.dataset.aux_per_class = k;
    attack_with("aux_count", std::to_string(k), v, truncate_aux(sim.data.aux, k));
  }
  for (auto w : opt.last_layer) {
    if (w == 0) throw ConfigError("ablate: last-layer width must be >= 1");
    ExperimentSpec v = base;
    if (v.model.hidden.empty()) throw ConfigError("ablate: model has no hidden layer to resize");
    v.model.hidden.back() = w;
    ExperimentRun r = run_experiment(v);
    out.push_back({"last_layer", std::to_string(w), v, std::move(r.attack), r.sim.accuracy});
  }
  return out;
}

inline std::vector<SweepVariant> defense_sweep(const ExperimentSpec& base, const std::vector<double>& dp_sigmas,
                                               const std::vector<double>& dropout_rates, double clip) {
  std::vector<SweepVariant> out;
  auto run_variant = [&](const std::string& factor, const std::string& value, const ExperimentSpec& v) {
    ExperimentRun r = run_experiment(v);
    out.push_back({factor, value, v, std::move(r.attack), r.sim.accuracy});
  };
  run_variant("baseline", "-", base);
  for (double sigma : dp_sigmas) {
    ExperimentSpec v = base;
    v.fl.defense = DefenseConfig::dp(sigma, clip);
    v.fl.validate();
    run_variant("dp", sig6(sigma), v);
  }
  for (double rate : dropout_rates) {
    ExperimentSpec v = base;
    v.fl.defense = DefenseConfig::dropout(rate);
    v.fl.validate();
    run_variant("dropout", sig6(rate), v);
  }
  return out;
}

// Columns: factor,value,attacks,anomalies,cmiss_accuracy,L1,L2,Linf,final_accuracy
inline std::string sweep_csv(const std::vector<SweepVariant>& variants) {
  std::ostringstream out;
  out << "factor,value,attacks,anomalies,cmiss_accuracy,L1,L2,Linf,final_accuracy\n";
  for (const auto& v : variants) {
    const auto a = aggregate(v.attack.entries);
    out << v.factor << ',' << v.value << ',' << a.attacks << ',' << a.anomalies << ',' << sig6(a.null_accuracy()) << ','
        << sig6(a.l1) << ',' << sig6(a.l2) << ',' << sig6(a.linf) << ','
        << (v.accuracy.empty() ? std::string("nan") : sig6(v.accuracy.back())) << '\n';
  }
  return out.str();
}

}  // namespace fedcomp
