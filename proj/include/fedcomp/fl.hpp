#pragma once

// FedAvg simulation. Every round all users start from the broadcast global
// model, train locally with mini-batch SGD and the server aggregates the
// (possibly defended) local models weighted by dataset size.

#include <algorithm>
#include <functional>
#include <numeric>
#include <thread>
#include <vector>

#include "fedcomp/dataset.hpp"
#include "fedcomp/defenses.hpp"
#include "fedcomp/error.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

struct FLConfig {
  std::size_t rounds = 5;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  std::uint64_t seed = 42;
  DefenseConfig defense;
  std::size_t threads = 1;

  void validate() const {
    if (rounds < 1) throw ConfigError("fl.rounds: must be >= 1");
    if (local_epochs < 1) throw ConfigError("fl.local_epochs: must be >= 1");
    if (batch_size < 1) throw ConfigError("fl.batch_size: must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("fl.learning_rate: must be > 0");
    defense.validate();
  }
};

// What the server sees in round t (1-based): the broadcast model
// theta_global^{t-1} and every user's returned model theta_i^t.
struct RoundRecord {
  std::size_t round = 0;
  Model global_prev;
  std::vector<Model> locals;
  std::vector<std::size_t> sizes;
};

struct History {
  std::vector<RoundRecord> rounds;
  Model final_global;
};

// Sample order of one local epoch. Exposed so tests can replay training.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine rng = make_engine(seed, "shuffle", epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// E epochs of shuffled mini-batch SGD starting from `global`.
inline Model local_train(const Model& global, const Dataset& data, double alpha, std::size_t epochs,
                         std::size_t batch_size, std::uint64_t seed) {
  if (data.size() == 0) throw ConfigError("local_train: user dataset is empty");
  if (batch_size == 0) throw ConfigError("local_train: batch size must be >= 1");
  Model model = global;
  Engine dropout_rng = make_engine(seed, "dropout");
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = epoch_order(data.size(), e, seed);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch batch = data.subset(rows).as_batch();
      const auto lg = loss_and_gradients(model, batch, &dropout_rng);
      model = sgd_step(model, lg.grads, alpha);
    }
  }
  return model;
}

// theta = sum_i (D_i / D) theta_i.
inline Model fedavg(const std::vector<Model>& locals, const std::vector<std::size_t>& sizes) {
  if (locals.empty()) throw ConfigError("fedavg: no local models");
  if (locals.size() != sizes.size()) throw ConfigError("fedavg: sizes do not match models");
  double total = 0.0;
  for (auto s : sizes) {
    if (s == 0) throw ConfigError("fedavg: dataset sizes must be positive");
    total += static_cast<double>(s);
  }
  for (const auto& m : locals) require_congruent(locals.front(), m, "fedavg");
  Model out = locals.front();
  for (std::size_t k = 0; k < out.layers.size(); ++k) {
    out.layers[k].weight.setZero();
    out.layers[k].bias.setZero();
    for (std::size_t i = 0; i < locals.size(); ++i) {
      const double w = static_cast<double>(sizes[i]) / total;
      out.layers[k].weight += w * locals[i].layers[k].weight;
      out.layers[k].bias += w * locals[i].layers[k].bias;
    }
  }
  return out;
}

// Local update as seen by the server for one user in one round.
inline Model defended_local_update(const Model& global, const Dataset& data, const FLConfig& cfg,
                                   std::size_t user, std::size_t round) {
  const std::uint64_t user_seed = derive_seed(cfg.seed, "local", user, round);
  switch (cfg.defense.kind) {
    case DefenseKind::none:
      return local_train(global, data, cfg.learning_rate, cfg.local_epochs, cfg.batch_size, user_seed);
    case DefenseKind::dropout: {
      Model local = local_train(dropout_model(global, cfg.defense.rate), data, cfg.learning_rate,
                                cfg.local_epochs, cfg.batch_size, user_seed);
      local.train_dropout = global.train_dropout;
      return local;
    }
    case DefenseKind::dp: {
      const Model local = local_train(global, data, cfg.learning_rate, cfg.local_epochs, cfg.batch_size, user_seed);
      const Vector base = flatten_parameters(global);
      const Vector noisy = apply_dp(flatten_parameters(local) - base, cfg.defense.sigma, cfg.defense.clip_norm,
                                    derive_seed(cfg.seed, "dp", user, round));
      return unflatten_parameters(global, base + noisy);
    }
  }
  return global;
}

using RoundObserver = std::function<void(const RoundRecord&)>;

// Runs cfg.rounds of FedAvg. `observer` sees each record after it is
// complete and cannot alter the simulation.
inline History run_federation(const FLConfig& cfg, const Model& initial, const std::vector<Dataset>& users,
                              const RoundObserver& observer = {}) {
  cfg.validate();
  if (users.empty()) throw ConfigError("fl: at least one user is required");
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (users[u].size() == 0) throw ConfigError("fl: user " + std::to_string(u) + " has no data");
    if (users[u].dim() != initial.input_dim()) throw ConfigError("fl: user data dim does not match model");
  }
  History history;
  Model global = initial;
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    RoundRecord rec;
    rec.round = t;
    rec.global_prev = global;
    rec.locals.resize(users.size());
    rec.sizes.resize(users.size());
    const std::size_t workers = std::clamp<std::size_t>(cfg.threads, 1, users.size());
    auto train_range = [&](std::size_t w) {
      for (std::size_t u = w; u < users.size(); u += workers) {
        rec.locals[u] = defended_local_update(global, users[u], cfg, u, t);
        rec.sizes[u] = users[u].size();
      }
    };
    if (workers == 1) {
      train_range(0);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(train_range, w);
    }
    global = fedavg(rec.locals, rec.sizes);
    if (observer) observer(rec);
    history.rounds.push_back(std::move(rec));
  }
  history.final_global = global;
  return history;
}

}  // namespace fedcomp
