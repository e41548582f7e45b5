// fedcomp: run FedAvg simulations, record histories and infer user data
// compositions from the recorded local updates.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "fedcomp/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedcomp;

namespace {

struct GlobalFlags {
  std::string spec_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool strict = false;
  std::optional<std::size_t> threads;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("fedcomp");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* level = std::getenv("DECAF_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

ExperimentSpec resolve_spec(const GlobalFlags& g) {
  ExperimentSpec s = g.spec_path.empty() ? reference_spec() : load_spec(g.spec_path);
  if (g.seed) s.fl.seed = *g.seed;
  if (g.threads) s.fl.threads = std::max<std::size_t>(1, *g.threads);
  if (!g.out.empty()) s.out_dir = g.out;
  spdlog::debug("spec digest {}", hex64(spec_digest(s)));
  return s;
}

fs::path artifact_dir(const ExperimentSpec& s, const std::string& cmd) {
  fs::path dir = fs::path(s.out_dir) / (cmd + "-seed" + std::to_string(s.fl.seed));
  fs::create_directories(dir);
  return dir;
}

json fl_json(const ExperimentSpec& s, const Simulation& sim) {
  return {{"spec_digest", hex64(spec_digest(s))},
          {"seed", s.fl.seed},
          {"rounds", s.fl.rounds},
          {"users", sim.data.users.size()},
          {"accuracy", sim.accuracy},
          {"final_model_digest", hex64(digest(std::string_view(
                                     reinterpret_cast<const char*>(flatten_parameters(sim.history.final_global).data()),
                                     sim.history.final_global.parameter_count() * sizeof(double))))},
          {"dataset", sim.data.manifest}};
}

int finish(const AttackRun& run, bool strict) {
  const auto agg = aggregate(run.entries);
  spdlog::info("{} attacks, {} anomalies, null-class accuracy {}, mean L1 {}, mean Linf {}", agg.attacks,
               agg.anomalies, sig6(agg.null_accuracy()), sig6(agg.l1), sig6(agg.linf));
  for (const auto& e : run.entries)
    if (!e.ok()) spdlog::warn("user {} round {}: {}", e.user, e.round, *e.anomaly);
  return strict && agg.anomalies > 0 ? 2 : 0;
}

int cmd_run(const GlobalFlags& g) {
  const ExperimentSpec s = resolve_spec(g);
  const auto dir = artifact_dir(s, "run");
  spdlog::info("simulating {} users for {} rounds", s.users.compositions.size(), s.fl.rounds);
  const ExperimentRun r = run_experiment(s);
  write_text(dir / "fl.json", fl_json(s, r.sim).dump(2) + "\n");
  write_reports(dir, s, r.attack);
  spdlog::info("wrote {}", dir.string());
  return finish(r.attack, g.strict);
}

int cmd_simulate(const GlobalFlags& g) {
  const ExperimentSpec s = resolve_spec(g);
  const auto dir = artifact_dir(s, "simulate");
  const Simulation sim = simulate(s, [](const RoundRecord& r) { spdlog::debug("round {} recorded", r.round); });
  write_history((dir / "history.bin").string(), {history_metadata(s, sim), sim.history});
  write_text(dir / "fl.json", fl_json(s, sim).dump(2) + "\n");
  spdlog::info("wrote {}", dir.string());
  return 0;
}

int cmd_attack(const GlobalFlags& g, const std::string& history_path) {
  if (!fs::exists(history_path)) throw ConfigError("attack: history file not found: " + history_path);
  const HistoryFile file = read_history(history_path);
  ExperimentSpec s = parse_spec(file.metadata.at("spec"));
  if (g.threads) s.fl.threads = std::max<std::size_t>(1, *g.threads);
  if (!g.out.empty()) s.out_dir = g.out;
  if (g.seed && *g.seed != s.fl.seed) spdlog::warn("--seed ignored: the history was recorded with seed {}", s.fl.seed);
  const auto aux = aux_from_metadata(file.metadata, s.dataset.classes);
  const auto truths = file.metadata.at("truths").get<std::vector<Composition>>();
  const AttackRun run = attack_history(file.history, aux, truths, s);
  const auto dir = artifact_dir(s, "attack");
  write_reports(dir, s, run);
  spdlog::info("wrote {}", dir.string());
  return finish(run, g.strict);
}

int write_sweep(const GlobalFlags& g, const ExperimentSpec& s, const std::string& cmd,
                const std::vector<SweepVariant>& variants) {
  const auto dir = artifact_dir(s, cmd);
  for (const auto& v : variants)
    write_reports(dir / (v.factor + (v.value == "-" ? "" : "-" + v.value)), v.spec, v.attack, v.factor);
  const std::string table = sweep_csv(variants);
  write_text(dir / (cmd == "ablate" ? "ablation.csv" : "defense.csv"), table);
  std::cout << table;
  int status = 0;
  for (const auto& v : variants) status = std::max(status, finish(v.attack, g.strict));
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Data-composition inference against FedAvg local updates"};
  app.require_subcommand(1);
  GlobalFlags g;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  app.add_option("--spec", g.spec_path, "experiment spec (JSON); defaults to the built-in reference config")
      ->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output root directory");
  auto* seed_opt = app.add_option("--seed", seed, "override fl.seed");
  app.add_flag("--strict", g.strict, "exit with status 2 if any attack reports an anomaly");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "simulate and attack in one pass");
  auto* sim = app.add_subcommand("simulate", "run FL only and save the round history");
  auto* atk = app.add_subcommand("attack", "attack a saved round history");
  std::string history_path;
  atk->add_option("--history", history_path, "history.bin written by simulate")->required();

  auto* abl = app.add_subcommand("ablate", "ablation sweeps (all of them when no flag is given)");
  AblationOptions ab;
  abl->add_option("--aux-counts", ab.aux_counts, "auxiliary samples per class")->delimiter(',');
  abl->add_option("--last-layer", ab.last_layer, "input widths of the last layer")->delimiter(',');
  abl->add_flag("--no-null-removal", ab.no_null_removal, "attack without null-class removal");
  abl->add_flag("--no-calibrator", ab.no_calibrator, "decompose without the calibrator");

  auto* def = app.add_subcommand("defend", "defense sweep (DP noise multipliers and dropout rates)");
  std::vector<double> sigmas, rates;
  double clip = 1.0;
  def->add_option("--dp-sigmas", sigmas, "DP noise multipliers")->delimiter(',');
  def->add_option("--dropout-rates", rates, "dropout rates")->delimiter(',');
  def->add_option("--clip", clip, "DP clipping norm")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count()) g.seed = seed;
  if (threads_opt->count()) g.threads = threads;

  try {
    if (*run) return cmd_run(g);
    if (*sim) return cmd_simulate(g);
    if (*atk) return cmd_attack(g, history_path);
    if (*abl) {
      if (!ab.no_null_removal && !ab.no_calibrator && ab.aux_counts.empty() && ab.last_layer.empty())
        ab = {true, true, {2, 5, 10, 30}, {128, 256, 512, 1024}};
      const ExperimentSpec s = resolve_spec(g);
      return write_sweep(g, s, "ablate", ablation_sweep(s, ab));
    }
    if (*def) {
      if (sigmas.empty() && rates.empty()) {
        sigmas = {0.1, 0.25, 1, 4, 16};
        rates = {0.2};
      }
      const ExperimentSpec s = resolve_spec(g);
      return write_sweep(g, s, "defend", defense_sweep(s, sigmas, rates, clip));
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
