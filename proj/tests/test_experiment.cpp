#include <gtest/gtest.h>

#include "fedcomp/experiment.hpp"

using namespace fedcomp;

namespace {

json small_spec() {
  return json::parse(R"({
    "dataset": {"classes": 3, "dim": 6, "aux_per_class": 4, "test_per_class": 10},
    "model": {"hidden": [12]},
    "users": {"size": 90, "compositions": [[1, 1, 1], {"counts": [30, 0, 30]}, {"proportions": [0, 1, 0], "size": 40}]},
    "fl": {"rounds": 2, "seed": 3},
    "attack": {"multi_round_k": 2}
  })");
}

std::string error_of(const json& j) {
  try {
    parse_spec(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Spec, ParsesAllCompositionForms) {
  const auto s = parse_spec(small_spec());
  ASSERT_EQ(s.users.compositions.size(), 3u);
  EXPECT_EQ(s.users.compositions[0].counts, (std::vector<std::size_t>{30, 30, 30}));
  EXPECT_EQ(s.users.compositions[1].counts, (std::vector<std::size_t>{30, 0, 30}));
  EXPECT_EQ(s.users.compositions[2].counts, (std::vector<std::size_t>{0, 40, 0}));
  EXPECT_EQ(s.fl.learning_rate, 0.01);
  EXPECT_EQ(s.dataset.synthetic.per_class, 0u);
}

TEST(Spec, ErrorsCarryFieldPaths) {
  auto j = small_spec();
  j["fl"]["rounds"] = "five";
  EXPECT_NE(error_of(j).find("fl.rounds"), std::string::npos);
  j = small_spec();
  j["users"]["compositions"][1] = {{"counts", {1, 2}}};
  EXPECT_NE(error_of(j).find("users.compositions[1]"), std::string::npos);
  j = small_spec();
  j["model"]["widths"] = {3};
  EXPECT_NE(error_of(j).find("model.widths"), std::string::npos);
  j = small_spec();
  j["attack"]["rounds"] = {3};
  EXPECT_NE(error_of(j).find("attack.rounds"), std::string::npos);
  j = small_spec();
  j["defense"] = {{"kind", "dp"}, {"sigma", -1}};
  EXPECT_NE(error_of(j).find("defense.sigma"), std::string::npos);
  j = small_spec();
  j["dataset"] = {{"source", "idx"}, {"images", "/nonexistent/a"}, {"labels", "/nonexistent/b"}};
  EXPECT_NE(error_of(j).find("not found"), std::string::npos);
}

TEST(Spec, CanonicalJsonRoundTrips) {
  const auto s = parse_spec(small_spec());
  const auto j = spec_to_json(s);
  EXPECT_EQ(spec_to_json(parse_spec(j)), j);
  EXPECT_EQ(spec_digest(parse_spec(j)), spec_digest(s));
  auto t = s;
  t.fl.threads = 4;
  t.out_dir = "elsewhere";
  EXPECT_EQ(spec_digest(t), spec_digest(s));
  t.fl.seed = 4;
  EXPECT_NE(spec_digest(t), spec_digest(s));
}

TEST(Spec, ReferenceMatchesShippedConfig) {
  const auto shipped = load_spec(std::string(FEDCOMP_SOURCE_DIR) + "/configs/reference.json");
  EXPECT_EQ(spec_digest(shipped), spec_digest(reference_spec()));
}

TEST(Experiment, CsvHasOneRowPerAttackedUserRound) {
  auto j = small_spec();
  j["fl"]["rounds"] = 1;
  j["users"]["compositions"] = {{1, 2, 3}};
  const auto s = parse_spec(j);
  const auto r = run_experiment(s);
  const auto csv = results_csv(r.attack);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "user,round,L1,L2,Linf,cmiss_correct");
}

TEST(Experiment, ResultsAreDeterministicAcrossThreadCounts) {
  auto s = parse_spec(small_spec());
  const auto a = results_json(s, run_experiment(s).attack).dump();
  s.fl.threads = 3;
  const auto b = results_json(s, run_experiment(s).attack).dump();
  EXPECT_EQ(a, b);
}

TEST(Experiment, AttackingAHistoryReloadedFromMetadataMatches) {
  const auto s = parse_spec(small_spec());
  const auto sim = simulate(s);
  const auto meta = history_metadata(s, sim);
  const auto aux = aux_from_metadata(meta, s.dataset.classes);
  EXPECT_EQ(aux.data.features, sim.data.aux.data.features);
  EXPECT_EQ(aux.data.labels, sim.data.aux.data.labels);
  const auto direct = attack_history(sim.history, sim.data.aux, sim.data.truths, s);
  const auto replay = attack_history(sim.history, aux, meta["truths"].get<std::vector<Composition>>(),
                                     parse_spec(meta["spec"]));
  EXPECT_EQ(results_json(s, direct).dump(), results_json(s, replay).dump());
}

TEST(Experiment, AuxIsBalancedAndDisjointFromUsers) {
  const auto s = parse_spec(small_spec());
  const auto d = prepare_data(s);
  EXPECT_EQ(d.aux.data.class_counts(), (std::vector<std::size_t>(3, 4)));
  for (const auto& u : d.users)
    for (auto id : u.ids) EXPECT_EQ(std::count(d.aux.data.ids.begin(), d.aux.data.ids.end(), id), 0);
  EXPECT_EQ(d.truths[1], (Composition{0.5, 0.0, 0.5}));
}

TEST(Experiment, TruncateAuxKeepsFirstKPerClass) {
  const auto s = parse_spec(small_spec());
  const auto d = prepare_data(s);
  const auto t = truncate_aux(d.aux, 2);
  EXPECT_EQ(t.data.class_counts(), (std::vector<std::size_t>(3, 2)));
  EXPECT_EQ(t.per_class, 2u);
  EXPECT_THROW(truncate_aux(d.aux, 5), ConfigError);
}

TEST(Experiment, SummaryShowsTruthOverInferredRows) {
  const auto s = parse_spec(small_spec());
  const auto text = summary_text(s, run_experiment(s).attack);
  EXPECT_NE(text.find("user 2"), std::string::npos);
  EXPECT_NE(text.find("truth"), std::string::npos);
  EXPECT_NE(text.find("  r2"), std::string::npos);
  EXPECT_NE(text.find(" -"), std::string::npos);
}

TEST(Experiment, SweepCsvRows) {
  const auto s = parse_spec(small_spec());
  AblationOptions opt;
  opt.no_calibrator = true;
  opt.aux_counts = {2, 4};
  const auto v = ablation_sweep(s, opt);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[0].factor, "baseline");
  const auto csv = sweep_csv(v);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Experiment, AttackEnabledFlagDoesNotChangeTraining) {
  auto s = parse_spec(small_spec());
  const auto on = run_experiment(s);
  s.attack.enabled = false;
  const auto off = run_experiment(s);
  EXPECT_TRUE(off.attack.entries.empty());
  EXPECT_EQ(flatten_parameters(on.sim.history.final_global), flatten_parameters(off.sim.history.final_global));
}

TEST(Experiment, MultiRoundFusionDoesNotHurtOnReference) {
  auto s = reference_spec();
  s.attack.rounds = {1, 2, 3, 4, 5};
  s.attack.multi_round_k = 5;
  const auto r = run_experiment(s);
  double fused = 0.0, single = 0.0;
  for (const auto& m : r.attack.multi_round) fused += m.distance->l1;
  fused /= static_cast<double>(r.attack.multi_round.size());
  single = aggregate(r.attack.entries).l1;
  EXPECT_LE(fused, single);
}
