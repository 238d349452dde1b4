#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tagbert/error.hpp"
#include "tagbert/train.hpp"

using namespace tagbert;
namespace fs = std::filesystem;

namespace {

struct Data {
  std::vector<QueryRecord> train, validation, test;
  TagGraph graph;
};

const Data& small_data() {
  static const Data data = [] {
    SynthConfig cfg = SynthConfig::defaults();
    cfg.record_count = 4000;
    cfg.seed = 11;
    cfg.label_noise = 0.0;
    auto splits = split_dataset(generate_synthetic(cfg), 11);
    Data d{std::move(splits.train), std::move(splits.validation), std::move(splits.test), {}};
    d.train.resize(2000);
    d.graph = mine_tag_pairs(d.train, default_min_support(d.train.size()));
    return d;
  }();
  return data;
}

ModelConfig tiny_model(GraphMode graph = GraphMode::static_graph) {
  ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.n_layers = 1;
  m.d_ff = 32;
  m.graph = graph;
  return m;
}

TrainConfig quick_train(int epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 32;
  t.learning_rate = 3e-3;
  return t;
}

ExperimentCell cell(const std::string& variant, std::uint64_t seed, double f1, double em, double acc) {
  ExperimentCell c;
  c.variant = variant;
  c.seed = seed;
  c.ok = true;
  c.metrics.f1 = f1;
  c.metrics.exact_match = em;
  c.metrics.token_acc = acc;
  return c;
}

}  // namespace

TEST(TrainConfig, JsonAndValidation) {
  TrainConfig t = quick_train(5);
  t.weight_decay = 0.01;
  EXPECT_EQ(TrainConfig::from_json(t.to_json()).to_json(), t.to_json());
  EXPECT_THROW(TrainConfig::from_json({{"epoch", 3}}), ArgumentError);
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ArgumentError);
  t = quick_train();
  t.learning_rate = -1;
  EXPECT_THROW(t.validate(), ArgumentError);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  AdamOptimizer opt(cfg);
  ModelParams p;
  p.tensors["w"] = Tensor::Zero(1, 3);
  Tensor g(1, 3);
  g << 2.0, -0.5, 0.0;
  opt.step(p, {{"w", g}});
  // bias-corrected moments give m/sqrt(v) = g/|g| on the first step
  EXPECT_NEAR(p.at("w")(0, 0), -0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.at("w")(0, 1), 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.at("w")(0, 2), 0.0);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  AdamOptimizer opt(cfg);
  ModelParams p;
  p.tensors["w"] = Tensor::Constant(1, 1, 1.0);
  const double g1 = 0.3, g2 = -0.2;
  double w = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    opt.step(p, {{"w", Tensor::Constant(1, 1, g)}});
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w *= 1 - 0.01 * 0.1;
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_NEAR(p.at("w")(0, 0), w, 1e-14);
}

TEST(Train, ZeroLearningRateKeepsInitialParameters) {
  const Data& d = small_data();
  TrainConfig t = quick_train(1);
  t.learning_rate = 0.0;
  const std::span<const QueryRecord> subset(d.train.data(), 200);
  const TrainResult r = train(tiny_model(), t, subset, d.validation, &d.graph);
  const ModelParams init = init_params(tiny_model(), r.model.vocab.token_count(), r.model.vocab.tag_count(), t.seed);
  EXPECT_EQ(r.model.params, init);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].epoch, 0);
}

TEST(Train, SameSeedSameLog) {
  const Data& d = small_data();
  const std::span<const QueryRecord> subset(d.train.data(), 400);
  const std::span<const QueryRecord> val(d.validation.data(), 200);
  const TrainResult a = train(tiny_model(GraphMode::dynamic), quick_train(), subset, val, nullptr);
  const TrainResult b = train(tiny_model(GraphMode::dynamic), quick_train(), subset, val, nullptr);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].val_loss, b.log[i].val_loss);
  }
  EXPECT_EQ(a.model.params, b.model.params);
  TrainConfig other = quick_train();
  other.seed = 2;
  EXPECT_NE(train(tiny_model(GraphMode::dynamic), other, subset, val, nullptr).model.params, a.model.params);
}

TEST(Train, LossHalvesOnTwoThousandRecords) {
  const Data& d = small_data();
  std::vector<EpochLog> seen;
  const TrainResult r = train(tiny_model(), quick_train(3), d.train, d.validation, &d.graph, nullptr,
                              [&](const EpochLog& e) { seen.push_back(e); });
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_EQ(seen.size(), r.log.size());
  EXPECT_LT(r.log.back().train_loss, 0.5 * r.log.front().train_loss);
  EXPECT_GT(r.log.back().val_token_acc, r.log.front().val_token_acc);
  EXPECT_GE(r.best_epoch, 1);

  const MetricsReport m = evaluate(r.model, d.test);
  EXPECT_EQ(m.queries, d.test.size());
  EXPECT_GT(m.token_acc, 0.8);
}

TEST(Train, DivergenceNamesTheBatch) {
  const Data& d = small_data();
  TrainConfig t = quick_train(1);
  t.learning_rate = 1e300;
  const std::span<const QueryRecord> subset(d.train.data(), 300);
  try {
    train(tiny_model(), t, subset, d.validation, &d.graph);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Train, StaticModeNeedsGraph) {
  const Data& d = small_data();
  EXPECT_THROW(train(tiny_model(), quick_train(1), d.train, d.validation, nullptr), ArgumentError);
}

TEST(EpochLog, CsvFormat) {
  const std::vector<EpochLog> log = {{0, 1.1, 1.2, 0.5}, {1, 0.5, 0.6, 0.8}};
  const fs::path path = fs::temp_directory_path() / "tagbert_epoch_log.csv";
  write_epoch_log(log, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,train_loss,val_loss,val_token_acc");
  std::getline(in, line);
  EXPECT_EQ(line, "0,1.100000,1.200000,0.500000");
}

TEST(Variants, ParseAndDefaults) {
  EXPECT_EQ(parse_variant("none").graph, GraphMode::none);
  const VariantSpec s = parse_variant("static-mean");
  EXPECT_EQ(s.graph, GraphMode::static_graph);
  EXPECT_EQ(s.fusion, FusionMode::mean);
  EXPECT_EQ(parse_variant("dynamic-gated").graph, GraphMode::dynamic);
  EXPECT_THROW(parse_variant("static"), ArgumentError);
  EXPECT_THROW(parse_variant("sideways-gated"), ArgumentError);
  const auto v = default_variants();
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v.front().name, "none");
  EXPECT_EQ(v.back().name, "dynamic-gated");
}

TEST(Summarize, MeanDeviationAndImprovement) {
  const std::vector<VariantSpec> variants = {parse_variant("none"), parse_variant("static-gated")};
  const std::vector<ExperimentCell> cells = {cell("none", 1, 0.8, 0.4, 0.7), cell("none", 2, 0.8, 0.4, 0.7),
                                             cell("static-gated", 1, 0.8, 0.5, 0.7),
                                             cell("static-gated", 2, 0.9, 0.5, 0.84)};
  const auto s = summarize(cells, variants);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].f1_std, 0.0);
  EXPECT_FALSE(s[0].f1_imp.has_value());
  EXPECT_NEAR(s[1].f1_mean, 0.85, 1e-15);
  EXPECT_NEAR(s[1].f1_std, std::sqrt(0.005), 1e-12);  // sample deviation of {0.8, 0.9}
  EXPECT_NEAR(*s[1].f1_imp, 100.0 * 0.05 / 0.8, 1e-9);
  EXPECT_NEAR(*s[1].em_imp, 25.0, 1e-9);
  EXPECT_NEAR(*s[1].acc_imp, 10.0, 1e-9);
}

TEST(Summarize, SingleSeedAndBaselineOnlyAndFailures) {
  const std::vector<VariantSpec> none = {parse_variant("none")};
  const auto s = summarize(std::vector<ExperimentCell>{cell("none", 1, 0.7, 0.3, 0.6)}, none);
  EXPECT_EQ(s[0].f1_std, 0.0);
  EXPECT_EQ(s[0].runs, 1u);

  ExperimentCell failed = cell("none", 2, 0, 0, 0);
  failed.ok = false;
  const auto s2 = summarize(std::vector<ExperimentCell>{cell("none", 1, 0.7, 0.3, 0.6), failed}, none);
  EXPECT_EQ(s2[0].runs, 1u);
  EXPECT_EQ(s2[0].f1_mean, 0.7);
}

TEST(Experiment, TableAndCsvFiles) {
  const Data& d = small_data();
  const std::vector<VariantSpec> variants = {parse_variant("none"), parse_variant("static-gated")};
  const std::vector<std::uint64_t> seeds = {1};
  ExperimentData data;
  data.train = std::span<const QueryRecord>(d.train.data(), 300);
  data.validation = std::span<const QueryRecord>(d.validation.data(), 100);
  data.test = std::span<const QueryRecord>(d.test.data(), 100);
  data.graph = &d.graph;
  const ExperimentResult r = run_experiment(variants, tiny_model(), quick_train(1), data, seeds);
  ASSERT_EQ(r.cells.size(), 2u);
  for (const auto& c : r.cells) EXPECT_TRUE(c.ok) << c.error;
  ASSERT_NE(r.find("static-gated"), nullptr);
  EXPECT_EQ(r.find("missing"), nullptr);

  const std::string table = format_comparison_table(r);
  EXPECT_NE(table.find("(-)"), std::string::npos);
  EXPECT_NE(table.find("static-gated"), std::string::npos);

  const fs::path dir = fs::temp_directory_path() / "tagbert_experiment_test";
  fs::create_directories(dir);
  write_comparison_csv(r, dir / "comparison.csv");
  write_summary_csv(r, dir / "summary.csv");
  write_per_length_csv(r, dir / "per_length.csv");
  std::ifstream in(dir / "comparison.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "variant,seed,f1,exact_match,token_acc");
  std::ifstream summary(dir / "summary.csv");
  std::string line;
  std::getline(summary, line);
  std::getline(summary, line);
  EXPECT_EQ(line.rfind("none,1,", 0), 0u);
  EXPECT_NE(line.find("(-)"), std::string::npos);
}
