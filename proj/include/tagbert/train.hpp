#ifndef TAGBERT_TRAIN_HPP
#define TAGBERT_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/metrics.hpp"
#include "tagbert/model.hpp"

namespace tagbert {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  int epochs = 8;
  int batch_size = 32;
  std::uint64_t seed = 1;
  int patience = 3;  // epochs without validation-loss improvement

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

/// Adaptive-moment optimizer over named tensors.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(ModelParams& params, const std::map<std::string, Tensor>& grads);

 private:
  TrainConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  long long t_ = 0;
};

struct EpochLog {
  int epoch = 0;  // 0 = before the first update
  double train_loss = 0, val_loss = 0, val_token_acc = 0;
};

struct TrainResult {
  Model model;  // parameters of the best validation-loss epoch
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

using ProgressFn = std::function<void(const EpochLog&)>;

/// Deterministic mini-batch training. Throws NumericError naming the batch
/// index if the loss stops being finite.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::span<const QueryRecord> train_records,
                  std::span<const QueryRecord> val_records, const TagGraph* graph, const Vocab* vocab = nullptr,
                  const ProgressFn& progress = {});

/// Mean per-query loss of `model` over encoded queries.
double dataset_loss(const Model& model, std::span<const EncodedQuery> queries, std::size_t batch_size = 256);

MetricsReport evaluate(const Model& model, std::span<const QueryRecord> records);

void write_epoch_log(std::span<const EpochLog> log, const std::filesystem::path& path);

// ---------------------------------------------------------------- experiments

struct VariantSpec {
  std::string name;  // none, static-mean, static-gated, dynamic-gated, ...
  GraphMode graph = GraphMode::none;
  FusionMode fusion = FusionMode::gated;
};

VariantSpec parse_variant(const std::string& name);
std::vector<VariantSpec> default_variants();

struct ExperimentCell {
  std::string variant;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport metrics;  // held-out (test) metrics
  std::vector<EpochLog> log;
};

struct VariantSummary {
  std::string variant;
  std::size_t runs = 0;
  double f1_mean = 0, f1_std = 0, em_mean = 0, em_std = 0, acc_mean = 0, acc_std = 0;
  std::optional<double> f1_imp, em_imp, acc_imp;  // empty for the baseline row
  std::map<int, MetricsBlock> per_length;          // pooled over seeds
};

struct ExperimentResult {
  std::vector<ExperimentCell> cells;
  std::vector<VariantSummary> summary;

  const VariantSummary* find(const std::string& variant) const;
};

struct ExperimentData {
  std::span<const QueryRecord> train, validation, test;
  const TagGraph* graph = nullptr;
};

using CellProgressFn = std::function<void(const ExperimentCell&)>;

/// Trains every variant for every seed on shared data and scores it on the
/// test split. A failing cell is recorded, not fatal.
ExperimentResult run_experiment(std::span<const VariantSpec> variants, const ModelConfig& base_model,
                                const TrainConfig& base_train, const ExperimentData& data,
                                std::span<const std::uint64_t> seeds, const CellProgressFn& progress = {});

/// Aggregates cells into per-variant mean/deviation and improvement over the
/// `none` baseline (when present).
std::vector<VariantSummary> summarize(std::span<const ExperimentCell> cells, std::span<const VariantSpec> variants);

void write_comparison_csv(const ExperimentResult& r, const std::filesystem::path& path);
void write_summary_csv(const ExperimentResult& r, const std::filesystem::path& path);
void write_per_length_csv(const ExperimentResult& r, const std::filesystem::path& path);
std::string format_comparison_table(const ExperimentResult& r);

}  // namespace tagbert

#endif  // TAGBERT_TRAIN_HPP
