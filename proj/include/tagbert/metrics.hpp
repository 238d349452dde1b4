#ifndef TAGBERT_METRICS_HPP
#define TAGBERT_METRICS_HPP

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace tagbert {

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
};

struct MetricsBlock {
  double f1 = 0, exact_match = 0, token_acc = 0;
  std::size_t queries = 0, tokens = 0;
};

/// Keep/drop metrics over non-special positions. confusion[gold][pred] with
/// index 0 = keep, 1 = drop. f1 is the macro average over the classes that
/// occur in gold or predictions.
struct MetricsReport {
  double f1 = 0, exact_match = 0, token_acc = 0;
  ClassScores keep, drop;
  std::array<std::array<std::int64_t, 2>, 2> confusion{};
  std::size_t queries = 0, tokens = 0;
  std::map<int, MetricsBlock> per_length;  // keyed by source word count

  nlohmann::json to_json() const;
};

/// Scores predictions against gold labels, query by query. Both sides hold
/// kKeep/kDrop values for the raw (unwrapped) tokens.
MetricsReport score_predictions(std::span<const std::vector<int>> gold, std::span<const std::vector<int>> predicted);

/// 100 * (x - baseline) / baseline.
double percent_improvement(double value, double baseline);

}  // namespace tagbert

#endif  // TAGBERT_METRICS_HPP
