#include "tagbert/metrics.hpp"

#include <string>

#include "tagbert/error.hpp"
#include "tagbert/querydata.hpp"

namespace tagbert {

namespace {

using Confusion = std::array<std::array<std::int64_t, 2>, 2>;

int class_index(int label) {
  if (label == kKeep) return 0;
  if (label == kDrop) return 1;
  throw ArgumentError("metrics: label " + std::to_string(label) + " is neither keep nor drop");
}

// Classes absent from both gold and predictions are left out of the macro
// average; with nothing scored at all the average is 1.
double macro_f1(const Confusion& c, ClassScores* keep, ClassScores* drop) {
  double sum = 0;
  int counted = 0;
  for (int k = 0; k < 2; ++k) {
    const double tp = static_cast<double>(c[k][k]);
    const double fp = static_cast<double>(c[1 - k][k]);
    const double fn = static_cast<double>(c[k][1 - k]);
    ClassScores s;
    s.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    s.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    s.f1 = 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    if (tp + fp + fn > 0) {
      sum += s.f1;
      ++counted;
    }
    if (k == 0 && keep) *keep = s;
    if (k == 1 && drop) *drop = s;
  }
  return counted == 0 ? 1.0 : sum / counted;
}

struct Tally {
  Confusion confusion{};
  std::size_t queries = 0, exact = 0, tokens = 0, correct = 0;

  void add(const std::vector<int>& gold, const std::vector<int>& pred) {
    bool all = true;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const int g = class_index(gold[i]), p = class_index(pred[i]);
      ++confusion[g][p];
      if (g == p)
        ++correct;
      else
        all = false;
    }
    tokens += gold.size();
    ++queries;
    if (all) ++exact;
  }

  MetricsBlock block() const {
    MetricsBlock b;
    b.f1 = macro_f1(confusion, nullptr, nullptr);
    b.exact_match = static_cast<double>(exact) / static_cast<double>(queries);
    b.token_acc = static_cast<double>(correct) / static_cast<double>(tokens);
    b.queries = queries;
    b.tokens = tokens;
    return b;
  }
};

}  // namespace

MetricsReport score_predictions(std::span<const std::vector<int>> gold, std::span<const std::vector<int>> predicted) {
  if (gold.empty()) throw ArgumentError("evaluate: no records");
  if (gold.size() != predicted.size()) throw ArgumentError("evaluate: prediction count mismatch");
  Tally all;
  std::map<int, Tally> by_length;
  for (std::size_t q = 0; q < gold.size(); ++q) {
    if (gold[q].size() != predicted[q].size())
      throw ArgumentError("evaluate: query " + std::to_string(q) + " has mismatched prediction length");
    if (gold[q].empty()) throw ArgumentError("evaluate: query " + std::to_string(q) + " is empty");
    all.add(gold[q], predicted[q]);
    by_length[static_cast<int>(gold[q].size())].add(gold[q], predicted[q]);
  }
  MetricsReport r;
  const MetricsBlock b = all.block();
  r.f1 = macro_f1(all.confusion, &r.keep, &r.drop);
  r.exact_match = b.exact_match;
  r.token_acc = b.token_acc;
  r.confusion = all.confusion;
  r.queries = b.queries;
  r.tokens = b.tokens;
  for (const auto& [len, t] : by_length) r.per_length[len] = t.block();
  return r;
}

double percent_improvement(double value, double baseline) {
  if (baseline == 0) throw ArgumentError("percent_improvement: zero baseline");
  return 100.0 * (value - baseline) / baseline;
}

nlohmann::json MetricsReport::to_json() const {
  auto scores = [](const ClassScores& s) {
    return nlohmann::json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
  };
  nlohmann::json lengths = nlohmann::json::object();
  for (const auto& [len, b] : per_length)
    lengths[std::to_string(len)] = {{"f1", b.f1},
                                    {"exact_match", b.exact_match},
                                    {"token_acc", b.token_acc},
                                    {"queries", b.queries},
                                    {"tokens", b.tokens}};
  return {{"f1", f1},
          {"exact_match", exact_match},
          {"token_acc", token_acc},
          {"per_class", {{"keep", scores(keep)}, {"drop", scores(drop)}}},
          {"confusion", {{"labels", {"keep", "drop"}}, {"counts", confusion}}},
          {"queries", queries},
          {"tokens", tokens},
          {"per_length", lengths}};
}

}  // namespace tagbert
