#include "tagbert/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "tagbert/error.hpp"
#include "tagbert/rng.hpp"

namespace tagbert {

namespace {

using Eigen::Index;

std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<EncodedQuery> encode_all(std::span<const QueryRecord> records, const Model& m) {
  std::vector<EncodedQuery> out;
  out.reserve(records.size());
  const TagGraph* graph = m.config.graph == GraphMode::static_graph ? &m.graph : nullptr;
  for (const auto& r : records) out.push_back(encode_record(r, m.vocab, m.config, graph));
  return out;
}

struct LossAndAccuracy {
  double loss = 0, token_acc = 0;
};

// One inference pass giving both the mean per-query loss and the keep/drop
// token accuracy over non-special positions.
LossAndAccuracy loss_and_accuracy(const Model& model, std::span<const EncodedQuery> queries) {
  const Tensor probs = predict_probabilities(model, queries);
  double loss = 0;
  std::size_t correct = 0, tokens = 0;
  Index row = 0;
  for (const auto& q : queries) {
    const std::size_t len = q.token_ids.size();
    double ql = 0;
    for (std::size_t i = 0; i < len; ++i, ++row) {
      const int label = q.labels.at(i);
      ql -= std::log(std::max(probs(row, label - 1), kLogFloor));
      if (i == 0 || i + 1 == len) continue;
      const int pred = probs(row, kDrop - 1) > probs(row, kKeep - 1) ? kDrop : kKeep;
      correct += pred == label;
      ++tokens;
    }
    loss += ql / static_cast<double>(len);
  }
  return {loss / static_cast<double>(queries.size()),
          tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0};
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(learning_rate >= 0)) throw ArgumentError("train config: learning_rate must be >= 0");
  if (batch_size < 1) throw ArgumentError("train config: batch_size must be >= 1");
  if (epochs < 0) throw ArgumentError("train config: epochs must be >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ArgumentError("train config: betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ArgumentError("train config: adam_eps must be positive");
  if (weight_decay < 0) throw ArgumentError("train config: weight_decay must be >= 0");
  if (patience < 1) throw ArgumentError("train config: patience must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"beta1", beta1},         {"beta2", beta2},
          {"adam_eps", adam_eps},           {"weight_decay", weight_decay}, {"epochs", epochs},
          {"batch_size", batch_size},       {"seed", seed},           {"patience", patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  static const std::set<std::string> kKeys = {"learning_rate", "beta1",      "beta2", "adam_eps", "weight_decay",
                                              "epochs",        "batch_size", "seed",  "patience"};
  if (!j.is_object()) throw ArgumentError("train config: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.contains(key)) throw ArgumentError("train config: unknown key '" + key + "'");
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("patience")) c.patience = j.at("patience").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------- optimizer

void AdamOptimizer::step(ModelParams& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, w] : params.tensors) {
    const auto g = grads.find(name);
    if (g == grads.end()) continue;
    auto [mi, fresh_m] = m_.try_emplace(name, Tensor::Zero(w.rows(), w.cols()));
    auto [vi, fresh_v] = v_.try_emplace(name, Tensor::Zero(w.rows(), w.cols()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g->second;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g->second.cwiseAbs2();
    if (cfg_.weight_decay > 0) w *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    w.array() -= cfg_.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.adam_eps);
  }
}

// ---------------------------------------------------------------- training

double dataset_loss(const Model& model, std::span<const EncodedQuery> queries, std::size_t) {
  return loss_and_accuracy(model, queries).loss;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::span<const QueryRecord> train_records,
                  std::span<const QueryRecord> val_records, const TagGraph* graph, const Vocab* vocab,
                  const ProgressFn& progress) {
  model_cfg.validate();
  train_cfg.validate();
  if (train_records.empty() || val_records.empty()) throw ArgumentError("train: empty training or validation set");
  if (model_cfg.graph == GraphMode::static_graph && graph == nullptr)
    throw ArgumentError("train: static graph mode requires a tag graph");

  Model model;
  model.config = model_cfg;
  model.vocab = vocab ? *vocab : Vocab::build(train_records);
  if (model_cfg.graph == GraphMode::static_graph) model.graph = *graph;
  model.params = init_params(model_cfg, model.vocab.token_count(), model.vocab.tag_count(), train_cfg.seed);

  const std::vector<EncodedQuery> train_q = encode_all(train_records, model);
  const std::vector<EncodedQuery> val_q = encode_all(val_records, model);

  TrainResult result;
  {
    const auto tr = loss_and_accuracy(model, train_q);
    const auto va = loss_and_accuracy(model, val_q);
    result.log.push_back({0, tr.loss, va.loss, va.token_acc});
    if (progress) progress(result.log.back());
  }
  ModelParams best = model.params;
  double best_val = result.log.back().val_loss;
  int since_best = 0;

  AdamOptimizer adam(train_cfg);
  Rng order_rng(train_cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  Rng dropout_rng(train_cfg.seed * 0xBF58476D1CE4E5B9ULL + 2);
  std::vector<std::size_t> order(train_q.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t batch_index = 0;

  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train_cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train_cfg.batch_size));
      std::vector<const EncodedQuery*> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(&train_q[order[i]]);
      const Batch batch = make_batch(std::span<const EncodedQuery* const>(chunk));

      Tape tape;
      const ParamVars vars = register_params(tape, model.params, true);
      ForwardOptions opt;
      opt.training = true;
      opt.dropout_rng = &dropout_rng;
      Var loss;
      try {
        loss = batch_loss(forward(tape, vars, model.config, batch, opt).probs, batch);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at batch " + std::to_string(batch_index) + " (epoch " +
                           std::to_string(epoch) + "): " + e.what());
      }
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw NumericError("training diverged: non-finite loss at batch " + std::to_string(batch_index) + " (epoch " +
                           std::to_string(epoch) + ")");
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, v] : vars) grads.emplace(name, tape.grad(v));
      adam.step(model.params, grads);
      if (!model.params.all_finite())
        throw NumericError("training diverged: non-finite parameters after batch " + std::to_string(batch_index));
      loss_sum += value;
      ++batches;
      ++batch_index;
    }
    const auto va = loss_and_accuracy(model, val_q);
    result.log.push_back({epoch, loss_sum / static_cast<double>(batches), va.loss, va.token_acc});
    if (progress) progress(result.log.back());
    if (va.loss < best_val) {
      best_val = va.loss;
      best = model.params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= train_cfg.patience) {
      break;
    }
  }
  model.params = std::move(best);
  result.model = std::move(model);
  return result;
}

MetricsReport evaluate(const Model& model, std::span<const QueryRecord> records) {
  if (records.empty()) throw ArgumentError("evaluate: no records");
  const std::vector<EncodedQuery> encoded = encode_all(records, model);
  const auto predicted = predict_labels(model, encoded);
  std::vector<std::vector<int>> gold;
  gold.reserve(records.size());
  for (const auto& r : records) gold.push_back(r.labels);
  return score_predictions(gold, predicted);
}

void write_epoch_log(std::span<const EpochLog> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write epoch log " + path.string());
  out << "epoch,train_loss,val_loss,val_token_acc\n";
  for (const auto& e : log)
    out << e.epoch << ',' << fixed(e.train_loss, 6) << ',' << fixed(e.val_loss, 6) << ',' << fixed(e.val_token_acc, 6)
        << '\n';
}

// ---------------------------------------------------------------- experiments

VariantSpec parse_variant(const std::string& name) {
  if (name == "none" || name == "baseline") return {"none", GraphMode::none, FusionMode::gated};
  const auto dash = name.find('-');
  if (dash == std::string::npos) throw ArgumentError("unknown variant '" + name + "' (expected e.g. static-gated)");
  const GraphMode g = parse_graph_mode(name.substr(0, dash));
  if (g == GraphMode::none) throw ArgumentError("variant 'none' takes no fusion suffix");
  return {name, g, parse_fusion_mode(name.substr(dash + 1))};
}

std::vector<VariantSpec> default_variants() {
  return {parse_variant("none"), parse_variant("static-mean"), parse_variant("static-gated"),
          parse_variant("dynamic-gated")};
}

const VariantSummary* ExperimentResult::find(const std::string& variant) const {
  for (const auto& s : summary)
    if (s.variant == variant) return &s;
  return nullptr;
}

std::vector<VariantSummary> summarize(std::span<const ExperimentCell> cells, std::span<const VariantSpec> variants) {
  std::vector<VariantSummary> out;
  for (const auto& v : variants) {
    VariantSummary s;
    s.variant = v.name;
    std::vector<double> f1, em, acc;
    std::map<int, std::array<std::int64_t, 4>> pooled;  // queries, exact, tokens, correct
    for (const auto& c : cells) {
      if (c.variant != v.name || !c.ok) continue;
      f1.push_back(c.metrics.f1);
      em.push_back(c.metrics.exact_match);
      acc.push_back(c.metrics.token_acc);
      for (const auto& [len, b] : c.metrics.per_length) {
        auto& p = pooled[len];
        p[0] += static_cast<std::int64_t>(b.queries);
        p[1] += static_cast<std::int64_t>(std::llround(b.exact_match * static_cast<double>(b.queries)));
        p[2] += static_cast<std::int64_t>(b.tokens);
        p[3] += static_cast<std::int64_t>(std::llround(b.token_acc * static_cast<double>(b.tokens)));
      }
    }
    s.runs = f1.size();
    if (s.runs > 0) {
      auto mean = [](const std::vector<double>& xs) {
        return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
      };
      s.f1_mean = mean(f1);
      s.em_mean = mean(em);
      s.acc_mean = mean(acc);
      s.f1_std = sample_std(f1, s.f1_mean);
      s.em_std = sample_std(em, s.em_mean);
      s.acc_std = sample_std(acc, s.acc_mean);
    }
    // per-length F1 pooled as the mean of per-run values
    std::map<int, std::vector<double>> len_f1;
    for (const auto& c : cells)
      if (c.variant == v.name && c.ok)
        for (const auto& [len, b] : c.metrics.per_length) len_f1[len].push_back(b.f1);
    for (const auto& [len, p] : pooled) {
      MetricsBlock b;
      b.queries = static_cast<std::size_t>(p[0]);
      b.tokens = static_cast<std::size_t>(p[2]);
      b.exact_match = static_cast<double>(p[1]) / static_cast<double>(p[0]);
      b.token_acc = static_cast<double>(p[3]) / static_cast<double>(p[2]);
      const auto& fs = len_f1[len];
      b.f1 = std::accumulate(fs.begin(), fs.end(), 0.0) / static_cast<double>(fs.size());
      s.per_length[len] = b;
    }
    out.push_back(std::move(s));
  }
  const VariantSummary* base = nullptr;
  for (const auto& s : out)
    if (s.variant == "none" && s.runs > 0) base = &s;
  if (base) {
    const VariantSummary b = *base;
    for (auto& s : out) {
      if (s.variant == "none" || s.runs == 0) continue;
      s.f1_imp = percent_improvement(s.f1_mean, b.f1_mean);
      s.em_imp = percent_improvement(s.em_mean, b.em_mean);
      s.acc_imp = percent_improvement(s.acc_mean, b.acc_mean);
    }
  }
  return out;
}

ExperimentResult run_experiment(std::span<const VariantSpec> variants, const ModelConfig& base_model,
                                const TrainConfig& base_train, const ExperimentData& data,
                                std::span<const std::uint64_t> seeds, const CellProgressFn& progress) {
  if (variants.empty() || seeds.empty()) throw ArgumentError("run_experiment: need at least one variant and one seed");
  const Vocab vocab = Vocab::build(data.train);
  ExperimentResult result;
  for (const auto& v : variants) {
    for (const std::uint64_t seed : seeds) {
      ExperimentCell cell;
      cell.variant = v.name;
      cell.seed = seed;
      try {
        ModelConfig mc = base_model;
        mc.graph = v.graph;
        mc.fusion = v.fusion;
        TrainConfig tc = base_train;
        tc.seed = seed;
        const TrainResult tr = train(mc, tc, data.train, data.validation, data.graph, &vocab);
        cell.metrics = evaluate(tr.model, data.test);
        cell.log = tr.log;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      if (progress) progress(cell);
      result.cells.push_back(std::move(cell));
    }
  }
  result.summary = summarize(result.cells, variants);
  return result;
}

void write_comparison_csv(const ExperimentResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "variant,seed,f1,exact_match,token_acc\n";
  for (const auto& c : r.cells) {
    const double nan = std::nan("");
    out << c.variant << ',' << c.seed << ',' << fixed(c.ok ? c.metrics.f1 : nan, 6) << ','
        << fixed(c.ok ? c.metrics.exact_match : nan, 6) << ',' << fixed(c.ok ? c.metrics.token_acc : nan, 6) << '\n';
  }
}

void write_summary_csv(const ExperimentResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  auto imp = [](const std::optional<double>& x) { return x ? fixed(*x, 1) : std::string("(-)"); };
  out << "variant,runs,f1_mean,f1_std,f1_imp,exact_match_mean,exact_match_std,exact_match_imp,"
         "token_acc_mean,token_acc_std,token_acc_imp\n";
  for (const auto& s : r.summary)
    out << s.variant << ',' << s.runs << ',' << fixed(s.f1_mean, 6) << ',' << fixed(s.f1_std, 6) << ','
        << imp(s.f1_imp) << ',' << fixed(s.em_mean, 6) << ',' << fixed(s.em_std, 6) << ',' << imp(s.em_imp) << ','
        << fixed(s.acc_mean, 6) << ',' << fixed(s.acc_std, 6) << ',' << imp(s.acc_imp) << '\n';
}

void write_per_length_csv(const ExperimentResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "variant,length,queries,f1,exact_match,token_acc\n";
  for (const auto& s : r.summary)
    for (const auto& [len, b] : s.per_length)
      out << s.variant << ',' << len << ',' << b.queries << ',' << fixed(b.f1, 6) << ',' << fixed(b.exact_match, 6)
          << ',' << fixed(b.token_acc, 6) << '\n';
}

std::string format_comparison_table(const ExperimentResult& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-24s %-24s %-24s\n", "Method", "F1 (% imp.)", "Exact-Match (% imp.)",
                "Token-Level (% imp.)");
  os << line;
  auto cell = [](double mean, double sd, const std::optional<double>& imp) {
    return fixed(mean, 3) + "+-" + fixed(sd, 3) + (imp ? " (" + fixed(*imp, 1) + ")" : std::string(" (-)"));
  };
  for (const auto& s : r.summary) {
    if (s.runs == 0) {
      std::snprintf(line, sizeof line, "%-16s failed\n", s.variant.c_str());
    } else {
      std::snprintf(line, sizeof line, "%-16s %-24s %-24s %-24s\n", s.variant.c_str(),
                    cell(s.f1_mean, s.f1_std, s.f1_imp).c_str(), cell(s.em_mean, s.em_std, s.em_imp).c_str(),
                    cell(s.acc_mean, s.acc_std, s.acc_imp).c_str());
    }
    os << line;
  }
  return os.str();
}

}  // namespace tagbert
