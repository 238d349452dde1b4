// tagbert: data generation, graph mining, training, evaluation, prediction
// and variant comparison from one binary.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/error.hpp"
#include "tagbert/metrics.hpp"
#include "tagbert/model.hpp"
#include "tagbert/querydata.hpp"
#include "tagbert/taggraph.hpp"
#include "tagbert/train.hpp"

namespace fs = std::filesystem;
using namespace tagbert;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Paths {
  std::string train, validation, test, graph, checkpoint, out_dir;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth = SynthConfig::defaults();
  Paths paths;
};

std::string path_key(const nlohmann::json& j, const char* key, const std::string& fallback) {
  return j.contains(key) ? j.at(key).get<std::string>() : fallback;
}

RunConfig load_run_config(const std::string& file) {
  RunConfig rc;
  if (file.empty()) return rc;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open config " + file);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config " + file + ": " + e.what());
  }
  if (!j.is_object()) throw ArgumentError("config " + file + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "model" && key != "train" && key != "synth" && key != "paths")
      throw ArgumentError("config " + file + ": unknown key '" + key + "'");
  if (j.contains("model")) rc.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) rc.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("synth")) rc.synth = SynthConfig::from_json(j.at("synth"));
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    static const std::set<std::string> kKeys = {"train", "validation", "test", "graph", "checkpoint", "out_dir"};
    for (const auto& [key, _] : p.items())
      if (!kKeys.contains(key)) throw ArgumentError("config " + file + ": unknown paths key '" + key + "'");
    rc.paths.train = path_key(p, "train", "");
    rc.paths.validation = path_key(p, "validation", "");
    rc.paths.test = path_key(p, "test", "");
    rc.paths.graph = path_key(p, "graph", "");
    rc.paths.checkpoint = path_key(p, "checkpoint", "");
    rc.paths.out_dir = path_key(p, "out_dir", "");
  }
  return rc;
}

void require_input(const std::string& path, const std::string& what) {
  if (path.empty()) throw ArgumentError("missing " + what + " path");
  if (!fs::is_regular_file(path)) throw DataError(what + " file not found: " + path);
}

void require_output_dir(const fs::path& path, const std::string& what) {
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw DataError(what + ": output directory does not exist: " + dir.string());
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw ArgumentError("--seeds: no seeds given");
  return seeds;
}

// Flags shared by train and compare; applied after the config file.
struct TrainFlags {
  std::optional<int> epochs, batch_size, d_model, n_layers, n_heads;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--d-model", d_model, "Hidden width");
    app->add_option("--layers", n_layers, "Left-tower layers");
    app->add_option("--heads", n_heads, "Left-tower heads");
    app->add_option("--seed", seed, "Seed for initialization and shuffling");
  }

  void apply(RunConfig& rc) const {
    if (epochs) rc.train.epochs = *epochs;
    if (batch_size) rc.train.batch_size = *batch_size;
    if (lr) rc.train.learning_rate = *lr;
    if (d_model) rc.model.d_model = *d_model;
    if (n_layers) rc.model.n_layers = *n_layers;
    if (n_heads) rc.model.n_heads = *n_heads;
    if (seed) rc.train.seed = *seed;
    rc.model.validate();
    rc.train.validate();
  }
};

// Writes all files to temporaries first so a failure leaves nothing behind.
class StagedFiles {
 public:
  fs::path stage(const fs::path& final_path) {
    fs::path tmp = final_path;
    tmp += ".partial";
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }
  void commit() {
    for (const auto& [tmp, final_path] : staged_) fs::rename(tmp, final_path);
    staged_.clear();
  }
  ~StagedFiles() {
    std::error_code ec;
    for (const auto& [tmp, _] : staged_) fs::remove(tmp, ec);
  }

 private:
  std::vector<std::pair<fs::path, fs::path>> staged_;
};

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const RunConfig& base, const std::string& out_dir, std::optional<std::uint64_t> seed,
                 std::optional<std::size_t> records) {
  RunConfig rc = base;
  if (seed) rc.synth.seed = *seed;
  if (records) rc.synth.record_count = *records;
  const fs::path dir = out_dir.empty() ? fs::path(rc.paths.out_dir) : fs::path(out_dir);
  if (dir.empty()) throw ArgumentError("gen-data: --out-dir is required");
  if (!fs::is_directory(dir)) throw DataError("gen-data: output directory does not exist: " + dir.string());
  rc.synth.validate();

  std::vector<QueryRecord> all;
  try {
    all = generate_synthetic(rc.synth);
  } catch (const std::exception& e) {
    throw ArgumentError(std::string("gen-data: generation failed: ") + e.what());
  }
  const DatasetSplits splits = split_dataset(std::move(all), rc.synth.seed);

  StagedFiles staged;
  try {
    write_dataset(splits.train, staged.stage(dir / "train.jsonl"));
    write_dataset(splits.validation, staged.stage(dir / "validation.jsonl"));
    write_dataset(splits.test, staged.stage(dir / "test.jsonl"));
    nlohmann::ordered_json manifest;
    manifest["seed"] = rc.synth.seed;
    manifest["ratio"] = "6:2:2";
    manifest["counts"] = {{"train", splits.train.size()},
                          {"validation", splits.validation.size()},
                          {"test", splits.test.size()}};
    manifest["files"] = {{"train", "train.jsonl"}, {"validation", "validation.jsonl"}, {"test", "test.jsonl"}};
    manifest["synth"] = rc.synth.to_json();
    std::ofstream out(staged.stage(dir / "manifest.json"), std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw DataError("cannot write manifest");
    out.close();
    staged.commit();
  } catch (const std::exception& e) {
    throw DataError(std::string("gen-data: write failed: ") + e.what());
  }
  std::cout << "wrote " << splits.train.size() << " train, " << splits.validation.size() << " validation, "
            << splits.test.size() << " test records to " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- mine

int cmd_mine(const std::string& train_path, std::optional<std::int64_t> min_support, const std::string& scoring,
             double min_pmi, const std::string& out) {
  require_input(train_path, "training data");
  if (out.empty()) throw ArgumentError("mine: --out is required");
  require_output_dir(out, "mine");
  const auto records = read_dataset(train_path);
  if (records.empty()) throw DataError("mine: corpus " + train_path + " is empty");

  MiningOptions opt;
  if (min_support) {
    if (*min_support < 1) throw ArgumentError("mine: --min-support must be >= 1");
    opt.min_support = *min_support;
  } else {
    opt.min_support = default_min_support(records.size());
    std::cout << "min_support=" << opt.min_support << " (default 0.5% of " << records.size() << " records)\n";
  }
  if (scoring == "frequency")
    opt.scoring = EdgeScoring::frequency;
  else if (scoring == "pmi")
    opt.scoring = EdgeScoring::mutual_information;
  else
    throw ArgumentError("mine: --scoring must be 'frequency' or 'pmi'");
  opt.min_pmi = min_pmi;

  const TagGraph graph = mine_tag_pairs(records, opt);
  StagedFiles staged;
  write_graph(graph, staged.stage(out));
  staged.commit();
  std::cout << "wrote " << graph.size() << " edges to " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string train, validation, graph, out, log, graph_mode, fusion;
};

int cmd_train(RunConfig rc, const TrainArgs& a, const TrainFlags& flags) {
  if (!a.graph_mode.empty()) rc.model.graph = parse_graph_mode(a.graph_mode);
  if (!a.fusion.empty()) rc.model.fusion = parse_fusion_mode(a.fusion);
  flags.apply(rc);
  const std::string train_path = a.train.empty() ? rc.paths.train : a.train;
  const std::string val_path = a.validation.empty() ? rc.paths.validation : a.validation;
  const std::string graph_path = a.graph.empty() ? rc.paths.graph : a.graph;
  const std::string out = a.out.empty() ? rc.paths.checkpoint : a.out;

  if (rc.model.graph == GraphMode::static_graph && graph_path.empty())
    throw ArgumentError("train: static graph mode requires --graph (mine one with 'tagbert mine')");
  if (rc.model.graph != GraphMode::static_graph && !graph_path.empty())
    std::cerr << "warning: --graph is ignored in " << to_string(rc.model.graph) << " mode\n";
  require_input(train_path, "training data");
  require_input(val_path, "validation data");
  if (rc.model.graph == GraphMode::static_graph) require_input(graph_path, "graph");
  if (out.empty()) throw ArgumentError("train: --out is required");
  require_output_dir(out, "train");
  if (!a.log.empty()) require_output_dir(a.log, "train");

  const auto train_records = read_dataset(train_path);
  const auto val_records = read_dataset(val_path);
  std::optional<TagGraph> graph;
  if (rc.model.graph == GraphMode::static_graph) graph = read_graph(graph_path);

  const TrainResult result =
      train(rc.model, rc.train, train_records, val_records, graph ? &*graph : nullptr, nullptr, [](const EpochLog& e) {
        std::fprintf(stderr, "epoch %d  train_loss %.6f  val_loss %.6f  val_token_acc %.4f\n", e.epoch, e.train_loss,
                     e.val_loss, e.val_token_acc);
      });
  save_checkpoint(result.model, out);
  if (!a.log.empty()) write_epoch_log(result.log, a.log);
  std::cout << "best epoch " << result.best_epoch << "; checkpoint written to " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out,
             const std::string& per_length) {
  require_input(checkpoint, "checkpoint");
  require_input(data, "data");
  if (!out.empty()) require_output_dir(out, "eval");
  if (!per_length.empty()) require_output_dir(per_length, "eval");
  const Model model = load_checkpoint(checkpoint);
  const auto records = read_dataset(data);
  if (records.empty()) throw DataError("eval: no records in " + data);
  const MetricsReport report = evaluate(model, records);
  const std::string text = report.to_json().dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw DataError("eval: cannot write " + out);
  }
  if (!per_length.empty()) {
    std::ofstream f(per_length, std::ios::binary | std::ios::trunc);
    f << "length,queries,f1,exact_match,token_acc\n";
    char line[160];
    for (const auto& [len, b] : report.per_length) {
      std::snprintf(line, sizeof line, "%d,%zu,%.6f,%.6f,%.6f\n", len, b.queries, b.f1, b.exact_match, b.token_acc);
      f << line;
    }
    if (!f) throw DataError("eval: cannot write " + per_length);
  }
  return kOk;
}

// ---------------------------------------------------------------- predict

int cmd_predict(const std::string& checkpoint, const std::string& query, const std::string& tags) {
  require_input(checkpoint, "checkpoint");
  const auto tokens = split_ws(query);
  const auto tag_seq = split_ws(tags);
  if (tokens.empty()) throw ArgumentError("predict: empty query");
  if (tokens.size() != tag_seq.size())
    throw ArgumentError("predict: " + std::to_string(tokens.size()) + " tokens but " + std::to_string(tag_seq.size()) +
                        " tags");
  const Model model = load_checkpoint(checkpoint);
  for (const auto& t : tokens)
    if (!model.vocab.has_token(t)) std::cerr << "warning: unseen token '" << t << "' mapped to [UNK]\n";
  for (const auto& t : tag_seq)
    if (!model.vocab.has_tag(t)) std::cerr << "warning: unseen tag '" << t << "' mapped to [UNK]\n";
  const TagGraph* graph = model.config.graph == GraphMode::static_graph ? &model.graph : nullptr;
  const EncodedQuery q = encode_query(tokens, tag_seq, {}, model.vocab, model.config, graph);
  const auto labels = predict_labels(model, std::span<const EncodedQuery>(&q, 1)).front();
  for (std::size_t i = 0; i < tokens.size(); ++i)
    std::cout << tokens[i] << '\t' << tag_seq[i] << '\t' << (labels[i] == kKeep ? "keep" : "drop") << '\n';
  std::string phrase;
  for (const auto& t : kept_tokens(tokens, labels)) phrase += (phrase.empty() ? "" : " ") + t;
  std::cout << "phrase: " << phrase << '\n';
  return kOk;
}

// ---------------------------------------------------------------- compare

struct CompareArgs {
  std::string train, validation, test, graph, out_dir, seeds = "1,2,3", variants;
};

int cmd_compare(RunConfig rc, const CompareArgs& a, const TrainFlags& flags) {
  flags.apply(rc);
  const std::string train_path = a.train.empty() ? rc.paths.train : a.train;
  const std::string val_path = a.validation.empty() ? rc.paths.validation : a.validation;
  const std::string test_path = a.test.empty() ? rc.paths.test : a.test;
  const std::string graph_path = a.graph.empty() ? rc.paths.graph : a.graph;
  const fs::path out_dir = a.out_dir.empty() ? fs::path(rc.paths.out_dir) : fs::path(a.out_dir);
  const auto seeds = parse_seeds(a.seeds);
  std::vector<VariantSpec> variants;
  if (a.variants.empty()) {
    variants = default_variants();
  } else {
    std::stringstream in(a.variants);
    for (std::string v; std::getline(in, v, ',');) variants.push_back(parse_variant(v));
  }
  require_input(train_path, "training data");
  require_input(val_path, "validation data");
  require_input(test_path, "test data");
  if (!graph_path.empty()) require_input(graph_path, "graph");
  if (out_dir.empty()) throw ArgumentError("compare: --out-dir is required");
  if (!fs::is_directory(out_dir)) throw DataError("compare: output directory does not exist: " + out_dir.string());

  const auto train_records = read_dataset(train_path);
  const auto val_records = read_dataset(val_path);
  const auto test_records = read_dataset(test_path);
  TagGraph graph;
  if (!graph_path.empty()) {
    graph = read_graph(graph_path);
  } else {
    graph = mine_tag_pairs(train_records, default_min_support(train_records.size()));
    std::cerr << "mined " << graph.size() << " edges at min_support=" << graph.min_support << "\n";
  }

  const ExperimentData data{train_records, val_records, test_records, &graph};
  const ExperimentResult result = run_experiment(variants, rc.model, rc.train, data, seeds, [](const ExperimentCell& c) {
    if (c.ok)
      std::fprintf(stderr, "%-14s seed %llu  f1 %.4f  em %.4f  token_acc %.4f\n", c.variant.c_str(),
                   static_cast<unsigned long long>(c.seed), c.metrics.f1, c.metrics.exact_match, c.metrics.token_acc);
    else
      std::fprintf(stderr, "%-14s seed %llu  FAILED: %s\n", c.variant.c_str(), static_cast<unsigned long long>(c.seed),
                   c.error.c_str());
  });

  StagedFiles staged;
  write_comparison_csv(result, staged.stage(out_dir / "comparison.csv"));
  write_summary_csv(result, staged.stage(out_dir / "summary.csv"));
  write_per_length_csv(result, staged.stage(out_dir / "per_length.csv"));
  const std::string table = format_comparison_table(result);
  {
    std::ofstream f(staged.stage(out_dir / "comparison.txt"), std::ios::binary | std::ios::trunc);
    f << table;
  }
  staged.commit();
  std::cout << table;
  for (const auto& c : result.cells)
    if (!c.ok) return kNumeric;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tag-aware token-dropping classifier for e-commerce queries"};
  app.require_subcommand(1);
  std::string config;
  app.add_option("--config", config, "JSON run configuration {model, train, synth, paths}");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic tagged corpus with a 6:2:2 split");
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_records;
  gen->add_option("--out-dir", gen_out, "Directory for train/validation/test .jsonl and manifest.json");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--records", gen_records, "Total record count");

  auto* mine = app.add_subcommand("mine", "Mine the static tag-association graph");
  std::string mine_train, mine_out, mine_scoring = "frequency";
  std::optional<std::int64_t> mine_support;
  double mine_pmi = 0.0;
  mine->add_option("--train", mine_train, "Training corpus (.jsonl)")->required();
  mine->add_option("--out", mine_out, "Output graph (.tsv)")->required();
  mine->add_option("--min-support", mine_support, "Absolute support threshold (default 0.5% of queries)");
  mine->add_option("--scoring", mine_scoring, "frequency | pmi");
  mine->add_option("--min-pmi", mine_pmi, "PMI floor for --scoring pmi");

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  TrainArgs targs;
  TrainFlags tflags;
  tr->add_option("--train", targs.train, "Training corpus");
  tr->add_option("--validation", targs.validation, "Validation corpus");
  tr->add_option("--graph", targs.graph, "Static tag graph (.tsv)");
  tr->add_option("--out", targs.out, "Checkpoint path");
  tr->add_option("--log", targs.log, "Epoch log CSV");
  tr->add_option("--graph-mode", targs.graph_mode, "static | dynamic | none");
  tr->add_option("--fusion", targs.fusion, "gated | mean | min | max");
  tflags.add(tr);

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a labeled corpus");
  std::string ev_ckpt, ev_data, ev_out, ev_len;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Labeled corpus")->required();
  ev->add_option("--out", ev_out, "Metrics JSON (default: stdout)");
  ev->add_option("--per-length", ev_len, "Per-length CSV");

  auto* pr = app.add_subcommand("predict", "Label the tokens of one query");
  std::string pr_ckpt, pr_query, pr_tags;
  pr->add_option("--checkpoint", pr_ckpt, "Checkpoint")->required();
  pr->add_option("--query", pr_query, "Whitespace-separated tokens")->required();
  pr->add_option("--tags", pr_tags, "Whitespace-separated tags, one per token")->required();

  auto* cmp = app.add_subcommand("compare", "Train every variant for every seed and tabulate test metrics");
  CompareArgs cargs;
  TrainFlags cflags;
  cmp->add_option("--train", cargs.train, "Training corpus");
  cmp->add_option("--validation", cargs.validation, "Validation corpus");
  cmp->add_option("--test", cargs.test, "Test corpus");
  cmp->add_option("--graph", cargs.graph, "Static tag graph (default: mined from --train)");
  cmp->add_option("--out-dir", cargs.out_dir, "Directory for comparison/summary/per_length CSVs");
  cmp->add_option("--seeds", cargs.seeds, "Comma-separated seeds");
  cmp->add_option("--variants", cargs.variants, "Comma-separated variants (default: all four)");
  cflags.add(cmp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const RunConfig rc = load_run_config(config);
    if (*gen) return cmd_gen_data(rc, gen_out, gen_seed, gen_records);
    if (*mine) return cmd_mine(mine_train, mine_support, mine_scoring, mine_pmi, mine_out);
    if (*tr) return cmd_train(rc, targs, tflags);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_len);
    if (*pr) return cmd_predict(pr_ckpt, pr_query, pr_tags);
    if (*cmp) return cmd_compare(rc, cargs, cflags);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
