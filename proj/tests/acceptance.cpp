// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "tagbert/error.hpp"
#include "tagbert/train.hpp"

#ifndef TAGBERT_CLI_PATH
#error "TAGBERT_CLI_PATH must point at the tagbert binary"
#endif
#ifndef TAGBERT_SOURCE_DIR
#error "TAGBERT_SOURCE_DIR must point at the source tree"
#endif

using namespace tagbert;
namespace fs = std::filesystem;
using Eigen::Index;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr double kMaskTol = 1e-12;
constexpr int kMaskTrials = 100;
constexpr double kRowSumTol = 1e-6;
constexpr int kNormForwards = 1000;
constexpr std::size_t kMiningQueries = 10000;
constexpr double kMiningSeconds = 5.0;
constexpr std::size_t kMetricRecords = 1000;
constexpr double kStaticGatedMinAcc = 0.90;
constexpr double kMinGainOverBaseline = 0.03;
constexpr double kCompareSeconds = 1800.0;
constexpr double kOrderingTie = 0.005;
constexpr double kLengthAccBand = 0.05;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string("\"") + TAGBERT_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

using CsvRow = std::map<std::string, std::string>;

std::vector<CsvRow> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing " + p.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
  };
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    CsvRow row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------- shared fixtures

std::vector<QueryRecord> synthetic(std::size_t n, std::uint64_t seed) {
  SynthConfig cfg = SynthConfig::defaults();
  cfg.record_count = n;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

Model random_model(ModelConfig cfg, const std::vector<QueryRecord>& records, const TagGraph& graph,
                   std::uint64_t seed, double init_std) {
  Model m;
  cfg.init_std = init_std;
  m.config = cfg;
  m.vocab = Vocab::build(records);
  m.graph = graph;
  m.params = init_params(cfg, m.vocab.token_count(), m.vocab.tag_count(), seed);
  return m;
}

ModelConfig small_config(GraphMode graph, int d_model, int heads, int layers) {
  ModelConfig c;
  c.d_model = d_model;
  c.n_heads = heads;
  c.n_layers = layers;
  c.d_ff = 2 * d_model;
  c.graph = graph;
  return c;
}

double loss_of(const ModelConfig& cfg, const Batch& batch, const ModelParams& params) {
  Tape tape;
  const ParamVars vars = register_params(tape, params, false);
  return batch_loss(forward(tape, vars, cfg, batch).probs, batch).value()(0, 0);
}

// ---------------------------------------------------------------- criteria

Outcome gradient_check() {
  const auto records = synthetic(500, 3);
  const TagGraph graph = mine_tag_pairs(records, 5);
  const QueryRecord* four = nullptr;
  for (const auto& r : records)
    if (r.length() == 4) {
      four = &r;
      break;
    }
  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  const auto t0 = Clock::now();
  for (GraphMode mode : {GraphMode::static_graph, GraphMode::dynamic, GraphMode::none}) {
    const Model m = random_model(small_config(mode, 8, 2, 1), records, graph, 5, 0.3);
    const EncodedQuery q = encode_record(*four, m.vocab, m.config, mode == GraphMode::static_graph ? &graph : nullptr);
    const Batch batch = make_batch(std::span<const EncodedQuery>(&q, 1));
    Tape tape;
    const ParamVars vars = register_params(tape, m.params, true);
    tape.backward(batch_loss(forward(tape, vars, m.config, batch).probs, batch));
    for (const auto& [name, value] : m.params.tensors) {
      const Tensor numeric = finite_diff_grad<double>(
          [&, name = name](const Tensor& probe) {
            ModelParams p = m.params;
            p.at(name) = probe;
            return loss_of(m.config, batch, p);
          },
          value, 1e-5);
      const Tensor& analytic = tape.grad(vars.at(name));
      // norms below 1e-6 are compared absolutely
      const double err = (analytic - numeric).norm() / std::max({analytic.norm(), numeric.norm(), 1e-6});
      if (err > worst) {
        worst = err;
        worst_name = to_string(mode) + ":" + name;
      }
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < kGradSeconds,
          fmt("gradient check: %zu tensors over 3 graph modes, max rel err %.2e (%s), %.2f s [tol %.0e, %.0f s]",
              checked, worst, worst_name.c_str(), secs, kGradRelTol, kGradSeconds)};
}

std::vector<std::string> tag_inventory(const std::vector<QueryRecord>& records) {
  std::set<std::string> tags;
  for (const auto& r : records) tags.insert(r.tags.begin(), r.tags.end());
  return {tags.begin(), tags.end()};
}

Outcome masking() {
  const auto records = synthetic(2000, 4);
  const auto tags = tag_inventory(records);
  std::mt19937_64 gen(17);
  std::size_t zero_checks = 0, perturb_checks = 0, nonzero = 0;
  double worst_change = 0;
  for (int trial = 0; trial < kMaskTrials; ++trial) {
    TagGraph graph;
    for (std::size_t a = 0; a < tags.size(); ++a)
      for (std::size_t b = a; b < tags.size(); ++b)
        if (gen() % 4 == 0) graph.edges[make_tag_pair(tags[a], tags[b])] = 1;
    const QueryRecord& base = records[gen() % records.size()];
    std::vector<std::string> qtags;
    for (std::size_t i = 0; i < base.length(); ++i) qtags.push_back(tags[gen() % tags.size()]);
    const Model m = random_model(small_config(GraphMode::static_graph, 16, 2, 1), records, graph, trial + 1, 0.5);
    const EncodedQuery q = encode_query(base.source, qtags, {}, m.vocab, m.config, &m.graph);
    const ForwardTrace ref = trace_query(m, q);
    const Index n = static_cast<Index>(q.token_ids.size());
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < n; ++k)
        if (q.adjacency(i, k) == 0) {
          ++zero_checks;
          if (ref.attention(i, k) != 0.0) ++nonzero;
        }
    std::normal_distribution<double> noise(0.0, 1.0);
    for (Index k = 0; k < n; ++k) {
      Model p = m;
      for (Index c = 0; c < p.params.at("position_embedding").cols(); ++c)
        p.params.at("position_embedding")(k, c) += noise(gen);  // changes v_k only
      const ForwardTrace moved = trace_query(p, q);
      for (Index i = 0; i < n; ++i) {
        if (q.adjacency(i, k) != 0) continue;
        ++perturb_checks;
        worst_change = std::max(worst_change, (moved.o.row(i) - ref.o.row(i)).cwiseAbs().maxCoeff());
      }
    }
  }
  return {nonzero == 0 && worst_change < kMaskTol && perturb_checks > 0,
          fmt("masking: %zu non-adjacent weights, %zu nonzero; %zu perturbations, max |delta o_i| %.1e [tol %.0e]",
              zero_checks, nonzero, perturb_checks, worst_change, kMaskTol)};
}

Outcome normalization() {
  const auto records = synthetic(2000, 6);
  const TagGraph graph = mine_tag_pairs(records, 10);
  std::vector<Model> models;
  for (GraphMode mode : {GraphMode::static_graph, GraphMode::dynamic, GraphMode::none})
    for (std::uint64_t seed : {1, 2}) models.push_back(random_model(small_config(mode, 16, 4, 2), records, graph, seed, 1.0));
  std::mt19937_64 gen(23);
  double worst = 0;
  std::size_t rows = 0;
  for (int f = 0; f < kNormForwards; ++f) {
    const Model& m = models[f % models.size()];
    std::vector<EncodedQuery> qs;
    for (std::size_t b = 1 + gen() % 4; b > 0; --b)
      qs.push_back(encode_record(records[gen() % records.size()], m.vocab, m.config,
                                 m.config.graph == GraphMode::static_graph ? &m.graph : nullptr));
    const Batch batch = make_batch(qs);
    Tape tape;
    ForwardOptions opt;
    opt.capture = true;
    const ForwardTrace tr = forward(tape, register_params(tape, m.params, false), m.config, batch, opt).trace;
    const Index w = batch.segments.max_length();
    auto check = [&](const Tensor& packed, Index heads) {
      for (Index r = 0; r < packed.rows(); ++r)
        for (Index h = 0; h < heads; ++h) {
          worst = std::max(worst, std::abs(packed.block(r, h * w, 1, w).sum() - 1.0));
          ++rows;
        }
    };
    for (const auto& la : tr.left_attention) check(la, m.config.n_heads);
    if (tr.has_right_tower) check(tr.attention, m.config.right_heads);
    if (tr.has_dynamic_graph) check(tr.tag_attention, 1);
    for (Index r = 0; r < tr.p.rows(); ++r) {
      worst = std::max(worst, std::abs(tr.p.row(r).sum() - 1.0));
      ++rows;
    }
  }
  return {worst < kRowSumTol, fmt("normalization: %d forwards, %zu rows, max |row sum - 1| %.1e [tol %.0e]",
                                  kNormForwards, rows, worst, kRowSumTol)};
}

Outcome mining() {
  const auto records = synthetic(kMiningQueries, 8);
  std::map<TagPair, std::int64_t> oracle;
  for (const auto& r : records) {
    std::set<TagPair> seen;
    for (std::size_t i = 0; i < r.tags.size(); ++i)
      for (std::size_t k = 0; k < r.tags.size(); ++k)
        if (i != k) seen.insert({std::min(r.tags[i], r.tags[k]), std::max(r.tags[i], r.tags[k])});
    for (const auto& p : seen) ++oracle[p];
  }
  bool equal = true;
  double secs = 0;
  std::size_t edges = 0;
  for (std::int64_t support : {std::int64_t{1}, default_min_support(records.size()), std::int64_t{1000}}) {
    const auto t0 = Clock::now();
    const TagGraph g = mine_tag_pairs(records, support);
    secs = std::max(secs, seconds_since(t0));
    std::map<TagPair, std::int64_t> expected;
    for (const auto& [p, n] : oracle)
      if (n >= support) expected.emplace(p, n);
    equal = equal && g.edges == expected;
    if (support == 1) edges = g.size();
  }
  return {equal && secs < kMiningSeconds,
          fmt("mining: %zu queries, %zu pairs, exact match with brute force at 3 supports: %s, %.3f s [limit %.0f s]",
              records.size(), edges, equal ? "yes" : "no", secs, kMiningSeconds)};
}

Outcome metric_oracle() {
  const auto records = synthetic(4000, 9);
  const std::vector<QueryRecord> train_set(records.begin(), records.begin() + 2000);
  const std::vector<QueryRecord> val(records.begin() + 2000, records.begin() + 3000);
  const std::vector<QueryRecord> eval_set(records.begin() + 3000, records.begin() + 3000 + kMetricRecords);
  TrainConfig t;
  t.epochs = 1;
  const TrainResult trained = train(small_config(GraphMode::dynamic, 16, 2, 1), t, train_set, val, nullptr);
  const MetricsReport report = evaluate(trained.model, eval_set);

  std::vector<EncodedQuery> qs;
  for (const auto& r : eval_set) qs.push_back(encode_record(r, trained.model.vocab, trained.model.config, nullptr));
  const auto pred = predict_labels(trained.model, qs);
  std::int64_t tp[2] = {0, 0}, fp[2] = {0, 0}, fn[2] = {0, 0}, tokens = 0, correct = 0, exact = 0;
  for (std::size_t q = 0; q < eval_set.size(); ++q) {
    bool same = true;
    for (std::size_t i = 0; i < eval_set[q].labels.size(); ++i) {
      const int g = eval_set[q].labels[i] == kKeep ? 0 : 1, p = pred[q][i] == kKeep ? 0 : 1;
      ++tokens;
      if (g == p) {
        ++correct;
        ++tp[g];
      } else {
        same = false;
        ++fn[g];
        ++fp[p];
      }
    }
    exact += same;
  }
  double f1_sum = 0;
  int classes = 0;
  for (int k = 0; k < 2; ++k)
    if (tp[k] + fp[k] + fn[k] > 0) {
      f1_sum += 2.0 * static_cast<double>(tp[k]) / static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
      ++classes;
    }
  const double f1 = f1_sum / classes;
  const double em = static_cast<double>(exact) / static_cast<double>(eval_set.size());
  const double acc = static_cast<double>(correct) / static_cast<double>(tokens);
  const double imp = percent_improvement(0.807, 0.783);
  const bool imp_ok = fmt("%.1f", imp) == "3.1";
  const bool metrics_ok = report.f1 == f1 && report.exact_match == em && report.token_acc == acc;
  return {metrics_ok && imp_ok,
          fmt("metric oracle: %zu records, f1 %.6f/%.6f em %.6f/%.6f acc %.6f/%.6f (exact equality); "
              "imp(0.807 vs 0.783) = %.3f -> %.1f [expected 3.1]",
              eval_set.size(), report.f1, f1, report.exact_match, em, report.token_acc, acc, imp, imp)};
}

Outcome gate_degeneracy() {
  const auto records = synthetic(3000, 10);
  const TagGraph graph = mine_tag_pairs(records, default_min_support(records.size()));
  std::size_t tokens = 0, agree = 0;
  double worst = 0;
  for (GraphMode mode : {GraphMode::static_graph, GraphMode::dynamic}) {
    const Model full = random_model(small_config(mode, 32, 4, 2), records, graph, 31, 0.5);
    Model left = full;
    left.config.graph = GraphMode::none;
    for (std::size_t start = 0; start < 1000; start += 100) {
      std::vector<EncodedQuery> qf, ql;
      for (std::size_t i = start; i < start + 100; ++i) {
        qf.push_back(encode_record(records[i], full.vocab, full.config, &graph));
        ql.push_back(encode_record(records[i], left.vocab, left.config, nullptr));
      }
      Tape tape;
      ForwardOptions opt;
      opt.gate_override = 1.0;
      const Tensor pf =
          forward(tape, register_params(tape, full.params, false), full.config, make_batch(qf), opt).probs.value();
      const Tensor pl = forward(tape, register_params(tape, left.params, false), left.config, make_batch(ql)).probs.value();
      worst = std::max(worst, (pf - pl).cwiseAbs().maxCoeff());
      for (Index r = 0; r < pf.rows(); ++r) {
        Index a, b;
        pf.row(r).maxCoeff(&a);
        pl.row(r).maxCoeff(&b);
        agree += a == b;
        ++tokens;
      }
    }
  }
  return {agree == tokens, fmt("gate degeneracy: e_s = 1 vs left tower alone, argmax agreement %zu/%zu, "
                               "max |delta p| %.1e [required 100%%]",
                               agree, tokens, worst)};
}

// ---------------------------------------------------------------- reference comparison

struct Reference {
  bool ok = false;
  std::string error;
  double seconds = 0;
  std::map<std::string, CsvRow> summary;                          // by variant
  std::map<std::string, std::map<int, CsvRow>> per_length;        // variant -> length
};

Reference run_reference(const fs::path& work, bool reuse) {
  Reference ref;
  const fs::path data = work / "reference", out = data / "compare";
  const std::string config = std::string(TAGBERT_SOURCE_DIR) + "/configs/reference.json";
  if (!(reuse && fs::exists(out / "summary.csv") && fs::exists(out / "seconds.txt"))) {
    fs::remove_all(data);
    fs::create_directories(out);
    if (run_cli("--config \"" + config + "\" gen-data --out-dir \"" + data.string() + "\"", data / "gen.log") != 0) {
      ref.error = "gen-data failed, see " + (data / "gen.log").string();
      return ref;
    }
    const auto t0 = Clock::now();
    const int code = run_cli("--config \"" + config + "\" compare --train \"" + (data / "train.jsonl").string() +
                                 "\" --validation \"" + (data / "validation.jsonl").string() + "\" --test \"" +
                                 (data / "test.jsonl").string() + "\" --out-dir \"" + out.string() +
                                 "\" --seeds 1,2,3",
                             data / "compare.log");
    ref.seconds = seconds_since(t0);
    std::ofstream(out / "seconds.txt") << ref.seconds << '\n';
    if (code != 0) {
      ref.error = "compare exited with " + std::to_string(code) + ", see " + (data / "compare.log").string();
      return ref;
    }
  } else {
    ref.seconds = std::stod(slurp(out / "seconds.txt"));
  }
  for (const auto& row : read_csv(out / "summary.csv")) ref.summary[row.at("variant")] = row;
  for (const auto& row : read_csv(out / "per_length.csv"))
    ref.per_length[row.at("variant")][std::stoi(row.at("length"))] = row;
  std::cout << slurp(out / "comparison.txt");
  ref.ok = true;
  return ref;
}

double acc_of(const Reference& ref, const std::string& variant) {
  return std::stod(ref.summary.at(variant).at("token_acc_mean"));
}

Outcome learning(const Reference& ref) {
  if (!ref.ok) return {false, "learning: " + ref.error};
  const double sg = acc_of(ref, "static-gated"), base = acc_of(ref, "none");
  return {sg >= kStaticGatedMinAcc && sg - base >= kMinGainOverBaseline && ref.seconds < kCompareSeconds,
          fmt("learning: static-gated token acc %.4f [>= %.2f], baseline %.4f, gain %.2f points [>= %.0f]; "
              "compare %.0f s [limit %.0f s]",
              sg, kStaticGatedMinAcc, base, 100 * (sg - base), 100 * kMinGainOverBaseline, ref.seconds,
              kCompareSeconds)};
}

Outcome ordering(const Reference& ref) {
  if (!ref.ok) return {false, "ordering: " + ref.error};
  const double dg = acc_of(ref, "dynamic-gated"), sg = acc_of(ref, "static-gated"), sm = acc_of(ref, "static-mean"),
               base = acc_of(ref, "none");
  return {dg >= sg - kOrderingTie && sg >= sm && sm >= base,
          fmt("ordering: token acc dynamic-gated %.4f >= static-gated %.4f >= static-mean %.4f >= none %.4f "
              "[tie %.1f points on the first]",
              dg, sg, sm, base, 100 * kOrderingTie)};
}

Outcome length_trend(const Reference& ref) {
  if (!ref.ok) return {false, "length trend: " + ref.error};
  const auto it = ref.per_length.find("dynamic-gated");
  if (it == ref.per_length.end()) return {false, "length trend: no dynamic-gated rows"};
  std::string em_seq, acc_seq;
  bool decreasing = true;
  double prev = 2, lo = 1, hi = 0;
  for (int len = 3; len <= 7; ++len) {
    const auto row = it->second.find(len);
    if (row == it->second.end()) return {false, fmt("length trend: no queries of length %d", len)};
    const double em = std::stod(row->second.at("exact_match")), acc = std::stod(row->second.at("token_acc"));
    decreasing = decreasing && em < prev;
    prev = em;
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
    em_seq += fmt("%s%.3f", len == 3 ? "" : " > ", em);
    acc_seq += fmt("%s%.3f", len == 3 ? "" : " ", acc);
  }
  return {decreasing && hi - lo <= kLengthAccBand,
          fmt("length trend (dynamic-gated, lengths 3-7): EM %s strictly decreasing: %s; token acc %s band %.1f points "
              "[<= %.0f]",
              em_seq.c_str(), decreasing ? "yes" : "no", acc_seq.c_str(), 100 * (hi - lo), 100 * kLengthAccBand)};
}

Outcome determinism(const fs::path& work) {
  const fs::path data = work / "determinism";
  fs::remove_all(data);
  fs::create_directories(data / "a");
  fs::create_directories(data / "b");
  const std::string config = std::string(TAGBERT_SOURCE_DIR) + "/configs/reference.json";
  if (run_cli("--config \"" + config + "\" gen-data --records 4000 --out-dir \"" + data.string() + "\"",
              data / "gen.log") != 0)
    return {false, "determinism: gen-data failed"};
  for (const char* side : {"a", "b"}) {
    const int code = run_cli("compare --train \"" + (data / "train.jsonl").string() + "\" --validation \"" +
                                 (data / "validation.jsonl").string() + "\" --test \"" + (data / "test.jsonl").string() +
                                 "\" --out-dir \"" + (data / side).string() +
                                 "\" --seeds 1,2 --epochs 2 --d-model 16 --heads 2 --layers 1",
                             data / (std::string(side) + ".log"));
    if (code != 0) return {false, fmt("determinism: compare run %s exited with %d", side, code)};
  }
  std::size_t same = 0, files = 0;
  for (const char* f : {"comparison.csv", "summary.csv", "per_length.csv", "comparison.txt"}) {
    ++files;
    const std::string a = slurp(data / "a" / f);
    same += !a.empty() && a == slurp(data / "b" / f);
  }
  return {same == files, fmt("determinism: two compare runs (4 variants x 2 seeds, 2400 train records), "
                             "%zu/%zu output files byte-identical",
                             same, files)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work_dir = (fs::temp_directory_path() / "tagbert_acceptance").string();
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--work-dir", work_dir, "Scratch directory for generated data and runs");
  app.add_option("--only", only, "Run just these criteria");
  app.add_flag("--reuse-reference", reuse, "Reuse an existing reference comparison in the work dir");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::create_directories(work);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  std::map<int, Outcome> results;
  auto record = [&](int c, const std::function<Outcome()>& fn) {
    if (!wanted(c)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results[c] = o;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << o.detail << std::endl;
  };

  record(1, gradient_check);
  record(2, masking);
  record(3, normalization);
  record(4, mining);
  record(5, metric_oracle);
  record(8, gate_degeneracy);
  record(9, [&] { return determinism(work); });
  if (wanted(6) || wanted(7) || wanted(10)) {
    const Reference ref = run_reference(work, reuse);
    record(6, [&] { return learning(ref); });
    record(7, [&] { return ordering(ref); });
    record(10, [&] { return length_trend(ref); });
  }

  std::cout << "\nsummary\n";
  int failures = 0;
  for (const auto& [c, o] : results) {
    std::cout << "  criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << '\n';
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
