#include "tagbert/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "tagbert/error.hpp"

namespace tagbert {

namespace {

using Eigen::Index;

std::string layer_key(const char* tower, int layer, const char* name) {
  return std::string(tower) + "." + std::to_string(layer) + "." + name;
}

Tensor normal_tensor(Index rows, Index cols, double std_dev, Rng& rng) {
  Tensor t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = std_dev * rng.normal();
  return t;
}

Tensor packed_block_mask(const ad::Segments& seg) {
  const Index width = seg.max_length();
  Tensor full = Tensor::Zero(seg.total(), width);
  for (Index q = 0; q < seg.count(); ++q) full.block(seg.start(q), 0, seg.length(q), seg.length(q)).setOnes();
  return full;
}

Var affine(Var x, const ParamVars& p, const std::string& weight, const std::string& bias) {
  return ad::add_row(ad::matmul(x, p.at(weight)), p.at(bias));
}

Var maybe_dropout(Var x, const ModelConfig& cfg, const ForwardOptions& opt) {
  if (!opt.training || cfg.dropout <= 0 || opt.dropout_rng == nullptr) return x;
  const double keep = 1.0 - cfg.dropout;
  Tensor mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = opt.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return ad::apply_mask(x, std::move(mask));
}

// Raw per-query dot-product affinities in packed layout (trace only).
Tensor packed_affinity(const Tensor& q, const Tensor& k, const ad::Segments& seg) {
  Tensor out = Tensor::Zero(seg.total(), seg.max_length());
  for (Index s = 0; s < seg.count(); ++s) {
    const Index st = seg.start(s), len = seg.length(s);
    out.block(st, 0, len, len) = q.middleRows(st, len) * k.middleRows(st, len).transpose();
  }
  return out;
}

Tensor packed_apply(const Tensor& weights, const Tensor& values, const ad::Segments& seg) {
  Tensor out = Tensor::Zero(values.rows(), values.cols());
  for (Index s = 0; s < seg.count(); ++s) {
    const Index st = seg.start(s), len = seg.length(s);
    out.middleRows(st, len) = weights.block(st, 0, len, len) * values.middleRows(st, len);
  }
  return out;
}

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------- config

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::gated: return "gated";
    case FusionMode::mean: return "mean";
    case FusionMode::min: return "min";
    case FusionMode::max: return "max";
  }
  return "?";
}

std::string to_string(GraphMode m) {
  switch (m) {
    case GraphMode::static_graph: return "static";
    case GraphMode::dynamic: return "dynamic";
    case GraphMode::none: return "none";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "gated") return FusionMode::gated;
  if (s == "mean") return FusionMode::mean;
  if (s == "min") return FusionMode::min;
  if (s == "max") return FusionMode::max;
  throw ArgumentError("unknown fusion mode '" + s + "' (expected gated, mean, min or max)");
}

GraphMode parse_graph_mode(const std::string& s) {
  if (s == "static") return GraphMode::static_graph;
  if (s == "dynamic") return GraphMode::dynamic;
  if (s == "none") return GraphMode::none;
  throw ArgumentError("unknown graph mode '" + s + "' (expected static, dynamic or none)");
}

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw ArgumentError("model config: d_model must be a positive multiple of n_heads");
  if (right_heads < 1 || d_model % right_heads != 0)
    throw ArgumentError("model config: d_model must be a multiple of right_heads");
  if (n_layers < 1 || right_layers < 1 || d_ff < 1) throw ArgumentError("model config: layer sizes must be positive");
  if (num_classes != kNumClasses) throw ArgumentError("model config: num_classes must be 3");
  if (max_len < 3) throw ArgumentError("model config: max_len must leave room for CLS and SEP");
  if (!(eps > 0)) throw ArgumentError("model config: eps must be positive");
  if (dropout < 0 || dropout >= 1) throw ArgumentError("model config: dropout must be in [0, 1)");
  if (tag_dim < 0) throw ArgumentError("model config: tag_dim must be >= 0");
  if (!(init_std > 0)) throw ArgumentError("model config: init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},         {"n_heads", n_heads},
          {"n_layers", n_layers},       {"d_ff", d_ff},
          {"num_classes", num_classes}, {"max_len", max_len},
          {"fusion", to_string(fusion)}, {"graph", to_string(graph)},
          {"eps", eps},                 {"dropout", dropout},
          {"right_layers", right_layers}, {"right_heads", right_heads},
          {"tag_dim", tag_dim},         {"gate", vector_gate ? "vector" : "scalar"},
          {"norm_affine", vector_norm ? "vector" : "scalar"}, {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, ModelConfig c) {
  static const std::set<std::string> kKeys = {"d_model", "n_heads",      "n_layers",    "d_ff",    "num_classes",
                                              "max_len", "fusion",       "graph",       "eps",     "dropout",
                                              "right_layers", "right_heads", "tag_dim", "gate", "norm_affine",
                                              "init_std"};
  if (!j.is_object()) throw ArgumentError("model config: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.contains(key)) throw ArgumentError("model config: unknown key '" + key + "'");
  auto get_int = [&](const char* k, int& dst) {
    if (j.contains(k)) dst = j.at(k).get<int>();
  };
  get_int("d_model", c.d_model);
  get_int("n_heads", c.n_heads);
  get_int("n_layers", c.n_layers);
  get_int("d_ff", c.d_ff);
  get_int("num_classes", c.num_classes);
  get_int("max_len", c.max_len);
  get_int("right_layers", c.right_layers);
  get_int("right_heads", c.right_heads);
  get_int("tag_dim", c.tag_dim);
  if (j.contains("fusion")) c.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
  if (j.contains("graph")) c.graph = parse_graph_mode(j.at("graph").get<std::string>());
  if (j.contains("eps")) c.eps = j.at("eps").get<double>();
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
  if (j.contains("gate")) {
    const auto g = j.at("gate").get<std::string>();
    if (g != "vector" && g != "scalar") throw ArgumentError("model config: gate must be 'vector' or 'scalar'");
    c.vector_gate = g == "vector";
  }
  if (j.contains("norm_affine")) {
    const auto n = j.at("norm_affine").get<std::string>();
    if (n != "vector" && n != "scalar") throw ArgumentError("model config: norm_affine must be 'vector' or 'scalar'");
    c.vector_norm = n == "vector";
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- params

const Tensor& ModelParams::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ArgumentError("model params: no tensor named '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ArgumentError("model params: no tensor named '" + name + "'");
  return it->second;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : tensors)
    if (!t.allFinite()) return false;
  return true;
}

ModelParams init_params(const ModelConfig& cfg, int token_count, int tag_count, std::uint64_t seed) {
  cfg.validate();
  if (token_count < Vocab::kReservedTokens || tag_count < Vocab::kReservedTags)
    throw ArgumentError("init_params: vocabulary too small");
  Rng rng(seed);
  const Index d = cfg.d_model;
  const double sd = cfg.init_std;
  ModelParams p;
  auto normal = [&](const std::string& name, Index r, Index c) { p.tensors[name] = normal_tensor(r, c, sd, rng); };
  auto fill = [&](const std::string& name, Index r, Index c, double v) { p.tensors[name] = Tensor::Constant(r, c, v); };

  normal("token_embedding", token_count, d);
  normal("type_embedding", tag_count, d);
  normal("position_embedding", cfg.max_len, d);

  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) normal(layer_key("left", l, w), d, d);
    for (const char* b : {"bq", "bk", "bv", "bo"}) fill(layer_key("left", l, b), 1, d, 0.0);
    fill(layer_key("left", l, "ln1_gamma"), 1, d, 1.0);
    fill(layer_key("left", l, "ln1_beta"), 1, d, 0.0);
    normal(layer_key("left", l, "W_ff1"), d, cfg.d_ff);
    fill(layer_key("left", l, "b_ff1"), 1, cfg.d_ff, 0.0);
    normal(layer_key("left", l, "W_ff2"), cfg.d_ff, d);
    fill(layer_key("left", l, "b_ff2"), 1, d, 0.0);
    fill(layer_key("left", l, "ln2_gamma"), 1, d, 1.0);
    fill(layer_key("left", l, "ln2_beta"), 1, d, 0.0);
  }

  if (cfg.graph != GraphMode::none) {
    const Index affine_width = cfg.vector_norm ? d : 1;
    for (int l = 0; l < cfg.right_layers; ++l) {
      for (const char* w : {"W1", "W2", "W3", "W4", "W5"}) normal(layer_key("right", l, w), d, d);
      fill(layer_key("right", l, "b"), 1, d, 0.0);
      fill(layer_key("right", l, "gamma"), 1, affine_width, 1.0);
      fill(layer_key("right", l, "beta"), 1, affine_width, 0.0);
      fill(layer_key("right", l, "gamma_ffn"), 1, affine_width, 1.0);
      fill(layer_key("right", l, "beta_ffn"), 1, affine_width, 0.0);
    }
    if (cfg.fusion == FusionMode::gated) {
      const Index gate_width = cfg.vector_gate ? d : 1;
      normal("W6", d, gate_width);
      fill("c", 1, gate_width, 0.0);
    }
    if (cfg.graph == GraphMode::dynamic) {
      const Index t = cfg.tag_width();
      normal("tag_embedding", tag_count, t);
      normal("tag_position_embedding", cfg.max_len, t);
      normal("W7", t, t);
      normal("W8", t, t);
      normal("W9", t, t);
    }
  }

  normal("head.W", d, cfg.num_classes);
  fill("head.b", 1, cfg.num_classes, 0.0);
  return p;
}

// ---------------------------------------------------------------- encoding & batching

EncodedQuery encode_query(std::span<const std::string> tokens, std::span<const std::string> tags,
                          std::span<const int> labels, const Vocab& vocab, const ModelConfig& cfg,
                          const TagGraph* graph) {
  if (tokens.empty()) throw ArgumentError("encode: empty query");
  if (tokens.size() != tags.size()) throw ArgumentError("encode: token/tag count mismatch");
  if (!labels.empty() && labels.size() != tokens.size()) throw ArgumentError("encode: label count mismatch");
  const std::size_t wrapped = tokens.size() + 2;
  if (wrapped > static_cast<std::size_t>(cfg.max_len))
    throw ArgumentError("encode: query of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                        std::to_string(cfg.max_len));
  EncodedQuery e;
  e.source_length = static_cast<int>(tokens.size());
  e.token_ids.push_back(Vocab::kCls);
  e.tag_ids.push_back(Vocab::kNoneTag);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    e.token_ids.push_back(vocab.token_id(tokens[i]));
    e.tag_ids.push_back(vocab.tag_id(tags[i]));
  }
  e.token_ids.push_back(Vocab::kSep);
  e.tag_ids.push_back(Vocab::kNoneTag);
  if (!labels.empty()) {
    e.labels.push_back(kSpecial);
    e.labels.insert(e.labels.end(), labels.begin(), labels.end());
    e.labels.push_back(kSpecial);
  }
  if (cfg.graph == GraphMode::static_graph) {
    if (graph == nullptr) throw ArgumentError("encode: static graph mode requires a tag graph");
    // special positions carry the reserved NONE tag, which never has edges
    std::vector<std::string> wrapped_tags;
    wrapped_tags.reserve(wrapped);
    wrapped_tags.push_back(vocab.tag(Vocab::kNoneTag));
    wrapped_tags.insert(wrapped_tags.end(), tags.begin(), tags.end());
    wrapped_tags.push_back(vocab.tag(Vocab::kNoneTag));
    e.adjacency = query_adjacency(wrapped_tags, *graph);
  }
  return e;
}

EncodedQuery encode_record(const QueryRecord& r, const Vocab& vocab, const ModelConfig& cfg, const TagGraph* graph) {
  return encode_query(r.source, r.tags, r.labels, vocab, cfg, graph);
}

Batch make_batch(std::span<const EncodedQuery* const> queries) {
  if (queries.empty()) throw ArgumentError("make_batch: no queries");
  std::vector<int> lengths;
  for (const auto* q : queries) lengths.push_back(static_cast<int>(q->token_ids.size()));
  Batch b;
  b.segments = ad::Segments::from_lengths(lengths);
  const bool labeled = std::all_of(queries.begin(), queries.end(), [](const auto* q) { return !q->labels.empty(); });
  const bool has_adj = std::all_of(queries.begin(), queries.end(), [](const auto* q) { return q->adjacency.size() > 0; });
  const Index width = b.segments.max_length();
  if (has_adj) b.adjacency = Tensor::Zero(b.segments.total(), width);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = *queries[qi];
    b.token_ids.insert(b.token_ids.end(), q.token_ids.begin(), q.token_ids.end());
    b.tag_ids.insert(b.tag_ids.end(), q.tag_ids.begin(), q.tag_ids.end());
    for (std::size_t i = 0; i < q.token_ids.size(); ++i) b.positions.push_back(static_cast<int>(i));
    if (labeled) b.labels.insert(b.labels.end(), q.labels.begin(), q.labels.end());
    if (has_adj) {
      const Index len = b.segments.length(static_cast<Index>(qi));
      b.adjacency.block(b.segments.start(static_cast<Index>(qi)), 0, len, len) = q.adjacency;
    }
  }
  b.full = packed_block_mask(b.segments);
  return b;
}

Batch make_batch(std::span<const EncodedQuery> queries) {
  std::vector<const EncodedQuery*> ptrs;
  for (const auto& q : queries) ptrs.push_back(&q);
  return make_batch(std::span<const EncodedQuery* const>(ptrs));
}

// ---------------------------------------------------------------- forward

ParamVars register_params(Tape& tape, const ModelParams& params, bool trainable) {
  ParamVars vars;
  for (const auto& [name, t] : params.tensors) vars.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  return vars;
}

Tensor ForwardTrace::attention_block(const Tensor& packed, Index q, Index head) const {
  const Index width = segments.max_length();
  const Index st = segments.start(q), len = segments.length(q);
  return packed.block(st, head * width, len, len);
}

ForwardOutput forward(Tape& tape, const ParamVars& p, const ModelConfig& cfg, const Batch& batch,
                      const ForwardOptions& opt) {
  const auto& seg = batch.segments;
  const Index d = cfg.d_model;
  const bool capture = opt.capture;
  ForwardOutput out;
  ForwardTrace& tr = out.trace;
  if (capture) tr.segments = seg;
  for (int pos : batch.positions)
    if (pos >= cfg.max_len) throw ArgumentError("forward: sequence longer than max_len");

  const Var base = ad::add(ad::gather_rows(p.at("token_embedding"), batch.token_ids),
                           ad::gather_rows(p.at("position_embedding"), batch.positions));

  // left tower: plain single-segment encoder
  Var x = ad::add(base, ad::gather_rows(p.at("type_embedding"), std::vector<int>(batch.token_ids.size(), Vocab::kNoneTag)));
  if (capture) tr.v_left = x.value();
  x = maybe_dropout(x, cfg, opt);
  const Var full = tape.constant(batch.full);
  const double left_scale = 1.0 / std::sqrt(static_cast<double>(d / cfg.n_heads));
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto key = [l](const char* n) { return layer_key("left", l, n); };
    const Var q = affine(x, p, key("Wq"), key("bq"));
    const Var k = affine(x, p, key("Wk"), key("bk"));
    const Var v = affine(x, p, key("Wv"), key("bv"));
    Tensor probs;
    const Var attn = ad::segment_attention(q, k, v, full, seg, cfg.n_heads, left_scale, capture ? &probs : nullptr);
    if (capture) tr.left_attention.push_back(std::move(probs));
    const Var proj = maybe_dropout(affine(attn, p, key("Wo"), key("bo")), cfg, opt);
    x = ad::layer_norm(ad::add(x, proj), p.at(key("ln1_gamma")), p.at(key("ln1_beta")), cfg.eps);
    const Var hidden = ad::gelu(affine(x, p, key("W_ff1"), key("b_ff1")));
    const Var ff = maybe_dropout(affine(hidden, p, key("W_ff2"), key("b_ff2")), cfg, opt);
    x = ad::layer_norm(ad::add(x, ff), p.at(key("ln2_gamma")), p.at(key("ln2_beta")), cfg.eps);
  }
  const Var e_b = x;
  if (capture) tr.e_b = e_b.value();

  Var e = e_b;
  if (cfg.graph != GraphMode::none) {
    if (capture) tr.has_right_tower = true;

    Var edge_weights;
    if (cfg.graph == GraphMode::static_graph) {
      if (batch.adjacency.size() == 0) throw ArgumentError("forward: static mode needs per-query adjacency");
      edge_weights = tape.constant(batch.adjacency);
    } else {
      const Var tag_emb = ad::add(ad::gather_rows(p.at("tag_embedding"), batch.tag_ids),
                                  ad::gather_rows(p.at("tag_position_embedding"), batch.positions));
      const Var keys = ad::matmul(tag_emb, p.at("W7"));
      const Var queries = ad::matmul(tag_emb, p.at("W8"));
      edge_weights = ad::segment_softmax(keys, queries, seg, 1.0);
      if (capture) {
        tr.has_dynamic_graph = true;
        tr.tag_embedding = tag_emb.value();
        tr.tag_affinity = packed_affinity(keys.value(), queries.value(), seg);
        tr.tag_attention = edge_weights.value();
        tr.tag_context = packed_apply(edge_weights.value(), tag_emb.value() * p.at("W9").value(), seg);
      }
    }
    if (capture) tr.edge_weights = edge_weights.value();

    // graph-masked tower
    Var r = ad::add(base, ad::gather_rows(p.at("type_embedding"), batch.tag_ids));
    if (capture) tr.v = r.value();
    r = maybe_dropout(r, cfg, opt);
    for (int l = 0; l < cfg.right_layers; ++l) {
      auto key = [l](const char* n) { return layer_key("right", l, n); };
      const Var q = ad::matmul(r, p.at(key("W1")));
      const Var k = ad::matmul(r, p.at(key("W2")));
      const Var v = ad::matmul(r, p.at(key("W3")));
      Tensor probs;
      const Var attn = ad::segment_attention(q, k, v, edge_weights, seg, cfg.right_heads, 1.0,
                                             capture && l == 0 ? &probs : nullptr);
      const Var o = ad::matmul(attn, p.at(key("W4")));
      const Var o_bar = ad::add(r, ad::layer_norm(o, p.at(key("gamma")), p.at(key("beta")), cfg.eps));
      const Var ffn = maybe_dropout(ad::gelu(affine(o_bar, p, key("W5"), key("b"))), cfg, opt);
      r = ad::add(o_bar, ad::layer_norm(ffn, p.at(key("gamma_ffn")), p.at(key("beta_ffn")), cfg.eps));
      if (capture && l == 0) {
        tr.affinity = packed_affinity(q.value(), k.value(), seg);
        tr.attention = std::move(probs);
        tr.o = o.value();
        tr.o_bar = o_bar.value();
        tr.ffn = ffn.value();
      }
    }
    const Var e_t = r;
    if (capture) tr.e_t = e_t.value();

    switch (cfg.fusion) {
      case FusionMode::gated: {
        Var gate;
        if (opt.gate_override) {
          gate = tape.constant(Tensor::Constant(e_b.rows(), d, *opt.gate_override));
        } else {
          gate = ad::sigmoid(affine(e_b, p, "W6", "c"));
          if (!cfg.vector_gate) gate = ad::repeat_cols(gate, d);
        }
        if (capture) tr.gate = gate.value();
        e = ad::add(ad::mul(gate, e_b), ad::mul(ad::one_minus(gate), e_t));
        break;
      }
      case FusionMode::mean: e = ad::scale(ad::add(e_b, e_t), 0.5); break;
      case FusionMode::min: e = ad::cwise_min(e_b, e_t); break;
      case FusionMode::max: e = ad::cwise_max(e_b, e_t); break;
    }
  }
  if (capture) tr.e = e.value();

  out.probs = ad::softmax_rows(affine(e, p, "head.W", "head.b"));
  if (capture) tr.p = out.probs.value();
  return out;
}

Var batch_loss(Var probs, const Batch& batch) {
  const auto& seg = batch.segments;
  if (static_cast<Index>(batch.labels.size()) != seg.total() || probs.rows() != seg.total())
    throw ArgumentError("loss: label count does not match the batch");
  std::vector<int> classes(batch.labels.size());
  std::vector<double> weights(batch.labels.size());
  const double per_query = 1.0 / static_cast<double>(seg.count());
  for (Index q = 0; q < seg.count(); ++q) {
    const double w = per_query / static_cast<double>(seg.length(q));
    for (Index i = seg.start(q); i < seg.start(q) + seg.length(q); ++i) {
      classes[i] = batch.labels[i] - 1;
      weights[i] = w;
    }
  }
  return ad::cross_entropy(probs, std::move(classes), std::move(weights));
}

// ---------------------------------------------------------------- inference helpers

ForwardTrace trace_query(const Model& model, const EncodedQuery& query, const ForwardOptions& options) {
  const EncodedQuery* one[] = {&query};
  const Batch batch = make_batch(std::span<const EncodedQuery* const>(one));
  Tape tape;
  const ParamVars vars = register_params(tape, model.params, false);
  ForwardOptions opt = options;
  opt.capture = true;
  opt.training = false;
  return forward(tape, vars, model.config, batch, opt).trace;
}

Tensor predict_probabilities(const Model& model, std::span<const EncodedQuery> queries, std::size_t batch_size) {
  std::size_t total = 0;
  for (const auto& q : queries) total += q.token_ids.size();
  Tensor probs(static_cast<Index>(total), model.config.num_classes);
  Index row = 0;
  for (std::size_t start = 0; start < queries.size(); start += batch_size) {
    const auto chunk = queries.subspan(start, std::min(batch_size, queries.size() - start));
    const Batch batch = make_batch(chunk);
    Tape tape;
    const ParamVars vars = register_params(tape, model.params, false);
    const Tensor& p = forward(tape, vars, model.config, batch).probs.value();
    probs.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  return probs;
}

std::vector<std::vector<int>> predict_labels(const Model& model, std::span<const EncodedQuery> queries,
                                             std::size_t batch_size) {
  const Tensor probs = predict_probabilities(model, queries, batch_size);
  std::vector<std::vector<int>> out;
  out.reserve(queries.size());
  Index row = 0;
  for (const auto& q : queries) {
    std::vector<int> labels;
    for (std::size_t i = 0; i < q.token_ids.size(); ++i, ++row) {
      if (i == 0 || i + 1 == q.token_ids.size()) continue;
      labels.push_back(probs(row, kDrop - 1) > probs(row, kKeep - 1) ? kDrop : kKeep);
    }
    out.push_back(std::move(labels));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

const std::string kCheckpointMagic = "TAGBERT-CHECKPOINT";

nlohmann::json graph_to_json(const TagGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [pair, n] : g.edges) edges.push_back({pair.first, pair.second, n});
  return {{"min_support", g.min_support}, {"edges", edges}};
}

TagGraph graph_from_json(const nlohmann::json& j) {
  TagGraph g;
  g.min_support = j.at("min_support").get<std::int64_t>();
  for (const auto& e : j.at("edges"))
    g.edges[{e.at(0).get<std::string>(), e.at(1).get<std::string>()}] = e.at(2).get<std::int64_t>();
  return g;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : model.params.tensors) {
    index.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    for (Index i = 0; i < t.size(); ++i) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(t.data()[i]);
      for (int b = 0; b < 8; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                 {"config", model.config.to_json()},
                                 {"vocab", model.vocab.to_json()},
                                 {"graph", graph_to_json(model.graph)},
                                 {"tensors", index},
                                 {"payload_checksum", fnv1a(payload.data(), payload.size())}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  put_u64(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  put_u64(out, payload.size());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string first;
  std::getline(in, first);
  const std::string expected = kCheckpointMagic + " " + std::to_string(kCheckpointVersion);
  if (first != expected)
    throw DataError("checkpoint format version mismatch in " + path.string() + ": expected '" + expected + "'");

  const std::uint64_t header_size = get_u64(in);
  if (header_size > (1ULL << 32)) throw DataError("checkpoint corrupted: implausible header size");
  std::string header_text(header_size, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw DataError("checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception&) {
    throw DataError("checkpoint corrupted: unreadable header");
  }
  if (header.value("format_version", -1) != kCheckpointVersion)
    throw DataError("checkpoint format version mismatch: header declares " +
                    std::to_string(header.value("format_version", -1)));

  const std::uint64_t payload_size = get_u64(in);
  std::string payload(payload_size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_size));
  if (!in) throw DataError("checkpoint truncated");
  if (fnv1a(payload.data(), payload.size()) != header.at("payload_checksum").get<std::uint64_t>())
    throw DataError("checkpoint corrupted: payload checksum mismatch");

  Model m;
  try {
    m.config = ModelConfig::from_json(header.at("config"));
    m.vocab = Vocab::from_json(header.at("vocab"));
    m.graph = graph_from_json(header.at("graph"));
    std::size_t offset = 0;
    for (const auto& entry : header.at("tensors")) {
      const Index rows = entry.at("rows").get<Index>(), cols = entry.at("cols").get<Index>();
      Tensor t(rows, cols);
      for (Index i = 0; i < t.size(); ++i) {
        if (offset + 8 > payload.size()) throw DataError("checkpoint corrupted: payload too short");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
          bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[offset + b])) << (8 * b);
        t.data()[i] = std::bit_cast<double>(bits);
        offset += 8;
      }
      m.params.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    if (offset != payload.size()) throw DataError("checkpoint corrupted: trailing payload bytes");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint corrupted: ") + e.what());
  } catch (const ArgumentError& e) {
    throw DataError(std::string("checkpoint corrupted: ") + e.what());
  }
  return m;
}

}  // namespace tagbert
