#ifndef TAGBERT_MODEL_HPP
#define TAGBERT_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/autodiff.hpp"
#include "tagbert/numerics.hpp"
#include "tagbert/querydata.hpp"
#include "tagbert/rng.hpp"
#include "tagbert/taggraph.hpp"

namespace tagbert {

enum class FusionMode { gated, mean, min, max };
enum class GraphMode { static_graph, dynamic, none };

std::string to_string(FusionMode m);
std::string to_string(GraphMode m);
FusionMode parse_fusion_mode(const std::string& s);
GraphMode parse_graph_mode(const std::string& s);

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int num_classes = kNumClasses;
  int max_len = 32;  // wrapped length limit (CLS + tokens + SEP)
  FusionMode fusion = FusionMode::gated;
  GraphMode graph = GraphMode::static_graph;
  double eps = 1e-5;
  double dropout = 0.0;
  int right_layers = 1;
  int right_heads = 1;
  int tag_dim = 0;            // dynamic-branch tag embedding width; 0 means d_model
  bool vector_gate = true;    // false: one sigmoid per token broadcast over dimensions
  bool vector_norm = false;   // true: per-dimension gamma/beta in the graph tower
  double init_std = 0.02;

  int tag_width() const { return tag_dim > 0 ? tag_dim : d_model; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base);
};

/// Named trainable tensors. Names follow the architecture's symbols, e.g.
/// "right.0.W1", "right.0.gamma", "W6", "c", "W7", "token_embedding".
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.contains(name); }
  std::size_t scalar_count() const;
  bool all_finite() const;
  bool operator==(const ModelParams&) const = default;
};

ModelParams init_params(const ModelConfig& cfg, int token_count, int tag_count, std::uint64_t seed);

/// One query wrapped as CLS + tokens + SEP.
struct EncodedQuery {
  std::vector<int> token_ids;
  std::vector<int> tag_ids;
  std::vector<int> labels;  // kSpecial at both ends; empty when unlabeled
  Tensor adjacency;         // wrapped static adjacency; empty unless static mode
  int source_length = 0;
};

/// Wraps and id-maps a query. `graph` is required for static mode.
EncodedQuery encode_query(std::span<const std::string> tokens, std::span<const std::string> tags,
                          std::span<const int> labels, const Vocab& vocab, const ModelConfig& cfg,
                          const TagGraph* graph);
EncodedQuery encode_record(const QueryRecord& record, const Vocab& vocab, const ModelConfig& cfg,
                           const TagGraph* graph);

/// Queries packed row-wise with no padding; attention never crosses query
/// boundaries, so padded positions do not exist.
struct Batch {
  ad::Segments segments;
  std::vector<int> token_ids, tag_ids, positions, labels;
  Tensor adjacency;  // packed total x width, static mode
  Tensor full;       // packed all-ones-within-query mask
};

Batch make_batch(std::span<const EncodedQuery* const> queries);
Batch make_batch(std::span<const EncodedQuery> queries);

using Var = ad::Var<double>;
using Tape = ad::Tape<double>;
using ParamVars = std::map<std::string, Var>;

/// Registers every parameter on the tape; `trainable` selects variables
/// (gradients tracked) or constants (inference).
ParamVars register_params(Tape& tape, const ModelParams& params, bool trainable);

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  /// Replaces the gate output e_s with this constant (gated fusion only).
  std::optional<double> gate_override;
  bool capture = false;
};

/// Intermediates of one forward pass, packed like the batch (row r is a
/// wrapped token; "packed" matrices are total x max_length, column j
/// addressing token j of the same query). Right-tower fields describe the
/// first graph-masked layer and stay empty in `none` mode.
struct ForwardTrace {
  ad::Segments segments;
  Tensor v_left, v;                    // tower input embeddings
  std::vector<Tensor> left_attention;  // per layer, total x (heads*width)
  Tensor edge_weights;                 // weights the right tower attended with
  Tensor affinity, attention;          // a_ik and alpha_ik (packed, head 0 / all heads)
  Tensor o, o_bar, ffn;
  Tensor e_b, e_t, gate, e, p;
  Tensor tag_embedding, tag_affinity, tag_attention, tag_context;  // dynamic branch
  bool has_right_tower = false;
  bool has_dynamic_graph = false;

  /// Attention/probability rows of query q as an L x L block.
  Tensor attention_block(const Tensor& packed, Eigen::Index q, Eigen::Index head = 0) const;
};

struct ForwardOutput {
  Var probs;
  ForwardTrace trace;  // filled only with capture
};

ForwardOutput forward(Tape& tape, const ParamVars& params, const ModelConfig& cfg, const Batch& batch,
                      const ForwardOptions& options = {});

/// Mean over queries of the per-query mean token cross-entropy, special
/// positions included.
Var batch_loss(Var probs, const Batch& batch);

/// Everything needed to run inference: config, vocabulary, static graph,
/// parameters.
struct Model {
  ModelConfig config;
  Vocab vocab;
  TagGraph graph;
  ModelParams params;
};

/// Single-query forward trace with constant parameters.
ForwardTrace trace_query(const Model& model, const EncodedQuery& query, const ForwardOptions& options = {});

/// Class probabilities for a list of encoded queries (packed rows).
Tensor predict_probabilities(const Model& model, std::span<const EncodedQuery> queries,
                             std::size_t batch_size = 256);

/// Keep/drop decisions for every non-special position: argmax restricted to
/// the keep and drop classes.
std::vector<std::vector<int>> predict_labels(const Model& model, std::span<const EncodedQuery> queries,
                                             std::size_t batch_size = 256);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace tagbert

#endif  // TAGBERT_MODEL_HPP
