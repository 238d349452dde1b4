#ifndef TAGBERT_TAGGRAPH_HPP
#define TAGBERT_TAGGRAPH_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tagbert/numerics.hpp"
#include "tagbert/querydata.hpp"

namespace tagbert {

/// Unordered tag pair stored with first <= second.
using TagPair = std::pair<std::string, std::string>;

TagPair make_tag_pair(std::string a, std::string b);

/// Per-query co-occurrence counts. A pair counts once per query; (a, a)
/// counts when tag a sits on at least two tokens of the query.
using TagPairStats = std::map<TagPair, std::int64_t>;

TagPairStats count_tag_pairs(std::span<const QueryRecord> records);
/// Adds `other` into `into`. Order of merging never changes the result.
void merge_counts(TagPairStats& into, const TagPairStats& other);

enum class EdgeScoring { frequency, mutual_information };

struct MiningOptions {
  std::int64_t min_support = 1;
  EdgeScoring scoring = EdgeScoring::frequency;
  /// Pointwise mutual information floor, used only with mutual_information.
  double min_pmi = 0.0;
};

/// Undirected tag-association graph.
struct TagGraph {
  std::map<TagPair, std::int64_t> edges;  // edge -> support count
  std::int64_t min_support = 1;

  bool has_edge(const std::string& a, const std::string& b) const;
  std::size_t size() const { return edges.size(); }
  bool operator==(const TagGraph&) const = default;
};

/// Default absolute threshold: 0.5% of the corpus, at least 1.
std::int64_t default_min_support(std::size_t corpus_size);

TagGraph mine_tag_pairs(std::span<const QueryRecord> records, std::int64_t min_support);
TagGraph mine_tag_pairs(std::span<const QueryRecord> records, const MiningOptions& options);

/// Token-level adjacency of one query: self edges, consecutive-token edges
/// and an edge between tokens whose tags form a graph edge. Symmetric 0/1.
Tensor query_adjacency(std::span<const std::string> tags, const TagGraph& graph);

void write_graph(const TagGraph& graph, const std::filesystem::path& path);
TagGraph read_graph(const std::filesystem::path& path);

}  // namespace tagbert

#endif  // TAGBERT_TAGGRAPH_HPP
