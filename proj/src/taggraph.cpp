#include "tagbert/taggraph.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tagbert/error.hpp"

namespace tagbert {

TagPair make_tag_pair(std::string a, std::string b) {
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

TagPairStats count_tag_pairs(std::span<const QueryRecord> records) {
  TagPairStats stats;
  for (const auto& r : records) {
    std::map<std::string, int> multiplicity;
    for (const auto& t : r.tags) ++multiplicity[t];
    for (auto a = multiplicity.begin(); a != multiplicity.end(); ++a) {
      if (a->second >= 2) ++stats[{a->first, a->first}];
      for (auto b = std::next(a); b != multiplicity.end(); ++b) ++stats[{a->first, b->first}];
    }
  }
  return stats;
}

void merge_counts(TagPairStats& into, const TagPairStats& other) {
  for (const auto& [pair, n] : other) into[pair] += n;
}

bool TagGraph::has_edge(const std::string& a, const std::string& b) const {
  return edges.contains(make_tag_pair(a, b));
}

std::int64_t default_min_support(std::size_t corpus_size) {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(0.005 * static_cast<double>(corpus_size))));
}

TagGraph mine_tag_pairs(std::span<const QueryRecord> records, std::int64_t min_support) {
  return mine_tag_pairs(records, MiningOptions{min_support, EdgeScoring::frequency, 0.0});
}

TagGraph mine_tag_pairs(std::span<const QueryRecord> records, const MiningOptions& options) {
  if (records.empty()) throw ArgumentError("mine_tag_pairs: empty corpus");
  if (options.min_support < 1) throw ArgumentError("mine_tag_pairs: min_support must be >= 1");
  const TagPairStats stats = count_tag_pairs(records);

  std::map<std::string, std::int64_t> queries_with_tag;
  if (options.scoring == EdgeScoring::mutual_information) {
    for (const auto& r : records) {
      std::set<std::string> seen(r.tags.begin(), r.tags.end());
      for (const auto& t : seen) ++queries_with_tag[t];
    }
  }
  const double n = static_cast<double>(records.size());

  TagGraph g;
  g.min_support = options.min_support;
  for (const auto& [pair, count] : stats) {
    if (count < options.min_support) continue;
    if (options.scoring == EdgeScoring::mutual_information) {
      const double pa = static_cast<double>(queries_with_tag[pair.first]) / n;
      const double pb = static_cast<double>(queries_with_tag[pair.second]) / n;
      const double pmi = std::log((static_cast<double>(count) / n) / (pa * pb));
      if (pmi < options.min_pmi) continue;
    }
    g.edges.emplace(pair, count);
  }
  return g;
}

Tensor query_adjacency(std::span<const std::string> tags, const TagGraph& graph) {
  const auto m = static_cast<Eigen::Index>(tags.size());
  Tensor adj = Tensor::Identity(m, m);
  for (Eigen::Index i = 0; i + 1 < m; ++i) adj(i, i + 1) = adj(i + 1, i) = 1.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = i + 1; k < m; ++k)
      if (graph.has_edge(tags[i], tags[k])) adj(i, k) = adj(k, i) = 1.0;
  return adj;
}

void write_graph(const TagGraph& graph, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write graph " + path.string());
  out << "#min_support=" << graph.min_support << '\n';
  for (const auto& [pair, count] : graph.edges) out << pair.first << '\t' << pair.second << '\t' << count << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

TagGraph read_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open graph " + path.string());
  TagGraph g;
  std::string line;
  std::size_t line_number = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    if (line.starts_with("#min_support=")) {
      try {
        g.min_support = std::stoll(line.substr(13));
      } catch (const std::exception&) {
        throw DataError("graph line " + std::to_string(line_number) + ": bad min_support header");
      }
      header = true;
      continue;
    }
    if (line.front() == '#') continue;
    std::istringstream fields(line);
    std::string a, b, count;
    if (!std::getline(fields, a, '\t') || !std::getline(fields, b, '\t') || !std::getline(fields, count))
      throw DataError("graph line " + std::to_string(line_number) + ": expected tag_a<TAB>tag_b<TAB>count");
    std::int64_t n = 0;
    try {
      n = std::stoll(count);
    } catch (const std::exception&) {
      throw DataError("graph line " + std::to_string(line_number) + ": bad count '" + count + "'");
    }
    if (b < a) throw DataError("graph line " + std::to_string(line_number) + ": tags not in lexicographic order");
    g.edges[{a, b}] = n;
  }
  if (!header) throw DataError("graph " + path.string() + ": missing #min_support header");
  return g;
}

}  // namespace tagbert
