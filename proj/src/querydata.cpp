#include "tagbert/querydata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tagbert/error.hpp"
#include "tagbert/rng.hpp"

namespace tagbert {

namespace {

const std::vector<std::string> kReservedTokenNames = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
const std::vector<std::string> kReservedTagNames = {"[NONE]", "[UNK]"};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Pronounceable pseudo-word for (namespace, index); the spelling carries no
// information about the tag.
std::string pseudo_word(std::string_view space, std::size_t index) {
  static const char* kOnsets[] = {"b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                  "br", "ch", "dr", "gr", "pl", "st", "tr"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "io", "ou"};
  static const char* kCodas[] = {"", "", "n", "r", "s", "x", "ck", "lt", "m"};
  Rng rng(fnv1a(std::string(space) + "#" + std::to_string(index)));
  const std::size_t syllables = 2 + rng.index(2);
  std::string word;
  for (std::size_t s = 0; s < syllables; ++s) {
    word += kOnsets[rng.index(std::size(kOnsets))];
    word += kVowels[rng.index(std::size(kVowels))];
  }
  word += kCodas[rng.index(std::size(kCodas))];
  return word;
}

std::string token_for(const std::string& tag, std::size_t index) {
  if (tag == "year") return std::to_string(2024 - static_cast<int>(index % 60));
  return pseudo_word(tag, index);
}

std::vector<double> zipf_weights(std::size_t n, double exponent) {
  std::vector<double> w(n);
  for (std::size_t r = 0; r < n; ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), exponent);
  return w;
}

// Cumulative-sum sampler; binary search keeps large vocabularies cheap.
class Sampler {
 public:
  explicit Sampler(const std::vector<double>& weights) : cdf_(weights.size()) {
    double acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) cdf_[i] = acc += weights[i];
  }
  std::size_t draw(Rng& rng) const {
    const double x = rng.uniform() * cdf_.back();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), x);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

std::vector<std::string> json_strings(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw DataError("line " + std::to_string(line) + ": missing field \"" + key + "\"");
  const auto& arr = j.at(key);
  if (!arr.is_array()) throw DataError("line " + std::to_string(line) + ": field \"" + key + "\" is not an array");
  std::vector<std::string> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_string())
      throw DataError("line " + std::to_string(line) + ": field \"" + key + "\" must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<int> derive_labels(std::span<const std::string> source, std::span<const std::string> target) {
  std::vector<int> labels(source.size(), kDrop);
  std::size_t next = 0;
  for (const auto& tok : target) {
    while (next < source.size() && source[next] != tok) ++next;
    if (next == source.size()) throw DataError("target is not a subsequence of source: unmatched token '" + tok + "'");
    labels[next++] = kKeep;
  }
  return labels;
}

std::vector<std::string> kept_tokens(std::span<const std::string> source, std::span<const int> labels) {
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < source.size() && i < labels.size(); ++i)
    if (labels[i] == kKeep) kept.push_back(source[i]);
  return kept;
}

RowVector one_hot(int label, int num_classes) {
  if (label < 1 || label > num_classes)
    throw ArgumentError("one_hot: label " + std::to_string(label) + " outside 1.." + std::to_string(num_classes));
  RowVector v = RowVector::Zero(num_classes);
  v(label - 1) = 1.0;
  return v;
}

Tensor one_hot(std::span<const int> labels, int num_classes) {
  Tensor c(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = one_hot(labels[i], num_classes);
  return c;
}

void validate_record(const QueryRecord& r, const std::string& context) {
  if (r.source.empty()) throw DataError(context + ": empty source");
  if (r.tags.size() != r.source.size())
    throw DataError(context + ": tags length " + std::to_string(r.tags.size()) + " != source length " +
                    std::to_string(r.source.size()));
  if (r.labels.size() != r.source.size())
    throw DataError(context + ": labels length " + std::to_string(r.labels.size()) + " != source length " +
                    std::to_string(r.source.size()));
  if (r.target.size() > r.source.size()) throw DataError(context + ": target longer than source");
  for (int l : r.labels)
    if (l != kKeep && l != kDrop) throw DataError(context + ": label " + std::to_string(l) + " not in {2,3}");
  std::vector<int> derived;
  try {
    derived = derive_labels(r.source, r.target);
  } catch (const DataError& e) {
    throw DataError(context + ": " + e.what());
  }
  if (derived != r.labels) throw DataError(context + ": labels disagree with the source/target alignment");
}

// ---------------------------------------------------------------- Vocab

Vocab::Vocab() : tokens_(kReservedTokenNames), tags_(kReservedTagNames) { index(); }

void Vocab::index() {
  token_ids_.clear();
  tag_ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) token_ids_.emplace(tokens_[i], static_cast<int>(i));
  for (std::size_t i = 0; i < tags_.size(); ++i) tag_ids_.emplace(tags_[i], static_cast<int>(i));
  if (token_ids_.size() != tokens_.size() || tag_ids_.size() != tags_.size())
    throw DataError("vocab: duplicate entries");
}

Vocab Vocab::build(std::span<const QueryRecord> records) {
  if (records.empty()) throw ArgumentError("build_vocab: empty record list");
  std::set<std::string> tokens, tags;
  for (const auto& r : records) {
    tokens.insert(r.source.begin(), r.source.end());
    tags.insert(r.tags.begin(), r.tags.end());
  }
  for (const auto& reserved : kReservedTokenNames) tokens.erase(reserved);
  for (const auto& reserved : kReservedTagNames) tags.erase(reserved);
  Vocab v;
  v.tokens_.insert(v.tokens_.end(), tokens.begin(), tokens.end());
  v.tags_.insert(v.tags_.end(), tags.begin(), tags.end());
  v.index();
  return v;
}

int Vocab::token_id(std::string_view token) const {
  const auto it = token_ids_.find(std::string(token));
  return it == token_ids_.end() ? kUnk : it->second;
}

int Vocab::tag_id(std::string_view tag) const {
  const auto it = tag_ids_.find(std::string(tag));
  return it == tag_ids_.end() ? kUnkTag : it->second;
}

bool Vocab::has_token(std::string_view token) const { return token_ids_.contains(std::string(token)); }
bool Vocab::has_tag(std::string_view tag) const { return tag_ids_.contains(std::string(tag)); }

nlohmann::json Vocab::to_json() const { return {{"tokens", tokens_}, {"tags", tags_}}; }

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  v.tags_ = j.at("tags").get<std::vector<std::string>>();
  if (v.tokens_.size() < kReservedTokens || v.tags_.size() < kReservedTags ||
      !std::equal(kReservedTokenNames.begin(), kReservedTokenNames.end(), v.tokens_.begin()) ||
      !std::equal(kReservedTagNames.begin(), kReservedTagNames.end(), v.tags_.begin()))
    throw DataError("vocab: reserved entries missing");
  v.index();
  return v;
}

// ---------------------------------------------------------------- synthetic data

std::vector<int> apply_drop_rules(std::span<const std::string> tags, std::span<const DropRule> rules) {
  const std::set<std::string> present(tags.begin(), tags.end());
  std::vector<int> labels(tags.size(), kKeep);
  for (std::size_t i = 0; i < tags.size(); ++i)
    for (const auto& rule : rules)
      if (tags[i] == rule.target && present.contains(rule.trigger) == rule.present) labels[i] = kDrop;
  return labels;
}

void SynthConfig::validate() const {
  if (categories.empty()) throw ArgumentError("synth config: no categories");
  std::set<std::string> known;
  for (const auto& c : categories) {
    if (c.tags.empty()) throw ArgumentError("synth config: category '" + c.name + "' has no tags");
    if (!(c.weight > 0)) throw ArgumentError("synth config: category '" + c.name + "' needs positive weight");
    for (const auto& t : c.tags) {
      if (!(t.weight > 0)) throw ArgumentError("synth config: tag '" + t.name + "' needs positive weight");
      if (t.name.empty() || t.name.front() == '[') throw ArgumentError("synth config: invalid tag name '" + t.name + "'");
      known.insert(t.name);
    }
  }
  for (const auto& r : rules)
    if (!known.contains(r.target) || !known.contains(r.trigger))
      throw ArgumentError("synth config: rule references unknown tag ('" + r.target + "', '" + r.trigger + "')");
  if (length_distribution.empty()) throw ArgumentError("synth config: empty length distribution");
  double total = 0;
  for (const auto& [len, p] : length_distribution) {
    if (len < 2) throw ArgumentError("synth config: query lengths must be at least 2");
    if (p < 0) throw ArgumentError("synth config: negative length probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("synth config: length distribution must sum to 1");
  if (vocab_per_tag == 0 || shared_pool_size == 0) throw ArgumentError("synth config: vocabulary sizes must be positive");
  for (const auto& [tag, n] : vocab_overrides)
    if (n == 0) throw ArgumentError("synth config: vocabulary override for '" + tag + "' must be positive");
  if (shared_token_rate < 0 || shared_token_rate > 1) throw ArgumentError("synth config: shared_token_rate outside [0,1]");
  if (zipf_exponent < 0) throw ArgumentError("synth config: negative zipf exponent");
  if (label_noise < 0 || label_noise >= 0.5) throw ArgumentError("synth config: label_noise outside [0,0.5)");
}

SynthConfig SynthConfig::defaults() {
  SynthConfig c;
  c.categories = {
      {"motor", 0.30,
       {{"year", 0.8}, {"brand", 0.7}, {"model", 0.9}, {"feature", 0.5}, {"type", 0.8}, {"condition", 0.3}}},
      {"fashion", 0.30,
       {{"brand", 0.8}, {"gender", 0.6}, {"size", 0.6}, {"color", 0.6}, {"type", 0.9}, {"condition", 0.3}}},
      {"electronics", 0.25,
       {{"brand", 0.9}, {"model", 0.8}, {"type", 0.8}, {"color", 0.4}, {"feature", 0.5}, {"condition", 0.4}}},
      {"home", 0.15,
       {{"brand", 0.5}, {"type", 0.9}, {"color", 0.6}, {"size", 0.5}, {"material", 0.6}, {"condition", 0.3}}},
  };
  c.length_distribution = {{2, 0.001}, {3, 0.219}, {4, 0.28}, {5, 0.20}, {6, 0.15}, {7, 0.10}, {8, 0.05}};
  c.rules = {
      {"condition", "brand", true},
      {"year", "model", false},
      {"color", "size", true},
      {"feature", "type", false},
      {"material", "color", true},
  };
  return c;
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : categories) {
    nlohmann::json tags = nlohmann::json::array();
    for (const auto& t : c.tags) tags.push_back({{"name", t.name}, {"weight", t.weight}});
    cats.push_back({{"name", c.name}, {"weight", c.weight}, {"tags", tags}});
  }
  nlohmann::json lengths = nlohmann::json::object();
  for (const auto& [len, p] : length_distribution) lengths[std::to_string(len)] = p;
  nlohmann::json rules_json = nlohmann::json::array();
  for (const auto& r : rules) rules_json.push_back({{"drop", r.target}, {"when", r.trigger}, {"present", r.present}});
  return {{"categories", cats},
          {"vocab_per_tag", vocab_per_tag},
          {"vocab_overrides", vocab_overrides},
          {"zipf_exponent", zipf_exponent},
          {"shared_token_rate", shared_token_rate},
          {"shared_pool_size", shared_pool_size},
          {"length_distribution", lengths},
          {"rules", rules_json},
          {"label_noise", label_noise},
          {"record_count", record_count},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j, SynthConfig c) {
  static const std::set<std::string> kKeys = {"categories",       "vocab_per_tag",     "vocab_overrides",
                                              "zipf_exponent",    "shared_token_rate", "shared_pool_size",
                                              "length_distribution", "rules",          "label_noise",
                                              "record_count",     "seed"};
  if (!j.is_object()) throw ArgumentError("synth config: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.contains(key)) throw ArgumentError("synth config: unknown key '" + key + "'");
  if (j.contains("categories")) {
    c.categories.clear();
    for (const auto& cj : j.at("categories")) {
      CategorySpec cat{cj.at("name").get<std::string>(), cj.value("weight", 1.0), {}};
      for (const auto& tj : cj.at("tags")) {
        if (tj.is_string())
          cat.tags.push_back({tj.get<std::string>(), 1.0});
        else
          cat.tags.push_back({tj.at("name").get<std::string>(), tj.value("weight", 1.0)});
      }
      c.categories.push_back(std::move(cat));
    }
  }
  if (j.contains("vocab_per_tag")) c.vocab_per_tag = j.at("vocab_per_tag").get<std::size_t>();
  if (j.contains("vocab_overrides")) c.vocab_overrides = j.at("vocab_overrides").get<std::map<std::string, std::size_t>>();
  if (j.contains("zipf_exponent")) c.zipf_exponent = j.at("zipf_exponent").get<double>();
  if (j.contains("shared_token_rate")) c.shared_token_rate = j.at("shared_token_rate").get<double>();
  if (j.contains("shared_pool_size")) c.shared_pool_size = j.at("shared_pool_size").get<std::size_t>();
  if (j.contains("length_distribution")) {
    c.length_distribution.clear();
    for (const auto& [len, p] : j.at("length_distribution").items())
      c.length_distribution[std::stoi(len)] = p.get<double>();
  }
  if (j.contains("rules")) {
    c.rules.clear();
    for (const auto& rj : j.at("rules"))
      c.rules.push_back({rj.at("drop").get<std::string>(), rj.at("when").get<std::string>(), rj.value("present", true)});
  }
  if (j.contains("label_noise")) c.label_noise = j.at("label_noise").get<double>();
  if (j.contains("record_count")) c.record_count = j.at("record_count").get<std::size_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::vector<QueryRecord> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  std::vector<double> category_weights;
  for (const auto& c : cfg.categories) category_weights.push_back(c.weight);
  std::vector<int> lengths;
  std::vector<double> length_weights;
  for (const auto& [len, p] : cfg.length_distribution) {
    lengths.push_back(len);
    length_weights.push_back(p);
  }

  std::map<std::string, Sampler> tag_samplers;
  for (const auto& c : cfg.categories)
    for (const auto& t : c.tags) {
      const auto it = cfg.vocab_overrides.find(t.name);
      const std::size_t n = it == cfg.vocab_overrides.end() ? cfg.vocab_per_tag : it->second;
      tag_samplers.try_emplace(t.name, zipf_weights(n, cfg.zipf_exponent));
    }
  const Sampler shared_sampler(zipf_weights(cfg.shared_pool_size, cfg.zipf_exponent));

  constexpr std::size_t kMaxAttempts = 1000;
  std::vector<QueryRecord> records;
  records.reserve(cfg.record_count);
  while (records.size() < cfg.record_count) {
    bool accepted = false;
    for (std::size_t attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      const auto& category = cfg.categories[rng.weighted(category_weights)];
      const int length = lengths[rng.weighted(length_weights)];

      // distinct tags first (weighted, without replacement), then repeats
      std::vector<std::string> tags;
      std::vector<double> remaining;
      for (const auto& t : category.tags) remaining.push_back(t.weight);
      for (int i = 0; i < length; ++i) {
        const bool fresh = std::any_of(remaining.begin(), remaining.end(), [](double w) { return w > 0; });
        std::size_t pick;
        if (fresh) {
          pick = rng.weighted(remaining);
          remaining[pick] = 0;
        } else {
          std::vector<double> all;
          for (const auto& t : category.tags) all.push_back(t.weight);
          pick = rng.weighted(all);
        }
        tags.push_back(category.tags[pick].name);
      }
      rng.shuffle(tags);

      std::vector<std::string> tokens;
      for (const auto& tag : tags) {
        if (rng.bernoulli(cfg.shared_token_rate))
          tokens.push_back(pseudo_word("shared", shared_sampler.draw(rng)));
        else
          tokens.push_back(token_for(tag, tag_samplers.at(tag).draw(rng)));
      }
      // repeated surface tokens would make the subsequence alignment ambiguous
      const std::set<std::string> distinct(tokens.begin(), tokens.end());
      if (distinct.size() != tokens.size()) continue;

      auto labels = apply_drop_rules(tags, cfg.rules);
      if (cfg.label_noise > 0)
        for (int& l : labels)
          if (rng.bernoulli(cfg.label_noise)) l = l == kKeep ? kDrop : kKeep;
      if (std::none_of(labels.begin(), labels.end(), [](int l) { return l == kKeep; })) continue;

      QueryRecord r;
      r.source = std::move(tokens);
      r.tags = std::move(tags);
      r.labels = std::move(labels);
      r.target = kept_tokens(r.source, r.labels);
      records.push_back(std::move(r));
      accepted = true;
    }
    if (!accepted)
      throw ArgumentError("synth config is unsatisfiable: no valid query after " + std::to_string(kMaxAttempts) +
                          " attempts (rules drop every token or tokens always collide)");
  }
  return records;
}

DatasetSplits split_dataset(std::vector<QueryRecord> records, std::uint64_t seed) {
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = records.size();
  const std::size_t n_train = n * 6 / 10;
  const std::size_t n_test = n * 2 / 10;
  DatasetSplits s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? s.train : i < n_train + n_test ? s.test : s.validation;
    dst.push_back(std::move(records[order[i]]));
  }
  return s;
}

// ---------------------------------------------------------------- file I/O

std::string format_record(const QueryRecord& r) {
  nlohmann::ordered_json j;
  j["source"] = r.source;
  j["target"] = r.target;
  j["tags"] = r.tags;
  j["labels"] = r.labels;
  return j.dump();
}

QueryRecord parse_record(std::string_view line, std::size_t line_number) {
  const std::string where = "line " + std::to_string(line_number);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw DataError(where + ": expected a JSON object");
  static const std::set<std::string> kKeys = {"source", "target", "tags", "labels"};
  for (const auto& [key, _] : j.items())
    if (!kKeys.contains(key)) throw DataError(where + ": unexpected field \"" + key + "\"");
  QueryRecord r;
  r.source = json_strings(j, "source", line_number);
  r.target = json_strings(j, "target", line_number);
  r.tags = json_strings(j, "tags", line_number);
  if (!j.contains("labels")) throw DataError(where + ": missing field \"labels\"");
  const auto& labels = j.at("labels");
  if (!labels.is_array()) throw DataError(where + ": field \"labels\" is not an array");
  for (const auto& v : labels) {
    if (!v.is_number_integer()) throw DataError(where + ": labels must be integers");
    r.labels.push_back(v.get<int>());
  }
  validate_record(r, where);
  return r;
}

std::vector<QueryRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::vector<QueryRecord> records;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    records.push_back(parse_record(line, line_number));
  }
  return records;
}

void write_dataset(std::span<const QueryRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (std::size_t i = 0; i < records.size(); ++i) {
    validate_record(records[i], "record " + std::to_string(i));
    out << format_record(records[i]) << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace tagbert
