#ifndef TAGBERT_QUERYDATA_HPP
#define TAGBERT_QUERYDATA_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/numerics.hpp"

namespace tagbert {

inline constexpr int kNumClasses = 3;

/// Token classes. Raw records only carry keep/drop; `special` is assigned to
/// the CLS/SEP positions the model wraps around every query.
enum Label : int { kSpecial = 1, kKeep = 2, kDrop = 3 };

struct QueryRecord {
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::vector<std::string> tags;
  std::vector<int> labels;

  std::size_t length() const { return source.size(); }
  bool operator==(const QueryRecord&) const = default;
};

/// Greedy leftmost subsequence match of `target` inside `source`:
/// matched positions get kKeep, the rest kDrop.
/// Throws DataError naming the first target token that cannot be matched.
std::vector<int> derive_labels(std::span<const std::string> source, std::span<const std::string> target);

/// Kept tokens of `source` in order.
std::vector<std::string> kept_tokens(std::span<const std::string> source, std::span<const int> labels);

RowVector one_hot(int label, int num_classes = kNumClasses);
Tensor one_hot(std::span<const int> labels, int num_classes = kNumClasses);

/// Checks every QueryRecord invariant; throws DataError with `context`
/// prefixed to the message.
void validate_record(const QueryRecord& record, const std::string& context = "record");

/// Token and tag id maps. Ids are dense from 0; the first kReserved ids of
/// each map are reserved.
class Vocab {
 public:
  static constexpr int kPad = 0, kCls = 1, kSep = 2, kUnk = 3;
  static constexpr int kReservedTokens = 4;
  /// Tag id carried by CLS/SEP (and used as the plain segment id).
  static constexpr int kNoneTag = 0, kUnkTag = 1;
  static constexpr int kReservedTags = 2;

  Vocab();

  /// Every token and tag of `records`, learned ids in lexicographic order.
  static Vocab build(std::span<const QueryRecord> records);

  int token_id(std::string_view token) const;
  int tag_id(std::string_view tag) const;
  bool has_token(std::string_view token) const;
  bool has_tag(std::string_view tag) const;
  const std::string& token(int id) const { return tokens_.at(id); }
  const std::string& tag(int id) const { return tags_.at(id); }
  int token_count() const { return static_cast<int>(tokens_.size()); }
  int tag_count() const { return static_cast<int>(tags_.size()); }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_ && tags_ == other.tags_; }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::vector<std::string> tags_;
  std::unordered_map<std::string, int> token_ids_;
  std::unordered_map<std::string, int> tag_ids_;
};

/// "Drop every token tagged `target` iff a `trigger` tag is present
/// (or absent, when present == false) elsewhere in the query."
struct DropRule {
  std::string target;
  std::string trigger;
  bool present = true;
};

struct TagSpec {
  std::string name;
  double weight = 1.0;  // relative inclusion weight within its category
};

struct CategorySpec {
  std::string name;
  double weight = 1.0;
  std::vector<TagSpec> tags;
};

struct SynthConfig {
  std::vector<CategorySpec> categories;
  std::size_t vocab_per_tag = 400;
  std::map<std::string, std::size_t> vocab_overrides;  // per-tag vocabulary size
  double zipf_exponent = 1.0;
  /// Fraction of tokens drawn from a pool shared by all tags, so a surface
  /// token does not reveal its tag.
  double shared_token_rate = 0.25;
  std::size_t shared_pool_size = 200;
  std::map<int, double> length_distribution;
  std::vector<DropRule> rules;
  /// Per-token probability that the rule label is flipped (annotator noise).
  double label_noise = 0.0;
  std::size_t record_count = 33334;
  std::uint64_t seed = 7;

  /// Throws ArgumentError on an inconsistent configuration.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static SynthConfig from_json(const nlohmann::json& j, SynthConfig base = defaults());
  static SynthConfig defaults();
};

/// Labels the rules imply for one tag sequence.
std::vector<int> apply_drop_rules(std::span<const std::string> tags, std::span<const DropRule> rules);

/// Deterministic synthetic corpus. Throws ArgumentError when the rules make
/// a non-empty target unreachable.
std::vector<QueryRecord> generate_synthetic(const SynthConfig& cfg);

struct DatasetSplits {
  std::vector<QueryRecord> train, test, validation;
};

/// Shuffled 6:2:2 split (train, test, validation).
DatasetSplits split_dataset(std::vector<QueryRecord> records, std::uint64_t seed);

std::string format_record(const QueryRecord& record);
QueryRecord parse_record(std::string_view line, std::size_t line_number);

std::vector<QueryRecord> read_dataset(const std::filesystem::path& path);
void write_dataset(std::span<const QueryRecord> records, const std::filesystem::path& path);

}  // namespace tagbert

#endif  // TAGBERT_QUERYDATA_HPP
