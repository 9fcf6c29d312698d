#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tlm {

struct Merge {
  int left = 0;
  int right = 0;
  int merged = 0;
  bool operator==(const Merge&) const = default;
};

// Byte-level BPE vocabulary. Ids 0..255 are the single bytes; every later id is produced by
// exactly one merge of two smaller ids, listed in rank order (merged ids ascending).
class Vocabulary {
 public:
  static constexpr int kBaseSize = 256;

  Vocabulary();  // base-only

  // Builds from a merge list; throws InvalidArgument when the hierarchy is malformed.
  static Vocabulary from_merges(std::vector<Merge> merges);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }
  static bool is_base(int id) { return id >= 0 && id < kBaseSize; }
  // The merge producing id; id must be non-base.
  const Merge& merge_for(int id) const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocabulary& other) const { return merges_ == other.merges_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
};

// Greedy most-frequent-pair merging. Ties go to the lexicographically smallest (left, right).
// Stops at target_size or when no adjacent pair occurs at least twice.
Vocabulary train_bpe(std::string_view corpus, std::size_t target_size);

struct FrequencyTable {
  std::vector<std::size_t> counts;  // indexed by token id
  std::size_t total_tokens = 0;
};

FrequencyTable count_frequencies(std::string_view corpus, const Vocabulary& vocab);

struct CoverageCurve {
  // (k, fraction of all token occurrences covered by the k most frequent tokens), k = 1..size
  std::vector<std::pair<std::size_t, double>> points;
};

// Token ids ordered by descending count, ties to the lower id.
std::vector<int> rank_by_frequency(const FrequencyTable& freq);

CoverageCurve coverage_curve(const FrequencyTable& freq);

struct CompactionTarget {
  std::optional<std::size_t> size;
  std::optional<double> coverage;

  static CompactionTarget of_size(std::size_t k) { return {k, std::nullopt}; }
  static CompactionTarget of_coverage(double theta) { return {std::nullopt, theta}; }
};

struct CompactionResult {
  Vocabulary vocab;
  std::vector<int> old_to_new;  // -1 for removed tokens
  std::vector<int> new_to_old;
};

// Keeps the byte base plus the most frequent non-base tokens meeting the target, then closes
// the set under merge ancestry so every kept token stays producible. Ids are re-densified in
// original order.
//   coverage: smallest frequency-ranked prefix whose mass (with the base) reaches theta
//   size:     greedily admit ranked tokens whose ancestry still fits within k
CompactionResult compact_vocab(const Vocabulary& vocab, const FrequencyTable& freq, const CompactionTarget& target);

// Fraction of occurrences in freq covered by a kept id set (ids in freq's numbering).
double retained_coverage(const FrequencyTable& freq, std::span<const int> kept_ids);

// Tokens per byte.
double compression_rate(std::string_view corpus, const Vocabulary& vocab);

// Vocabulary file: one hex-encoded token per line, then "#MERGES", then "left right merged" lines.
void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary load_vocab(const std::filesystem::path& path);
std::string vocab_to_text(const Vocabulary& vocab);
Vocabulary vocab_from_text(std::string_view text);

void write_frequency_csv(const std::filesystem::path& path, const FrequencyTable& freq);
void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& curve);

}  // namespace tlm
