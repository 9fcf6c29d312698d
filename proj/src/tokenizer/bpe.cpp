#include "tlm/tokenizer/bpe.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <queue>
#include <sstream>
#include <unordered_map>

#include "tlm/core/error.hpp"

namespace tlm {
namespace {

std::uint64_t pair_key(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

std::vector<int> bytes_to_ids(std::string_view text) {
  std::vector<int> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

}  // namespace

Vocabulary::Vocabulary() {
  tokens_.reserve(kBaseSize);
  for (int b = 0; b < kBaseSize; ++b) tokens_.emplace_back(1, static_cast<char>(b));
}

Vocabulary Vocabulary::from_merges(std::vector<Merge> merges) {
  Vocabulary v;
  for (std::size_t i = 0; i < merges.size(); ++i) {
    const Merge& m = merges[i];
    const int expected = kBaseSize + static_cast<int>(i);
    if (m.merged != expected) {
      throw InvalidArgument("merge " + std::to_string(i) + " produces id " + std::to_string(m.merged) +
                            ", expected " + std::to_string(expected));
    }
    if (m.left < 0 || m.right < 0 || m.left >= m.merged || m.right >= m.merged) {
      throw InvalidArgument("merge " + std::to_string(i) + " uses operands not yet defined");
    }
    v.tokens_.push_back(v.tokens_[m.left] + v.tokens_[m.right]);
  }
  v.merges_ = std::move(merges);
  return v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return tokens_[id];
}

const Merge& Vocabulary::merge_for(int id) const {
  if (is_base(id) || static_cast<std::size_t>(id) >= tokens_.size()) throw IndexError("no merge for id " + std::to_string(id));
  return merges_[id - kBaseSize];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids = bytes_to_ids(text);
  if (ids.size() < 2 || merges_.empty()) return ids;

  std::unordered_map<std::uint64_t, int> rank;
  rank.reserve(merges_.size() * 2);
  for (std::size_t r = 0; r < merges_.size(); ++r) rank.emplace(pair_key(merges_[r].left, merges_[r].right), static_cast<int>(r));

  const std::size_t n = ids.size();
  std::vector<std::ptrdiff_t> prev(n), next(n);
  std::vector<bool> alive(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    prev[i] = static_cast<std::ptrdiff_t>(i) - 1;
    next[i] = i + 1 < n ? static_cast<std::ptrdiff_t>(i + 1) : -1;
  }

  using Entry = std::pair<int, std::size_t>;  // (rank, position)
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto push = [&](std::ptrdiff_t i) {
    if (i < 0 || next[i] < 0) return;
    auto it = rank.find(pair_key(ids[i], ids[next[i]]));
    if (it != rank.end()) heap.emplace(it->second, static_cast<std::size_t>(i));
  };
  for (std::size_t i = 0; i + 1 < n; ++i) push(static_cast<std::ptrdiff_t>(i));

  while (!heap.empty()) {
    const auto [r, pos] = heap.top();
    heap.pop();
    if (!alive[pos] || next[pos] < 0) continue;
    const auto j = static_cast<std::size_t>(next[pos]);
    const Merge& m = merges_[r];
    if (ids[pos] != m.left || ids[j] != m.right) continue;
    ids[pos] = m.merged;
    alive[j] = false;
    next[pos] = next[j];
    if (next[j] >= 0) prev[next[j]] = static_cast<std::ptrdiff_t>(pos);
    push(prev[pos]);
    push(static_cast<std::ptrdiff_t>(pos));
  }

  std::vector<int> out;
  out.reserve(n);
  for (std::ptrdiff_t i = 0; i >= 0; i = next[i]) out.push_back(ids[i]);
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token(id);
  return out;
}

Vocabulary train_bpe(std::string_view corpus, std::size_t target_size) {
  if (target_size < static_cast<std::size_t>(Vocabulary::kBaseSize)) {
    throw InvalidArgument("BPE target size must be at least 256");
  }
  std::vector<int> seq = bytes_to_ids(corpus);
  std::vector<Merge> merges;
  int next_id = Vocabulary::kBaseSize;
  std::unordered_map<std::uint64_t, std::size_t> counts;

  while (static_cast<std::size_t>(next_id) < target_size && seq.size() >= 2) {
    counts.clear();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pair_key(seq[i], seq[i + 1])];
    std::uint64_t best_key = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count > best_count || (count == best_count && key < best_key)) {
        best_key = key;
        best_count = count;
      }
    }
    if (best_count < 2) break;
    const int left = static_cast<int>(best_key >> 32);
    const int right = static_cast<int>(best_key & 0xffffffffu);
    merges.push_back({left, right, next_id});

    std::size_t w = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
        seq[w++] = next_id;
        ++i;
      } else {
        seq[w++] = seq[i];
      }
    }
    seq.resize(w);
    ++next_id;
  }
  return Vocabulary::from_merges(std::move(merges));
}

FrequencyTable count_frequencies(std::string_view corpus, const Vocabulary& vocab) {
  FrequencyTable f;
  f.counts.assign(vocab.size(), 0);
  for (int id : vocab.encode(corpus)) ++f.counts[id];
  f.total_tokens = std::accumulate(f.counts.begin(), f.counts.end(), std::size_t{0});
  return f;
}

std::vector<int> rank_by_frequency(const FrequencyTable& freq) {
  std::vector<int> order(freq.counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return freq.counts[a] > freq.counts[b]; });
  return order;
}

CoverageCurve coverage_curve(const FrequencyTable& freq) {
  if (freq.total_tokens == 0) throw InvalidArgument("coverage curve of an empty corpus");
  CoverageCurve curve;
  std::size_t cum = 0;
  const auto order = rank_by_frequency(freq);
  curve.points.reserve(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += freq.counts[order[k]];
    curve.points.emplace_back(k + 1, static_cast<double>(cum) / static_cast<double>(freq.total_tokens));
  }
  return curve;
}

double retained_coverage(const FrequencyTable& freq, std::span<const int> kept_ids) {
  if (freq.total_tokens == 0) return 1.0;
  std::size_t covered = 0;
  for (int id : kept_ids) covered += freq.counts.at(id);
  return static_cast<double>(covered) / static_cast<double>(freq.total_tokens);
}

CompactionResult compact_vocab(const Vocabulary& vocab, const FrequencyTable& freq, const CompactionTarget& target) {
  if (freq.counts.size() != vocab.size()) throw InvalidArgument("frequency table does not match vocabulary");
  if (target.size.has_value() == target.coverage.has_value()) {
    throw InvalidArgument("compaction needs exactly one of size or coverage");
  }
  if (target.size && *target.size < static_cast<std::size_t>(Vocabulary::kBaseSize)) {
    throw InvalidArgument("compaction size target must be at least 256");
  }
  if (target.coverage && !(*target.coverage > 0.0 && *target.coverage <= 1.0)) {
    throw InvalidArgument("compaction coverage must lie in (0, 1]");
  }

  const std::size_t n = vocab.size();
  std::vector<bool> keep(n, false);
  std::size_t kept = 0;
  for (int b = 0; b < Vocabulary::kBaseSize; ++b) keep[b] = true;
  kept = Vocabulary::kBaseSize;

  // Ancestors of id not yet kept (including id itself).
  auto missing_closure = [&](int id) {
    std::vector<int> out, stack{id};
    std::vector<bool> seen(n, false);
    while (!stack.empty()) {
      const int t = stack.back();
      stack.pop_back();
      if (keep[t] || seen[t]) continue;
      seen[t] = true;
      out.push_back(t);
      const Merge& m = vocab.merge_for(t);
      stack.push_back(m.left);
      stack.push_back(m.right);
    }
    return out;
  };

  std::vector<int> ranked;
  for (int id : rank_by_frequency(freq))
    if (!Vocabulary::is_base(id)) ranked.push_back(id);

  if (target.coverage) {
    std::size_t covered = 0;
    for (int b = 0; b < Vocabulary::kBaseSize; ++b) covered += freq.counts[b];
    const double total = static_cast<double>(freq.total_tokens);
    std::vector<int> chosen;
    for (int id : ranked) {
      if (freq.total_tokens == 0 || static_cast<double>(covered) / total >= *target.coverage) break;
      chosen.push_back(id);
      covered += freq.counts[id];
    }
    for (int id : chosen) {
      for (int t : missing_closure(id)) {
        keep[t] = true;
        ++kept;
      }
    }
  } else {
    for (int id : ranked) {
      if (kept >= *target.size) break;
      const auto add = missing_closure(id);
      if (kept + add.size() > *target.size) continue;
      for (int t : add) keep[t] = true;
      kept += add.size();
    }
  }

  CompactionResult res;
  res.old_to_new.assign(n, -1);
  for (std::size_t id = 0; id < n; ++id) {
    if (!keep[id]) continue;
    res.old_to_new[id] = static_cast<int>(res.new_to_old.size());
    res.new_to_old.push_back(static_cast<int>(id));
  }
  std::vector<Merge> merges;
  for (const Merge& m : vocab.merges()) {
    if (!keep[m.merged]) continue;
    merges.push_back({res.old_to_new[m.left], res.old_to_new[m.right], res.old_to_new[m.merged]});
  }
  res.vocab = Vocabulary::from_merges(std::move(merges));
  return res;
}

double compression_rate(std::string_view corpus, const Vocabulary& vocab) {
  if (corpus.empty()) throw InvalidArgument("compression rate of an empty corpus");
  return static_cast<double>(vocab.encode(corpus).size()) / static_cast<double>(corpus.size());
}

std::string vocab_to_text(const Vocabulary& vocab) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (const auto& tok : vocab.tokens()) {
    for (unsigned char c : tok) {
      out += kHex[c >> 4];
      out += kHex[c & 15];
    }
    out += '\n';
  }
  out += "#MERGES\n";
  for (const auto& m : vocab.merges()) {
    out += std::to_string(m.left) + ' ' + std::to_string(m.right) + ' ' + std::to_string(m.merged) + '\n';
  }
  return out;
}

Vocabulary vocab_from_text(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  std::vector<std::string> tokens;
  bool in_merges = false;
  std::vector<Merge> merges;
  auto hex_val = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw IoError(std::string("bad hex digit '") + c + "' in vocabulary file");
  };
  while (std::getline(is, line)) {
    if (!in_merges) {
      if (line == "#MERGES") {
        in_merges = true;
        continue;
      }
      if (line.size() % 2 != 0 || line.empty()) throw IoError("malformed token line in vocabulary file");
      std::string tok;
      for (std::size_t i = 0; i < line.size(); i += 2) tok += static_cast<char>(hex_val(line[i]) * 16 + hex_val(line[i + 1]));
      tokens.push_back(std::move(tok));
    } else {
      if (line.empty()) continue;
      std::istringstream ls(line);
      Merge m;
      if (!(ls >> m.left >> m.right >> m.merged)) throw IoError("malformed merge line '" + line + "'");
      merges.push_back(m);
    }
  }
  if (!in_merges) throw IoError("vocabulary file lacks a #MERGES section");
  Vocabulary v;
  try {
    v = Vocabulary::from_merges(std::move(merges));
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("inconsistent vocabulary file: ") + e.what());
  }
  if (v.tokens() != tokens) throw IoError("vocabulary tokens disagree with the merge hierarchy");
  return v;
}

void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << vocab_to_text(vocab);
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return vocab_from_text(ss.str());
}

void write_frequency_csv(const std::filesystem::path& path, const FrequencyTable& freq) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "token_id,count\n";
  for (std::size_t i = 0; i < freq.counts.size(); ++i) os << i << ',' << freq.counts[i] << '\n';
}

void write_coverage_csv(const std::filesystem::path& path, const CoverageCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "k,cumulative_fraction\n";
  for (const auto& [k, f] : curve.points) os << k << ',' << f << '\n';
}

}  // namespace tlm
