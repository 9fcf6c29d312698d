#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"
#include "tlm/model/transformer.hpp"
#include "tlm/tokenizer/bpe.hpp"

namespace tlm {

struct ClozeItem {
  std::vector<int> context;
  std::vector<std::vector<int>> candidates;
  std::size_t gold = 0;

  void validate(std::size_t vocab_size) const;
};

struct EvalReport {
  struct Row {
    std::size_t item = 0;
    std::size_t chosen = 0;
    std::size_t gold = 0;
    std::vector<double> scores;  // mean log-likelihood per candidate
  };
  std::string metric;
  double value = 0.0;
  std::size_t count = 0;  // items, or target tokens for perplexity
  std::vector<Row> rows;
};

// exp of the token-weighted mean cross-entropy over all batches.
double perplexity(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches);
EvalReport perplexity_report(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches);

// Sum of log p(candidate token | context, earlier candidate tokens).
double continuation_log_likelihood(const ModelConfig& config, const ParamStore& params, std::span<const int> context,
                                   std::span<const int> continuation);

// Index of the highest score; ties go to the lower index.
std::size_t pick_candidate(std::span<const double> scores);

// Each candidate is scored by its length-normalized log-likelihood.
EvalReport cloze_accuracy(const ModelConfig& config, const ParamStore& params, std::span<const ClozeItem> items);

// One JSON object per line: {"context": [...], "candidates": [[...], ...], "gold": k}
// With a vocabulary, context and candidates may also be given as strings and are encoded.
std::vector<ClozeItem> load_cloze_items(const std::filesystem::path& path, const Vocabulary* vocab = nullptr);
void save_cloze_items(const std::filesystem::path& path, std::span<const ClozeItem> items);

nlohmann::json report_summary(const EvalReport& report);
// Per-item rows for cloze reports, a single summary row otherwise.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace tlm
