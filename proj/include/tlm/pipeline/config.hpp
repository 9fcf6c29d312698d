#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlm/init/initializer.hpp"
#include "tlm/model/config.hpp"
#include "tlm/surgery/surgery.hpp"
#include "tlm/tokenizer/bpe.hpp"
#include "tlm/train/trainer.hpp"

namespace tlm {

// Name of the environment variable that overrides output_dir.
inline constexpr const char* kOutputDirEnv = "TLM_OUTPUT_DIR";

struct TokenizerSection {
  std::string mode = "train";  // "train" or "load"
  std::filesystem::path vocab_file;
  std::size_t train_size = 512;
  std::optional<CompactionTarget> compaction;
};

struct SearchSection {
  std::size_t budget = 0;
  std::vector<std::size_t> depths;
  std::vector<double> expansion_rates{2.77};
  double tolerance = 0.1;
  std::size_t head_dim = 16;
  std::optional<std::size_t> select_depth;  // otherwise the first feasible depth
};

struct ArchitectureSection {
  // exactly one of these
  std::optional<ModelConfig> fixed;  // vocab_size is taken from the tokenizer
  std::optional<SearchSection> search;
};

struct InheritanceSection {
  std::filesystem::path parent_checkpoint;
  std::filesystem::path parent_vocab;  // empty: the parent shares the run's vocabulary
  std::filesystem::path plan_file;     // empty: generate a plan
  Criterion criterion = Criterion::Taylor;
  std::size_t front = 2;
  std::size_t back = 2;
  std::size_t score_batches = 4;
  MaskSchedule mask{};
  std::optional<std::size_t> gqa_groups;
};

struct TrainingSection {
  std::size_t rows = 8;
  std::size_t seq_len = 32;
  std::optional<std::size_t> total_tokens;
  std::optional<ScalingRule> scaling;  // sets peak_lr from the batch size
  TrainPlan plan{};

  std::size_t batch_tokens() const { return rows * seq_len; }
};

struct EvaluationSection {
  std::vector<std::filesystem::path> corpus;
  std::filesystem::path cloze_file;
  bool layer_skip = false;
  std::vector<std::size_t> windows{1, 2, 3};
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::vector<std::filesystem::path> corpus;
  TokenizerSection tokenizer;
  ArchitectureSection architecture;
  std::optional<InitScheme> init;
  std::optional<InheritanceSection> inheritance;
  TrainingSection training;
  EvaluationSection evaluation;

  // Every setting, defaults included, as JSON.
  nlohmann::json resolved() const;
};

// Parses and validates; relative paths resolve against base_dir. Throws ValidationError naming the field.
PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
// Also applies the output-directory environment override.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

}  // namespace tlm
