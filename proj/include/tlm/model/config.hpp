#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlm/core/tensor.hpp"

namespace tlm {

// Decoder-only transformer: pre-RMS-norm, rotary attention (MHA when kv_groups == n_heads),
// SiLU-gated FFN, untied embedding and output head, no biases.
struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t width = 64;
  std::size_t depth = 2;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t kv_groups = 4;
  std::size_t ffn_hidden = 160;

  std::size_t q_width() const { return n_heads * head_dim; }
  std::size_t kv_width() const { return kv_groups * head_dim; }
  double expansion_rate() const { return static_cast<double>(ffn_hidden) / static_cast<double>(width); }
  bool is_mha() const { return kv_groups == n_heads; }

  // Throws InvalidArgument describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParamSpec {
  std::string name;
  Shape shape;
};

// Every tensor a config requires, in canonical order.
std::vector<ParamSpec> param_specs(const ModelConfig& config);

namespace param_names {
inline constexpr const char* kEmbed = "embed";
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kHead = "head";
std::string layer(std::size_t i, const char* leaf);
}  // namespace param_names

struct ArchReport {
  std::size_t total_params = 0;
  std::size_t embedding_head_params = 0;
  double pehl = 0.0;
  std::map<std::string, std::size_t> breakdown;
};

void to_json(nlohmann::json& j, const ArchReport& r);

// Closed-form parameter accounting.
ArchReport param_count(const ModelConfig& config);

}  // namespace tlm
