#include "tlm/model/config.hpp"

#include "tlm/core/error.hpp"

namespace tlm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidArgument("model config: " + msg); };
  if (vocab_size < 256) fail("vocab_size must be at least 256");
  if (depth < 1) fail("depth must be at least 1");
  if (n_heads < 1 || head_dim < 1) fail("n_heads and head_dim must be positive");
  if (head_dim % 2 != 0) fail("head_dim must be even for rotary encoding");
  if (width != n_heads * head_dim) fail("width must equal n_heads * head_dim");
  if (kv_groups < 1 || n_heads % kv_groups != 0) fail("n_heads must be divisible by kv_groups");
  if (ffn_hidden < 1) fail("ffn_hidden must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"width", c.width},         {"depth", c.depth},
                     {"n_heads", c.n_heads},       {"head_dim", c.head_dim},   {"kv_groups", c.kv_groups},
                     {"ffn_hidden", c.ffn_hidden}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("width").get_to(c.width);
  j.at("depth").get_to(c.depth);
  j.at("n_heads").get_to(c.n_heads);
  j.at("head_dim").get_to(c.head_dim);
  c.kv_groups = j.contains("kv_groups") ? j.at("kv_groups").get<std::size_t>() : c.n_heads;
  j.at("ffn_hidden").get_to(c.ffn_hidden);
}

std::string param_names::layer(std::size_t i, const char* leaf) {
  return "layers." + std::to_string(i) + "." + leaf;
}

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  using param_names::layer;
  std::vector<ParamSpec> specs;
  specs.push_back({param_names::kEmbed, {c.vocab_size, c.width}});
  for (std::size_t i = 0; i < c.depth; ++i) {
    specs.push_back({layer(i, "attn_norm"), {c.width}});
    specs.push_back({layer(i, "wq"), {c.width, c.q_width()}});
    specs.push_back({layer(i, "wk"), {c.width, c.kv_width()}});
    specs.push_back({layer(i, "wv"), {c.width, c.kv_width()}});
    specs.push_back({layer(i, "wo"), {c.q_width(), c.width}});
    specs.push_back({layer(i, "ffn_norm"), {c.width}});
    specs.push_back({layer(i, "w_gate"), {c.width, c.ffn_hidden}});
    specs.push_back({layer(i, "w_up"), {c.width, c.ffn_hidden}});
    specs.push_back({layer(i, "w_down"), {c.ffn_hidden, c.width}});
  }
  specs.push_back({param_names::kFinalNorm, {c.width}});
  specs.push_back({param_names::kHead, {c.width, c.vocab_size}});
  return specs;
}

ArchReport param_count(const ModelConfig& c) {
  ArchReport r;
  const std::size_t d = c.width;
  r.breakdown["embedding"] = c.vocab_size * d;
  r.breakdown["head"] = d * c.vocab_size;
  r.breakdown["attention"] = c.depth * (2 * d * c.q_width() + 2 * d * c.kv_width());
  r.breakdown["ffn"] = c.depth * 3 * d * c.ffn_hidden;
  r.breakdown["norms"] = (2 * c.depth + 1) * d;
  for (const auto& [_, n] : r.breakdown) r.total_params += n;
  r.embedding_head_params = r.breakdown["embedding"] + r.breakdown["head"];
  r.pehl = static_cast<double>(r.embedding_head_params) / static_cast<double>(r.total_params);
  return r;
}

void to_json(nlohmann::json& j, const ArchReport& r) {
  j = nlohmann::json{{"total_params", r.total_params},
                     {"embedding_head_params", r.embedding_head_params},
                     {"pehl", r.pehl},
                     {"breakdown", r.breakdown}};
}

}  // namespace tlm
