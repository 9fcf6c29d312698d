#include "tlm/init/initializer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "tlm/core/error.hpp"

namespace tlm {

std::string to_string(InitVariant v) {
  switch (v) {
    case InitVariant::Constant: return "constant";
    case InitVariant::GPT2Scaled: return "gpt2";
    case InitVariant::InternLMScaled: return "internlm";
    case InitVariant::DepthAdaptive: return "depth_adaptive";
  }
  return "?";
}

InitVariant parse_init_variant(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "constant") return InitVariant::Constant;
  if (n == "gpt2" || n == "gpt2scaled") return InitVariant::GPT2Scaled;
  if (n == "internlm" || n == "internlmscaled") return InitVariant::InternLMScaled;
  if (n == "depth_adaptive" || n == "depthadaptive") return InitVariant::DepthAdaptive;
  throw InvalidArgument("unknown init scheme '" + name + "'");
}

namespace {

struct LayerParam {
  std::size_t layer = 0;
  std::string leaf;
};

bool split_layer_name(const std::string& name, LayerParam& out) {
  constexpr std::string_view prefix = "layers.";
  if (name.rfind(prefix, 0) != 0) return false;
  const auto dot = name.find('.', prefix.size());
  out.layer = std::stoul(name.substr(prefix.size(), dot - prefix.size()));
  out.leaf = name.substr(dot + 1);
  return true;
}

}  // namespace

double specified_std(const ModelConfig& config, const InitScheme& scheme, const std::string& name) {
  const double s = scheme.sigma;
  LayerParam lp;
  if (!split_layer_name(name, lp)) return name == param_names::kFinalNorm ? 0.0 : s;
  if (lp.leaf == "attn_norm" || lp.leaf == "ffn_norm") return 0.0;

  const double scaled = s / std::sqrt(static_cast<double>(config.depth));
  switch (scheme.variant) {
    case InitVariant::Constant: return s;
    case InitVariant::GPT2Scaled: return lp.leaf == "wo" || lp.leaf == "w_down" ? scaled : s;
    case InitVariant::InternLMScaled: return lp.leaf == "wo" || lp.leaf == "w_gate" ? scaled : s;
    case InitVariant::DepthAdaptive: {
      const double t =
          config.depth > 1 ? static_cast<double>(lp.layer) / static_cast<double>(config.depth - 1) : 0.0;
      if (lp.leaf == "wq" || lp.leaf == "wk") return std::sqrt(2.0) * s + (s - std::sqrt(2.0) * s) * t;
      if (lp.leaf == "wv" || lp.leaf == "wo") return s / std::sqrt(2.0) + (s - s / std::sqrt(2.0)) * t;
      return s;
    }
  }
  return s;
}

ParamStore initialize(const ModelConfig& config, const InitScheme& scheme) {
  config.validate();
  if (!(scheme.sigma > 0)) throw InvalidArgument("init sigma must be positive");
  std::mt19937_64 rng(scheme.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamStore params;
  for (const auto& spec : param_specs(config)) {
    const double sd = specified_std(config, scheme, spec.name);
    Tensor t(spec.shape, 1.0);
    if (sd > 0) {
      for (double& v : t.data()) v = sd * normal(rng);
    }
    params.set(spec.name, std::move(t));
  }
  return params;
}

}  // namespace tlm
