#pragma once

#include <cstdint>
#include <string>

#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"

namespace tlm {

enum class InitVariant { Constant, GPT2Scaled, InternLMScaled, DepthAdaptive };

std::string to_string(InitVariant v);
// Accepts "constant", "gpt2", "internlm", "depth_adaptive" (case-insensitive).
InitVariant parse_init_variant(const std::string& name);

struct InitScheme {
  InitVariant variant = InitVariant::Constant;
  double sigma = 0.02;
  std::uint64_t seed = 0;
};

// Standard deviation the scheme assigns to a parameter; 0 for norm scales (set to one).
//
//   Constant        sigma everywhere
//   GPT2Scaled      sigma / sqrt(L) on wo and w_down
//   InternLMScaled  sigma / sqrt(L) on wo and w_gate
//   DepthAdaptive   wq, wk: sqrt(2) sigma -> sigma; wv, wo: sigma / sqrt(2) -> sigma,
//                   linear in layer index over [0, L-1]; FFN at sigma
double specified_std(const ModelConfig& config, const InitScheme& scheme, const std::string& param_name);

ParamStore initialize(const ModelConfig& config, const InitScheme& scheme);

}  // namespace tlm
