#pragma once

#include <filesystem>

#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"

namespace tlm {

// One file: 8-byte magic, little-endian u64 manifest length, JSON manifest
// ({"config", "tensors": [{name, shape, offset}]}, offset counted in values),
// then the raw little-endian float64 payload.
struct Checkpoint {
  ModelConfig config;
  ParamStore params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tlm
