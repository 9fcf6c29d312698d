#pragma once

#include <cstddef>
#include <vector>

#include "tlm/model/config.hpp"

namespace tlm {

struct SearchRequest {
  std::size_t budget = 0;
  std::size_t vocab_size = 256;
  std::vector<std::size_t> depths;
  std::vector<double> expansion_rates;
  double tolerance = 0.05;
  std::size_t head_dim = 16;
};

// FFN width used for a given model width and expansion rate.
std::size_t ffn_width_for(std::size_t width, double expansion_rate);

// For each (depth, rate) pair, the head_dim-multiple width whose exact parameter count is
// closest to the budget (ties toward the smaller width), kept when within tolerance.
// MHA configs only. Empty when nothing is feasible.
std::vector<ModelConfig> search_configs(const SearchRequest& req);

}  // namespace tlm
