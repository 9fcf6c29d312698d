#include "tlm/model/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "tlm/core/error.hpp"

namespace tlm {

std::size_t ffn_width_for(std::size_t width, double expansion_rate) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(expansion_rate * static_cast<double>(width))));
}

namespace {

ModelConfig make_config(std::size_t vocab, std::size_t depth, std::size_t width, std::size_t head_dim,
                        double rate) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.depth = depth;
  c.width = width;
  c.head_dim = head_dim;
  c.n_heads = width / head_dim;
  c.kv_groups = c.n_heads;
  c.ffn_hidden = ffn_width_for(width, rate);
  return c;
}

}  // namespace

std::vector<ModelConfig> search_configs(const SearchRequest& req) {
  if (req.head_dim == 0 || req.head_dim % 2 != 0) throw InvalidArgument("search head_dim must be positive and even");
  if (req.tolerance < 0) throw InvalidArgument("search tolerance must be nonnegative");
  std::vector<ModelConfig> out;
  const double budget = static_cast<double>(req.budget);
  if (req.budget <= 2 * req.vocab_size * req.head_dim) return out;

  for (auto depth : req.depths) {
    for (auto rate : req.expansion_rates) {
      if (depth == 0 || rate <= 0) continue;
      // total(d) ~ a d^2 + b d with a = L (4 + 3 rho), b = 2V + 2L + 1
      const double L = static_cast<double>(depth);
      const double a = L * (4.0 + 3.0 * rate);
      const double b = 2.0 * static_cast<double>(req.vocab_size) + 2.0 * L + 1.0;
      const double root = (-b + std::sqrt(b * b + 4.0 * a * budget)) / (2.0 * a);
      const auto hd = static_cast<std::int64_t>(req.head_dim);
      const std::int64_t base = static_cast<std::int64_t>(std::floor(root / static_cast<double>(hd)));

      bool found = false;
      ModelConfig best;
      double best_err = 0.0;
      for (std::int64_t m = std::max<std::int64_t>(1, base - 2); m <= base + 3; ++m) {
        const auto cfg = make_config(req.vocab_size, depth, static_cast<std::size_t>(m * hd), req.head_dim, rate);
        const double err = std::abs(static_cast<double>(param_count(cfg).total_params) - budget);
        if (!found || err < best_err) {
          best = cfg;
          best_err = err;
          found = true;
        }
      }
      if (found && best_err / budget <= req.tolerance) out.push_back(best);
    }
  }
  return out;
}

}  // namespace tlm
