#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tlm/core/autodiff.hpp"
#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"

namespace tlm {

// rows sequences of seq_len + 1 tokens: inputs are the first seq_len, targets the last seq_len.
struct Batch {
  std::size_t rows = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;

  std::vector<int> inputs() const;
  std::vector<int> targets() const;
  std::size_t target_count() const { return rows * seq_len; }
};

// Parameters bound as leaves on one tape.
struct BoundParams {
  std::map<std::string, Var> vars;
  const Var& operator[](const std::string& name) const;
};

BoundParams bind(Tape& tape, const ParamStore& params, bool requires_grad);

// Multiplicative gates on structural units. Unset Vars mean "no gate".
struct UnitGates {
  std::vector<Var> heads;  // per layer, [n_heads]
  std::vector<Var> ffn;    // per layer, [ffn_hidden]
  Var width;               // [width], applied to the residual stream
};

struct ForwardOptions {
  std::set<std::size_t> skip_layers;
  const UnitGates* gates = nullptr;
};

// Attention block on already-normalized input [B*T x width] -> [B*T x width].
Var attention_sublayer(const ModelConfig& config, const BoundParams& p, std::size_t layer, const Var& normed,
                       std::size_t seq_len, const Var* head_gate = nullptr);
// FFN block on already-normalized input [N x width] -> [N x width].
Var ffn_sublayer(const ModelConfig& config, const BoundParams& p, std::size_t layer, const Var& normed,
                 const Var* channel_gate = nullptr);

// Logits [B*T x V] for row-major ids [B x T].
Var forward_on_tape(const ModelConfig& config, const BoundParams& p, std::span<const int> ids, std::size_t seq_len,
                    const ForwardOptions& opts = {});

// No-grad forward pass.
Tensor forward(const ModelConfig& config, const ParamStore& params, std::span<const int> ids, std::size_t seq_len,
               const std::set<std::size_t>& skip_layers = {});

double batch_loss(const ModelConfig& config, const ParamStore& params, const Batch& batch,
                  const std::set<std::size_t>& skip_layers = {});

struct LossAndGrads {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

LossAndGrads loss_and_grads(const ModelConfig& config, const ParamStore& params, const Batch& batch);

// Greedy decoding with a key/value cache.
std::vector<int> generate(const ModelConfig& config, const ParamStore& params, std::span<const int> prefix,
                          std::size_t n_new);

struct SpeedReport {
  double tokens_per_second = 0.0;
  std::size_t tokens = 0;
  double seconds = 0.0;
};

// Throughput for relative comparisons on one machine only.
SpeedReport speed_bench(const ModelConfig& config, const ParamStore& params, std::size_t prefix_len = 2,
                        std::size_t new_tokens = 510, std::size_t batch = 20);

}  // namespace tlm
