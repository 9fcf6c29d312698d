#include "tlm/model/transformer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "tlm/core/error.hpp"
#include "tlm/core/kernels.hpp"

namespace tlm {

using param_names::layer;

std::vector<int> Batch::inputs() const {
  std::vector<int> out;
  out.reserve(rows * seq_len);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = tokens.begin() + static_cast<std::ptrdiff_t>(r * (seq_len + 1));
    out.insert(out.end(), row, row + static_cast<std::ptrdiff_t>(seq_len));
  }
  return out;
}

std::vector<int> Batch::targets() const {
  std::vector<int> out;
  out.reserve(rows * seq_len);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = tokens.begin() + static_cast<std::ptrdiff_t>(r * (seq_len + 1) + 1);
    out.insert(out.end(), row, row + static_cast<std::ptrdiff_t>(seq_len));
  }
  return out;
}

const Var& BoundParams::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw IndexError("no bound parameter named '" + name + "'");
  return it->second;
}

BoundParams bind(Tape& tape, const ParamStore& params, bool requires_grad) {
  BoundParams b;
  for (const auto& [name, t] : params) b.vars.emplace(name, tape.leaf(t, requires_grad));
  return b;
}

Var attention_sublayer(const ModelConfig& c, const BoundParams& p, std::size_t i, const Var& normed,
                       std::size_t seq_len, const Var* head_gate) {
  Var q = ad::matmul(normed, p[layer(i, "wq")]);
  Var k = ad::matmul(normed, p[layer(i, "wk")]);
  Var v = ad::matmul(normed, p[layer(i, "wv")]);
  q = ad::rope(q, c.n_heads, c.head_dim, seq_len);
  k = ad::rope(k, c.kv_groups, c.head_dim, seq_len);
  Var a = ad::causal_attention(q, k, v, seq_len, c.n_heads, c.kv_groups, c.head_dim);
  if (head_gate && head_gate->valid()) a = ad::scale_column_groups(a, *head_gate, c.head_dim);
  return ad::matmul(a, p[layer(i, "wo")]);
}

Var ffn_sublayer(const ModelConfig&, const BoundParams& p, std::size_t i, const Var& normed,
                 const Var* channel_gate) {
  Var g = ad::silu(ad::matmul(normed, p[layer(i, "w_gate")]));
  Var u = ad::matmul(normed, p[layer(i, "w_up")]);
  Var m = ad::mul(g, u);
  if (channel_gate && channel_gate->valid()) m = ad::scale_column_groups(m, *channel_gate, 1);
  return ad::matmul(m, p[layer(i, "w_down")]);
}

Var forward_on_tape(const ModelConfig& c, const BoundParams& p, std::span<const int> ids, std::size_t seq_len,
                    const ForwardOptions& opts) {
  if (seq_len == 0 || ids.size() % seq_len != 0) throw DimensionError("token ids do not form whole sequences");
  for (auto s : opts.skip_layers) {
    if (s >= c.depth) throw IndexError("skip layer " + std::to_string(s) + " outside [0, depth)");
  }
  const UnitGates* gates = opts.gates;
  const Var* width_gate = gates && gates->width.valid() ? &gates->width : nullptr;
  auto gate_width = [&](Var x) { return width_gate ? ad::scale_column_groups(x, *width_gate, 1) : x; };
  auto gate_at = [](const std::vector<Var>& v, std::size_t i) -> const Var* {
    return i < v.size() && v[i].valid() ? &v[i] : nullptr;
  };

  Var x = gate_width(ad::embedding(p[param_names::kEmbed], ids));
  for (std::size_t i = 0; i < c.depth; ++i) {
    if (opts.skip_layers.count(i)) continue;
    Var h = ad::rms_norm(x, p[layer(i, "attn_norm")], kernels::kNormEps);
    Var a = attention_sublayer(c, p, i, h, seq_len, gates ? gate_at(gates->heads, i) : nullptr);
    x = ad::add(x, gate_width(a));
    h = ad::rms_norm(x, p[layer(i, "ffn_norm")], kernels::kNormEps);
    Var f = ffn_sublayer(c, p, i, h, gates ? gate_at(gates->ffn, i) : nullptr);
    x = ad::add(x, gate_width(f));
  }
  x = ad::rms_norm(x, p[param_names::kFinalNorm], kernels::kNormEps);
  return ad::matmul(x, p[param_names::kHead]);
}

Tensor forward(const ModelConfig& config, const ParamStore& params, std::span<const int> ids, std::size_t seq_len,
               const std::set<std::size_t>& skip_layers) {
  Tape tape;
  auto bound = bind(tape, params, false);
  ForwardOptions opts;
  opts.skip_layers = skip_layers;
  return forward_on_tape(config, bound, ids, seq_len, opts).value();
}

double batch_loss(const ModelConfig& config, const ParamStore& params, const Batch& batch,
                  const std::set<std::size_t>& skip_layers) {
  Tape tape;
  auto bound = bind(tape, params, false);
  ForwardOptions opts;
  opts.skip_layers = skip_layers;
  const auto inputs = batch.inputs();
  const auto targets = batch.targets();
  Var logits = forward_on_tape(config, bound, inputs, batch.seq_len, opts);
  return ad::softmax_cross_entropy(logits, targets).value().item();
}

LossAndGrads loss_and_grads(const ModelConfig& config, const ParamStore& params, const Batch& batch) {
  Tape tape;
  auto bound = bind(tape, params, true);
  const auto inputs = batch.inputs();
  const auto targets = batch.targets();
  Var logits = forward_on_tape(config, bound, inputs, batch.seq_len);
  Var loss = ad::softmax_cross_entropy(logits, targets);
  LossAndGrads out;
  out.loss = loss.value().item();
  auto grads = tape.backward(loss);
  for (const auto& [name, v] : bound.vars) out.grads.emplace(name, grads.of(v));
  return out;
}

namespace {

// Incremental decoder state for one sequence.
class CachedDecoder {
 public:
  CachedDecoder(const ModelConfig& c, const ParamStore& p) : c_(c), p_(p), keys_(c.depth), values_(c.depth) {
    for (std::size_t i = 0; i < c.depth; ++i) {
      layer_names_.push_back({layer(i, "attn_norm"), layer(i, "wq"), layer(i, "wk"), layer(i, "wv"),
                              layer(i, "wo"), layer(i, "ffn_norm"), layer(i, "w_gate"), layer(i, "w_up"),
                              layer(i, "w_down")});
    }
  }

  // Consumes one token, returns next-token logits.
  std::vector<double> step(int token) {
    const std::size_t d = c_.width;
    if (token < 0 || static_cast<std::size_t>(token) >= c_.vocab_size) throw IndexError("token out of range");
    const Tensor& embed = p_.get(param_names::kEmbed);
    std::vector<double> x(embed.data().begin() + static_cast<std::ptrdiff_t>(token * d),
                          embed.data().begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
    std::vector<double> h(d), inv(1);
    const std::size_t qw = c_.q_width(), kw = c_.kv_width(), per_group = c_.n_heads / c_.kv_groups;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c_.head_dim));
    for (std::size_t i = 0; i < c_.depth; ++i) {
      const auto& n = layer_names_[i];
      kernels::rms_norm(x, p_.get(n[0]).data(), h, inv, 1, d, kernels::kNormEps);
      std::vector<double> q(qw, 0.0), k(kw, 0.0), v(kw, 0.0);
      kernels::gemm_nn_acc(h, p_.get(n[1]).data(), q, 1, d, qw);
      kernels::gemm_nn_acc(h, p_.get(n[2]).data(), k, 1, d, kw);
      kernels::gemm_nn_acc(h, p_.get(n[3]).data(), v, 1, d, kw);
      kernels::rope(q, 1, c_.n_heads, c_.head_dim, 1, pos_, false);
      kernels::rope(k, 1, c_.kv_groups, c_.head_dim, 1, pos_, false);
      keys_[i].insert(keys_[i].end(), k.begin(), k.end());
      values_[i].insert(values_[i].end(), v.begin(), v.end());
      const std::size_t len = pos_ + 1;
      std::vector<double> a(qw, 0.0), scores(len);
      for (std::size_t head = 0; head < c_.n_heads; ++head) {
        const std::size_t kvh = head / per_group;
        const double* qh = q.data() + head * c_.head_dim;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = keys_[i].data() + j * kw + kvh * c_.head_dim;
          double s = 0.0;
          for (std::size_t e = 0; e < c_.head_dim; ++e) s += qh[e] * kj[e];
          scores[j] = s * inv_sqrt;
        }
        kernels::softmax_row(scores);
        double* ah = a.data() + head * c_.head_dim;
        for (std::size_t j = 0; j < len; ++j) {
          const double* vj = values_[i].data() + j * kw + kvh * c_.head_dim;
          for (std::size_t e = 0; e < c_.head_dim; ++e) ah[e] += scores[j] * vj[e];
        }
      }
      std::vector<double> o(d, 0.0);
      kernels::gemm_nn_acc(a, p_.get(n[4]).data(), o, 1, qw, d);
      for (std::size_t e = 0; e < d; ++e) x[e] += o[e];

      kernels::rms_norm(x, p_.get(n[5]).data(), h, inv, 1, d, kernels::kNormEps);
      const std::size_t f = c_.ffn_hidden;
      std::vector<double> g(f, 0.0), u(f, 0.0);
      kernels::gemm_nn_acc(h, p_.get(n[6]).data(), g, 1, d, f);
      kernels::gemm_nn_acc(h, p_.get(n[7]).data(), u, 1, d, f);
      for (std::size_t e = 0; e < f; ++e) g[e] = kernels::silu(g[e]) * u[e];
      std::fill(o.begin(), o.end(), 0.0);
      kernels::gemm_nn_acc(g, p_.get(n[8]).data(), o, 1, f, d);
      for (std::size_t e = 0; e < d; ++e) x[e] += o[e];
    }
    kernels::rms_norm(x, p_.get(param_names::kFinalNorm).data(), h, inv, 1, d, kernels::kNormEps);
    std::vector<double> logits(c_.vocab_size, 0.0);
    kernels::gemm_nn_acc(h, p_.get(param_names::kHead).data(), logits, 1, d, c_.vocab_size);
    ++pos_;
    return logits;
  }

 private:
  const ModelConfig& c_;
  const ParamStore& p_;
  std::vector<std::vector<std::string>> layer_names_;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  std::size_t pos_ = 0;
};

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<int> generate(const ModelConfig& config, const ParamStore& params, std::span<const int> prefix,
                          std::size_t n_new) {
  if (prefix.empty()) throw InvalidArgument("generate needs a nonempty prefix");
  if (n_new < 1) throw InvalidArgument("generate needs n_new >= 1");
  CachedDecoder dec(config, params);
  std::vector<double> logits;
  for (int t : prefix) logits = dec.step(t);
  std::vector<int> out;
  out.reserve(n_new);
  for (std::size_t i = 0; i < n_new; ++i) {
    const int next = argmax(logits);
    out.push_back(next);
    if (i + 1 < n_new) logits = dec.step(next);
  }
  return out;
}

SpeedReport speed_bench(const ModelConfig& config, const ParamStore& params, std::size_t prefix_len,
                        std::size_t new_tokens, std::size_t batch) {
  std::vector<int> prefix(prefix_len);
  const auto start = std::chrono::steady_clock::now();
  std::size_t produced = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < prefix_len; ++i) prefix[i] = static_cast<int>((b * prefix_len + i) % config.vocab_size);
    produced += generate(config, params, prefix, new_tokens).size();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {secs > 0 ? static_cast<double>(produced) / secs : 0.0, produced, secs};
}

}  // namespace tlm
