#include "tlm/core/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "tlm/core/error.hpp"
#include "tlm/core/kernels.hpp"

namespace tlm {

const Tensor& Var::value() const {
  if (!tape_) throw StateError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::of(const Var& v) const {
  if (v.id() < grads_.size() && present_[v.id()]) return grads_[v.id()];
  if (v.id() >= zeros_.size()) throw IndexError("Var is not part of the differentiated tape");
  return zeros_[v.id()];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (consumed_) throw StateError("tape already consumed by backward");
  value.set_requires_grad(requires_grad);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (consumed_) throw StateError("tape already consumed by backward");
  Node n;
  n.value = std::move(value);
  for (auto i : inputs) {
    if (i >= nodes_.size()) throw StateError("op input recorded after its consumer");
    n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  }
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  if (grads_[id].empty()) grads_[id] = Tensor(nodes_[id].value.shape(), 0.0);
  return grads_[id];
}

Gradients Tape::backward(const Var& loss) {
  if (consumed_) throw StateError("backward called twice on a consumed tape");
  if (loss.tape() != this) throw StateError("loss does not belong to this tape");
  if (loss.value().numel() != 1) throw DimensionError("backward needs a scalar loss");
  consumed_ = true;

  grads_.assign(nodes_.size(), Tensor());
  if (nodes_[loss.id()].requires_grad) {
    grad(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.backward || grads_[i].empty()) continue;
      n.backward(*this, i);
      n.backward = nullptr;
    }
  }

  Gradients out;
  out.grads_.resize(nodes_.size());
  out.present_.assign(nodes_.size(), false);
  out.zeros_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_leaf) continue;
    if (!grads_[i].empty()) {
      out.grads_[i] = std::move(grads_[i]);
      out.present_[i] = true;
    } else {
      out.zeros_[i] = Tensor(nodes_[i].value.shape(), 0.0);
    }
  }
  grads_.clear();
  return out;
}

namespace ad {
namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || !a.valid()) throw StateError("operands recorded on different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename F>
Var unary(const Var& a, Tensor out, F&& grad_fn) {
  Tape& t = *a.tape();
  const std::size_t ai = a.id();
  return t.record(std::move(out), {ai}, [ai, grad_fn](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& x = tape.value(ai);
    const Tensor& y = tape.value(self);
    Tensor& gx = tape.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * grad_fn(x[i], y[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n}, 0.0);
  kernels::gemm_nn_acc(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(ai)) kernels::gemm_nt_acc(g.data(), t.value(bi).data(), t.grad(ai).data(), m, n, k);
    if (t.wants_grad(bi)) kernels::gemm_tn_acc(t.value(ai).data(), g.data(), t.grad(bi).data(), m, k, n);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.set_requires_grad(false);
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (auto id : {ai, bi}) {
      if (!t.wants_grad(id)) continue;
      Tensor& gx = t.grad(id);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape(), 0.0);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(bi);
    if (t.wants_grad(ai)) {
      Tensor& gx = t.grad(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& gy = t.grad(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gy[i] += g[i] * x[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out(a.shape(), 0.0);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * c;
  return unary(a, std::move(out), [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a.shape(), 0.0);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + c;
  return unary(a, std::move(out), [](double, double) { return 1.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ai = a.id();
  return a.tape()->record(Tensor::scalar(s), {ai}, [ai](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ai).data()) v += g;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var square(const Var& a) {
  Tensor out(a.shape(), 0.0);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * av[i];
  return unary(a, std::move(out), [](double x, double) { return 2.0 * x; });
}

Var silu(const Var& a) {
  Tensor out(a.shape(), 0.0);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = kernels::silu(av[i]);
  return unary(a, std::move(out), [](double x, double) {
    const double s = kernels::sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a.shape(), 0.0);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = kernels::sigmoid(av[i]);
  return unary(a, std::move(out), [](double, double y) { return y * (1.0 - y); });
}

Var softmax_rows(const Var& a) {
  Tensor out = a.value();
  out.set_requires_grad(false);
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) kernels::softmax_row(out.data().subspan(r * cols, cols));
  const std::size_t ai = a.id();
  return a.tape()->record(std::move(out), {ai}, [ai, rows, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var rms_norm(const Var& x, const Var& scale, double eps) {
  require_same_tape(x, scale);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), width = xv.cols();
  if (scale.value().numel() != width) throw DimensionError("rms_norm: scale width mismatch");
  Tensor out(xv.shape(), 0.0);
  auto inv = std::make_shared<std::vector<double>>(rows);
  kernels::rms_norm(xv.data(), scale.value().data(), out.data(), *inv, rows, width, eps);
  const std::size_t xi = x.id(), si = scale.id();
  return x.tape()->record(std::move(out), {xi, si}, [xi, si, rows, width, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& sv = t.value(si);
    const bool want_x = t.wants_grad(xi);
    const bool want_s = t.wants_grad(si);
    Tensor* gx = want_x ? &t.grad(xi) : nullptr;
    Tensor* gs = want_s ? &t.grad(si) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double ir = (*inv)[r];
      const std::size_t o = r * width;
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) {
        const double xh = xv[o + c] * ir;
        if (gs) (*gs)[c] += g[o + c] * xh;
        dot += g[o + c] * sv[c] * xh;
      }
      if (!gx) continue;
      dot /= static_cast<double>(width);
      for (std::size_t c = 0; c < width; ++c) {
        const double xh = xv[o + c] * ir;
        (*gx)[o + c] += ir * (g[o + c] * sv[c] - xh * dot);
      }
    }
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding table must be rank 2");
  const std::size_t vocab = tv.dim(0), width = tv.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
  }
  if (idv.empty()) throw DimensionError("embedding of an empty id list");
  Tensor out({idv.size(), width}, 0.0);
  for (std::size_t r = 0; r < idv.size(); ++r) {
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(idv[r] * width), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  const std::size_t ti = table.id();
  return table.tape()->record(std::move(out), {ti}, [ti, idv = std::move(idv), width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad(ti);
    for (std::size_t r = 0; r < idv.size(); ++r) {
      for (std::size_t c = 0; c < width; ++c) gt[idv[r] * width + c] += g[r * width + c];
    }
  });
}

Var rope(const Var& x, std::size_t n_heads, std::size_t head_dim, std::size_t seq_len) {
  const Tensor& xv = x.value();
  if (xv.cols() != n_heads * head_dim || head_dim % 2 != 0) throw DimensionError("rope: bad head layout");
  Tensor out = xv;
  out.set_requires_grad(false);
  const std::size_t rows = out.rows();
  kernels::rope(out.data(), rows, n_heads, head_dim, seq_len, 0, false);
  const std::size_t xi = x.id();
  return x.tape()->record(std::move(out), {xi}, [xi, rows, n_heads, head_dim, seq_len](Tape& t, std::size_t self) {
    Tensor g = t.grad(self);
    kernels::rope(g.data(), rows, n_heads, head_dim, seq_len, 0, true);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t seq_len, std::size_t n_heads,
                     std::size_t kv_groups, std::size_t head_dim) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (kv_groups == 0 || n_heads % kv_groups != 0) throw DimensionError("attention: heads not divisible by groups");
  if (qv.cols() != n_heads * head_dim || kv.cols() != kv_groups * head_dim || vv.cols() != kv.cols() ||
      qv.rows() != kv.rows() || kv.rows() != vv.rows() || qv.rows() % seq_len != 0) {
    throw DimensionError("attention: inconsistent q/k/v shapes");
  }
  const std::size_t rows = qv.rows();
  const std::size_t batch = rows / seq_len;
  const std::size_t qw = n_heads * head_dim, kw = kv_groups * head_dim;
  const std::size_t per_group = n_heads / kv_groups;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // probs[b][h][i][j], j <= i
  auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq_len * seq_len, 0.0);
  Tensor out({rows, qw}, 0.0);
  std::vector<double> scores(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t kvh = h / per_group;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = qv.data().data() + (b * seq_len + i) * qw + h * head_dim;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data().data() + (b * seq_len + j) * kw + kvh * head_dim;
          double s = 0.0;
          for (std::size_t c = 0; c < head_dim; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
        }
        kernels::softmax_row(std::span<double>(scores.data(), i + 1));
        double* p = probs->data() + ((b * n_heads + h) * seq_len + i) * seq_len;
        double* oi = out.data().data() + (b * seq_len + i) * qw + h * head_dim;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = scores[j];
          const double* vj = vv.data().data() + (b * seq_len + j) * kw + kvh * head_dim;
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += scores[j] * vj[c];
        }
      }
    }
  }

  const std::size_t qi_id = q.id(), ki_id = k.id(), vi_id = v.id();
  return q.tape()->record(
      std::move(out), {qi_id, ki_id, vi_id},
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(qi_id);
        const Tensor& kv = t.value(ki_id);
        const Tensor& vv = t.value(vi_id);
        Tensor gq(qv.shape(), 0.0), gk(kv.shape(), 0.0), gvv(vv.shape(), 0.0);
        std::vector<double> dp(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t kvh = h / per_group;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* p = probs->data() + ((b * n_heads + h) * seq_len + i) * seq_len;
              const double* gi = g.data().data() + (b * seq_len + i) * qw + h * head_dim;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t vo = (b * seq_len + j) * kw + kvh * head_dim;
                double s = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) {
                  s += gi[c] * vv[vo + c];
                  gvv[vo + c] += p[j] * gi[c];
                }
                dp[j] = s;
                dot += p[j] * s;
              }
              const std::size_t qo = (b * seq_len + i) * qw + h * head_dim;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const std::size_t ko = (b * seq_len + j) * kw + kvh * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) {
                  gq[qo + c] += ds * kv[ko + c];
                  gk[ko + c] += ds * qv[qo + c];
                }
              }
            }
          }
        }
        auto acc = [&t](std::size_t id, const Tensor& src) {
          if (!t.wants_grad(id)) return;
          Tensor& dst = t.grad(id);
          for (std::size_t i = 0; i < src.numel(); ++i) dst[i] += src[i];
        };
        acc(qi_id, gq);
        acc(ki_id, gk);
        acc(vi_id, gvv);
      });
}

Var scale_column_groups(const Var& x, const Var& gate, std::size_t group_width) {
  require_same_tape(x, gate);
  const Tensor& xv = x.value();
  const Tensor& gv = gate.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (group_width == 0 || gv.numel() * group_width != cols) {
    throw DimensionError("scale_column_groups: gate of " + std::to_string(gv.numel()) + " groups cannot cover " +
                         std::to_string(cols) + " columns");
  }
  Tensor out(xv.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * gv[c / group_width];
  }
  const std::size_t xi = x.id(), gi = gate.id();
  return x.tape()->record(std::move(out), {xi, gi}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& gv = t.value(gi);
    if (t.wants_grad(xi)) {
      Tensor& gx = t.grad(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * gv[c / group_width];
    }
    if (t.wants_grad(gi)) {
      Tensor& gg = t.grad(gi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gg[c / group_width] += g[r * cols + c] * xv[r * cols + c];
    }
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows) throw DimensionError("cross entropy: one target per logits row required");
  std::vector<int> tg(targets.begin(), targets.end());
  for (int t : tg) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("target id " + std::to_string(t) + " out of range for " + std::to_string(vocab) +
                       " classes");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(lv.values());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = std::span<const double>(lv.data().data() + r * vocab, vocab);
    loss += kernels::log_sum_exp(row) - row[tg[r]];
    kernels::softmax_row(std::span<double>(probs->data() + r * vocab, vocab));
  }
  loss /= static_cast<double>(rows);
  const std::size_t li = logits.id();
  return logits.tape()->record(Tensor::scalar(loss), {li}, [=, tg = std::move(tg)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(rows);
    Tensor& gl = t.grad(li);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < vocab; ++c) gl[r * vocab + c] += g * (*probs)[r * vocab + c];
      gl[r * vocab + tg[r]] -= g;
    }
  });
}

}  // namespace ad

FiniteDiffResult finite_diff_check(const ScalarFn& f, const Tensor& point, double h, double eps) {
  auto eval = [&](const Tensor& x) {
    Tape tape;
    Var xv = tape.leaf(x, false);
    const double v = f(tape, xv).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
    return v;
  };

  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(point, true);
    Var y = f(tape, xv);
    if (!std::isfinite(y.value().item())) throw NumericError("finite_diff_check: non-finite function value");
    analytic = tape.backward(y).of(xv);
  }

  FiniteDiffResult res;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double central = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - central) / (std::abs(central) + eps);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace tlm
