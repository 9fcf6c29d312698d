#include "tlm/surgery/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tlm/core/error.hpp"
#include "tlm/core/kernels.hpp"
#include "tlm/train/trainer.hpp"

namespace tlm {

using param_names::layer;

namespace {

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

bool strictly_increasing_below(const std::vector<std::size_t>& v, std::size_t bound) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] >= bound) return false;
    if (i && v[i] <= v[i - 1]) return false;
  }
  return true;
}

enum class UnitKind { Head, Ffn, Width };

// Calls visit(tensor name, flat index) for every weight belonging to one structural unit.
template <class Visit>
void for_unit(const ModelConfig& c, UnitKind kind, std::size_t li, std::size_t unit, Visit&& visit) {
  const std::size_t d = c.width, hd = c.head_dim;
  auto column = [&](const std::string& name, std::size_t rows, std::size_t cols, std::size_t col) {
    for (std::size_t r = 0; r < rows; ++r) visit(name, r * cols + col);
  };
  auto row = [&](const std::string& name, std::size_t cols, std::size_t r) {
    for (std::size_t k = 0; k < cols; ++k) visit(name, r * cols + k);
  };
  switch (kind) {
    case UnitKind::Head: {
      for (std::size_t j = unit * hd; j < (unit + 1) * hd; ++j) {
        column(layer(li, "wq"), d, c.q_width(), j);
        if (c.is_mha()) {
          column(layer(li, "wk"), d, c.kv_width(), j);
          column(layer(li, "wv"), d, c.kv_width(), j);
        }
        row(layer(li, "wo"), d, j);
      }
      break;
    }
    case UnitKind::Ffn:
      column(layer(li, "w_gate"), d, c.ffn_hidden, unit);
      column(layer(li, "w_up"), d, c.ffn_hidden, unit);
      row(layer(li, "w_down"), d, unit);
      break;
    case UnitKind::Width:
      column(param_names::kEmbed, c.vocab_size, d, unit);
      for (std::size_t i = 0; i < c.depth; ++i) {
        visit(layer(i, "attn_norm"), unit);
        visit(layer(i, "ffn_norm"), unit);
        row(layer(i, "wq"), c.q_width(), unit);
        row(layer(i, "wk"), c.kv_width(), unit);
        row(layer(i, "wv"), c.kv_width(), unit);
        column(layer(i, "wo"), c.q_width(), d, unit);
        row(layer(i, "w_gate"), c.ffn_hidden, unit);
        row(layer(i, "w_up"), c.ffn_hidden, unit);
        column(layer(i, "w_down"), c.ffn_hidden, d, unit);
      }
      visit(param_names::kFinalNorm, unit);
      row(param_names::kHead, c.vocab_size, unit);
      break;
  }
}

NeuronScores empty_scores(const ModelConfig& c, Criterion crit) {
  NeuronScores s;
  s.criterion = crit;
  s.heads.assign(c.depth, std::vector<double>(c.n_heads, 0.0));
  s.ffn.assign(c.depth, std::vector<double>(c.ffn_hidden, 0.0));
  s.width.assign(c.width, 0.0);
  return s;
}

// Applies f(kind, layer, unit) -> score to every unit.
template <class F>
NeuronScores score_all(const ModelConfig& c, Criterion crit, F&& f) {
  auto s = empty_scores(c, crit);
  for (std::size_t i = 0; i < c.depth; ++i) {
    for (std::size_t h = 0; h < c.n_heads; ++h) s.heads[i][h] = f(UnitKind::Head, i, h);
    for (std::size_t k = 0; k < c.ffn_hidden; ++k) s.ffn[i][k] = f(UnitKind::Ffn, i, k);
  }
  for (std::size_t k = 0; k < c.width; ++k) s.width[k] = f(UnitKind::Width, 0, k);
  return s;
}

Var gate_leaf(Tape& tape, const std::vector<double>& values, bool requires_grad) {
  return tape.leaf(Tensor({values.size()}, values), requires_grad);
}

// Gathers rows and columns of a matrix.
Tensor take(const Tensor& t, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  Tensor out({rows.size(), cols.size()});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < cols.size(); ++k) out.at(r, k) = t.at(rows[r], cols[k]);
  return out;
}

Tensor take_vec(const Tensor& t, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = t[idx[i]];
  return out;
}

std::vector<std::size_t> head_columns(const std::vector<std::size_t>& heads, std::size_t head_dim) {
  std::vector<std::size_t> cols;
  for (auto h : heads)
    for (std::size_t j = 0; j < head_dim; ++j) cols.push_back(h * head_dim + j);
  return cols;
}

}  // namespace

// ---- layer skipping ----

std::vector<double> LayerImportance::single_layer(std::size_t depth) const {
  std::vector<double> out(depth, 0.0);
  std::vector<bool> seen(depth, false);
  for (const auto& e : entries) {
    if (e.window != 1 || e.start >= depth) continue;
    out[e.start] = e.importance;
    seen[e.start] = true;
  }
  for (std::size_t i = 0; i < depth; ++i)
    if (!seen[i]) throw PlanError("no single-layer importance for layer " + std::to_string(i));
  return out;
}

LayerImportance layer_skip_scan(std::size_t depth, const SkipMetric& metric, const std::string& metric_name,
                                const std::vector<std::size_t>& windows) {
  LayerImportance imp;
  imp.metric = metric_name;
  imp.baseline = metric({});
  for (auto w : windows) {
    if (w == 0) throw InvalidArgument("skip window must be positive");
    if (w > depth) continue;
    for (std::size_t start = 0; start + w <= depth; ++start) {
      std::set<std::size_t> skip;
      for (std::size_t i = start; i < start + w; ++i) skip.insert(i);
      const double score = metric(skip);
      imp.entries.push_back({w, start, score, imp.baseline - score});
    }
  }
  return imp;
}

LayerImportance layer_skip_eval(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                                const std::vector<std::size_t>& windows) {
  if (batches.empty()) throw InvalidArgument("layer_skip_eval needs evaluation batches");
  auto metric = [&](const std::set<std::size_t>& skip) {
    double s = 0.0;
    for (const auto& b : batches) s += batch_loss(config, params, b, skip);
    return -s / static_cast<double>(batches.size());
  };
  return layer_skip_scan(config.depth, metric, "neg_loss", windows);
}

std::vector<std::size_t> select_layers(std::span<const double> importance, std::size_t child_depth, std::size_t front,
                                       std::size_t back) {
  const std::size_t L = importance.size();
  if (child_depth == 0 || child_depth > L) {
    throw PlanError("child depth " + std::to_string(child_depth) + " must lie in [1, " + std::to_string(L) + "]");
  }
  if (front + back > child_depth) throw PlanError("front + back kept layers exceed the child depth");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < front; ++i) kept.push_back(i);
  for (std::size_t i = L - back; i < L; ++i) kept.push_back(i);
  std::vector<double> middle(importance.begin() + static_cast<std::ptrdiff_t>(front),
                             importance.end() - static_cast<std::ptrdiff_t>(back));
  for (auto m : top_units(middle, child_depth - front - back)) kept.push_back(m + front);
  std::sort(kept.begin(), kept.end());
  return kept;
}

std::vector<std::size_t> select_layers(const LayerImportance& importance, std::size_t parent_depth,
                                       std::size_t child_depth, std::size_t front, std::size_t back) {
  const auto single = importance.single_layer(parent_depth);
  return select_layers(single, child_depth, front, back);
}

// ---- masks and scoring ----

UnitMask UnitMask::ones(const ModelConfig& c) {
  UnitMask m;
  m.heads.assign(c.depth, std::vector<double>(c.n_heads, 1.0));
  m.ffn.assign(c.depth, std::vector<double>(c.ffn_hidden, 1.0));
  m.width.assign(c.width, 1.0);
  return m;
}

double masked_loss(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                   const UnitMask& mask) {
  if (batches.empty()) throw InvalidArgument("masked_loss needs batches");
  double total = 0.0;
  for (const auto& b : batches) {
    Tape tape;
    auto bound = bind(tape, params, false);
    UnitGates gates;
    for (const auto& h : mask.heads) gates.heads.push_back(h.empty() ? Var{} : gate_leaf(tape, h, false));
    for (const auto& f : mask.ffn) gates.ffn.push_back(f.empty() ? Var{} : gate_leaf(tape, f, false));
    if (!mask.width.empty()) gates.width = gate_leaf(tape, mask.width, false);
    ForwardOptions opts;
    opts.gates = &gates;
    const auto inputs = b.inputs();
    const auto targets = b.targets();
    total += ad::softmax_cross_entropy(forward_on_tape(config, bound, inputs, b.seq_len, opts), targets).value().item();
  }
  return total / static_cast<double>(batches.size());
}

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::L1: return "l1";
    case Criterion::L2: return "l2";
    case Criterion::Taylor: return "taylor";
    case Criterion::Learned: return "learned";
  }
  return "?";
}

Criterion parse_criterion(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  for (auto c : {Criterion::L1, Criterion::L2, Criterion::Taylor, Criterion::Learned})
    if (to_string(c) == s) return c;
  throw InvalidArgument("unknown criterion '" + name + "' (expected l1, l2, taylor, learned)");
}

UnitTargets UnitTargets::uniform(const ModelConfig& parent, std::size_t heads, std::size_t ffn, std::size_t width) {
  UnitTargets t;
  t.heads.assign(parent.depth, heads);
  t.ffn.assign(parent.depth, ffn);
  t.width = width;
  return t;
}

void UnitTargets::validate(const ModelConfig& parent) const {
  if (heads.size() != parent.depth || ffn.size() != parent.depth) {
    throw InvalidArgument("unit targets need one head and one FFN count per layer");
  }
  for (std::size_t i = 0; i < parent.depth; ++i) {
    if (heads[i] == 0 || heads[i] > parent.n_heads)
      throw InvalidArgument("head target for layer " + std::to_string(i) + " must lie in [1, n_heads]");
    if (ffn[i] == 0 || ffn[i] > parent.ffn_hidden)
      throw InvalidArgument("FFN target for layer " + std::to_string(i) + " must lie in [1, ffn_hidden]");
  }
  if (width > parent.width) throw InvalidArgument("width target exceeds the parent width");
}

NeuronScores MaskParams::gate_values() const {
  NeuronScores s;
  s.criterion = Criterion::Learned;
  auto gate = [&](const std::vector<double>& logits) {
    std::vector<double> g(logits.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = kernels::sigmoid(logits[i] / temperature);
    return g;
  };
  for (const auto& h : heads) s.heads.push_back(gate(h));
  for (const auto& f : ffn) s.ffn.push_back(gate(f));
  s.width = gate(width);
  return s;
}

MaskParams learn_masks(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                       const UnitTargets& targets, const MaskSchedule& sched) {
  targets.validate(config);
  if (batches.empty()) throw InvalidArgument("learn_masks needs batches");
  if (sched.steps == 0) throw InvalidArgument("learn_masks needs at least one step");
  if (!(sched.temperature_start > 0) || !(sched.temperature_end > 0)) {
    throw InvalidArgument("mask temperatures must be positive");
  }
  const bool learn_width = targets.width > 0;

  ParamStore logits;
  for (std::size_t i = 0; i < config.depth; ++i) {
    logits.set("heads." + std::to_string(i), Tensor({config.n_heads}, sched.init_logit));
    logits.set("ffn." + std::to_string(i), Tensor({config.ffn_hidden}, sched.init_logit));
  }
  if (learn_width) logits.set("width", Tensor({config.width}, sched.init_logit));

  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  double tau = sched.temperature_start;
  for (std::size_t step = 0; step < sched.steps; ++step) {
    const double t = sched.steps > 1 ? static_cast<double>(step) / static_cast<double>(sched.steps - 1) : 0.0;
    tau = sched.temperature_start + (sched.temperature_end - sched.temperature_start) * t;
    const Batch& b = batches[step % batches.size()];

    Tape tape;
    auto bound = bind(tape, params, false);
    std::map<std::string, Var> leaves;
    for (const auto& [name, value] : logits) leaves.emplace(name, tape.leaf(value, true));
    auto gate_of = [&](const std::string& name) { return ad::sigmoid(ad::scale(leaves.at(name), 1.0 / tau)); };

    UnitGates gates;
    Var penalty;
    auto add_penalty = [&](const Var& g, std::size_t target) {
      Var term = ad::square(ad::add_scalar(ad::sum(g), -static_cast<double>(target)));
      penalty = penalty.valid() ? ad::add(penalty, term) : term;
    };
    for (std::size_t i = 0; i < config.depth; ++i) {
      gates.heads.push_back(gate_of("heads." + std::to_string(i)));
      gates.ffn.push_back(gate_of("ffn." + std::to_string(i)));
      add_penalty(gates.heads.back(), targets.heads[i]);
      add_penalty(gates.ffn.back(), targets.ffn[i]);
    }
    if (learn_width) {
      gates.width = gate_of("width");
      add_penalty(gates.width, targets.width);
    }
    ForwardOptions opts;
    opts.gates = &gates;
    const auto inputs = b.inputs();
    const auto tgt = b.targets();
    Var task = ad::softmax_cross_entropy(forward_on_tape(config, bound, inputs, b.seq_len, opts), tgt);
    Var loss = ad::add(task, ad::scale(penalty, sched.penalty));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("mask learning diverged at step " + std::to_string(step));
    auto grads = tape.backward(loss);
    std::map<std::string, Tensor> g;
    for (const auto& [name, v] : leaves) g.emplace(name, grads.of(v));
    opt.step(logits, g, sched.lr);
  }

  MaskParams out;
  out.temperature = tau;
  out.targets = targets;
  for (std::size_t i = 0; i < config.depth; ++i) {
    out.heads.push_back(logits.get("heads." + std::to_string(i)).values());
    out.ffn.push_back(logits.get("ffn." + std::to_string(i)).values());
  }
  if (learn_width) out.width = logits.get("width").values();
  return out;
}

std::vector<std::size_t> top_units(std::span<const double> scores, std::size_t count) {
  if (count > scores.size()) throw InvalidArgument("cannot keep more units than exist");
  auto idx = iota_n(scores.size());
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

KeptUnits harden(const MaskParams& m) {
  KeptUnits k;
  for (std::size_t i = 0; i < m.heads.size(); ++i) k.heads.push_back(top_units(m.heads[i], m.targets.heads.at(i)));
  for (std::size_t i = 0; i < m.ffn.size(); ++i) k.ffn.push_back(top_units(m.ffn[i], m.targets.ffn.at(i)));
  if (!m.width.empty()) k.width = top_units(m.width, m.targets.width);
  return k;
}

KeptUnits harden(const NeuronScores& s, const UnitTargets& t) {
  KeptUnits k;
  for (std::size_t i = 0; i < s.heads.size(); ++i) k.heads.push_back(top_units(s.heads[i], t.heads.at(i)));
  for (std::size_t i = 0; i < s.ffn.size(); ++i) k.ffn.push_back(top_units(s.ffn[i], t.ffn.at(i)));
  if (t.width > 0) k.width = top_units(s.width, t.width);
  return k;
}

NeuronScores score_neurons(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                           Criterion criterion, const UnitTargets& targets, const MaskSchedule& schedule) {
  params.validate(config);
  switch (criterion) {
    case Criterion::L1:
      return score_all(config, criterion, [&](UnitKind kind, std::size_t li, std::size_t u) {
        double s = 0.0;
        for_unit(config, kind, li, u, [&](const std::string& n, std::size_t i) { s += std::abs(params.get(n)[i]); });
        return s;
      });
    case Criterion::L2:
      return score_all(config, criterion, [&](UnitKind kind, std::size_t li, std::size_t u) {
        double s = 0.0;
        for_unit(config, kind, li, u, [&](const std::string& n, std::size_t i) {
          const double w = params.get(n)[i];
          s += w * w;
        });
        return std::sqrt(s);
      });
    case Criterion::Taylor: {
      if (batches.empty()) throw InvalidArgument("Taylor scoring needs data batches");
      auto total = empty_scores(config, criterion);
      for (const auto& b : batches) {
        const auto lg = loss_and_grads(config, params, b);
        const auto part = score_all(config, criterion, [&](UnitKind kind, std::size_t li, std::size_t u) {
          double s = 0.0;
          for_unit(config, kind, li, u, [&](const std::string& n, std::size_t i) {
            s += std::abs(params.get(n)[i] * lg.grads.at(n)[i]);
          });
          return s;
        });
        for (std::size_t i = 0; i < config.depth; ++i) {
          for (std::size_t h = 0; h < config.n_heads; ++h) total.heads[i][h] += part.heads[i][h];
          for (std::size_t k = 0; k < config.ffn_hidden; ++k) total.ffn[i][k] += part.ffn[i][k];
        }
        for (std::size_t k = 0; k < config.width; ++k) total.width[k] += part.width[k];
      }
      return total;
    }
    case Criterion::Learned: {
      UnitTargets t = targets;
      if (t.heads.empty() && t.ffn.empty()) {
        t = UnitTargets::uniform(config, std::max<std::size_t>(1, config.n_heads / 2),
                                 std::max<std::size_t>(1, config.ffn_hidden / 2));
      }
      auto s = learn_masks(config, params, batches, t, schedule).gate_values();
      if (s.width.empty()) s.width.assign(config.width, 1.0);
      return s;
    }
  }
  throw InvalidArgument("unknown criterion");
}

// ---- plans and child construction ----

InheritancePlan InheritancePlan::identity(const ModelConfig& c) {
  InheritancePlan p;
  p.kept_layers = iota_n(c.depth);
  p.heads.assign(c.depth, iota_n(c.n_heads));
  p.ffn.assign(c.depth, iota_n(c.ffn_hidden));
  p.width = iota_n(c.width);
  p.vocab = iota_n(c.vocab_size);
  return p;
}

void InheritancePlan::validate(const ModelConfig& parent, const ModelConfig& child) const {
  parent.validate();
  child.validate();
  if (child.head_dim != parent.head_dim) throw PlanError("child head_dim must equal the parent's");
  if (kept_layers.size() != child.depth) throw PlanError("kept_layers must list child depth layers");
  if (!strictly_increasing_below(kept_layers, parent.depth))
    throw PlanError("kept_layers must be strictly increasing parent layer indices");
  if (heads.size() != child.depth || ffn.size() != child.depth)
    throw PlanError("plan needs head and FFN selections for every kept layer");
  for (std::size_t i = 0; i < child.depth; ++i) {
    if (heads[i].size() != child.n_heads || !strictly_increasing_below(heads[i], parent.n_heads))
      throw PlanError("head selection of kept layer " + std::to_string(i) + " does not match the child");
    if (ffn[i].size() != child.ffn_hidden || !strictly_increasing_below(ffn[i], parent.ffn_hidden))
      throw PlanError("FFN selection of kept layer " + std::to_string(i) + " does not match the child");
    const bool all_heads = heads[i] == iota_n(parent.n_heads);
    const bool mha_slice = parent.is_mha() && child.is_mha();
    const bool kv_copy = all_heads && child.kv_groups == parent.kv_groups;
    if (!mha_slice && !kv_copy)
      throw PlanError("key/value heads of kept layer " + std::to_string(i) +
                      " cannot be sliced: prune heads on an MHA parent, then convert to GQA");
  }
  if (width.size() != child.width || !strictly_increasing_below(width, parent.width))
    throw PlanError("width selection does not match the child width");
  if (vocab.size() != child.vocab_size) throw PlanError("vocab map must have one entry per child token");
  for (auto v : vocab)
    if (v >= parent.vocab_size) throw PlanError("vocab map entry " + std::to_string(v) + " outside the parent vocab");
}

void to_json(nlohmann::json& j, const InheritancePlan& p) {
  j = nlohmann::json{{"kept_layers", p.kept_layers}, {"heads", p.heads}, {"ffn", p.ffn},
                     {"width", p.width},             {"vocab", p.vocab}};
}

void from_json(const nlohmann::json& j, InheritancePlan& p) {
  j.at("kept_layers").get_to(p.kept_layers);
  j.at("heads").get_to(p.heads);
  j.at("ffn").get_to(p.ffn);
  j.at("width").get_to(p.width);
  j.at("vocab").get_to(p.vocab);
}

void save_plan(const std::filesystem::path& path, const InheritancePlan& plan) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << nlohmann::json(plan).dump(1) << '\n';
}

InheritancePlan load_plan(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is).get<InheritancePlan>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad inheritance plan " + path.string() + ": " + e.what());
  }
}

InheritancePlan make_plan(const ModelConfig& parent, const ModelConfig& child, const std::vector<std::size_t>& kept_layers,
                          const NeuronScores& scores, std::vector<std::size_t> vocab) {
  auto pick = [](const std::vector<std::vector<double>>& s, std::size_t layer_idx, std::size_t count,
                 std::size_t available, const char* what) {
    if (layer_idx < s.size() && !s[layer_idx].empty()) return top_units(s[layer_idx], count);
    if (count != available) throw PlanError(std::string("no ") + what + " scores to choose units from");
    return iota_n(available);
  };
  InheritancePlan plan;
  plan.kept_layers = kept_layers;
  for (auto li : kept_layers) {
    plan.heads.push_back(pick(scores.heads, li, child.n_heads, parent.n_heads, "head"));
    plan.ffn.push_back(pick(scores.ffn, li, child.ffn_hidden, parent.ffn_hidden, "FFN"));
  }
  if (!scores.width.empty()) {
    plan.width = top_units(scores.width, child.width);
  } else if (child.width == parent.width) {
    plan.width = iota_n(parent.width);
  } else {
    throw PlanError("no width scores to choose channels from");
  }
  if (vocab.empty()) {
    if (child.vocab_size != parent.vocab_size) throw PlanError("a smaller child vocab needs a vocab id map");
    vocab = iota_n(parent.vocab_size);
  }
  plan.vocab = std::move(vocab);
  plan.validate(parent, child);
  return plan;
}

ParamStore build_child(const ModelConfig& parent, const ParamStore& pp, const InheritancePlan& plan,
                       const ModelConfig& child) {
  plan.validate(parent, child);
  pp.validate(parent);
  const auto& W = plan.width;
  ParamStore out;
  out.set(param_names::kEmbed, take(pp.get(param_names::kEmbed), plan.vocab, W));
  out.set(param_names::kHead, take(pp.get(param_names::kHead), W, plan.vocab));
  out.set(param_names::kFinalNorm, take_vec(pp.get(param_names::kFinalNorm), W));
  for (std::size_t ci = 0; ci < child.depth; ++ci) {
    const std::size_t pi = plan.kept_layers[ci];
    const auto qcols = head_columns(plan.heads[ci], parent.head_dim);
    const auto kvcols = parent.is_mha() && child.is_mha() ? qcols : iota_n(parent.kv_width());
    out.set(layer(ci, "attn_norm"), take_vec(pp.get(layer(pi, "attn_norm")), W));
    out.set(layer(ci, "ffn_norm"), take_vec(pp.get(layer(pi, "ffn_norm")), W));
    out.set(layer(ci, "wq"), take(pp.get(layer(pi, "wq")), W, qcols));
    out.set(layer(ci, "wk"), take(pp.get(layer(pi, "wk")), W, kvcols));
    out.set(layer(ci, "wv"), take(pp.get(layer(pi, "wv")), W, kvcols));
    out.set(layer(ci, "wo"), take(pp.get(layer(pi, "wo")), qcols, W));
    out.set(layer(ci, "w_gate"), take(pp.get(layer(pi, "w_gate")), W, plan.ffn[ci]));
    out.set(layer(ci, "w_up"), take(pp.get(layer(pi, "w_up")), W, plan.ffn[ci]));
    out.set(layer(ci, "w_down"), take(pp.get(layer(pi, "w_down")), plan.ffn[ci], W));
  }
  out.validate(child);
  return out;
}

std::pair<ModelConfig, ParamStore> convert_to_gqa(const ModelConfig& config, const ParamStore& params,
                                                  std::size_t groups) {
  config.validate();
  if (groups == 0 || config.n_heads % groups != 0 || config.kv_groups % groups != 0) {
    throw InvalidArgument("cannot pool " + std::to_string(config.kv_groups) + " key/value heads into " +
                          std::to_string(groups) + " groups of " + std::to_string(config.n_heads) + " heads");
  }
  params.validate(config);
  ModelConfig out_cfg = config;
  out_cfg.kv_groups = groups;
  ParamStore out = params;
  if (groups == config.kv_groups) return {out_cfg, out};

  const std::size_t hd = config.head_dim, d = config.width, per = config.kv_groups / groups;
  for (std::size_t i = 0; i < config.depth; ++i) {
    for (const char* leaf : {"wk", "wv"}) {
      const Tensor& src = params.get(layer(i, leaf));
      Tensor dst({d, groups * hd});
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t r = 0; r < d; ++r) {
          for (std::size_t j = 0; j < hd; ++j) {
            // running mean: exact when all members are equal
            double m = src.at(r, (g * per) * hd + j);
            for (std::size_t k = 1; k < per; ++k) m += (src.at(r, (g * per + k) * hd + j) - m) / static_cast<double>(k + 1);
            dst.at(r, g * hd + j) = m;
          }
        }
      }
      out.set(layer(i, leaf), std::move(dst));
    }
  }
  out.validate(out_cfg);
  return {out_cfg, out};
}

// ---- exports ----

void write_importance_csv(const std::filesystem::path& path, const LayerImportance& imp) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "window,start,baseline,score,importance\n";
  for (const auto& e : imp.entries)
    os << e.window << ',' << e.start << ',' << imp.baseline << ',' << e.score << ',' << e.importance << '\n';
}

void write_scores_csv(const std::filesystem::path& path, const NeuronScores& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "criterion,kind,layer,unit,score\n";
  const auto crit = to_string(s.criterion);
  for (std::size_t i = 0; i < s.heads.size(); ++i)
    for (std::size_t u = 0; u < s.heads[i].size(); ++u) os << crit << ",head," << i << ',' << u << ',' << s.heads[i][u] << '\n';
  for (std::size_t i = 0; i < s.ffn.size(); ++i)
    for (std::size_t u = 0; u < s.ffn[i].size(); ++u) os << crit << ",ffn," << i << ',' << u << ',' << s.ffn[i][u] << '\n';
  for (std::size_t u = 0; u < s.width.size(); ++u) os << crit << ",width,," << u << ',' << s.width[u] << '\n';
}

}  // namespace tlm
