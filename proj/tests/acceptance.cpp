// Acceptance suite. Prints one PASS/FAIL line per criterion; exits nonzero if any fails.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tlm/core/autodiff.hpp"
#include "tlm/core/kernels.hpp"
#include "tlm/init/initializer.hpp"
#include "tlm/model/search.hpp"
#include "tlm/pipeline/pipeline.hpp"
#include "tlm/surgery/surgery.hpp"
#include "tlm/testing/corpus.hpp"
#include "tlm/testing/planted.hpp"
#include "tlm/testing/random.hpp"
#include "tlm/tokenizer/bpe.hpp"
#include "tlm/train/trainer.hpp"

using namespace tlm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig make_config(std::size_t V, std::size_t d, std::size_t L, std::size_t h, std::size_t g, std::size_t f) {
  ModelConfig c;
  c.vocab_size = V;
  c.width = d;
  c.depth = L;
  c.n_heads = h;
  c.head_dim = d / h;
  c.kv_groups = g;
  c.ffn_hidden = f;
  c.validate();
  return c;
}

std::vector<int> random_ids(std::size_t n, std::size_t V, std::mt19937_64& rng) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(rng() % V);
  return v;
}

// ---------------------------------------------------------------- 1

// A random op instance: the point to perturb and a scalar function of it.
struct GradCase {
  Tensor point;
  ScalarFn f;
};

// Contracts a tensor-valued result with fixed random weights so every output element matters.
Var contract(Tape& tape, const Var& y, std::mt19937_64& rng) {
  const Tensor& v = y.value();
  if (v.numel() == 1) return ad::sum(y);
  Var w = tape.constant(testing::uniform_tensor(v.shape(), rng, -1.0, 1.0));
  return ad::sum(ad::mul(y, w));
}

using CaseMaker = std::function<GradCase(std::mt19937_64&, int)>;

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

// Wraps an op of several inputs; `which` selects the perturbed one, the rest are constants.
GradCase nary(std::vector<Tensor> inputs, std::size_t which,
              std::function<Var(Tape&, const std::vector<Var>&)> op, std::uint64_t weight_seed) {
  auto shared = std::make_shared<std::vector<Tensor>>(std::move(inputs));
  Tensor point = (*shared)[which];
  ScalarFn f = [shared, which, op, weight_seed](Tape& tape, const Var& x) {
    std::vector<Var> vars;
    for (std::size_t i = 0; i < shared->size(); ++i) vars.push_back(i == which ? x : tape.constant((*shared)[i]));
    std::mt19937_64 wrng(weight_seed);
    return contract(tape, op(tape, vars), wrng);
  };
  return {point, f};
}

std::map<std::string, CaseMaker> op_cases() {
  using V = std::vector<Var>;
  auto U = [](Shape s, std::mt19937_64& rng) { return testing::uniform_tensor(std::move(s), rng, -1.5, 1.5); };
  std::map<std::string, CaseMaker> m;
  m["matmul"] = [=](std::mt19937_64& r, int i) {
    const auto a = dim(r, 1, 5), b = dim(r, 1, 5), c = dim(r, 1, 5);
    return nary({U({a, b}, r), U({b, c}, r)}, i % 2, [](Tape&, const V& v) { return ad::matmul(v[0], v[1]); }, r());
  };
  m["add"] = [=](std::mt19937_64& r, int i) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 5)};
    return nary({U(s, r), U(s, r)}, i % 2, [](Tape&, const V& v) { return ad::add(v[0], v[1]); }, r());
  };
  m["sub"] = [=](std::mt19937_64& r, int i) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 5)};
    return nary({U(s, r), U(s, r)}, i % 2, [](Tape&, const V& v) { return ad::sub(v[0], v[1]); }, r());
  };
  m["mul"] = [=](std::mt19937_64& r, int i) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 5)};
    return nary({U(s, r), U(s, r)}, i % 2, [](Tape&, const V& v) { return ad::mul(v[0], v[1]); }, r());
  };
  m["scale"] = [=](std::mt19937_64& r, int) {
    const double c = std::uniform_real_distribution<double>(-3, 3)(r);
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [c](Tape&, const V& v) { return ad::scale(v[0], c); }, r());
  };
  m["add_scalar"] = [=](std::mt19937_64& r, int) {
    const double c = std::uniform_real_distribution<double>(-3, 3)(r);
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [c](Tape&, const V& v) { return ad::add_scalar(v[0], c); },
                r());
  };
  // sum and mean are linear; square the input first so the gradient depends on the point
  m["sum"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [](Tape&, const V& v) { return ad::sum(ad::square(v[0])); },
                r());
  };
  m["mean"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [](Tape&, const V& v) { return ad::mean(ad::square(v[0])); },
                r());
  };
  m["square"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [](Tape&, const V& v) { return ad::square(v[0]); }, r());
  };
  m["silu"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [](Tape&, const V& v) { return ad::silu(v[0]); }, r());
  };
  m["sigmoid"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 1, 5)}, r)}, 0, [](Tape&, const V& v) { return ad::sigmoid(v[0]); }, r());
  };
  m["softmax_rows"] = [=](std::mt19937_64& r, int) {
    return nary({U({dim(r, 1, 4), dim(r, 2, 6)}, r)}, 0, [](Tape&, const V& v) { return ad::softmax_rows(v[0]); },
                r());
  };
  m["rms_norm"] = [=](std::mt19937_64& r, int i) {
    const auto n = dim(r, 1, 4), d = dim(r, 2, 6);
    return nary({U({n, d}, r), U({d}, r)}, i % 2,
                [](Tape&, const V& v) { return ad::rms_norm(v[0], v[1], kernels::kNormEps); }, r());
  };
  m["embedding"] = [=](std::mt19937_64& r, int) {
    const auto rows = dim(r, 2, 6), d = dim(r, 1, 4);
    auto ids = random_ids(dim(r, 1, 6), rows, r);
    return nary({U({rows, d}, r)}, 0, [ids](Tape&, const V& v) { return ad::embedding(v[0], ids); }, r());
  };
  m["rope"] = [=](std::mt19937_64& r, int) {
    const auto h = dim(r, 1, 2), hd = 2 * dim(r, 1, 2), T = dim(r, 1, 4), B = dim(r, 1, 2);
    return nary({U({B * T, h * hd}, r)}, 0, [=](Tape&, const V& v) { return ad::rope(v[0], h, hd, T); }, r());
  };
  m["causal_attention"] = [=](std::mt19937_64& r, int i) {
    const auto g = dim(r, 1, 2), h = g * dim(r, 1, 2), hd = dim(r, 1, 3), T = dim(r, 1, 4), B = dim(r, 1, 2);
    return nary({U({B * T, h * hd}, r), U({B * T, g * hd}, r), U({B * T, g * hd}, r)}, i % 3,
                [=](Tape&, const V& v) { return ad::causal_attention(v[0], v[1], v[2], T, h, g, hd); }, r());
  };
  m["scale_column_groups"] = [=](std::mt19937_64& r, int i) {
    const auto groups = dim(r, 1, 3), gw = dim(r, 1, 3), n = dim(r, 1, 4);
    return nary({U({n, groups * gw}, r), U({groups}, r)}, i % 2,
                [gw](Tape&, const V& v) { return ad::scale_column_groups(v[0], v[1], gw); }, r());
  };
  m["softmax_cross_entropy"] = [=](std::mt19937_64& r, int) {
    const auto n = dim(r, 1, 5), k = dim(r, 2, 7);
    auto t = random_ids(n, k, r);
    return nary({U({n, k}, r)}, 0, [t](Tape&, const V& v) { return ad::softmax_cross_entropy(v[0], t); }, r());
  };
  return m;
}

Outcome gradient_correctness() {
  constexpr int kCases = 100;
  constexpr double kOpTol = 1e-4, kModelTol = 1e-3;
  std::mt19937_64 rng(2024);
  double worst_op = 0.0;
  std::string worst_name;
  std::size_t ops = 0;
  for (const auto& [name, make] : op_cases()) {
    ++ops;
    for (int i = 0; i < kCases; ++i) {
      const auto gc = make(rng, i);
      const double e = finite_diff_check(gc.f, gc.point).max_rel_error;
      if (e > worst_op) {
        worst_op = e;
        worst_name = name;
      }
    }
  }

  // whole toy model, every parameter tensor
  const auto c = make_config(256, 8, 2, 2, 1, 12);
  const auto params = initialize(c, {InitVariant::Constant, 0.4, 6});
  Batch b{2, 4, random_ids(10, 256, rng)};
  const auto inputs = b.inputs();
  const auto targets = b.targets();
  double worst_model = 0.0;
  for (const auto& [name, value] : params) {
    ScalarFn f = [&, name = name](Tape& tape, const Var& x) {
      auto bound = bind(tape, params, false);
      bound.vars[name] = x;
      return ad::softmax_cross_entropy(forward_on_tape(c, bound, inputs, b.seq_len), targets);
    };
    worst_model = std::max(worst_model, finite_diff_check(f, value).max_rel_error);
  }
  return {worst_op <= kOpTol && worst_model <= kModelTol,
          fmt("%zu ops x %d cases, worst op rel err %.2e (%s) <= %.0e; model %.2e <= %.0e", ops, kCases, worst_op,
              worst_name.c_str(), kOpTol, worst_model, kModelTol)};
}

// ---------------------------------------------------------------- 2

bool nondecreasing_to_one(const CoverageCurve& c) {
  for (std::size_t i = 1; i < c.points.size(); ++i)
    if (c.points[i].second < c.points[i - 1].second) return false;
  return !c.points.empty() && std::abs(c.points.back().second - 1.0) <= 1e-12;
}

Outcome tokenizer_round_trip() {
  constexpr double kTheta = 0.95;
  const auto corpus = testing::zipf_corpus(20000, 500, 1.1, 11);
  const auto vocab = train_bpe(corpus, 700);
  const auto freq = count_frequencies(corpus, vocab);
  const auto compact = compact_vocab(vocab, freq, CompactionTarget::of_coverage(kTheta));

  std::mt19937_64 rng(5);
  std::size_t failures = 0;
  const std::string letters = "abcdefghijklmnopqrstuvwxyz  ";
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    const std::size_t n = rng() % 120;
    if (i % 2) {
      s = testing::random_bytes(n, rng);
    } else {
      for (std::size_t k = 0; k < n; ++k) s += letters[rng() % letters.size()];
    }
    for (const auto* v : {&vocab, &compact.vocab})
      if (v->decode(v->encode(s)) != s) ++failures;
  }

  const bool curves = nondecreasing_to_one(coverage_curve(freq)) &&
                      nondecreasing_to_one(coverage_curve(count_frequencies(corpus, compact.vocab)));

  // oracle: sort non-base tokens by count, take the shortest prefix reaching theta with the byte base
  std::vector<std::pair<std::size_t, int>> ranked;
  double base_mass = 0.0;
  for (std::size_t id = 0; id < freq.counts.size(); ++id) {
    if (Vocabulary::is_base(static_cast<int>(id))) {
      base_mass += static_cast<double>(freq.counts[id]);
    } else {
      ranked.push_back({freq.counts[id], static_cast<int>(id)});
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const double total = static_cast<double>(freq.total_tokens);
  double mass = base_mass;
  std::size_t needed = 0;
  while (mass / total < kTheta && needed < ranked.size()) mass += static_cast<double>(ranked[needed++].first);
  const std::set<int> kept(compact.new_to_old.begin(), compact.new_to_old.end());
  std::size_t missing = 0;
  for (std::size_t i = 0; i < needed; ++i) missing += kept.count(ranked[i].second) ? 0 : 1;
  const double retained = retained_coverage(freq, compact.new_to_old);

  return {failures == 0 && curves && missing == 0 && retained >= kTheta,
          fmt("round-trip failures %zu/2000, curves %s, vocab %zu -> %zu, oracle top-%zu missing %zu, coverage %.4f",
              failures, curves ? "ok" : "BAD", vocab.size(), compact.vocab.size(), needed, missing, retained)};
}

// ---------------------------------------------------------------- 3

Outcome parameter_accounting() {
  std::mt19937_64 rng(99);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c;
    c.head_dim = 2 * (1 + rng() % 8);
    c.kv_groups = 1 + rng() % 4;
    c.n_heads = c.kv_groups * (1 + rng() % 3);
    c.width = c.n_heads * c.head_dim;
    c.depth = 1 + rng() % 6;
    c.vocab_size = 256 + rng() % 1024;
    c.ffn_hidden = 1 + rng() % 200;
    c.validate();
    std::size_t enumerated = 0;
    for (const auto& [name, t] : ParamStore::zeros_like(c))
      for (std::size_t i = 0; i < t.numel(); ++i) ++enumerated;
    if (param_count(c).total_params != enumerated) ++mismatches;
  }

  ModelConfig ref;
  ref.vocab_size = 48000;
  ref.width = 1792;
  ref.depth = 20;
  ref.head_dim = 128;
  ref.n_heads = 14;
  ref.kv_groups = 14;
  ref.ffn_hidden = ffn_width_for(1792, 2.77);
  const auto r = param_count(ref);
  const double pehl = 100.0 * r.pehl;
  const bool near_1b = r.total_params > 900'000'000 && r.total_params < 1'100'000'000;
  return {mismatches == 0 && near_1b && std::abs(pehl - 18.07) <= 1.5,
          fmt("50 configs, %zu mismatches; reference %.3fB params, PEHL %.2f%% vs 18.07%% (+-1.5pp)", mismatches,
              r.total_params / 1e9, pehl)};
}

// ---------------------------------------------------------------- 4

Outcome scaling_rule() {
  const ScalingRule rule{1'000'000.0, 1e-4, 0.5};
  std::size_t bad = 0, checked = 0;
  for (double bs : {1e5, 2.5e5, 5e5, 1e6, 2e6, 3e6, 4e6, 8e6, 16e6}) {
    for (double r : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      ScalingRule k = rule;
      k.rate = r;
      const double want = std::pow(bs / k.base_batch, r) * k.base_lr;
      const double got = scaled_lr(k, bs);
      ++checked;
      if (std::abs(got - want) > 4 * DBL_EPSILON * std::abs(want)) ++bad;
    }
  }
  const bool identity = scaled_lr(rule, rule.base_batch) == rule.base_lr;
  const double four = scaled_lr(rule, 4e6);
  const bool doubled = std::abs(four - 2 * rule.base_lr) <= DBL_EPSILON * 2 * rule.base_lr;
  return {bad == 0 && identity && doubled,
          fmt("%zu grid points, %zu off by > 4 ulp; identity %s; 4M at r=0.5 gives %.17g", checked, bad,
              identity ? "exact" : "BAD", four / rule.base_lr)};
}

// ---------------------------------------------------------------- 5

Outcome resampling_law() {
  constexpr std::size_t kParts = 4, kPerPart = 5, kDraws = 100000;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> loss(0.0, 4.0);
  BatchLossLedger ledger;
  ledger.parts = kParts;
  for (std::size_t i = 0; i < kParts * kPerPart; ++i) ledger.records.push_back({i, i / kPerPart, loss(rng)});

  const auto p = part_probabilities(ledger);
  double worst_sum = 0.0, worst_oracle = 0.0;
  for (std::size_t part = 0; part < kParts; ++part) {
    double s = 0.0, z = 0.0;
    for (std::size_t i = 0; i < kPerPart; ++i) {
      s += p[part * kPerPart + i];
      z += std::exp(ledger.records[part * kPerPart + i].loss);
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    for (std::size_t i = 0; i < kPerPart; ++i) {
      const double want = std::exp(ledger.records[part * kPerPart + i].loss) / z;
      worst_oracle = std::max(worst_oracle, std::abs(p[part * kPerPart + i] - want));
    }
  }

  // one draw per part: the selection frequency of each batch is its probability
  std::vector<std::size_t> hits(ledger.records.size(), 0);
  for (std::size_t s = 0; s < kDraws; ++s)
    for (const auto& b : resample(ledger, 1.0 / kPerPart, s)) ++hits[b.index];
  double worst_freq = 0.0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const double want = std::exp(ledger.records[i].loss) /
                        [&] {
                          double z = 0.0;
                          for (const auto& r : ledger.records)
                            if (r.part == ledger.records[i].part) z += std::exp(r.loss);
                          return z;
                        }();
    worst_freq = std::max(worst_freq, std::abs(static_cast<double>(hits[i]) / kDraws - want));
  }

  auto all = resample(ledger, 1.0, 3);
  std::set<std::size_t> seen;
  for (const auto& b : all) seen.insert(b.index);
  const bool everything = all.size() == ledger.records.size() && seen.size() == ledger.records.size();

  return {worst_sum <= 1e-12 && worst_oracle <= 1e-12 && worst_freq <= 0.01 && everything,
          fmt("sum err %.1e, vs softmax oracle %.1e, %zu draws max freq err %.4f <= 0.01, rate 1 selects all: %s",
              worst_sum, worst_oracle, kDraws, worst_freq, everything ? "yes" : "no")};
}

// ---------------------------------------------------------------- 6

Tensor gated_logits(const ModelConfig& c, const ParamStore& p, std::span<const int> x, std::size_t T,
                    const UnitMask& mask) {
  Tape tape;
  auto bound = bind(tape, p, false);
  UnitGates gates;
  for (const auto& h : mask.heads) gates.heads.push_back(tape.constant(Tensor({h.size()}, h)));
  for (const auto& f : mask.ffn) gates.ffn.push_back(tape.constant(Tensor({f.size()}, f)));
  ForwardOptions opts;
  opts.gates = &gates;
  return forward_on_tape(c, bound, x, T, opts).value();
}

Outcome surgery_exactness() {
  std::mt19937_64 rng(31);
  std::size_t failures = 0;
  double worst = 0.0;

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = make_config(300, 16, 3, 4, 4, 20);
    auto p = initialize(c, {InitVariant::Constant, 0.3, seed});
    const auto x = random_ids(16, c.vocab_size, rng);
    const auto base = forward(c, p, x, 8);

    // identity surgery and g == h conversion
    if (!forward(c, build_child(c, p, InheritancePlan::identity(c), c), x, 8).bit_equal(base)) ++failures;
    const auto [same_cfg, same] = convert_to_gqa(c, p, c.n_heads);
    if (!forward(same_cfg, same, x, 8).bit_equal(base)) ++failures;

    // identical key/value heads within each group of two
    auto dup = p;
    for (std::size_t i = 0; i < c.depth; ++i) {
      for (const char* leaf : {"wk", "wv"}) {
        auto& w = dup.get(param_names::layer(i, leaf));
        for (std::size_t r = 0; r < c.width; ++r)
          for (std::size_t head = 1; head < c.n_heads; head += 2)
            for (std::size_t j = 0; j < c.head_dim; ++j) w.at(r, head * c.head_dim + j) = w.at(r, (head - 1) * c.head_dim + j);
      }
    }
    const auto [gcfg, gp] = convert_to_gqa(c, dup, c.n_heads / 2);
    if (!forward(gcfg, gp, x, 8).bit_equal(forward(c, dup, x, 8))) ++failures;

    // FFN channel slicing and a dropped layer vs zero-gated parent logits
    auto child = c;
    child.depth = 2;
    child.ffn_hidden = 9;
    InheritancePlan plan = InheritancePlan::identity(c);
    plan.kept_layers = {0, 2};
    plan.heads = {plan.heads[0], plan.heads[2]};
    plan.ffn.clear();
    auto mask = UnitMask::ones(c);
    mask.width.clear();
    for (std::size_t layer = 0; layer < c.depth; ++layer) std::fill(mask.ffn[layer].begin(), mask.ffn[layer].end(), 0.0);
    std::fill(mask.heads[1].begin(), mask.heads[1].end(), 0.0);
    for (std::size_t layer : plan.kept_layers) {
      std::vector<std::size_t> all(c.ffn_hidden);
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      all.resize(child.ffn_hidden);
      std::sort(all.begin(), all.end());
      for (auto k : all) mask.ffn[layer][k] = 1.0;
      plan.ffn.push_back(all);
    }
    const double d1 = max_abs_diff(forward(child, build_child(c, p, plan, child), x, 8), gated_logits(c, p, x, 8, mask));
    worst = std::max(worst, d1);

    // head slicing at the attention sublayer, one kept head, width restricted to its channels
    const std::size_t keep = rng() % c.n_heads;
    auto hchild = make_config(300, c.head_dim, 1, 1, 1, c.ffn_hidden);
    auto one = make_config(300, 16, 1, 4, 4, 20);
    const auto op = initialize(one, {InitVariant::Constant, 0.3, seed + 100});
    InheritancePlan hp = InheritancePlan::identity(one);
    hp.heads = {{keep}};
    hp.width.clear();
    for (std::size_t k = 0; k < one.width; ++k)
      if (k % 4 == seed % 4) hp.width.push_back(k);
    const auto cp = build_child(one, op, hp, hchild);
    const std::size_t T = 5;
    auto full = testing::uniform_tensor({T, one.width}, rng);
    std::set<std::size_t> kept_w(hp.width.begin(), hp.width.end());
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t k = 0; k < one.width; ++k)
        if (!kept_w.count(k)) full.at(r, k) = 0.0;
    Tensor part({T, hp.width.size()});
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t k = 0; k < hp.width.size(); ++k) part.at(r, k) = full.at(r, hp.width[k]);
    Tape tp;
    auto bp = bind(tp, op, false);
    std::vector<double> hm(one.n_heads, 0.0);
    hm[keep] = 1.0;
    Var gate = tp.constant(Tensor({one.n_heads}, hm));
    const Tensor want = attention_sublayer(one, bp, 0, tp.constant(full), T, &gate).value();
    Tape tc;
    auto bc = bind(tc, cp, false);
    const Tensor got = attention_sublayer(hchild, bc, 0, tc.constant(part), T).value();
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t k = 0; k < hp.width.size(); ++k) worst = std::max(worst, std::abs(got.at(r, k) - want.at(r, hp.width[k])));
  }
  return {failures == 0 && worst <= 1e-12,
          fmt("5 seeds: %zu bit-exactness failures (identity, g==h, identical KV); slicing vs masking max diff %.1e "
              "<= 1e-12",
              failures, worst)};
}

// ---------------------------------------------------------------- 7

Outcome criterion_oracle() {
  std::map<Criterion, int> hits;
  const std::vector<Criterion> all{Criterion::L1, Criterion::L2, Criterion::Taylor, Criterion::Learned};
  for (std::uint64_t seed = 101; seed <= 120; ++seed) {
    const auto prob = testing::planted_problem(seed);
    const auto oracle = testing::deletion_oracle(prob.config, prob.params, prob.batches);
    const auto targets = UnitTargets::uniform(prob.config, prob.config.n_heads, 1);
    for (auto crit : all)
      if (testing::top_ffn(score_neurons(prob.config, prob.params, prob.batches, crit, targets)) == oracle) ++hits[crit];
  }
  const bool pass = hits[Criterion::L1] >= 18 && hits[Criterion::L2] >= 18 && hits[Criterion::Taylor] >= 19 &&
                    hits[Criterion::Learned] >= 19;
  return {pass, fmt("agreement over 20 planted problems: l1 %d, l2 %d (need 18), taylor %d, learned %d (need 19)",
                    hits[Criterion::L1], hits[Criterion::L2], hits[Criterion::Taylor], hits[Criterion::Learned])};
}

// ---------------------------------------------------------------- 8, 9: trained toy parents

struct Parent {
  ModelConfig config;
  ParamStore params;
  std::vector<Batch> pool;     // parent training data
  std::vector<Batch> held_out;
  std::vector<Batch> child_pool;  // fresh data from the same source for the children
};

constexpr std::size_t kRows = 8, kSeq = 32;

TrainPlan toy_plan(std::uint64_t seed, double lr) {
  TrainPlan plan;
  plan.peak_lr = lr;
  plan.parts = 4;
  plan.seed = seed;
  return plan;
}

const std::vector<Parent>& parents() {
  static const std::vector<Parent> cache = [] {
    std::vector<Parent> out;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto text = testing::zipf_corpus(60000, 400, 1.1, 1000 + seed);
      const auto vocab = train_bpe(text.substr(0, 60000), 320);
      const auto ids = vocab.encode(text);
      auto batches = make_batches(ids, kRows, kSeq);
      Parent p;
      p.config = make_config(vocab.size(), 32, 8, 4, 4, 88);
      p.pool.assign(batches.begin(), batches.begin() + 160);
      p.held_out.assign(batches.begin() + 160, batches.begin() + 176);
      p.child_pool.assign(batches.begin() + 176, batches.begin() + 236);
      p.params = initialize(p.config, {InitVariant::Constant, 0.02, seed});
      multi_round_train(p.config, p.params, p.pool, toy_plan(seed, 3e-3));
      out.push_back(std::move(p));
    }
    return out;
  }();
  return cache;
}

Outcome inheritance_efficacy() {
  const auto& ps = parents();
  std::map<Criterion, int> wins;
  std::string losses;
  for (std::size_t s = 0; s < ps.size(); ++s) {
    const auto& P = ps[s];
    auto child = P.config;
    child.depth = 4;
    child.ffn_hidden = 44;
    const auto importance = layer_skip_eval(P.config, P.params, P.held_out, {1});
    const auto kept = select_layers(importance, P.config.depth, child.depth, 1, 1);
    const std::span<const Batch> scoring(P.pool.data(), 4);
    const auto targets = UnitTargets::uniform(P.config, child.n_heads, child.ffn_hidden);

    const auto plan = toy_plan(50 + s, 3e-3);
    auto train = [&](ParamStore params) {
      multi_round_train(child, params, P.child_pool, plan);
      return mean_loss(child, params, P.child_pool);
    };
    const double random = train(initialize(child, {InitVariant::Constant, 0.02, 70 + s}));
    losses += fmt(" [random %.3f", random);
    for (auto crit : {Criterion::Taylor, Criterion::Learned}) {
      MaskSchedule schedule;
      schedule.steps = 100;
      const auto scores = score_neurons(P.config, P.params, scoring, crit, targets, schedule);
      const auto inherited = build_child(P.config, P.params, make_plan(P.config, child, kept, scores), child);
      const double l = train(inherited);
      losses += fmt(" %s %.3f", to_string(crit).c_str(), l);
      if (l < random) ++wins[crit];
    }
    losses += "]";
  }
  return {wins[Criterion::Taylor] >= 4 && wins[Criterion::Learned] >= 4,
          fmt("child beats random-init twin: taylor %d/5, learned %d/5 (need 4);", wins[Criterion::Taylor],
              wins[Criterion::Learned]) +
              losses};
}

Outcome layer_importance_trend() {
  int wins = 0;
  std::string detail;
  for (const auto& P : parents()) {
    const auto imp = layer_skip_eval(P.config, P.params, P.held_out, {1}).single_layer(P.config.depth);
    const std::size_t L = P.config.depth;
    const double ends = (imp.front() + imp.back()) / 2.0;
    double middle = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (3 * i >= L && 3 * i < 2 * L) {
        middle += imp[i];
        ++n;
      }
    }
    middle /= static_cast<double>(n);
    if (ends > middle) ++wins;
    detail += fmt(" [%.3f vs %.3f]", ends, middle);
  }
  return {wins >= 4, fmt("first/last mean importance above middle third on %d/5 parents (need 4);", wins) + detail};
}

// ---------------------------------------------------------------- 10

Outcome forgetting_trend() {
  // (a) recency: every batch draws from its own small token set, so what a batch teaches is only
  // refreshed while that batch is trained on
  int recency = 0;
  std::string detail;
  constexpr std::size_t kBatches = 64, kTokensPerBatch = 8;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const auto c = make_config(kBatches * kTokensPerBatch, 32, 2, 4, 4, 64);
    std::vector<Batch> pool;
    for (std::size_t b = 0; b < kBatches; ++b) {
      Batch batch{4, kSeq / 2, {}};
      for (std::size_t i = 0; i < batch.rows * (batch.seq_len + 1); ++i)
        batch.tokens.push_back(static_cast<int>(b * kTokensPerBatch + rng() % kTokensPerBatch));
      pool.push_back(std::move(batch));
    }
    auto params = initialize(c, {InitVariant::Constant, 0.02, seed});
    auto plan = toy_plan(seed, 2e-2);
    plan.parts = 8;
    const auto res = multi_round_train(c, params, pool, plan);
    const auto scan = forgetting_scan(c, params, pool, res.front().ledger);
    if (scan.front() > scan.back()) ++recency;
    detail += fmt(" [%.3f > %.3f]", scan.front(), scan.back());
  }

  // (b) a second, resampled round improves held-out loss over the round-1 checkpoint
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto text = testing::zipf_corpus(30000, 300, 1.1, 2000 + seed);
    const auto vocab = train_bpe(text, 300);
    auto batches = make_batches(vocab.encode(text), kRows, kSeq);
    const std::vector<Batch> pool(batches.begin(), batches.begin() + 64);
    const std::vector<Batch> eval(batches.begin() + 64, batches.begin() + 80);
    const auto c = make_config(vocab.size(), 32, 2, 4, 4, 88);
    auto params = initialize(c, {InitVariant::Constant, 0.02, seed});
    auto plan = toy_plan(seed, 3e-3);
    plan.parts = 8;
    plan.rounds = 2;
    plan.sampling_rate = 0.5;
    std::vector<double> eval_loss;
    multi_round_train(c, params, pool, plan,
                      [&](std::size_t, const ParamStore& p, const RoundResult&) { eval_loss.push_back(mean_loss(c, p, eval)); });
    if (eval_loss[1] < eval_loss[0]) ++improved;
    detail += fmt(" [%.3f -> %.3f]", eval_loss[0], eval_loss[1]);
  }
  return {recency >= 4 && improved >= 4,
          fmt("part 1 above part 8 on %d/5, round 2 improves eval on %d/5 (need 4 each);", recency, improved) + detail};
}

// ---------------------------------------------------------------- 11

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "tlm_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "train.txt") << testing::zipf_corpus(4000, 150, 1.1, 8);
  std::ofstream(root / "eval.txt") << testing::zipf_corpus(800, 150, 1.1, 9);
  nlohmann::json j{{"seed", 12},
                   {"corpus", "train.txt"},
                   {"tokenizer", {{"train_size", 320}, {"compaction", {{"coverage", 0.9}}}}},
                   {"architecture", {{"search", {{"budget", 20000}, {"depths", {2, 3}}, {"head_dim", 8}, {"tolerance", 0.2}}}}},
                   {"init", {{"scheme", "constant"}}},
                   {"training", {{"rows", 4}, {"seq_len", 16}, {"peak_lr", 0.005}, {"rounds", 2}, {"parts", 4}}},
                   {"evaluation", {{"corpus", "eval.txt"}, {"layer_skip", true}}}};
  std::vector<RunManifest> runs;
  for (const char* dir : {"a", "b"}) {
    j["output_dir"] = dir;
    const auto path = root / (std::string(dir) + ".json");
    std::ofstream(path) << j.dump();
    runs.push_back(run_pipeline(load_pipeline_config(path)));
  }
  fs::remove_all(root);
  const bool same = runs[0].artifacts == runs[1].artifacts && runs[0].inputs == runs[1].inputs;
  const bool complete = runs[0].completed.size() == all_stages().size();
  return {same && complete && !runs[0].artifacts.empty(),
          fmt("%zu artifacts, %zu stages, hashes %s", runs[0].artifacts.size(), runs[0].completed.size(),
              same ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient correctness", gradient_correctness},
      {"tokenizer round-trip and coverage", tokenizer_round_trip},
      {"parameter accounting", parameter_accounting},
      {"scaling-rule arithmetic", scaling_rule},
      {"resampling law", resampling_law},
      {"surgery exactness", surgery_exactness},
      {"pruning-criterion oracle agreement", criterion_oracle},
      {"inheritance efficacy", inheritance_efficacy},
      {"layer-importance trend", layer_importance_trend},
      {"forgetting and multi-round", forgetting_trend},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s [%2d] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed ? 1 : 0;
}
