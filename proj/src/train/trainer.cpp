#include "tlm/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <limits>
#include <random>

#include "tlm/core/error.hpp"

namespace tlm {

double scaled_lr(const ScalingRule& rule, double batch_size) {
  if (!(batch_size > 0)) throw InvalidArgument("batch size must be positive");
  if (!(rule.base_batch > 0) || !(rule.base_lr > 0) || rule.rate < 0 || rule.rate > 1) {
    throw InvalidArgument("scaling rule needs base_batch > 0, base_lr > 0, rate in [0, 1]");
  }
  return std::pow(batch_size / rule.base_batch, rule.rate) * rule.base_lr;
}

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw IndexError("no gradient for parameter '" + name + "'");
    const Tensor& g = git->second;
    auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape(), 0.0));
    auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      p[i] = p[i] * (1.0 - lr * cfg_.weight_decay) - lr * update;
    }
  }
}

double CosineSchedule::at(std::size_t step) const {
  if (total_steps <= 1) return peak;
  const double progress = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  const double floor = peak * floor_fraction;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& v : g.data()) v *= s;
  }
  return norm;
}

void TrainPlan::validate() const {
  if (!(peak_lr >= 0)) throw InvalidArgument("peak_lr must be nonnegative");
  if (rounds < 1) throw InvalidArgument("rounds must be at least 1");
  if (!(sampling_rate > 0 && sampling_rate <= 1)) throw InvalidArgument("sampling_rate must lie in (0, 1]");
  if (parts < 1) throw InvalidArgument("parts must be at least 1");
  if (floor_fraction < 0 || floor_fraction > 1) throw InvalidArgument("floor_fraction must lie in [0, 1]");
}

std::vector<Batch> make_batches(std::span<const int> stream, std::size_t rows, std::size_t seq_len) {
  if (rows == 0 || seq_len == 0) throw InvalidArgument("batches need positive rows and seq_len");
  std::vector<Batch> out;
  const std::size_t windows = stream.size() > seq_len ? (stream.size() - 1) / seq_len : 0;
  for (std::size_t w0 = 0; w0 + rows <= windows; w0 += rows) {
    Batch b{rows, seq_len, {}};
    b.tokens.reserve(rows * (seq_len + 1));
    for (std::size_t r = 0; r < rows; ++r) {
      auto first = stream.begin() + static_cast<std::ptrdiff_t>((w0 + r) * seq_len);
      b.tokens.insert(b.tokens.end(), first, first + static_cast<std::ptrdiff_t>(seq_len + 1));
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<ScheduledBatch> partition_batches(std::size_t n, std::size_t parts, std::uint64_t seed) {
  if (parts < 1) throw InvalidArgument("parts must be at least 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<ScheduledBatch> out;
  out.reserve(n);
  const std::size_t base = n / parts, extra = n % parts;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    for (std::size_t i = 0; i < len; ++i) out.push_back({idx[pos++], p});
  }
  return out;
}

RoundResult train_round(const ModelConfig& config, ParamStore& params, std::span<const Batch> pool,
                        const std::vector<ScheduledBatch>& order, const TrainPlan& plan, std::size_t parts) {
  if (order.empty()) throw InvalidArgument("train_round needs at least one batch");
  params.validate(config);
  AdamW opt(plan.optimizer);
  CosineSchedule sched{plan.peak_lr, plan.floor_fraction, order.size()};
  RoundResult res;
  res.ledger.parts = parts;
  for (std::size_t step = 0; step < order.size(); ++step) {
    const auto& sb = order[step];
    if (sb.index >= pool.size()) throw IndexError("scheduled batch outside the pool");
    auto lg = loss_and_grads(config, params, pool[sb.index]);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (batch " + std::to_string(sb.index) +
                         ")");
    }
    const double lr = sched.at(step);
    res.ledger.records.push_back({sb.index, sb.part, lg.loss});
    res.curve.push_back({step, lr, lg.loss});
    clip_global_norm(lg.grads, plan.clip_norm);
    opt.step(params, lg.grads, lr);
  }
  return res;
}

std::vector<double> part_probabilities(const BatchLossLedger& ledger) {
  std::vector<double> probs(ledger.records.size(), 0.0);
  for (std::size_t part = 0; part < ledger.parts; ++part) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& r : ledger.records)
      if (r.part == part) mx = std::max(mx, r.loss);
    double z = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (ledger.records[i].part != part) continue;
      probs[i] = std::exp(ledger.records[i].loss - mx);
      z += probs[i];
    }
    for (std::size_t i = 0; i < probs.size(); ++i)
      if (ledger.records[i].part == part) probs[i] /= z;
  }
  return probs;
}

std::vector<ScheduledBatch> resample(const BatchLossLedger& ledger, double rate, std::uint64_t seed) {
  if (!(rate > 0) || rate > 1) throw InvalidArgument("sampling rate must lie in (0, 1]");
  if (ledger.records.empty()) throw InvalidArgument("cannot resample an empty ledger");
  const auto probs = part_probabilities(ledger);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ScheduledBatch> out;
  for (std::size_t part = 0; part < ledger.parts; ++part) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ledger.records.size(); ++i)
      if (ledger.records[i].part == part) members.push_back(i);
    if (members.empty()) continue;
    // small slack so that e.g. 0.7 * 10 does not round up to 8
    const auto take = std::min(members.size(), static_cast<std::size_t>(std::ceil(rate * static_cast<double>(members.size()) - 1e-9)));
    std::vector<double> w(members.size());
    for (std::size_t j = 0; j < members.size(); ++j) w[j] = probs[members[j]];
    for (std::size_t draw = 0; draw < take; ++draw) {
      double total = 0.0;
      for (double x : w) total += x;
      const double u = unit(rng) * total;
      double acc = 0.0;
      std::size_t pick = members.size();
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (w[j] <= 0) continue;
        acc += w[j];
        pick = j;
        if (u < acc) break;
      }
      const auto& rec = ledger.records[members[pick]];
      out.push_back({rec.batch_index, rec.part});
      w[pick] = 0.0;
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<RoundResult> multi_round_train(const ModelConfig& config, ParamStore& params, std::span<const Batch> pool,
                                           const TrainPlan& plan, const RoundHook& on_round) {
  plan.validate();
  if (pool.empty()) throw InvalidArgument("no training batches");
  std::vector<RoundResult> rounds;
  auto order = partition_batches(pool.size(), plan.parts, plan.seed);
  for (std::size_t r = 0; r < plan.rounds; ++r) {
    if (r > 0) order = resample(rounds.back().ledger, plan.sampling_rate, plan.seed + 7919 * r);
    rounds.push_back(train_round(config, params, pool, order, plan, plan.parts));
    if (on_round) on_round(r, params, rounds.back());
  }
  return rounds;
}

double mean_loss(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches) {
  if (batches.empty()) throw InvalidArgument("mean_loss over no batches");
  double s = 0.0;
  for (const auto& b : batches) s += batch_loss(config, params, b);
  return s / static_cast<double>(batches.size());
}

std::vector<double> forgetting_scan(const ModelConfig& config, const ParamStore& params, std::span<const Batch> pool,
                                    const BatchLossLedger& ledger) {
  std::vector<double> sum(ledger.parts, 0.0);
  std::vector<std::size_t> count(ledger.parts, 0);
  for (const auto& r : ledger.records) {
    sum[r.part] += batch_loss(config, params, pool[r.batch_index]);
    ++count[r.part];
  }
  for (std::size_t p = 0; p < ledger.parts; ++p) sum[p] = count[p] ? sum[p] / static_cast<double>(count[p]) : 0.0;
  return sum;
}

void write_ledger_csv(const std::filesystem::path& path, const std::vector<RoundResult>& rounds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "round,batch_index,part,loss\n";
  for (std::size_t r = 0; r < rounds.size(); ++r)
    for (const auto& rec : rounds[r].ledger.records)
      os << r + 1 << ',' << rec.batch_index << ',' << rec.part << ',' << rec.loss << '\n';
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<RoundResult>& rounds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "step,lr,loss\n";
  std::size_t offset = 0;
  for (const auto& r : rounds) {
    for (const auto& p : r.curve) os << offset + p.step << ',' << p.lr << ',' << p.loss << '\n';
    offset += r.curve.size();
  }
}

}  // namespace tlm
