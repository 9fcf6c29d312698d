#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"
#include "tlm/model/transformer.hpp"

namespace tlm {

// lr = (bs / base_batch)^rate * base_lr
struct ScalingRule {
  double base_batch = 1'000'000.0;
  double base_lr = 1e-4;
  double rate = 0.5;
};

double scaled_lr(const ScalingRule& rule, double batch_size);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Adam moments with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
  std::size_t t_ = 0;
};

// Cosine decay from peak at step 0 to floor_fraction * peak at the final step.
struct CosineSchedule {
  double peak = 1e-3;
  double floor_fraction = 0.1;
  std::size_t total_steps = 1;

  double at(std::size_t step) const;
};

// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

struct TrainPlan {
  double peak_lr = 3e-3;
  AdamWConfig optimizer{};
  double floor_fraction = 0.1;
  double clip_norm = 1.0;
  std::size_t rounds = 1;
  double sampling_rate = 0.5;
  std::size_t parts = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Cuts a token stream into windows of seq_len + 1 tokens (stride seq_len) and groups `rows` windows
// per batch. A trailing partial batch is dropped.
std::vector<Batch> make_batches(std::span<const int> stream, std::size_t rows, std::size_t seq_len);

struct ScheduledBatch {
  std::size_t index = 0;  // into the batch pool
  std::size_t part = 0;
  bool operator==(const ScheduledBatch&) const = default;
};

struct BatchLossLedger {
  struct Record {
    std::size_t batch_index = 0;
    std::size_t part = 0;
    double loss = 0.0;
  };
  std::size_t parts = 1;
  std::vector<Record> records;
};

struct CurvePoint {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct RoundResult {
  BatchLossLedger ledger;
  std::vector<CurvePoint> curve;
};

// Shuffles [0, n) by seed and splits it into `parts` contiguous parts whose sizes differ by at most one.
// Returned in training order: part 0 first.
std::vector<ScheduledBatch> partition_batches(std::size_t n, std::size_t parts, std::uint64_t seed);

// One pass over `order` with a fresh optimizer and cosine schedule. Each ledger record holds the
// batch's loss before its own update. Throws NumericError naming the batch on a non-finite loss.
RoundResult train_round(const ModelConfig& config, ParamStore& params, std::span<const Batch> pool,
                        const std::vector<ScheduledBatch>& order, const TrainPlan& plan, std::size_t parts);

// Selection probability of each ledger record within its part: softmax of the recorded losses.
std::vector<double> part_probabilities(const BatchLossLedger& ledger);

// Per part, draws ceil(rate * N_part) distinct batches by sequential probability-proportional draws,
// then shuffles the whole selection by seed.
std::vector<ScheduledBatch> resample(const BatchLossLedger& ledger, double rate, std::uint64_t seed);

// Called after each round with its zero-based index.
using RoundHook = std::function<void(std::size_t round, const ParamStore& params, const RoundResult& result)>;

// Round 1 trains on every batch; each later round on resample(previous ledger, sampling_rate).
std::vector<RoundResult> multi_round_train(const ModelConfig& config, ParamStore& params, std::span<const Batch> pool,
                                           const TrainPlan& plan, const RoundHook& on_round = {});

// Mean batch loss over the given batches.
double mean_loss(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches);

// Recomputed mean loss of each part's batches, indexed by part.
std::vector<double> forgetting_scan(const ModelConfig& config, const ParamStore& params, std::span<const Batch> pool,
                                    const BatchLossLedger& ledger);

void write_ledger_csv(const std::filesystem::path& path, const std::vector<RoundResult>& rounds);
void write_curve_csv(const std::filesystem::path& path, const std::vector<RoundResult>& rounds);

}  // namespace tlm
