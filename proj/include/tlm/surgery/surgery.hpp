#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tlm/model/config.hpp"
#include "tlm/model/params.hpp"
#include "tlm/model/transformer.hpp"

namespace tlm {

// ---- layer skipping ----

struct LayerImportance {
  struct Entry {
    std::size_t window = 1;
    std::size_t start = 0;
    double score = 0.0;       // metric with layers [start, start + window) skipped
    double importance = 0.0;  // baseline - score
  };
  std::string metric;
  double baseline = 0.0;
  std::vector<Entry> entries;

  // importance of skipping each single layer, indexed by layer; needs window 1 entries
  std::vector<double> single_layer(std::size_t depth) const;
};

// Metric to maximize, evaluated with the given layers skipped.
using SkipMetric = std::function<double(const std::set<std::size_t>& skipped)>;

LayerImportance layer_skip_scan(std::size_t depth, const SkipMetric& metric, const std::string& metric_name,
                                const std::vector<std::size_t>& windows = {1, 2, 3});

// Metric is the negative mean batch loss.
LayerImportance layer_skip_eval(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                                const std::vector<std::size_t>& windows = {1, 2, 3});

// Keeps the first `front` and last `back` layers, fills the rest with the most important middle layers
// (ties to the lower index) and returns the indices ascending.
std::vector<std::size_t> select_layers(std::span<const double> single_layer_importance, std::size_t child_depth,
                                       std::size_t front = 2, std::size_t back = 2);
std::vector<std::size_t> select_layers(const LayerImportance& importance, std::size_t parent_depth,
                                       std::size_t child_depth, std::size_t front = 2, std::size_t back = 2);

// ---- unit masks and scoring ----

// Multiplicative factor per structural unit; empty vectors mean "all ones".
struct UnitMask {
  std::vector<std::vector<double>> heads;  // [depth][n_heads]
  std::vector<std::vector<double>> ffn;    // [depth][ffn_hidden]
  std::vector<double> width;               // [width]

  static UnitMask ones(const ModelConfig& config);
};

double masked_loss(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                   const UnitMask& mask);

enum class Criterion { L1, L2, Taylor, Learned };
std::string to_string(Criterion c);
Criterion parse_criterion(const std::string& name);

struct NeuronScores {
  Criterion criterion = Criterion::L1;
  std::vector<std::vector<double>> heads;  // [depth][n_heads]
  std::vector<std::vector<double>> ffn;    // [depth][ffn_hidden]
  std::vector<double> width;               // [width]
};

// Retained units per layer (and shared width channels) for a child.
struct UnitTargets {
  std::vector<std::size_t> heads;  // per layer
  std::vector<std::size_t> ffn;    // per layer
  std::size_t width = 0;           // 0 = keep the full width

  static UnitTargets uniform(const ModelConfig& parent, std::size_t heads, std::size_t ffn, std::size_t width = 0);
  void validate(const ModelConfig& parent) const;
};

struct MaskSchedule {
  std::size_t steps = 200;
  double lr = 0.05;
  double temperature_start = 1.0;
  double temperature_end = 0.1;  // linear decay over the steps
  double penalty = 1.0;          // weight of sum((sum gates - target)^2)
  double init_logit = 3.0;
};

struct MaskParams {
  std::vector<std::vector<double>> heads;
  std::vector<std::vector<double>> ffn;
  std::vector<double> width;  // empty when the width is not learned
  double temperature = 1.0;   // at the last step
  UnitTargets targets;

  // gate = sigmoid(logit / temperature)
  NeuronScores gate_values() const;
};

// Learns relaxed gates on the units of a frozen model.
MaskParams learn_masks(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                       const UnitTargets& targets, const MaskSchedule& schedule = {});

// Indices of the `count` largest values, ties to the lower index, returned ascending.
std::vector<std::size_t> top_units(std::span<const double> scores, std::size_t count);

struct KeptUnits {
  std::vector<std::vector<std::size_t>> heads;
  std::vector<std::vector<std::size_t>> ffn;
  std::vector<std::size_t> width;
};
KeptUnits harden(const MaskParams& masks);
KeptUnits harden(const NeuronScores& scores, const UnitTargets& targets);

// L1 / L2 norms of unit weight vectors, or Taylor saliency sum |w * dL/dw| over the batches.
// Learned runs learn_masks with `targets` and reports the final gate values.
NeuronScores score_neurons(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches,
                           Criterion criterion, const UnitTargets& targets = {}, const MaskSchedule& schedule = {});

// ---- child construction ----

struct InheritancePlan {
  std::vector<std::size_t> kept_layers;              // parent layer indices, ascending
  std::vector<std::vector<std::size_t>> heads;       // per kept layer, parent head indices
  std::vector<std::vector<std::size_t>> ffn;         // per kept layer, parent FFN channels
  std::vector<std::size_t> width;                    // parent model-dim channels, shared by all layers
  std::vector<std::size_t> vocab;                    // child token id -> parent token id

  static InheritancePlan identity(const ModelConfig& config);
  // Throws PlanError describing the first inconsistency.
  void validate(const ModelConfig& parent, const ModelConfig& child) const;
};

void to_json(nlohmann::json& j, const InheritancePlan& p);
void from_json(const nlohmann::json& j, InheritancePlan& p);
void save_plan(const std::filesystem::path& path, const InheritancePlan& plan);
InheritancePlan load_plan(const std::filesystem::path& path);

// Assembles a plan from kept layers and per-parent-layer unit scores. `vocab` empty means identity.
InheritancePlan make_plan(const ModelConfig& parent, const ModelConfig& child, const std::vector<std::size_t>& kept_layers,
                          const NeuronScores& scores, std::vector<std::size_t> vocab = {});

ParamStore build_child(const ModelConfig& parent, const ParamStore& parent_params, const InheritancePlan& plan,
                       const ModelConfig& child);

// Mean-pools each group's key and value projections.
std::pair<ModelConfig, ParamStore> convert_to_gqa(const ModelConfig& config, const ParamStore& params,
                                                  std::size_t groups);

// ---- exports ----

// window,start,baseline,score,importance
void write_importance_csv(const std::filesystem::path& path, const LayerImportance& imp);
// criterion,kind,layer,unit,score  (kind: head, ffn, width; layer is empty for width)
void write_scores_csv(const std::filesystem::path& path, const NeuronScores& scores);

}  // namespace tlm
