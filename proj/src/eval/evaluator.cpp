#include "tlm/eval/evaluator.hpp"

#include <cmath>
#include <fstream>

#include "tlm/core/error.hpp"
#include "tlm/core/kernels.hpp"

namespace tlm {

namespace {

// Summed cross-entropy of logits rows [first, targets.size()) against their targets.
double summed_nll(const Tensor& logits, std::span<const int> targets, std::size_t first) {
  const std::size_t V = logits.cols();
  double s = 0.0;
  for (std::size_t r = first; r < targets.size(); ++r) {
    std::span<const double> row(logits.data().data() + r * V, V);
    s += kernels::log_sum_exp(row) - row[static_cast<std::size_t>(targets[r])];
  }
  return s;
}

}  // namespace

void ClozeItem::validate(std::size_t vocab_size) const {
  if (context.empty()) throw InvalidArgument("cloze item needs a nonempty context");
  if (candidates.size() < 2) throw InvalidArgument("cloze item needs at least two candidates");
  if (gold >= candidates.size()) throw InvalidArgument("cloze gold index out of range");
  auto check = [&](const std::vector<int>& ids) {
    for (int t : ids)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw IndexError("cloze token id out of range");
  };
  check(context);
  for (const auto& c : candidates) {
    if (c.empty()) throw InvalidArgument("cloze candidate is empty");
    check(c);
  }
}

double perplexity(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches) {
  return perplexity_report(config, params, batches).value;
}

EvalReport perplexity_report(const ModelConfig& config, const ParamStore& params, std::span<const Batch> batches) {
  if (batches.empty()) throw InvalidArgument("perplexity over no batches");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : batches) {
    const auto logits = forward(config, params, b.inputs(), b.seq_len);
    const auto targets = b.targets();
    nll += summed_nll(logits, targets, 0);
    tokens += targets.size();
  }
  EvalReport rep;
  rep.metric = "perplexity";
  rep.value = std::exp(nll / static_cast<double>(tokens));
  rep.count = tokens;
  return rep;
}

double continuation_log_likelihood(const ModelConfig& config, const ParamStore& params, std::span<const int> context,
                                   std::span<const int> continuation) {
  if (context.empty() || continuation.empty()) throw InvalidArgument("context and continuation must be nonempty");
  std::vector<int> seq(context.begin(), context.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const std::vector<int> inputs(seq.begin(), seq.end() - 1);
  const std::vector<int> targets(seq.begin() + 1, seq.end());
  const auto logits = forward(config, params, inputs, inputs.size());
  return -summed_nll(logits, targets, context.size() - 1);
}

std::size_t pick_candidate(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("no candidate scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

EvalReport cloze_accuracy(const ModelConfig& config, const ParamStore& params, std::span<const ClozeItem> items) {
  if (items.empty()) throw InvalidArgument("cloze accuracy over no items");
  EvalReport rep;
  rep.metric = "cloze_accuracy";
  rep.count = items.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    item.validate(config.vocab_size);
    EvalReport::Row row{i, 0, item.gold, {}};
    for (const auto& cand : item.candidates)
      row.scores.push_back(continuation_log_likelihood(config, params, item.context, cand) /
                           static_cast<double>(cand.size()));
    row.chosen = pick_candidate(row.scores);
    if (row.chosen == item.gold) ++correct;
    rep.rows.push_back(std::move(row));
  }
  rep.value = static_cast<double>(correct) / static_cast<double>(items.size());
  return rep;
}

std::vector<ClozeItem> load_cloze_items(const std::filesystem::path& path, const Vocabulary* vocab) {
  auto ids_of = [&](const nlohmann::json& j) {
    if (!j.is_string()) return j.get<std::vector<int>>();
    if (!vocab) throw IoError("text cloze fields need a vocabulary");
    return vocab->encode(j.get<std::string>());
  };
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<ClozeItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ClozeItem it;
      it.context = ids_of(j.at("context"));
      for (const auto& cand : j.at("candidates")) it.candidates.push_back(ids_of(cand));
      it.gold = j.at("gold").get<std::size_t>();
      items.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

void save_cloze_items(const std::filesystem::path& path, std::span<const ClozeItem> items) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& it : items) {
    nlohmann::json j{{"context", it.context}, {"candidates", it.candidates}, {"gold", it.gold}};
    os << j.dump() << '\n';
  }
}

nlohmann::json report_summary(const EvalReport& report) {
  return {{"metric", report.metric}, {"value", report.value}, {"count", report.count}};
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  if (report.rows.empty()) {
    os << "metric,value,count\n" << report.metric << ',' << report.value << ',' << report.count << '\n';
    return;
  }
  os << "item,chosen,gold,correct,scores\n";
  for (const auto& r : report.rows) {
    os << r.item << ',' << r.chosen << ',' << r.gold << ',' << (r.chosen == r.gold ? 1 : 0) << ',';
    for (std::size_t i = 0; i < r.scores.size(); ++i) os << (i ? ";" : "") << r.scores[i];
    os << '\n';
  }
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << report_summary(report).dump(2) << '\n';
}

}  // namespace tlm
