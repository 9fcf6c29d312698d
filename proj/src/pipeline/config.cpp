#include "tlm/pipeline/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "tlm/core/error.hpp"
#include "tlm/model/search.hpp"

namespace tlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were used so leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  std::string field(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const auto name = key.empty() ? (where_.empty() ? std::string("config") : where_) : field(key);
    throw ValidationError(name + ": " + msg);
  }

  bool has(const std::string& key) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    return true;
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(key, "has the wrong type");
    }
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) fail(key, "is required");
    return get<T>(key, T{});
  }

  std::size_t positive(const std::string& key, std::size_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() <= 0) fail(key, "must be a positive integer");
    return v.get<std::size_t>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) fail(key, "must be a nonnegative integer");
    return v.get<std::size_t>();
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number()) fail(key, "must be a number");
    return v.get<double>();
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    return Section(j_.at(key), field(key));
  }

  // One path or a list of paths.
  std::vector<fs::path> paths(const std::string& key, const fs::path& base) {
    std::vector<fs::path> out;
    if (!has(key)) return out;
    const auto& v = j_.at(key);
    std::vector<std::string> raw;
    if (v.is_string()) {
      raw.push_back(v.get<std::string>());
    } else if (v.is_array()) {
      for (const auto& e : v) {
        if (!e.is_string()) fail(key, "must be a path or a list of paths");
        raw.push_back(e.get<std::string>());
      }
    } else {
      fail(key, "must be a path or a list of paths");
    }
    for (const auto& r : raw) out.push_back(existing(key, base, r));
    return out;
  }

  fs::path existing(const std::string& key, const fs::path& base, const std::string& raw) const {
    fs::path p = fs::path(raw).is_absolute() ? fs::path(raw) : base / raw;
    if (!fs::exists(p)) fail(key, "file not found: " + p.string());
    return fs::weakly_canonical(p);
  }

  fs::path file(const std::string& key, const fs::path& base) {
    if (!has(key)) return {};
    const auto& v = j_.at(key);
    if (!v.is_string()) fail(key, "must be a path");
    return existing(key, base, v.get<std::string>());
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!used_.count(k)) fail(k, "unknown key");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

TokenizerSection parse_tokenizer(Section s, const fs::path& base) {
  TokenizerSection t;
  t.mode = s.get<std::string>("mode", "train");
  if (t.mode != "train" && t.mode != "load") s.fail("mode", "must be \"train\" or \"load\"");
  t.train_size = s.positive("train_size", t.train_size);
  if (t.train_size < 256) s.fail("train_size", "must be at least 256");
  t.vocab_file = s.file("vocab_file", base);
  if (t.mode == "load" && t.vocab_file.empty()) s.fail("vocab_file", "is required when mode is \"load\"");
  if (s.has("compaction")) {
    auto c = s.sub("compaction");
    const bool by_size = c.has("size"), by_cov = c.has("coverage");
    if (by_size == by_cov) c.fail("", "set exactly one of size or coverage");
    if (by_size) {
      const auto k = c.positive("size", 0);
      if (k < 256) c.fail("size", "must be at least 256");
      t.compaction = CompactionTarget::of_size(k);
    } else {
      const double theta = c.number("coverage", 0.0);
      if (!(theta > 0.0 && theta <= 1.0)) c.fail("coverage", "must lie in (0, 1]");
      t.compaction = CompactionTarget::of_coverage(theta);
    }
    c.finish();
  }
  s.finish();
  return t;
}

// Best guess of the final vocabulary size before the tokenizer runs.
std::size_t expected_vocab(const TokenizerSection& t) {
  if (t.compaction) return t.compaction->size ? *t.compaction->size : 256;
  if (t.mode == "load") return load_vocab(t.vocab_file).size();
  return t.train_size;
}

ArchitectureSection parse_architecture(Section s, const TokenizerSection& tok) {
  ArchitectureSection a;
  const bool fixed = s.has("fixed"), search = s.has("search");
  if (fixed == search) s.fail("", "set exactly one of fixed or search");
  if (fixed) {
    auto f = s.sub("fixed");
    ModelConfig c;
    c.vocab_size = expected_vocab(tok);
    c.width = f.positive("width", 0);
    c.depth = f.positive("depth", 0);
    c.n_heads = f.positive("n_heads", 0);
    c.head_dim = f.positive("head_dim", c.n_heads ? c.width / c.n_heads : 0);
    c.kv_groups = f.positive("kv_groups", c.n_heads);
    if (f.has("ffn_hidden")) {
      c.ffn_hidden = f.positive("ffn_hidden", 0);
    } else {
      c.ffn_hidden = ffn_width_for(c.width, f.number("expansion_rate", 2.77));
    }
    for (const char* k : {"width", "depth", "n_heads"})
      if (!f.has(k)) f.fail(k, "is required");
    f.finish();
    try {
      c.validate();
    } catch (const InvalidArgument& e) {
      f.fail("", e.what());
    }
    a.fixed = c;
  } else {
    auto q = s.sub("search");
    SearchSection r;
    r.budget = q.positive("budget", 0);
    if (!r.budget) q.fail("budget", "is required");
    r.depths = q.require<std::vector<std::size_t>>("depths");
    if (r.depths.empty()) q.fail("depths", "must not be empty");
    r.expansion_rates = q.get<std::vector<double>>("expansion_rates", r.expansion_rates);
    for (double x : r.expansion_rates)
      if (!(x > 0)) q.fail("expansion_rates", "must be positive");
    r.tolerance = q.number("tolerance", r.tolerance);
    r.head_dim = q.positive("head_dim", r.head_dim);
    if (r.head_dim % 2) q.fail("head_dim", "must be even");
    if (q.has("select_depth")) r.select_depth = q.positive("select_depth", 0);
    q.finish();
    SearchRequest req{r.budget, expected_vocab(tok), r.depths, r.expansion_rates, r.tolerance, r.head_dim};
    const auto found = search_configs(req);
    if (found.empty()) {
      q.fail("budget", "no architecture fits a budget of " + std::to_string(r.budget) + " with vocab size " +
                           std::to_string(req.vocab_size) + " (search_configs returned nothing)");
    }
    if (r.select_depth) {
      bool any = false;
      for (const auto& c : found) any = any || c.depth == *r.select_depth;
      if (!any) q.fail("select_depth", "no feasible architecture with that depth");
    }
    a.search = r;
  }
  s.finish();
  return a;
}

InitScheme parse_init(Section s, std::uint64_t seed) {
  InitScheme i;
  i.seed = seed;
  try {
    i.variant = parse_init_variant(s.get<std::string>("scheme", "constant"));
  } catch (const InvalidArgument& e) {
    s.fail("scheme", e.what());
  }
  i.sigma = s.number("sigma", i.sigma);
  if (!(i.sigma > 0)) s.fail("sigma", "must be positive");
  s.finish();
  return i;
}

InheritanceSection parse_inheritance(Section s, const fs::path& base) {
  InheritanceSection h;
  if (!s.has("parent_checkpoint")) s.fail("parent_checkpoint", "is required");
  h.parent_checkpoint = s.file("parent_checkpoint", base);
  h.parent_vocab = s.file("parent_vocab", base);
  h.plan_file = s.file("plan", base);
  try {
    h.criterion = parse_criterion(s.get<std::string>("criterion", "taylor"));
  } catch (const InvalidArgument& e) {
    s.fail("criterion", e.what());
  }
  h.front = s.count("front", h.front);
  h.back = s.count("back", h.back);
  h.score_batches = s.positive("score_batches", h.score_batches);
  if (s.has("mask")) {
    auto m = s.sub("mask");
    h.mask.steps = m.positive("steps", h.mask.steps);
    h.mask.lr = m.number("lr", h.mask.lr);
    h.mask.temperature_start = m.number("temperature_start", h.mask.temperature_start);
    h.mask.temperature_end = m.number("temperature_end", h.mask.temperature_end);
    h.mask.penalty = m.number("penalty", h.mask.penalty);
    h.mask.init_logit = m.number("init_logit", h.mask.init_logit);
    if (!(h.mask.temperature_start > 0) || !(h.mask.temperature_end > 0)) m.fail("", "temperatures must be positive");
    m.finish();
  }
  if (s.has("gqa_groups")) h.gqa_groups = s.positive("gqa_groups", 0);
  s.finish();
  return h;
}

TrainingSection parse_training(Section s, std::uint64_t seed) {
  TrainingSection t;
  t.rows = s.positive("rows", t.rows);
  t.seq_len = s.positive("seq_len", t.seq_len);
  if (s.has("total_tokens")) t.total_tokens = s.positive("total_tokens", 0);
  const bool lr = s.has("peak_lr"), scaling = s.has("scaling");
  if (lr && scaling) s.fail("peak_lr", "conflicts with training.scaling; set one");
  t.plan.peak_lr = s.number("peak_lr", t.plan.peak_lr);
  if (scaling) {
    auto r = s.sub("scaling");
    ScalingRule rule;
    rule.base_batch = r.number("base_batch", rule.base_batch);
    rule.base_lr = r.number("base_lr", rule.base_lr);
    rule.rate = r.number("rate", rule.rate);
    r.finish();
    try {
      t.plan.peak_lr = scaled_lr(rule, static_cast<double>(t.batch_tokens()));
    } catch (const InvalidArgument& e) {
      r.fail("", e.what());
    }
    t.scaling = rule;
  }
  t.plan.optimizer.weight_decay = s.number("weight_decay", t.plan.optimizer.weight_decay);
  t.plan.optimizer.beta1 = s.number("beta1", t.plan.optimizer.beta1);
  t.plan.optimizer.beta2 = s.number("beta2", t.plan.optimizer.beta2);
  t.plan.optimizer.eps = s.number("eps", t.plan.optimizer.eps);
  t.plan.floor_fraction = s.number("floor_fraction", t.plan.floor_fraction);
  t.plan.clip_norm = s.number("clip_norm", t.plan.clip_norm);
  t.plan.rounds = s.positive("rounds", t.plan.rounds);
  t.plan.sampling_rate = s.number("sampling_rate", t.plan.sampling_rate);
  t.plan.parts = s.positive("parts", t.plan.parts);
  t.plan.seed = seed + 1;
  try {
    t.plan.validate();
  } catch (const InvalidArgument& e) {
    s.fail("", e.what());
  }
  s.finish();
  return t;
}

EvaluationSection parse_evaluation(Section s, const fs::path& base) {
  EvaluationSection e;
  e.corpus = s.paths("corpus", base);
  e.cloze_file = s.file("cloze_file", base);
  e.layer_skip = s.get<bool>("layer_skip", e.layer_skip);
  e.windows = s.get<std::vector<std::size_t>>("windows", e.windows);
  for (auto w : e.windows)
    if (w == 0) s.fail("windows", "must be positive");
  s.finish();
  return e;
}

std::vector<std::string> path_strings(const std::vector<fs::path>& v) {
  std::vector<std::string> out;
  for (const auto& p : v) out.push_back(p.string());
  return out;
}

}  // namespace

PipelineConfig parse_pipeline_config(const json& j, const fs::path& base) {
  Section s(j, "");
  PipelineConfig c;
  c.seed = s.count("seed", 0);
  c.output_dir = s.get<std::string>("output_dir", "out");
  if (c.output_dir.is_relative()) c.output_dir = base / c.output_dir;
  c.output_dir = fs::weakly_canonical(c.output_dir);
  if (!s.has("corpus")) s.fail("corpus", "is required");
  c.corpus = s.paths("corpus", base);
  if (c.corpus.empty()) s.fail("corpus", "must list at least one file");
  c.tokenizer = s.has("tokenizer") ? parse_tokenizer(s.sub("tokenizer"), base) : TokenizerSection{};
  if (!s.has("architecture")) s.fail("architecture", "is required");
  c.architecture = parse_architecture(s.sub("architecture"), c.tokenizer);
  const bool init = s.has("init"), inherit = s.has("inheritance");
  if (init && inherit) s.fail("inheritance", "conflicts with init; a model is either initialized or inherited");
  if (!init && !inherit) s.fail("init", "one of init or inheritance is required");
  if (init) c.init = parse_init(s.sub("init"), c.seed);
  if (inherit) {
    c.inheritance = parse_inheritance(s.sub("inheritance"), base);
    if (c.inheritance->gqa_groups && c.architecture.fixed && c.architecture.fixed->n_heads % *c.inheritance->gqa_groups)
      s.fail("inheritance", "gqa_groups must divide architecture.fixed.n_heads");
  }
  c.training = s.has("training") ? parse_training(s.sub("training"), c.seed) : parse_training(Section(json::object(), "training"), c.seed);
  c.evaluation = s.has("evaluation") ? parse_evaluation(s.sub("evaluation"), base) : EvaluationSection{};
  s.finish();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError(path.string() + ": cannot read config file");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": not valid JSON: " + e.what());
  }
  auto base = fs::absolute(path).parent_path();
  auto cfg = parse_pipeline_config(j, base);
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) cfg.output_dir = fs::weakly_canonical(fs::absolute(env));
  return cfg;
}

json PipelineConfig::resolved() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  j["corpus"] = path_strings(corpus);

  json tok{{"mode", tokenizer.mode}, {"train_size", tokenizer.train_size}};
  if (!tokenizer.vocab_file.empty()) tok["vocab_file"] = tokenizer.vocab_file.string();
  if (tokenizer.compaction) {
    tok["compaction"] = tokenizer.compaction->size ? json{{"size", *tokenizer.compaction->size}}
                                                   : json{{"coverage", *tokenizer.compaction->coverage}};
  }
  j["tokenizer"] = tok;

  if (architecture.fixed) {
    json f = *architecture.fixed;
    f.erase("vocab_size");
    j["architecture"] = {{"fixed", f}};
  } else {
    const auto& s = *architecture.search;
    json q{{"budget", s.budget},
           {"depths", s.depths},
           {"expansion_rates", s.expansion_rates},
           {"tolerance", s.tolerance},
           {"head_dim", s.head_dim}};
    if (s.select_depth) q["select_depth"] = *s.select_depth;
    j["architecture"] = {{"search", q}};
  }

  if (init) j["init"] = {{"scheme", to_string(init->variant)}, {"sigma", init->sigma}};
  if (inheritance) {
    const auto& h = *inheritance;
    json m{{"steps", h.mask.steps},
           {"lr", h.mask.lr},
           {"temperature_start", h.mask.temperature_start},
           {"temperature_end", h.mask.temperature_end},
           {"penalty", h.mask.penalty},
           {"init_logit", h.mask.init_logit}};
    json i{{"parent_checkpoint", h.parent_checkpoint.string()},
           {"criterion", to_string(h.criterion)},
           {"front", h.front},
           {"back", h.back},
           {"score_batches", h.score_batches},
           {"mask", m}};
    if (!h.parent_vocab.empty()) i["parent_vocab"] = h.parent_vocab.string();
    if (!h.plan_file.empty()) i["plan"] = h.plan_file.string();
    if (h.gqa_groups) i["gqa_groups"] = *h.gqa_groups;
    j["inheritance"] = i;
  }

  const auto& t = training;
  json tr{{"rows", t.rows},
          {"seq_len", t.seq_len},
          {"peak_lr", t.plan.peak_lr},
          {"weight_decay", t.plan.optimizer.weight_decay},
          {"beta1", t.plan.optimizer.beta1},
          {"beta2", t.plan.optimizer.beta2},
          {"eps", t.plan.optimizer.eps},
          {"floor_fraction", t.plan.floor_fraction},
          {"clip_norm", t.plan.clip_norm},
          {"rounds", t.plan.rounds},
          {"sampling_rate", t.plan.sampling_rate},
          {"parts", t.plan.parts}};
  if (t.total_tokens) tr["total_tokens"] = *t.total_tokens;
  if (t.scaling) tr["scaling"] = {{"base_batch", t.scaling->base_batch}, {"base_lr", t.scaling->base_lr}, {"rate", t.scaling->rate}};
  j["training"] = tr;

  json ev{{"corpus", path_strings(evaluation.corpus)}, {"layer_skip", evaluation.layer_skip}, {"windows", evaluation.windows}};
  if (!evaluation.cloze_file.empty()) ev["cloze_file"] = evaluation.cloze_file.string();
  j["evaluation"] = ev;
  return j;
}

}  // namespace tlm
