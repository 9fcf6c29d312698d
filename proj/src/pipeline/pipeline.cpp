#include "tlm/pipeline/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "tlm/core/error.hpp"
#include "tlm/eval/evaluator.hpp"
#include "tlm/model/checkpoint.hpp"
#include "tlm/model/search.hpp"

namespace tlm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- hashing ----

std::string sha256_hex_of(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::optional<json> read_json(const fs::path& p) {
  if (!fs::exists(p)) return std::nullopt;
  try {
    return json::parse(read_file(p));
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

}  // namespace

std::string sha256_hex(const fs::path& file) { return sha256_hex_of(read_file(file)); }

// ---- stages and manifest ----

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Tokenize: return "tokenize";
    case Stage::Architecture: return "search-arch";
    case Stage::Model: return "surgery";
    case Stage::Train: return "train";
    case Stage::Eval: return "eval";
  }
  return "?";
}

Stage parse_stage(const std::string& verb) {
  for (auto s : all_stages())
    if (to_string(s) == verb) return s;
  throw InvalidArgument("unknown stage '" + verb + "'");
}

std::vector<Stage> all_stages() { return {Stage::Tokenize, Stage::Architecture, Stage::Model, Stage::Train, Stage::Eval}; }

json RunManifest::to_json() const {
  auto records = [](const std::vector<FileRecord>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
    return a;
  };
  json j{{"version", version},  {"seed", seed},           {"dry_run", dry_run},
         {"planned", planned},  {"completed", completed}, {"inputs", records(inputs)},
         {"artifacts", records(artifacts)}, {"config", config}};
  if (failure) j["failure"] = {{"stage", failed_stage.value_or("")}, {"error", *failure}};
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.config = j.value("config", json::object());
  m.version = j.value("version", std::string(kToolkitVersion));
  m.seed = j.value("seed", std::uint64_t{0});
  m.dry_run = j.value("dry_run", false);
  m.planned = j.value("planned", std::vector<std::string>{});
  m.completed = j.value("completed", std::vector<std::string>{});
  for (const auto& r : j.value("inputs", json::array())) m.inputs.push_back({r.at("path"), r.at("sha256")});
  for (const auto& r : j.value("artifacts", json::array())) m.artifacts.push_back({r.at("path"), r.at("sha256")});
  if (j.contains("failure")) {
    m.failed_stage = j["failure"].value("stage", "");
    m.failure = j["failure"].value("error", "");
  }
  return m;
}

RunManifest load_manifest(const fs::path& output_dir) {
  auto j = read_json(output_dir / kManifestFile);
  if (!j) throw IoError("no readable manifest in " + output_dir.string());
  return RunManifest::from_json(*j);
}

namespace {

struct Context {
  const PipelineConfig& cfg;
  fs::path out;
  std::vector<std::string> written;

  fs::path file(const std::string& name) {
    if (std::find(written.begin(), written.end(), name) == written.end()) written.push_back(name);
    return out / name;
  }
  fs::path existing(const std::string& name, Stage producer) const {
    const auto p = out / name;
    if (!fs::exists(p)) {
      throw IoError("missing " + name + " in " + out.string() + "; run the " + to_string(producer) + " stage first");
    }
    return p;
  }
};

std::string read_corpus(const std::vector<fs::path>& files) {
  std::string text;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (i) text += '\n';
    text += read_file(files[i]);
  }
  return text;
}

std::vector<Batch> corpus_batches(const std::vector<fs::path>& files, const Vocabulary& vocab,
                                  const TrainingSection& t) {
  const auto ids = vocab.encode(read_corpus(files));
  auto batches = make_batches(ids, t.rows, t.seq_len);
  if (t.total_tokens) batches.resize(std::min(batches.size(), *t.total_tokens / t.batch_tokens()));
  return batches;
}

ModelConfig arch_config(Context& ctx) {
  const auto j = read_json(ctx.existing("arch.json", Stage::Architecture));
  if (!j) throw IoError("arch.json is not valid JSON");
  return j->at("config").get<ModelConfig>();
}

void stage_tokenize(Context& ctx) {
  const auto& t = ctx.cfg.tokenizer;
  const auto text = read_corpus(ctx.cfg.corpus);
  const Vocabulary base = t.mode == "load" ? load_vocab(t.vocab_file) : train_bpe(text, t.train_size);
  const auto freq = count_frequencies(text, base);
  write_frequency_csv(ctx.file("frequency.csv"), freq);
  write_coverage_csv(ctx.file("coverage.csv"), coverage_curve(freq));
  json summary{{"trained_size", base.size()}};
  Vocabulary final_vocab = base;
  if (t.compaction) {
    auto res = compact_vocab(base, freq, *t.compaction);
    summary["retained_coverage"] = retained_coverage(freq, res.new_to_old);
    save_vocab(ctx.file("base_vocab.txt"), base);
    final_vocab = std::move(res.vocab);
  }
  save_vocab(ctx.file("vocab.txt"), final_vocab);
  summary["size"] = final_vocab.size();
  summary["compression_rate"] = compression_rate(text, final_vocab);
  write_json(ctx.file("tokenizer.json"), summary);
}

void stage_architecture(Context& ctx) {
  const auto vocab = load_vocab(ctx.existing("vocab.txt", Stage::Tokenize));
  const auto& a = ctx.cfg.architecture;
  ModelConfig c;
  if (a.fixed) {
    c = *a.fixed;
    c.vocab_size = vocab.size();
  } else {
    const auto& s = *a.search;
    const auto found = search_configs({s.budget, vocab.size(), s.depths, s.expansion_rates, s.tolerance, s.head_dim});
    if (found.empty()) {
      throw PlanError("no architecture fits a budget of " + std::to_string(s.budget) + " with vocab size " +
                      std::to_string(vocab.size()));
    }
    std::ofstream os(ctx.file("search.csv"));
    os.precision(17);
    os << "depth,width,n_heads,ffn_hidden,total_params,pehl\n";
    for (const auto& f : found) {
      const auto r = param_count(f);
      os << f.depth << ',' << f.width << ',' << f.n_heads << ',' << f.ffn_hidden << ',' << r.total_params << ','
         << r.pehl << '\n';
    }
    c = found.front();
    if (s.select_depth) {
      auto it = std::find_if(found.begin(), found.end(), [&](const ModelConfig& f) { return f.depth == *s.select_depth; });
      if (it == found.end()) throw PlanError("no feasible architecture of depth " + std::to_string(*s.select_depth));
      c = *it;
    }
  }
  if (ctx.cfg.inheritance && ctx.cfg.inheritance->gqa_groups) c.kv_groups = *ctx.cfg.inheritance->gqa_groups;
  c.validate();
  write_json(ctx.file("arch.json"), {{"config", c}, {"report", param_count(c)}});
}

ParamStore inherit(Context& ctx, const ModelConfig& child, const Vocabulary& vocab) {
  const auto& h = *ctx.cfg.inheritance;
  const auto parent = load_checkpoint(h.parent_checkpoint);
  const auto& P = parent.config;

  // child id -> parent id through token bytes
  const Vocabulary parent_vocab = h.parent_vocab.empty() ? vocab : load_vocab(h.parent_vocab);
  if (parent_vocab.size() != P.vocab_size) throw PlanError("parent vocabulary size does not match the parent checkpoint");
  std::map<std::string, std::size_t> by_bytes;
  for (std::size_t i = 0; i < parent_vocab.size(); ++i) by_bytes.emplace(parent_vocab.tokens()[i], i);
  std::vector<std::size_t> vmap;
  for (const auto& tok : vocab.tokens()) {
    auto it = by_bytes.find(tok);
    if (it == by_bytes.end()) throw PlanError("child token missing from the parent vocabulary");
    vmap.push_back(it->second);
  }

  // pruning heads needs key/value heads that follow the query heads; pool to groups afterwards
  ModelConfig interim = child;
  if (!child.is_mha() && P.is_mha()) interim.kv_groups = interim.n_heads;

  InheritancePlan plan;
  if (!h.plan_file.empty()) {
    plan = load_plan(h.plan_file);
  } else {
    auto batches = corpus_batches(ctx.cfg.corpus, parent_vocab, ctx.cfg.training);
    if (batches.empty()) throw InvalidArgument("corpus too small to score the parent");
    batches.resize(std::min(batches.size(), h.score_batches));

    std::vector<std::size_t> kept(P.depth);
    for (std::size_t i = 0; i < P.depth; ++i) kept[i] = i;
    if (interim.depth < P.depth) {
      const auto imp = layer_skip_eval(P, parent.params, batches, {1});
      write_importance_csv(ctx.file("parent_importance.csv"), imp);
      kept = select_layers(imp, P.depth, interim.depth, h.front, h.back);
    }
    const auto targets = UnitTargets::uniform(P, interim.n_heads, interim.ffn_hidden,
                                              interim.width < P.width ? interim.width : 0);
    const auto scores = score_neurons(P, parent.params, batches, h.criterion, targets, h.mask);
    write_scores_csv(ctx.file("scores.csv"), scores);
    plan = make_plan(P, interim, kept, scores, vmap);
  }
  save_plan(ctx.file("plan.json"), plan);
  auto params = build_child(P, parent.params, plan, interim);
  if (interim.kv_groups != child.kv_groups) params = convert_to_gqa(interim, params, child.kv_groups).second;
  return params;
}

void stage_model(Context& ctx) {
  const auto c = arch_config(ctx);
  const auto vocab = load_vocab(ctx.existing("vocab.txt", Stage::Tokenize));
  ParamStore params = ctx.cfg.init ? initialize(c, *ctx.cfg.init) : inherit(ctx, c, vocab);
  save_checkpoint(ctx.file("init.ckpt"), c, params);
}

void stage_train(Context& ctx) {
  auto ck = load_checkpoint(ctx.existing("init.ckpt", Stage::Model));
  const auto vocab = load_vocab(ctx.existing("vocab.txt", Stage::Tokenize));
  const auto& t = ctx.cfg.training;
  const auto pool = corpus_batches(ctx.cfg.corpus, vocab, t);
  if (pool.empty()) throw InvalidArgument("corpus too small for one training batch");
  const auto eval = ctx.cfg.evaluation.corpus.empty() ? std::vector<Batch>{}
                                                      : corpus_batches(ctx.cfg.evaluation.corpus, vocab, {t.rows, t.seq_len, {}, {}, t.plan});

  std::ostringstream forgetting;
  forgetting.precision(17);
  forgetting << "round,part,mean_loss\n";
  json rounds = json::array();
  auto hook = [&](std::size_t r, const ParamStore& p, const RoundResult& res) {
    save_checkpoint(ctx.file("round" + std::to_string(r + 1) + ".ckpt"), ck.config, p);
    const auto scan = forgetting_scan(ck.config, p, pool, res.ledger);
    for (std::size_t part = 0; part < scan.size(); ++part) forgetting << r + 1 << ',' << part << ',' << scan[part] << '\n';
    json row{{"round", r + 1}, {"steps", res.curve.size()}, {"final_batch_loss", res.curve.back().loss},
             {"train_loss", mean_loss(ck.config, p, pool)}};
    if (!eval.empty()) row["eval_loss"] = mean_loss(ck.config, p, eval);
    rounds.push_back(row);
  };
  const auto results = multi_round_train(ck.config, ck.params, pool, t.plan, hook);
  write_ledger_csv(ctx.file("ledger.csv"), results);
  write_curve_csv(ctx.file("curve.csv"), results);
  write_text(ctx.file("forgetting.csv"), forgetting.str());
  save_checkpoint(ctx.file("model.ckpt"), ck.config, ck.params);
  write_json(ctx.file("training.json"), {{"batches", pool.size()},
                                         {"batch_tokens", t.batch_tokens()},
                                         {"peak_lr", t.plan.peak_lr},
                                         {"rounds", rounds},
                                         {"final_train_loss", rounds.back()["train_loss"]}});
}

void stage_eval(Context& ctx) {
  const auto ck = load_checkpoint(ctx.existing("model.ckpt", Stage::Train));
  const auto vocab = load_vocab(ctx.existing("vocab.txt", Stage::Tokenize));
  const auto& e = ctx.cfg.evaluation;
  const bool held_out = !e.corpus.empty();
  TrainingSection shape = ctx.cfg.training;
  if (held_out) shape.total_tokens.reset();
  const auto batches = corpus_batches(held_out ? e.corpus : ctx.cfg.corpus, vocab, shape);
  if (batches.empty()) throw InvalidArgument("evaluation corpus too small for one batch");

  auto ppl = perplexity_report(ck.config, ck.params, batches);
  ppl.metric = held_out ? "perplexity" : "train_perplexity";
  write_report_csv(ctx.file("perplexity.csv"), ppl);
  json summary{{"perplexity", report_summary(ppl)}};
  if (!e.cloze_file.empty()) {
    const auto items = load_cloze_items(e.cloze_file, &vocab);
    const auto cloze = cloze_accuracy(ck.config, ck.params, items);
    write_report_csv(ctx.file("cloze.csv"), cloze);
    summary["cloze"] = report_summary(cloze);
  }
  if (e.layer_skip) {
    const auto imp = layer_skip_eval(ck.config, ck.params, batches, e.windows);
    write_importance_csv(ctx.file("importance.csv"), imp);
    summary["layer_skip_baseline"] = imp.baseline;
  }
  write_json(ctx.file("eval.json"), summary);
}

void run_one(Context& ctx, Stage s) {
  switch (s) {
    case Stage::Tokenize: return stage_tokenize(ctx);
    case Stage::Architecture: return stage_architecture(ctx);
    case Stage::Model: return stage_model(ctx);
    case Stage::Train: return stage_train(ctx);
    case Stage::Eval: return stage_eval(ctx);
  }
}

std::vector<FileRecord> input_records(const PipelineConfig& c) {
  std::vector<fs::path> files = c.corpus;
  files.insert(files.end(), c.evaluation.corpus.begin(), c.evaluation.corpus.end());
  for (const auto& p : {c.tokenizer.vocab_file, c.evaluation.cloze_file}) files.push_back(p);
  if (c.inheritance) {
    for (const auto& p : {c.inheritance->parent_checkpoint, c.inheritance->parent_vocab, c.inheritance->plan_file})
      files.push_back(p);
  }
  std::vector<FileRecord> out;
  for (const auto& f : files)
    if (!f.empty()) out.push_back({f.string(), sha256_hex(f)});
  return out;
}

RunManifest fresh_manifest(const PipelineConfig& c, const std::vector<Stage>& stages) {
  RunManifest m;
  m.config = c.resolved();
  m.seed = c.seed;
  for (auto s : stages) m.planned.push_back(to_string(s));
  return m;
}

void record_artifacts(RunManifest& m, const fs::path& out, const std::vector<std::string>& written) {
  std::map<std::string, std::string> by_path;
  for (const auto& r : m.artifacts) by_path[r.path] = r.sha256;
  for (const auto& name : written) by_path[name] = sha256_hex(out / name);
  m.artifacts.clear();
  for (const auto& [p, h] : by_path) m.artifacts.push_back({p, h});
}

void save_manifest(const fs::path& out, const RunManifest& m) { write_json(out / kManifestFile, m.to_json()); }

RunManifest execute(const PipelineConfig& config, const std::vector<Stage>& stages, RunManifest m) {
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  m.inputs = input_records(config);
  for (auto s : stages) {
    Context ctx{config, out, {}};
    try {
      run_one(ctx, s);
    } catch (const std::exception& e) {
      record_artifacts(m, out, ctx.written);
      m.failed_stage = to_string(s);
      m.failure = e.what();
      save_manifest(out, m);
      throw;
    }
    record_artifacts(m, out, ctx.written);
    m.completed.push_back(to_string(s));
    save_manifest(out, m);
  }
  return m;
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& config, bool dry_run) {
  auto m = fresh_manifest(config, all_stages());
  if (dry_run) {
    m.dry_run = true;
    m.inputs = input_records(config);
    fs::create_directories(config.output_dir);
    save_manifest(config.output_dir, m);
    return m;
  }
  return execute(config, all_stages(), std::move(m));
}

RunManifest run_stage(const PipelineConfig& config, Stage stage) {
  RunManifest m = fs::exists(config.output_dir / kManifestFile) ? load_manifest(config.output_dir)
                                                                : fresh_manifest(config, {});
  m.config = config.resolved();
  m.seed = config.seed;
  m.dry_run = false;
  m.failure.reset();
  m.failed_stage.reset();
  const auto name = to_string(stage);
  if (std::find(m.planned.begin(), m.planned.end(), name) == m.planned.end()) m.planned.push_back(name);
  std::erase(m.completed, name);
  return execute(config, {stage}, std::move(m));
}

// ---- report ----

namespace {

// Appends a CSV (minus its header) to `out` with the run name prefixed; returns false when absent.
bool append_csv(std::ostream& out, const fs::path& src, const std::string& run, bool& header_done) {
  std::ifstream is(src);
  if (!is) return false;
  std::string line;
  if (!std::getline(is, line)) return false;
  if (!header_done) {
    out << "run," << line << '\n';
    header_done = true;
  }
  while (std::getline(is, line))
    if (!line.empty()) out << run << ',' << line << '\n';
  return true;
}

std::string num(const json& j) {
  if (j.is_null()) return "";
  if (j.is_number_float()) {
    std::ostringstream ss;
    ss.precision(10);
    ss << j.get<double>();
    return ss.str();
  }
  return j.dump();
}

}  // namespace

ReportResult write_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  ReportResult res;
  fs::create_directories(out_dir);

  struct Plot {
    const char* source;
    const char* target;
    std::ostringstream data;
    bool header = false;
  };
  std::vector<Plot> plots;
  for (auto [s, t] : {std::pair{"coverage.csv", "coverage.csv"}, {"importance.csv", "importance.csv"},
                      {"forgetting.csv", "forgetting.csv"}, {"curve.csv", "training_curves.csv"}}) {
    plots.push_back({s, t, {}, false});
  }

  std::ostringstream summary;
  summary << "run,status,vocab_size,total_params,pehl,peak_lr,rounds,final_train_loss,eval_metric,eval_value,"
             "cloze_accuracy\n";
  std::ostringstream sweep;
  sweep << "run,peak_lr,final_train_loss,eval_value\n";
  std::vector<std::vector<std::string>> table;

  for (const auto& dir : run_dirs) {
    const std::string run = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    const auto mj = read_json(dir / kManifestFile);
    if (!mj) {
      res.gaps.push_back(run + ": no manifest");
      continue;
    }
    ++res.runs_found;
    const auto m = RunManifest::from_json(*mj);
    std::string status = m.dry_run ? "dry-run"
                         : m.failure ? "failed at " + m.failed_stage.value_or("?")
                         : m.completed.size() == m.planned.size() ? "complete"
                                                                   : "partial";
    const auto tok = read_json(dir / "tokenizer.json");
    const auto arch = read_json(dir / "arch.json");
    const auto train = read_json(dir / "training.json");
    const auto eval = read_json(dir / "eval.json");
    for (auto [name, present] : {std::pair{"tokenizer.json", tok.has_value()}, {"arch.json", arch.has_value()},
                                 {"training.json", train.has_value()}, {"eval.json", eval.has_value()}}) {
      if (!present) res.gaps.push_back(run + ": missing " + name);
    }
    json vocab = tok ? (*tok)["size"] : json();
    json params = arch ? (*arch)["report"]["total_params"] : json();
    json pehl = arch ? (*arch)["report"]["pehl"] : json();
    json lr = train ? (*train)["peak_lr"] : json();
    json rounds = train ? json((*train)["rounds"].size()) : json();
    json loss = train ? (*train)["final_train_loss"] : json();
    json metric = eval ? (*eval)["perplexity"]["metric"] : json();
    json value = eval ? (*eval)["perplexity"]["value"] : json();
    json cloze = eval && eval->contains("cloze") ? (*eval)["cloze"]["value"] : json();
    std::vector<std::string> row{run, status, num(vocab), num(params), num(pehl), num(lr), num(rounds), num(loss),
                                 metric.is_string() ? metric.get<std::string>() : "", num(value), num(cloze)};
    for (std::size_t i = 0; i < row.size(); ++i) summary << (i ? "," : "") << row[i];
    summary << '\n';
    if (train) sweep << run << ',' << num(lr) << ',' << num(loss) << ',' << num(value) << '\n';
    table.push_back(row);
    for (auto& p : plots)
      if (!append_csv(p.data, dir / p.source, run, p.header)) res.gaps.push_back(run + ": no " + p.source);
  }

  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out_dir / name, text);
    res.written.push_back(out_dir / name);
  };
  std::ostringstream md;
  md << "# Run report\n\n";
  if (res.runs_found == 0) {
    md << "No runs found.\n";
  } else {
    emit("summary.csv", summary.str());
    emit("lr_sweep.csv", sweep.str());
    for (auto& p : plots)
      if (p.header) emit(p.target, p.data.str());
    md << "| run | status | vocab | params | PEHL | peak lr | rounds | train loss | eval | cloze |\n";
    md << "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : table) {
      md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " | " << r[3] << " | " << r[4] << " | " << r[5] << " | "
         << r[6] << " | " << r[7] << " | " << (r[9].empty() ? "" : r[8] + " " + r[9]) << " | " << r[10] << " |\n";
    }
  }
  if (!res.gaps.empty()) {
    md << "\n## Gaps\n\n";
    for (const auto& g : res.gaps) md << "- " << g << '\n';
  }
  emit("report.md", md.str());
  return res;
}

}  // namespace tlm
