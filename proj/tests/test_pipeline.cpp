#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tlm/core/error.hpp"
#include "tlm/model/checkpoint.hpp"
#include "tlm/pipeline/pipeline.hpp"
#include "tlm/testing/corpus.hpp"

using namespace tlm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workspace {
  fs::path root;

  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("tlm_pipeline_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
    write("train.txt", testing::zipf_corpus(3000, 120, 1.1, 5));
    write("eval.txt", testing::zipf_corpus(600, 120, 1.1, 6));
  }
  ~Workspace() { fs::remove_all(root); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(root / name) << text; }

  fs::path config(const json& j, const std::string& name = "config.json") const {
    write(name, j.dump(2));
    return root / name;
  }
};

json small_config() {
  return {{"seed", 3},
          {"corpus", "train.txt"},
          {"tokenizer", {{"train_size", 300}}},
          {"architecture", {{"fixed", {{"width", 16}, {"depth", 4}, {"n_heads", 2}, {"ffn_hidden", 24}}}}},
          {"init", {{"scheme", "constant"}}},
          {"training", {{"rows", 4}, {"seq_len", 16}, {"total_tokens", 1280}, {"peak_lr", 0.01}, {"parts", 4}}},
          {"evaluation", {{"corpus", "eval.txt"}, {"layer_skip", true}}}};
}

std::string message_of(const fs::path& config) {
  try {
    load_pipeline_config(config);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

int tlmkit(const std::string& args) {
  const std::string cmd = std::string(TLMKIT_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("minimal config resolves defaults") {
  Workspace ws("defaults");
  ws.write("parent.ckpt", "x");
  json j{{"corpus", "train.txt"},
         {"architecture", {{"fixed", {{"width", 16}, {"depth", 2}, {"n_heads", 2}}}}},
         {"inheritance", {{"parent_checkpoint", "parent.ckpt"}}}};
  const auto c = load_pipeline_config(ws.config(j));
  CHECK(c.training.plan.parts == 8);
  CHECK(c.training.plan.optimizer.weight_decay == 0.1);
  CHECK(c.inheritance->front == 2);
  CHECK(c.inheritance->back == 2);
  CHECK(c.architecture.fixed->head_dim == 8);
  CHECK(c.architecture.fixed->kv_groups == 2);
  CHECK(c.output_dir == fs::weakly_canonical(ws.root / "out"));
  const auto r = c.resolved();
  CHECK(r["training"]["parts"] == 8);
  CHECK(r["inheritance"]["front"] == 2);
}

TEST_CASE("validation errors name the field") {
  Workspace ws("errors");
  ws.write("parent.ckpt", "x");

  auto both = small_config();
  both["inheritance"] = {{"parent_checkpoint", "parent.ckpt"}};
  auto msg = message_of(ws.config(both));
  CHECK(msg.find("inheritance") != std::string::npos);
  CHECK(msg.find("init") != std::string::npos);

  auto neither = small_config();
  neither.erase("init");
  CHECK(message_of(ws.config(neither)).find("init") != std::string::npos);

  // 2·V·d alone exceeds the budget for any width
  auto tight = small_config();
  tight["architecture"] = {{"search", {{"budget", 1000}, {"depths", {2, 4}}}}};
  msg = message_of(ws.config(tight));
  CHECK(msg.find("architecture.search.budget") != std::string::npos);
  CHECK(msg.find("search_configs") != std::string::npos);

  auto unknown = small_config();
  unknown["training"]["learning_rate"] = 0.1;
  CHECK(message_of(ws.config(unknown)).find("training.learning_rate: unknown key") != std::string::npos);

  auto missing = small_config();
  missing["corpus"] = "nope.txt";
  CHECK(message_of(ws.config(missing)).find("corpus: file not found") != std::string::npos);

  auto bad = small_config();
  bad["training"]["rows"] = 0;
  CHECK(message_of(ws.config(bad)).find("training.rows") != std::string::npos);

  auto lr = small_config();
  lr["training"]["scaling"] = {{"base_batch", 64}, {"base_lr", 0.01}, {"rate", 0.5}};
  CHECK(message_of(ws.config(lr)).find("training.peak_lr") != std::string::npos);

  CHECK(message_of(ws.root / "absent.json").find("cannot read") != std::string::npos);
}

TEST_CASE("scaling rule sets the peak learning rate") {
  Workspace ws("scaling");
  auto j = small_config();
  j["training"].erase("peak_lr");
  j["training"]["scaling"] = {{"base_batch", 16}, {"base_lr", 0.01}, {"rate", 0.5}};
  const auto c = load_pipeline_config(ws.config(j));
  CHECK(c.training.plan.peak_lr == doctest::Approx(0.02).epsilon(1e-15));  // 64 tokens per batch
}

TEST_CASE("output directory can be overridden from the environment") {
  Workspace ws("env");
  const auto path = ws.config(small_config());
  ::setenv(kOutputDirEnv, (ws.root / "elsewhere").c_str(), 1);
  const auto c = load_pipeline_config(path);
  ::unsetenv(kOutputDirEnv);
  CHECK(c.output_dir == fs::weakly_canonical(ws.root / "elsewhere"));
}

TEST_CASE("dry run only plans") {
  Workspace ws("dry");
  const auto c = load_pipeline_config(ws.config(small_config()));
  const auto m = run_pipeline(c, true);
  CHECK(m.dry_run);
  CHECK(m.planned == std::vector<std::string>{"tokenize", "search-arch", "surgery", "train", "eval"});
  CHECK(m.completed.empty());
  CHECK(m.artifacts.empty());
  CHECK(fs::exists(c.output_dir / kManifestFile));
  CHECK_FALSE(fs::exists(c.output_dir / "vocab.txt"));
  CHECK(load_manifest(c.output_dir).planned == m.planned);
}

TEST_CASE("end-to-end run is deterministic and emits the documented artifacts") {
  Workspace ws("e2e");
  auto j = small_config();
  j["output_dir"] = "a";
  const auto ca = load_pipeline_config(ws.config(j, "a.json"));
  j["output_dir"] = "b";
  const auto cb = load_pipeline_config(ws.config(j, "b.json"));

  const auto ma = run_pipeline(ca);
  const auto mb = run_pipeline(cb);
  CHECK(ma.completed.size() == 5);
  CHECK_FALSE(ma.failure);
  CHECK(ma.artifacts == mb.artifacts);
  CHECK(ma.inputs == mb.inputs);

  // every listed file exists with the recorded hash, and nothing else was emitted
  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(ca.output_dir))
    if (e.is_regular_file() && e.path().filename() != kManifestFile) ++on_disk;
  CHECK(on_disk == ma.artifacts.size());
  for (const auto& a : ma.artifacts) CHECK(sha256_hex(ca.output_dir / a.path) == a.sha256);
  CHECK(load_manifest(ca.output_dir).artifacts == ma.artifacts);

  // importance: L + (L-1) + (L-2) rows for windows 1..3 on a 4-layer model
  CHECK(lines(ca.output_dir / "importance.csv").size() == 1 + 4 + 3 + 2);
  const auto cov = lines(ca.output_dir / "coverage.csv");
  CHECK(cov.front() == "k,cumulative_fraction");
  CHECK(cov.back().substr(cov.back().find(',') + 1) == "1");
  // four parts per round, one round
  CHECK(lines(ca.output_dir / "forgetting.csv").size() == 1 + 4);
  CHECK(fs::exists(ca.output_dir / "round1.ckpt"));

  // a stage re-run in isolation reproduces its outputs
  const auto before = sha256_hex(ca.output_dir / "eval.json");
  const auto m = run_stage(ca, Stage::Eval);
  CHECK(sha256_hex(ca.output_dir / "eval.json") == before);
  CHECK(m.artifacts == ma.artifacts);

  const auto rep = write_report({ca.output_dir, cb.output_dir}, ws.root / "report");
  CHECK(rep.runs_found == 2);
  CHECK(lines(ws.root / "report" / "summary.csv").size() == 3);
  CHECK(lines(ws.root / "report" / "importance.csv").size() == 1 + 2 * 9);
  CHECK(lines(ws.root / "report" / "coverage.csv").size() == 1 + 2 * (cov.size() - 1));
  CHECK(fs::exists(ws.root / "report" / "training_curves.csv"));
  CHECK(fs::exists(ws.root / "report" / "report.md"));

  SUBCASE("inheritance from the trained run") {
    auto child = small_config();
    child.erase("init");
    child["output_dir"] = "child";
    child["architecture"]["fixed"] = {{"width", 16}, {"depth", 3}, {"n_heads", 2}, {"ffn_hidden", 16}};
    child["inheritance"] = {{"parent_checkpoint", (ca.output_dir / "model.ckpt").string()},
                            {"parent_vocab", (ca.output_dir / "vocab.txt").string()},
                            {"front", 1},
                            {"back", 1},
                            {"gqa_groups", 1}};
    const auto cc = load_pipeline_config(ws.config(child, "child.json"));
    const auto mc = run_pipeline(cc);
    CHECK(mc.completed.size() == 5);
    const auto ck = load_checkpoint(cc.output_dir / "init.ckpt");
    CHECK(ck.config.kv_groups == 1);
    CHECK(ck.config.depth == 3);
    const auto plan = load_plan(cc.output_dir / "plan.json");
    CHECK(plan.kept_layers.size() == 3);
    CHECK(plan.kept_layers.front() == 0);
    CHECK(plan.kept_layers.back() == 3);
    CHECK(lines(cc.output_dir / "parent_importance.csv").size() == 1 + 4);
  }

  SUBCASE("narrower child with learned masks") {
    auto child = small_config();
    child.erase("init");
    child["output_dir"] = "narrow";
    child["architecture"]["fixed"] = {{"width", 8}, {"depth", 4}, {"n_heads", 1}, {"ffn_hidden", 12}};
    child["inheritance"] = {{"parent_checkpoint", (ca.output_dir / "model.ckpt").string()},
                            {"criterion", "learned"},
                            {"mask", {{"steps", 20}}}};
    const auto cc = load_pipeline_config(ws.config(child, "narrow.json"));
    const auto mc = run_pipeline(cc);
    CHECK(mc.completed.size() == 5);
    const auto plan = load_plan(cc.output_dir / "plan.json");
    CHECK(plan.width.size() == 8);
    CHECK(plan.heads.front().size() == 1);
    CHECK(plan.ffn.front().size() == 12);
    CHECK_FALSE(fs::exists(cc.output_dir / "parent_importance.csv"));
  }
}

TEST_CASE("a failing stage is recorded in the manifest") {
  Workspace ws("fail");
  auto j = small_config();
  j["training"]["seq_len"] = 100000;
  j["training"].erase("total_tokens");
  const auto c = load_pipeline_config(ws.config(j));
  CHECK_THROWS_AS(run_pipeline(c), InvalidArgument);
  const auto m = load_manifest(c.output_dir);
  CHECK(m.completed == std::vector<std::string>{"tokenize", "search-arch", "surgery"});
  REQUIRE(m.failed_stage);
  CHECK(*m.failed_stage == "train");
  CHECK(m.failure->find("batch") != std::string::npos);

  // a stage run out of order names what is missing
  auto k = small_config();
  k["output_dir"] = "fresh";
  const auto c2 = load_pipeline_config(ws.config(k, "fresh.json"));
  try {
    run_stage(c2, Stage::Train);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("init.ckpt") != std::string::npos);
  }
}

TEST_CASE("report on an empty directory") {
  Workspace ws("empty_report");
  fs::create_directories(ws.root / "nothing");
  const auto r = write_report({ws.root / "nothing"}, ws.root / "rep");
  CHECK(r.runs_found == 0);
  CHECK(r.gaps.size() == 1);
  CHECK(fs::exists(ws.root / "rep" / "report.md"));
  CHECK_FALSE(fs::exists(ws.root / "rep" / "summary.csv"));
}

TEST_CASE("cli exit codes") {
  Workspace ws("cli");
  const auto good = ws.config(small_config());
  CHECK(tlmkit("validate " + good.string()) == 0);
  auto bad = small_config();
  bad["typo"] = 1;
  CHECK(tlmkit("validate " + ws.config(bad, "bad.json").string()) == 1);
  CHECK(tlmkit("run --dry-run " + good.string()) == 0);
  fs::create_directories(ws.root / "empty");
  CHECK(tlmkit("report " + (ws.root / "empty").string()) == 2);
  CHECK(tlmkit("tokenize " + good.string()) == 0);
  CHECK(fs::exists(ws.root / "out" / "vocab.txt"));
  CHECK(tlmkit("train " + good.string()) == 2);  // no init.ckpt yet
}

TEST_CASE("sha256 of known inputs") {
  CHECK(sha256_hex_of("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex_of("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
