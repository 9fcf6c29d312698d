#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "tlm/core/error.hpp"
#include "tlm/core/kernels.hpp"
#include "tlm/eval/evaluator.hpp"
#include "tlm/init/initializer.hpp"
#include "tlm/train/trainer.hpp"

using namespace tlm;

namespace {

ModelConfig small(std::size_t V = 256) {
  ModelConfig c;
  c.vocab_size = V;
  c.width = 16;
  c.depth = 1;
  c.n_heads = 4;
  c.head_dim = 4;
  c.kv_groups = 4;
  c.ffn_hidden = 8;
  return c;
}

int succ(int t) { return (t + 1) % 16; }

// Blocks contribute nothing; token t < 16 embeds as e_t and the head puts `scale` on succ(t).
ParamStore successor_model(const ModelConfig& c, double scale) {
  auto p = ParamStore::zeros_like(c);
  auto& embed = p.get("embed");
  auto& head = p.get("head");
  for (int t = 0; t < 16; ++t) {
    embed.at(static_cast<std::size_t>(t), static_cast<std::size_t>(t)) = 1.0;
    head.at(static_cast<std::size_t>(t), static_cast<std::size_t>(succ(t))) = scale;
  }
  return p;
}

// Logit of succ(t) after the final norm: the one-hot row normalizes to 1 / sqrt(1/d + eps).
double hot_logit(double scale) { return scale / std::sqrt(1.0 / 16.0 + kernels::kNormEps); }

}  // namespace

TEST_CASE("perplexity of a uniform model is V") {
  const auto c = small();
  auto p = initialize(c, {InitVariant::Constant, 0.1, 1});
  p.set("head", Tensor(p.get("head").shape(), 0.0));
  std::vector<Batch> b{{2, 3, {1, 2, 3, 4, 5, 6, 7, 8}}};
  CHECK(perplexity(c, p, b) == doctest::Approx(256.0).epsilon(1e-12));
}

TEST_CASE("perplexity of a near one-hot model is 1") {
  const auto c = small();
  const auto p = successor_model(c, 100.0);
  std::vector<Batch> b{{1, 4, {3, 4, 5, 6, 7}}};
  CHECK(perplexity(c, p, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("perplexity two-token hand example") {
  const auto c = small();
  const auto p = successor_model(c, 0.5);
  // inputs 3, 4; targets 4 (predicted) and 9 (not)
  std::vector<Batch> b{{1, 2, {3, 4, 9}}};
  const double a = hot_logit(0.5);
  const double z = std::log(std::exp(a) + 255.0);
  const double hand = std::exp(((z - a) + z) / 2.0);
  CHECK(perplexity(c, p, b) == doctest::Approx(hand).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity(c, p, std::vector<Batch>{}), InvalidArgument);
}

TEST_CASE("perplexity matches exp of the trainer's mean loss") {
  const auto c = small(300);
  const auto p = initialize(c, {InitVariant::Constant, 0.2, 4});
  std::mt19937_64 rng(3);
  std::vector<int> stream(3 * 4 * 6 + 1);
  for (auto& t : stream) t = static_cast<int>(rng() % 300);
  const auto batches = make_batches(stream, 4, 6);
  REQUIRE(batches.size() == 3);
  const double ppl = perplexity(c, p, batches);
  CHECK(std::abs(ppl - std::exp(mean_loss(c, p, batches))) <= 1e-10 * ppl);
}

TEST_CASE("cloze hand example and forced choice") {
  const auto c = small();
  const auto p = successor_model(c, 0.5);
  const double a = hot_logit(0.5);
  const double z = std::log(std::exp(a) + 255.0);
  CHECK(continuation_log_likelihood(c, p, std::vector<int>{2}, std::vector<int>{3}) == doctest::Approx(a - z));
  CHECK(continuation_log_likelihood(c, p, std::vector<int>{2}, std::vector<int>{7}) == doctest::Approx(-z));
  // two tokens: 3 then 4 both predicted
  CHECK(continuation_log_likelihood(c, p, std::vector<int>{2}, std::vector<int>{3, 4}) == doctest::Approx(2 * (a - z)));

  std::vector<ClozeItem> items{{{2}, {{7}, {3}}, 1}, {{5}, {{6, 7}, {6, 9}}, 0}};
  const auto rep = cloze_accuracy(c, successor_model(c, 100.0), items);
  CHECK(rep.value == 1.0);
  CHECK(rep.count == 2);
  REQUIRE(rep.rows.size() == 2);

  const auto hand = cloze_accuracy(c, p, items);
  CHECK(hand.rows[0].scores[0] == doctest::Approx(-z));
  CHECK(hand.rows[0].scores[1] == doctest::Approx(a - z));
  CHECK(hand.rows[1].scores[1] == doctest::Approx(((a - z) + -z) / 2.0));
}

TEST_CASE("candidate choice ties and affine invariance") {
  std::vector<double> s{1.0, 3.0, 3.0, -2.0};
  CHECK(pick_candidate(s) == 1);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-5, 5), pos(0.01, 10);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(5);
    for (auto& v : x) v = u(rng);
    const double k = pos(rng), b = u(rng);
    auto y = x;
    for (auto& v : y) v = k * v + b;
    CHECK(pick_candidate(x) == pick_candidate(y));
  }
  CHECK_THROWS_AS(pick_candidate(std::vector<double>{}), InvalidArgument);
}

TEST_CASE("random model scores near chance") {
  const auto c = small(260);
  const auto p = initialize(c, {InitVariant::Constant, 0.3, 21});
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> tok(0, 259);
  const std::size_t k = 4, n = 400;
  std::vector<ClozeItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    ClozeItem it;
    it.context = {tok(rng), tok(rng), tok(rng)};
    for (std::size_t j = 0; j < k; ++j) it.candidates.push_back({tok(rng), tok(rng)});
    it.gold = rng() % k;
    items.push_back(it);
  }
  const double acc = cloze_accuracy(c, p, items).value;
  const double se = std::sqrt(0.25 * 0.75 / static_cast<double>(n));
  CHECK(std::abs(acc - 0.25) <= 3 * se);
}

TEST_CASE("cloze item validation and file round trip") {
  const auto c = small();
  const auto p = successor_model(c, 1.0);
  std::vector<ClozeItem> bad_gold{{{1}, {{2}, {3}}, 2}};
  CHECK_THROWS_AS(cloze_accuracy(c, p, bad_gold), InvalidArgument);
  std::vector<ClozeItem> one{{{1}, {{2}}, 0}};
  CHECK_THROWS_AS(cloze_accuracy(c, p, one), InvalidArgument);
  std::vector<ClozeItem> oob{{{1}, {{2}, {999}}, 0}};
  CHECK_THROWS_AS(cloze_accuracy(c, p, oob), IndexError);
  CHECK_THROWS_AS(cloze_accuracy(c, p, std::vector<ClozeItem>{}), InvalidArgument);

  std::vector<ClozeItem> items{{{1, 2}, {{3}, {4, 5}}, 1}, {{7}, {{8}, {9}, {10}}, 2}};
  const auto path = std::filesystem::temp_directory_path() / "tlm_cloze.jsonl";
  save_cloze_items(path, items);
  const auto back = load_cloze_items(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].context == items[0].context);
  CHECK(back[1].candidates == items[1].candidates);
  CHECK(back[1].gold == 2);

  const auto rep = cloze_accuracy(c, p, back);
  CHECK(rep.value >= 0.0);
  CHECK(rep.value <= 1.0);
  write_report_csv(path, rep);
  write_report_json(path.string() + ".json", rep);
  CHECK(report_summary(rep)["metric"] == "cloze_accuracy");
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
