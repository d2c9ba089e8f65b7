#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "avglm/corpus.hpp"
#include "avglm/trainer.hpp"
#include "test_util.hpp"

using namespace avglm;
using Catch::Approx;

namespace {

TrainConfig ptb_schedule() {
  TrainConfig cfg;
  cfg.initial_lr = 1.0;
  cfg.decay_after_epoch = 12;
  cfg.decay_factor = 0.5;
  return cfg;
}

TrainConfig wiki_schedule() {
  TrainConfig cfg;
  cfg.initial_lr = 1.0;
  cfg.decay_after_epoch = 14;
  cfg.decay_factor = 1.0 / 1.15;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// Four fixed sentence patterns, each determined by its first token, repeated
// so every row of the corpus is memorizable.
std::vector<std::string> toy_corpus(std::size_t sentences) {
  const std::vector<std::string> patterns{
      "a b c d e",
      "f g h i j",
      "k l m n o",
      "p q r s t",
  };
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < sentences; ++i) lines.push_back(patterns[i % patterns.size()]);
  return lines;
}

}  // namespace

TEST_CASE("lr_at_epoch schedules") {
  auto ptb = ptb_schedule();
  CHECK(lr_at_epoch(ptb, 1) == 1.0);
  CHECK(lr_at_epoch(ptb, 12) == 1.0);
  CHECK(lr_at_epoch(ptb, 13) == 0.5);
  CHECK(lr_at_epoch(ptb, 14) == 0.25);
  CHECK(lr_at_epoch(ptb, 15) == 0.125);

  auto wiki = wiki_schedule();
  CHECK(lr_at_epoch(wiki, 14) == 1.0);
  CHECK(lr_at_epoch(wiki, 15) == Approx(0.8695652173913044).epsilon(1e-9));

  SECTION("non-increasing in epoch") {
    for (const auto& cfg : {ptb, wiki}) {
      double prev = lr_at_epoch(cfg, 1);
      for (std::size_t e = 2; e <= 100; ++e) {
        const double lr = lr_at_epoch(cfg, e);
        REQUIRE(lr <= prev);
        prev = lr;
      }
    }
  }

  SECTION("epochs are numbered from 1") {
    REQUIRE_THROWS_AS(lr_at_epoch(ptb, 0), ContractError);
  }
}

TEST_CASE("clip_gradients") {
  auto make_params = [](std::vector<double> grads) {
    auto t = Tensor<double>::zeros({grads.size()}, true);
    t.grad() = grads;
    return std::vector<NamedTensor<double>>{{"p", t}};
  };

  SECTION("norm 10 is scaled by 0.5") {
    auto params = make_params({6.0, 8.0});
    const double scale = clip_gradients(params, 5.0);
    CHECK(scale == Approx(0.5));
    CHECK(params[0].tensor.grad()[0] == Approx(3.0));
    CHECK(params[0].tensor.grad()[1] == Approx(4.0));
  }

  SECTION("norm under the threshold is untouched") {
    auto params = make_params({3.0, 0.0});
    CHECK(clip_gradients(params, 5.0) == 1.0);
    CHECK(params[0].tensor.grad()[0] == 3.0);
  }

  SECTION("zero gradients: no-op, no division by zero") {
    auto params = make_params({0.0, 0.0});
    CHECK(clip_gradients(params, 5.0) == 1.0);
  }

  SECTION("adversarial scale still lands under the bound") {
    auto params = make_params({3e12, -4e12, 1e11});
    clip_gradients(params, 5.0);
    double sq = 0;
    for (double g : params[0].tensor.grad()) sq += g * g;
    REQUIRE(std::sqrt(sq) <= 5.0 + 1e-6);
  }

  SECTION("non-finite norm aborts") {
    auto params = make_params({std::numeric_limits<double>::infinity()});
    REQUIRE_THROWS_AS(clip_gradients(params, 5.0), DivergenceError);
  }
}

TEST_CASE("sgd_step") {
  auto t = Tensor<double>::from({1}, {1.0}, true);
  std::vector<NamedTensor<double>> params{{"p", t}};

  SECTION("definition") {
    t.grad()[0] = 0.2;
    sgd_step(params, 1.0);
    CHECK(t.data()[0] == Approx(0.8));
    CHECK(t.grad()[0] == 0.0);  // zeroed after the update
  }

  SECTION("lr 0 leaves parameters alone") {
    t.grad()[0] = 0.7;
    sgd_step(params, 0.0);
    CHECK(t.data()[0] == 1.0);
  }

  SECTION("a step at lr then lr/2 equals one step at 1.5 lr for fixed grads") {
    auto a = Tensor<double>::from({1}, {2.0}, true);
    auto b = Tensor<double>::from({1}, {2.0}, true);
    std::vector<NamedTensor<double>> pa{{"p", a}}, pb{{"p", b}};
    a.grad()[0] = 0.4;
    sgd_step(pa, 0.1);
    a.grad()[0] = 0.4;
    sgd_step(pa, 0.05);
    b.grad()[0] = 0.4;
    sgd_step(pb, 0.15);
    REQUIRE(a.data()[0] == Approx(b.data()[0]).margin(1e-15));
  }
}

TEST_CASE("perplexity") {
  SECTION("aggregation helper: probs 0.5 and 0.125 give 4.0") {
    const double nll = -(std::log(0.5) + std::log(0.125));
    REQUIRE(perplexity_from_totals(nll, 2) == Approx(4.0).epsilon(1e-12));
    REQUIRE_THROWS_AS(perplexity_from_totals(0.0, 0), DegenerateBatchError);
  }

  SECTION("all-zero parameters emit the uniform distribution: ppl == vocab") {
    ModelConfig cfg{10, 4, 1, 0.0, 6};
    Rng rng(3);
    auto p = ModelParams<float>::init(cfg, rng);
    for (auto& nt : p.parameters()) {
      Tensor<float> t = nt.tensor;
      for (auto& v : t.data()) v = 0.0f;
    }
    auto vocab = Vocabulary::build({"q w e r t y u"}, 10);
    auto enc = encode_corpus(vocab, {"q w e r t", "y u q w", "e r t"}, 6);
    auto ppl = perplexity(p, batches(enc, 2, false));
    REQUIRE(ppl == Approx(10.0).epsilon(1e-6));
  }

  SECTION("invariant to batch partitioning (token-weighted)") {
    ModelConfig cfg{12, 5, 1, 0.0, 7};
    Rng rng(9);
    auto p = ModelParams<float>::init(cfg, rng);
    auto vocab = Vocabulary::build({"a b c d e f g h i"}, 12);
    std::vector<std::string> lines{"a b c d e f", "g h i a", "b c", "d e f g h i",
                                   "i h g f e d", "c b a", "a a b b"};
    auto enc = encode_corpus(vocab, lines, 7);
    const double p1 = perplexity(p, batches(enc, 2, false));
    const double p2 = perplexity(p, batches(enc, 7, false));
    const double p3 = perplexity(p, batches(enc, 3, false));
    REQUIRE(p1 == Approx(p2).epsilon(1e-6));
    REQUIRE(p1 == Approx(p3).epsilon(1e-6));
  }
}

TEST_CASE("train loop") {
  namespace fs = std::filesystem;
  const std::string dir = "train_test_out";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto lines = toy_corpus(32);
  auto vocab = Vocabulary::build(lines, 64);
  auto enc = encode_corpus(vocab, lines, 7);
  auto train_b = batches(enc, 8, true);
  auto valid_b = batches(enc, 8, false);

  SECTION("memorizes a tiny corpus") {
    ModelConfig mc{vocab.size(), 24, 1, 0.0, 7};
    Rng rng(21);
    auto params = ModelParams<float>::init(mc, rng);
    TrainConfig tc;
    tc.initial_lr = 0.8;
    tc.decay_after_epoch = 1000;
    tc.decay_factor = 1.0;
    tc.max_epochs = 150;
    tc.patience = 150;
    tc.stop_below_valid_ppl = 1.25;
    tc.seed = 21;
    tc.record_wall_time = false;
    auto state = train(params, train_b, valid_b, tc, dir, dir + "/metrics.csv", vocab.hash());
    INFO("best ppl " << state.best_valid_ppl << " after " << state.epochs_run << " epochs");
    REQUIRE(state.best_valid_ppl < 1.3);

    // checkpoint round trip: reloaded model reproduces the best perplexity
    auto loaded = load_checkpoint<float>(state.best_checkpoint_path);
    const double ppl = perplexity(loaded.params, valid_b);
    REQUIRE(ppl == Approx(state.best_valid_ppl).margin(1e-6));
    REQUIRE(loaded.meta.vocab_hash == vocab.hash());
  }

  SECTION("early stop fires after exactly patience epochs without improvement") {
    ModelConfig mc{vocab.size(), 8, 1, 0.0, 7};
    Rng rng(5);
    auto params = ModelParams<float>::init(mc, rng);
    TrainConfig tc;
    tc.initial_lr = 1e-300;  // updates round to nothing: perplexity never moves
    tc.patience = 3;
    tc.max_epochs = 50;
    tc.seed = 5;
    tc.record_wall_time = false;
    auto state = train(params, train_b, valid_b, tc, dir, dir + "/metrics_stop.csv", 0);
    REQUIRE(state.best_epoch == 1);
    REQUIRE(state.epochs_run == 4);  // epoch 1 improves; 2,3,4 do not
    REQUIRE(state.epochs_since_improvement == 3);
  }

  SECTION("same seed, byte-identical metrics (dropout active)") {
    ModelConfig mc{vocab.size(), 12, 2, 0.3, 7};
    TrainConfig tc;
    tc.initial_lr = 0.5;
    tc.max_epochs = 3;
    tc.patience = 10;
    tc.seed = 77;
    tc.record_wall_time = false;
    for (const char* name : {"m1.csv", "m2.csv"}) {
      Rng rng(99);
      auto params = ModelParams<float>::init(mc, rng);
      train(params, train_b, valid_b, tc, dir, dir + "/" + name, 0);
    }
    REQUIRE(slurp(dir + "/m1.csv") == slurp(dir + "/m2.csv"));
    REQUIRE(slurp(dir + "/m1.csv").find("# seed=77") == 0);
  }

  SECTION("non-finite parameters abort with a divergence error") {
    ModelConfig mc{vocab.size(), 8, 1, 0.0, 7};
    Rng rng(5);
    auto params = ModelParams<float>::init(mc, rng);
    params.embedding.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
    TrainConfig tc;
    tc.max_epochs = 2;
    tc.record_wall_time = false;
    REQUIRE_THROWS_AS(train(params, train_b, valid_b, tc, dir, dir + "/metrics_nan.csv", 0),
                      DivergenceError);
  }

  fs::remove_all(dir);
}
