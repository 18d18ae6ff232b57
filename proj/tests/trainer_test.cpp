#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "promptblend/trainer.hpp"
#include "test_util.hpp"

namespace pb = promptblend;

namespace {

struct Setup {
  std::vector<pb::QAExample> train;
  std::vector<pb::QAExample> eval;
  pb::FrozenLM lm;
  pb::PromptBasis basis;
};

// Small cue-pretrained model shared by the tests in this file.
const Setup& setup() {
  static const Setup s = [] {
    auto data = pb::make_fixture(31, 30);
    std::vector<pb::QAExample> train(data.begin(), data.begin() + 23);
    std::vector<pb::QAExample> eval(data.begin() + 23, data.end());
    const auto prompts = pb::default_basis_prompts();
    const auto corpus = pb::make_pretrain_corpus(train, prompts, 1);
    std::vector<std::string> texts(prompts);
    for (const auto& p : corpus) {
      texts.push_back(p.input);
      texts.push_back(p.target);
    }
    pb::PretrainOptions opts;
    opts.epochs = 2;
    pb::LMConfig lm_cfg = pb::testing::tiny_config(0, 16);
    lm_cfg.max_positions = 128;
    pb::FrozenLM lm = pb::pretrain(corpus, pb::Vocab::build(texts), lm_cfg, opts, 1);
    pb::PromptBasis basis = pb::build_basis(prompts, lm, 20);
    return Setup{train, eval, std::move(lm), std::move(basis)};
  }();
  return s;
}

pb::TrainConfig small_config(std::uint64_t seed) {
  pb::TrainConfig c;
  c.epochs = 3;
  c.batch_size = 10;
  c.seed = seed;
  c.lr = 5e-3;
  c.hidden1 = 16;
  c.hidden2 = 16;
  return c;
}

pb::WeightPredictor predictor_for(const pb::TrainConfig& c) {
  return pb::WeightPredictor::init({16, c.hidden1, c.hidden2, 7, c.dropout}, c.seed);
}

}  // namespace

TEST(TrainConfig, Validation) {
  pb::TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), pb::ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), pb::ConfigError);
  c = {};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), pb::ConfigError);
  c = {};
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), pb::ConfigError);
}

TEST(PretrainCorpus, StylesAndCues) {
  const auto set = pb::make_fixture(2, 40);
  const auto prompts = pb::default_basis_prompts();
  const auto corpus = pb::make_pretrain_corpus(set, prompts, 5);
  ASSERT_EQ(corpus.size(), 80u);
  EXPECT_EQ(pb::make_pretrain_corpus(set, prompts, 5).size(), corpus.size());
  std::size_t cued = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& ex = set[i % set.size()];
    const auto& pair = corpus[i];
    EXPECT_EQ(pair.input, pb::format_input(ex));
    if (!pair.prefix.empty()) {
      ++cued;
      const auto k = static_cast<std::size_t>(
          std::find(prompts.begin(), prompts.end(), pair.prefix) - prompts.begin());
      ASSERT_LT(k, prompts.size());
      EXPECT_EQ(pair.target, pb::render_answer(ex, pb::cued_style(k)));
    }
  }
  EXPECT_GT(cued, 20u);
  EXPECT_LT(cued, 60u);
  for (const auto& p : pb::make_pretrain_corpus(set, prompts, 5, {.copies = 1, .cue_rate = 0.0})) {
    EXPECT_TRUE(p.prefix.empty());
  }
  EXPECT_THROW(pb::make_pretrain_corpus(set, prompts, 5, {.copies = 1, .cue_rate = 1.5}),
               pb::ConfigError);
}

TEST(AnswerStyle, Renderings) {
  pb::QAExample ex{"e", "q", {{"A", "x"}, {"B", "surface area"}, {"C", "z"}}, "B"};
  EXPECT_EQ(pb::render_answer(ex, pb::AnswerStyle::kLetterText), "B: surface area");
  EXPECT_EQ(pb::render_answer(ex, pb::AnswerStyle::kText), "surface area");
  EXPECT_EQ(pb::render_answer(ex, pb::AnswerStyle::kLetter), "B");
}

TEST(Trainer, ZeroFinalLayerMatchesControl) {
  const auto& s = setup();
  const auto cfg = small_config(1);
  const auto p = predictor_for(cfg);
  const double control = pb::control_eval(s.lm, s.eval);
  const auto prompted = pb::prompted_eval(s.lm, p, s.basis, s.eval);
  EXPECT_EQ(prompted.mean_loss, control);
}

TEST(Trainer, RecordsStepsKeepsShortBatchAndLeavesModelUntouched) {
  const auto& s = setup();
  const auto cfg = small_config(2);
  auto p = predictor_for(cfg);
  const auto rec = pb::train(s.lm, p, s.basis, s.train, s.eval, cfg);
  ASSERT_EQ(rec.steps.size(), 9u);  // 23 examples -> 10, 10, 3 per epoch
  EXPECT_EQ(rec.steps[2].batch_size, 3u);
  EXPECT_EQ(rec.steps[2].epoch, 1u);
  EXPECT_EQ(rec.steps[8].step, 9u);
  EXPECT_EQ(rec.epoch_means.size(), 3u);
  EXPECT_EQ(rec.lm_hash_before, rec.lm_hash_after);
  EXPECT_EQ(rec.lm_hash_after, s.lm.parameter_hash());
  EXPECT_EQ(rec.examples.size(), s.eval.size());
  EXPECT_EQ(rec.train_size, s.train.size());
  bool moved = false;
  for (double x : p.layer(2).weight.data()) {
    moved |= x != 0.0;
  }
  EXPECT_TRUE(moved);
}

TEST(Trainer, DeterministicGivenSeed) {
  const auto& s = setup();
  const auto cfg = small_config(3);
  auto p1 = predictor_for(cfg);
  auto p2 = predictor_for(cfg);
  const auto a = pb::train(s.lm, p1, s.basis, s.train, s.eval, cfg);
  const auto b = pb::train(s.lm, p2, s.basis, s.train, s.eval, cfg);
  EXPECT_EQ(a.steps, b.steps);
  EXPECT_EQ(a.examples, b.examples);
  auto different = cfg;
  different.seed = 4;
  auto p3 = predictor_for(different);
  EXPECT_NE(pb::train(s.lm, p3, s.basis, s.train, s.eval, different).steps, a.steps);
}

TEST(Trainer, TrainingLossDecreases) {
  const auto& s = setup();
  auto cfg = small_config(5);
  cfg.epochs = 6;
  cfg.batch_size = s.train.size();
  cfg.dropout = 0.0;
  auto p = predictor_for(cfg);
  const auto rec = pb::train(s.lm, p, s.basis, s.train, s.eval, cfg);
  EXPECT_LT(rec.epoch_means.back(), rec.epoch_means.front());
}

TEST(Trainer, EvalCurveEveryNSteps) {
  const auto& s = setup();
  auto cfg = small_config(6);
  cfg.eval_every = 4;
  auto p = predictor_for(cfg);
  const auto rec = pb::train(s.lm, p, s.basis, s.train, s.eval, cfg);
  ASSERT_EQ(rec.eval_curve.size(), 2u);
  EXPECT_EQ(rec.eval_curve[0].step, 4u);
  EXPECT_EQ(rec.eval_curve[1].step, 8u);
}

TEST(Trainer, Errors) {
  const auto& s = setup();
  const auto cfg = small_config(7);
  auto p = predictor_for(cfg);
  pb::FrozenLM thawed = pb::FrozenLM::from_checkpoint(s.lm.to_checkpoint());
  thawed.unfreeze();
  EXPECT_THROW(pb::train(thawed, p, s.basis, s.train, s.eval, cfg), pb::ContractError);
  EXPECT_THROW(pb::train(s.lm, p, s.basis, {}, s.eval, cfg), pb::ValidationError);
  EXPECT_THROW(pb::train(s.lm, p, s.basis, s.train, {}, cfg), pb::ValidationError);
  auto wrong = pb::WeightPredictor::init({16, 16, 16, 3, 0.1}, 1);
  EXPECT_THROW(pb::train(s.lm, wrong, s.basis, s.train, s.eval, cfg), pb::ShapeError);
}

TEST(Trainer, NonFiniteLossAbortsWithStep) {
  const auto& s = setup();
  const auto cfg = small_config(8);
  auto p = predictor_for(cfg);
  p.layer(2).bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    pb::train(s.lm, p, s.basis, s.train, s.eval, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const pb::DivergenceError& e) {
    EXPECT_EQ(e.step(), 1u);
  }
}

TEST(Stability, PopulationStdOfDifferences) {
  const std::vector<double> means = {1.0, 2.0, 4.0, 7.0};
  EXPECT_NEAR(pb::stability_metric(means), std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_EQ(pb::stability_metric(std::vector<double>{3.0, 2.0, 1.0}), 0.0);
  EXPECT_THROW(pb::stability_metric(std::vector<double>{1.0}), pb::ValidationError);
}
