#pragma once

// Training loop for the weight predictor against a frozen model, plus the
// no-prompt control and prompted evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "promptblend/composer.hpp"
#include "promptblend/dataset.hpp"
#include "promptblend/error.hpp"
#include "promptblend/frozen_lm.hpp"
#include "promptblend/optim.hpp"
#include "promptblend/rng.hpp"

namespace promptblend {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 10;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t prompt_length = 20;
  std::size_t eval_every = 0;  // steps between eval-curve points; 0 = final eval only
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 128;

  void validate() const {
    if (epochs < 1) {
      throw ConfigError("epochs must be >= 1");
    }
    if (batch_size < 1) {
      throw ConfigError("batch size must be >= 1");
    }
    if (prompt_length < 1) {
      throw ConfigError("prompt length must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ConfigError("dropout must lie in [0, 1)");
    }
    if (hidden1 == 0 || hidden2 == 0) {
      throw ConfigError("hidden widths must be positive");
    }
    try {
      hyper().validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }

  AdamWHyper hyper() const { return {lr, beta1, beta2, eps, weight_decay}; }

  bool operator==(const TrainConfig&) const = default;
};

struct StepRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based, global
  std::size_t batch_size = 0;
  double loss = 0.0;

  bool operator==(const StepRecord&) const = default;
};

struct EvalPoint {
  std::size_t step = 0;
  double loss = 0.0;

  bool operator==(const EvalPoint&) const = default;
};

struct ExampleResult {
  std::string id;
  std::string question;  // rendered input
  double loss = 0.0;     // prompted
  double control_loss = 0.0;
  std::vector<double> weights;

  bool operator==(const ExampleResult&) const = default;
};

struct RunRecord {
  TrainConfig config;
  PredictorConfig predictor;
  std::string split = "eval";
  std::size_t train_size = 0;
  std::vector<std::string> basis_prompts;
  std::vector<double> basis_gram;
  double orthogonality = 0.0;
  std::vector<StepRecord> steps;
  std::vector<double> epoch_means;
  std::vector<EvalPoint> eval_curve;
  double control_mean = 0.0;
  double prompted_mean = 0.0;
  std::vector<ExampleResult> examples;
  std::uint64_t lm_hash_before = 0;
  std::uint64_t lm_hash_after = 0;
  double wall_clock_seconds = 0.0;
};

/// Answer renderings seen during pretraining. kLetterText is the task format.
enum class AnswerStyle : std::uint8_t { kLetterText = 0, kText = 1, kLetter = 2 };
inline constexpr std::size_t kAnswerStyles = 3;

inline std::string render_answer(const QAExample& ex, AnswerStyle style) {
  switch (style) {
    case AnswerStyle::kText:
      return ex.answer().text;
    case AnswerStyle::kLetter:
      return ex.answer().label;
    case AnswerStyle::kLetterText:
      break;
  }
  return format_target(ex);
}

/// Style cued by basis prompt k.
inline AnswerStyle cued_style(std::size_t k) { return static_cast<AnswerStyle>(k % kAnswerStyles); }

struct PretrainCorpusOptions {
  std::size_t copies = 2;   // samples drawn per example
  double cue_rate = 0.5;    // fraction of samples carrying a basis prompt prefix
};

/// Instruction-style pretraining corpus: each sample renders the answer in one
/// of the AnswerStyle formats. Cued samples carry basis prompt k as prefix and
/// use cued_style(k); uncued samples draw the style uniformly.
inline std::vector<SeqPair> make_pretrain_corpus(const std::vector<QAExample>& examples,
                                                 const std::vector<std::string>& cue_prompts,
                                                 std::uint64_t seed,
                                                 const PretrainCorpusOptions& opts = {}) {
  if (!(opts.cue_rate >= 0.0 && opts.cue_rate <= 1.0)) {
    throw ConfigError("cue_rate must lie in [0, 1]");
  }
  Rng rng(seed ^ 0xC0DE5EEDULL);
  std::vector<SeqPair> corpus;
  corpus.reserve(examples.size() * opts.copies);
  for (std::size_t c = 0; c < opts.copies; ++c) {
    for (const auto& ex : examples) {
      SeqPair pair{format_input(ex), {}, {}};
      AnswerStyle style;
      if (!cue_prompts.empty() && rng.uniform() < opts.cue_rate) {
        const std::size_t k = rng.below(cue_prompts.size());
        pair.prefix = cue_prompts[k];
        style = cued_style(k);
      } else {
        style = static_cast<AnswerStyle>(rng.below(kAnswerStyles));
      }
      pair.target = render_answer(ex, style);
      corpus.push_back(std::move(pair));
    }
  }
  return corpus;
}

struct PreparedExample {
  const QAExample* source = nullptr;
  std::string rendered;
  std::vector<TokenId> input;
  std::vector<TokenId> target;
  Tensor repr;
};

inline std::vector<PreparedExample> prepare_examples(const FrozenLM& lm,
                                                     const std::vector<QAExample>& set) {
  std::vector<PreparedExample> out;
  out.reserve(set.size());
  for (const auto& ex : set) {
    PreparedExample p;
    p.source = &ex;
    p.rendered = format_input(ex);
    p.input = tokenize(p.rendered, lm.vocab());
    p.target = tokenize(format_target(ex), lm.vocab());
    p.repr = question_repr(lm, p.input);
    out.push_back(std::move(p));
  }
  return out;
}

inline Tensor prompted_loss(const FrozenLM& lm, const WeightPredictor& predictor,
                            const PromptBasis& basis, const PreparedExample& ex, bool training,
                            Rng& rng, std::vector<double>* weights_out = nullptr) {
  Tensor w = predictor.forward(ex.repr, training, rng);
  if (weights_out) {
    weights_out->assign(w.data().begin(), w.data().end());
  }
  return lm.loss_with_prompt(combine(basis, w), ex.input, ex.target, basis.live_rows);
}

/// Mean loss with no prompt at all.
inline double control_eval(const FrozenLM& lm, const std::vector<QAExample>& eval_set,
                           std::vector<double>* per_example = nullptr) {
  if (eval_set.empty()) {
    throw ValidationError("control evaluation needs a non-empty eval set");
  }
  if (!lm.frozen()) {
    throw ContractError("control evaluation requires a frozen model");
  }
  double total = 0.0;
  for (const auto& ex : eval_set) {
    const auto in = tokenize(format_input(ex), lm.vocab());
    const auto tgt = tokenize(format_target(ex), lm.vocab());
    const double loss = lm.loss_with_prompt(std::nullopt, in, tgt).item();
    if (per_example) {
      per_example->push_back(loss);
    }
    total += loss;
  }
  return total / static_cast<double>(eval_set.size());
}

struct PromptedEval {
  double mean_loss = 0.0;
  std::vector<double> losses;
  std::vector<WeightVector> weights;
};

inline PromptedEval prompted_eval(const FrozenLM& lm, const WeightPredictor& predictor,
                                  const PromptBasis& basis,
                                  const std::vector<PreparedExample>& eval_set) {
  if (eval_set.empty()) {
    throw ValidationError("prompted evaluation needs a non-empty eval set");
  }
  Rng unused(0);
  PromptedEval out;
  double total = 0.0;
  for (const auto& ex : eval_set) {
    WeightVector w;
    const double loss = prompted_loss(lm, predictor, basis, ex, false, unused, &w.values).item();
    out.losses.push_back(loss);
    out.weights.push_back(std::move(w));
    total += loss;
  }
  out.mean_loss = total / static_cast<double>(eval_set.size());
  return out;
}

inline PromptedEval prompted_eval(const FrozenLM& lm, const WeightPredictor& predictor,
                                  const PromptBasis& basis,
                                  const std::vector<QAExample>& eval_set) {
  if (eval_set.empty()) {
    throw ValidationError("prompted evaluation needs a non-empty eval set");
  }
  return prompted_eval(lm, predictor, basis, prepare_examples(lm, eval_set));
}

/// Trains `predictor` in place. Per batch: pooled question states -> weights
/// (dropout on) -> linear combination -> frozen-model loss -> backward ->
/// AdamW on predictor parameters. Batches follow a seed-derived shuffle each
/// epoch and the last short batch is kept.
inline RunRecord train(const FrozenLM& lm, WeightPredictor& predictor, const PromptBasis& basis,
                       const std::vector<QAExample>& train_set,
                       const std::vector<QAExample>& eval_set, const TrainConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  cfg.validate();
  if (!lm.frozen()) {
    throw ContractError("training requires a frozen language model");
  }
  if (train_set.empty() || eval_set.empty()) {
    throw ValidationError("training needs non-empty train and eval sets");
  }
  if (predictor.config().outputs != basis.size() ||
      predictor.config().input_dim != lm.embed_dim()) {
    throw ShapeError("predictor widths do not match basis size / model width");
  }

  RunRecord rec;
  rec.config = cfg;
  rec.predictor = predictor.config();
  rec.train_size = train_set.size();
  rec.basis_prompts = basis.prompts;
  rec.basis_gram = basis.gram;
  rec.orthogonality = orthogonality_score(basis);
  rec.lm_hash_before = lm.parameter_hash();

  const auto train_items = prepare_examples(lm, train_set);
  const auto eval_items = prepare_examples(lm, eval_set);

  auto params = predictor.parameters();
  AdamW opt(cfg.hyper());
  Rng root(cfg.seed);
  Rng shuffle_rng = root.fork(1);
  Rng dropout_rng = root.fork(2);

  std::vector<std::size_t> order(train_items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double epoch_total = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> losses;
      for (std::size_t i = start; i < end; ++i) {
        losses.push_back(
            prompted_loss(lm, predictor, basis, train_items[order[i]], true, dropout_rng));
      }
      Tensor batch = mean_of(losses);
      ++step;
      if (!std::isfinite(batch.item())) {
        throw DivergenceError(step, "non-finite batch loss");
      }
      batch.backward();
      opt.step(params);
      zero_grads(params);
      rec.steps.push_back({epoch, step, end - start, batch.item()});
      epoch_total += batch.item();
      ++epoch_batches;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        rec.eval_curve.push_back({step, prompted_eval(lm, predictor, basis, eval_items).mean_loss});
      }
    }
    rec.epoch_means.push_back(epoch_total / static_cast<double>(epoch_batches));
  }

  std::vector<double> control_losses;
  rec.control_mean = control_eval(lm, eval_set, &control_losses);
  const PromptedEval final_eval = prompted_eval(lm, predictor, basis, eval_items);
  rec.prompted_mean = final_eval.mean_loss;
  for (std::size_t i = 0; i < eval_items.size(); ++i) {
    rec.examples.push_back({eval_items[i].source->id, eval_items[i].rendered, final_eval.losses[i],
                            control_losses[i], final_eval.weights[i].values});
  }
  rec.lm_hash_after = lm.parameter_hash();
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

/// Population standard deviation of successive per-epoch mean-loss differences.
inline double stability_metric(std::span<const double> epoch_means) {
  if (epoch_means.size() < 2) {
    throw ValidationError("stability metric needs at least 2 epochs");
  }
  std::vector<double> diffs;
  for (std::size_t i = 1; i < epoch_means.size(); ++i) {
    diffs.push_back(epoch_means[i] - epoch_means[i - 1]);
  }
  const double mu = std::accumulate(diffs.begin(), diffs.end(), 0.0) / static_cast<double>(diffs.size());
  double var = 0.0;
  for (double x : diffs) {
    var += (x - mu) * (x - mu);
  }
  return std::sqrt(var / static_cast<double>(diffs.size()));
}

inline double stability_metric(const RunRecord& rec) { return stability_metric(rec.epoch_means); }

}  // namespace promptblend
