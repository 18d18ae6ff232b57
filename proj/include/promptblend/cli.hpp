#pragma once

// promptblend command line: pretrain | embed | train | eval | report | ortho.
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "promptblend/composer.hpp"
#include "promptblend/dataset.hpp"
#include "promptblend/error.hpp"
#include "promptblend/frozen_lm.hpp"
#include "promptblend/report.hpp"
#include "promptblend/trainer.hpp"

namespace promptblend {

inline constexpr std::size_t kDefaultPretrainEpochs = 2;

struct CliOptions {
  std::string data = "fixture";
  std::string eval_data;
  std::string basis = "default";
  std::string lm_path;
  std::string predictor_path;
  std::string out;
  std::vector<std::string> runs;
  std::size_t epochs = 20;
  std::size_t batch_size = 10;
  double lr = 1e-3;
  double dropout = 0.1;
  std::optional<std::uint64_t> seed;
  std::size_t prompt_length = 20;
  std::size_t top = 3;
  std::size_t fixture_size = 1000;
  std::uint64_t fixture_seed = 3;
  std::size_t pretrain_epochs = kDefaultPretrainEpochs;
};

namespace cli_detail {

inline std::uint64_t resolve_seed(const CliOptions& o) {
  if (o.seed) {
    return *o.seed;
  }
  if (const char* env = std::getenv("PROMPTBLEND_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') {
      throw ValidationError("PROMPTBLEND_SEED must be a non-negative integer");
    }
    return v;
  }
  return 0;
}

struct Splits {
  std::vector<QAExample> train;
  std::vector<QAExample> eval;
};

inline Splits load_splits(const CliOptions& o) {
  std::vector<QAExample> all =
      o.data == "fixture" ? make_fixture(o.fixture_seed, o.fixture_size) : load_dataset(o.data);
  Splits s;
  if (!o.eval_data.empty()) {
    s.train = std::move(all);
    s.eval = load_dataset(o.eval_data);
  } else {
    if (all.size() < 2) {
      throw ValidationError("--data needs at least 2 examples to form train and eval splits");
    }
    const std::size_t n_eval = std::max<std::size_t>(1, all.size() / 5);
    s.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_eval));
    s.eval.assign(all.end() - static_cast<std::ptrdiff_t>(n_eval), all.end());
  }
  if (s.train.empty() || s.eval.empty()) {
    throw ValidationError("train and eval splits must both be non-empty");
  }
  return s;
}

inline std::vector<std::string> load_prompts(const CliOptions& o) {
  auto prompts = o.basis == "default" ? default_basis_prompts() : load_basis_file(o.basis);
  if (prompts.empty()) {
    throw ValidationError("--basis " + o.basis + " contains no prompts");
  }
  return prompts;
}

inline std::vector<SeqPair> corpus_of(const std::vector<QAExample>& set) {
  std::vector<SeqPair> corpus;
  for (const auto& ex : set) {
    corpus.push_back({format_input(ex), format_target(ex), {}});
  }
  return corpus;
}

inline Vocab vocab_for(const std::vector<SeqPair>& corpus, const std::vector<std::string>& prompts) {
  std::vector<std::string> texts;
  for (const auto& p : corpus) {
    texts.push_back(p.input);
    texts.push_back(p.target);
  }
  texts.insert(texts.end(), prompts.begin(), prompts.end());
  return Vocab::build(texts);
}

inline FrozenLM pretrain_on(const std::vector<QAExample>& train_set,
                            const std::vector<std::string>& prompts, std::size_t epochs,
                            std::uint64_t seed, PretrainLog* log) {
  const auto corpus = make_pretrain_corpus(train_set, prompts, seed);
  PretrainOptions opts;
  opts.epochs = epochs;
  return pretrain(corpus, vocab_for(corpus, prompts), LMConfig{}, opts, seed, log);
}

inline FrozenLM load_lm(const std::string& path) {
  FrozenLM lm = FrozenLM::from_checkpoint(load_checkpoint(path));
  if (!lm.frozen()) {
    lm.freeze();
  }
  return lm;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Collects output files in memory and publishes them together, so a failed
/// command never leaves a half-written output directory behind.
class OutputStage {
 public:
  explicit OutputStage(std::string dir) : dir_(std::move(dir)) {
    if (dir_.empty()) {
      throw ValidationError("--out is required");
    }
  }

  void add(const std::string& name, std::string bytes) { files_.emplace_back(name, std::move(bytes)); }

  void publish() const {
    namespace fs = std::filesystem;
    const fs::path target(dir_);
    const fs::path staging = fs::path(target.string() + ".staging");
    fs::remove_all(staging);
    fs::create_directories(staging);
    for (const auto& [name, bytes] : files_) {
      std::ofstream out(staging / name, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) {
        fs::remove_all(staging);
        throw Error("failed writing " + (staging / name).string());
      }
    }
    fs::create_directories(target);
    for (const auto& [name, bytes] : files_) {
      fs::rename(staging / name, target / name);
    }
    fs::remove_all(staging);
  }

 private:
  std::string dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

inline int cmd_pretrain(const CliOptions& o, std::ostream& out) {
  const auto splits = load_splits(o);
  const auto prompts = load_prompts(o);
  OutputStage stage(o.out);
  PretrainLog log;
  FrozenLM lm = pretrain_on(splits.train, prompts, o.pretrain_epochs, resolve_seed(o), &log);
  std::ostringstream summary;
  summary << "pretrain examples: " << splits.train.size() << "\n"
          << "vocab size: " << lm.vocab().size() << "\n"
          << "epochs: " << o.pretrain_epochs << "\n"
          << "initial loss: " << exact_decimal(log.initial_loss) << "\n";
  for (std::size_t i = 0; i < log.epoch_losses.size(); ++i) {
    summary << "epoch " << (i + 1) << " mean batch loss: " << exact_decimal(log.epoch_losses[i]) << "\n";
  }
  summary << "final loss: " << exact_decimal(log.final_loss) << "\n"
          << "parameter hash: " << lm.parameter_hash() << "\n";
  stage.add("checkpoint.pbld", checkpoint_bytes(lm.to_checkpoint()));
  stage.add("pretrain.txt", summary.str());
  stage.publish();
  out << summary.str();
  return 0;
}

inline FrozenLM lm_for_analysis(const CliOptions& o, const std::vector<std::string>& prompts) {
  if (!o.lm_path.empty()) {
    return load_lm(o.lm_path);
  }
  const auto corpus = corpus_of(load_splits(o).train);
  FrozenLM lm = FrozenLM::init(vocab_for(corpus, prompts), LMConfig{}, resolve_seed(o));
  lm.freeze();
  return lm;
}

inline int cmd_embed(const CliOptions& o, std::ostream& out) {
  const auto prompts = load_prompts(o);
  const FrozenLM lm = lm_for_analysis(o, prompts);
  const PromptBasis basis = build_basis(prompts, lm, o.prompt_length);
  OutputStage stage(o.out);
  Checkpoint ckpt;
  ckpt.tensors.emplace_back("basis.embeddings", basis.embeddings.detach());
  std::ostringstream text;
  std::ostringstream listing;
  listing << "basis (K=" << basis.size() << ", L=" << basis.length << ", d=" << basis.width << ")\n";
  for (std::size_t k = 0; k < basis.size(); ++k) {
    text << "prompt " << basis.prompts[k] << "\n";
    listing << "[" << (k + 1) << "] tokens=" << basis.token_lengths[k] << " | "
            << detokenize(tokenize(basis.prompts[k], lm.vocab()), lm.vocab()) << "\n";
  }
  ckpt.text = text.str();
  stage.add("basis.pbld", checkpoint_bytes(ckpt));
  stage.add("basis.txt", listing.str());
  stage.publish();
  out << listing.str();
  return 0;
}

inline int cmd_train(const CliOptions& o, std::ostream& out) {
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.lr = o.lr;
  cfg.dropout = o.dropout;
  cfg.seed = resolve_seed(o);
  cfg.prompt_length = o.prompt_length;
  cfg.validate();
  OutputStage stage(o.out);
  const auto splits = load_splits(o);
  const auto prompts = load_prompts(o);

  std::optional<FrozenLM> lm;
  if (!o.lm_path.empty()) {
    lm.emplace(load_lm(o.lm_path));
  } else {
    lm.emplace(pretrain_on(splits.train, prompts, o.pretrain_epochs, cfg.seed, nullptr));
    stage.add("lm.pbld", checkpoint_bytes(lm->to_checkpoint()));
  }
  const PromptBasis basis = build_basis(prompts, *lm, cfg.prompt_length);
  PredictorConfig pc{lm->embed_dim(), cfg.hidden1, cfg.hidden2, basis.size(), cfg.dropout};
  WeightPredictor predictor = WeightPredictor::init(pc, cfg.seed);
  const RunRecord rec = train(*lm, predictor, basis, splits.train, splits.eval, cfg);
  const ReportBundle report = render_report(rec, o.top);

  stage.add("curve.csv", curve_csv(rec));
  stage.add("report.txt", report.text);
  stage.add("report.json", report.json);
  stage.add("record.json", record_to_json(rec));
  stage.add("checkpoint.pbld", checkpoint_bytes(predictor.to_checkpoint()));
  stage.publish();
  out << "control mean loss:  " << fixed4(rec.control_mean) << "\n"
      << "prompted mean loss: " << fixed4(rec.prompted_mean) << "\n"
      << "wrote " << o.out << "\n";
  return 0;
}

inline int cmd_eval(const CliOptions& o, std::ostream& out) {
  if (o.lm_path.empty() || o.predictor_path.empty()) {
    throw ValidationError("eval needs --lm and --predictor checkpoints");
  }
  const FrozenLM lm = load_lm(o.lm_path);
  const WeightPredictor predictor = WeightPredictor::from_checkpoint(load_checkpoint(o.predictor_path));
  const auto prompts = load_prompts(o);
  const PromptBasis basis = build_basis(prompts, lm, o.prompt_length);
  const auto eval_set = o.eval_data.empty() ? load_splits(o).eval : load_dataset(o.eval_data);
  const double control = control_eval(lm, eval_set);
  const auto prepared = prepare_examples(lm, eval_set);
  const PromptedEval prompted = prompted_eval(lm, predictor, basis, prepared);

  std::size_t control_hits = 0;
  std::size_t prompted_hits = 0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const auto& ex = eval_set[i];
    auto argmin = [&](const std::vector<double>& losses) {
      return static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin());
    };
    const ContinuousPrompt cp = combine(basis, prompted.weights[i]);
    const std::size_t c = argmin(lm.score_choices(std::nullopt, ex));
    const std::size_t p = argmin(lm.score_choices(cp.tensor, ex));
    control_hits += ex.choices[c].label == ex.answer_key;
    prompted_hits += ex.choices[p].label == ex.answer_key;
  }
  const double n = static_cast<double>(eval_set.size());
  std::ostringstream s;
  s << "eval examples: " << eval_set.size() << "\n"
    << "control mean loss:  " << fixed4(control) << "\n"
    << "prompted mean loss: " << fixed4(prompted.mean_loss) << "\n"
    << "control accuracy:   " << fixed4(control_hits / n) << "\n"
    << "prompted accuracy:  " << fixed4(prompted_hits / n) << "\n";
  if (!o.out.empty()) {
    OutputStage stage(o.out);
    stage.add("eval.txt", s.str());
    stage.publish();
  }
  out << s.str();
  return 0;
}

inline int cmd_report(const CliOptions& o, std::ostream& out) {
  if (o.runs.empty()) {
    throw ValidationError("report needs at least one --run DIR");
  }
  std::vector<RunRecord> records;
  for (const auto& dir : o.runs) {
    records.push_back(record_from_json(read_file(std::filesystem::path(dir) / "record.json")));
  }
  OutputStage stage(o.out);
  const ReportBundle report = render_report(records.front(), o.top);
  stage.add("report.txt", report.text);
  stage.add("report.json", report.json);
  if (records.size() > 1) {
    const CurveComparison cmp = render_curves(records, o.runs);
    for (std::size_t i = 0; i < cmp.csvs.size(); ++i) {
      stage.add("curve_" + std::to_string(i + 1) + ".csv", cmp.csvs[i]);
    }
    stage.add("curves_summary.txt", cmp.summary);
    out << cmp.summary;
  } else {
    stage.add("curve.csv", curve_csv(records.front()));
  }
  stage.publish();
  out << "wrote " << o.out << "\n";
  return 0;
}

inline int cmd_ortho(const CliOptions& o, std::ostream& out) {
  const auto prompts = load_prompts(o);
  const FrozenLM lm = lm_for_analysis(o, prompts);
  const PromptBasis basis = build_basis(prompts, lm, o.prompt_length);
  const std::string text = render_ortho(basis);
  if (!o.out.empty()) {
    OutputStage stage(o.out);
    stage.add("ortho.txt", text);
    stage.publish();
  }
  out << text;
  return 0;
}

}  // namespace cli_detail

/// Entry point shared by the promptblend binary and the tests.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CliOptions o;
  CLI::App app{"promptblend: continuous prompts as learned combinations of discrete prompts"};
  app.require_subcommand(1);

  auto data_flags = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "dataset path, or 'fixture'")->capture_default_str();
    sub->add_option("--eval-data", o.eval_data, "separate eval dataset (default: last 20% of --data)");
    sub->add_option("--fixture-size", o.fixture_size, "examples generated for --data fixture")
        ->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--fixture-seed", o.fixture_seed, "generator seed for --data fixture")
        ->capture_default_str();
  };
  auto basis_flags = [&](CLI::App* sub) {
    sub->add_option("--basis", o.basis, "basis file (one prompt per line), or 'default'")
        ->capture_default_str();
    sub->add_option("--prompt-length", o.prompt_length, "padded prompt length L")
        ->check(CLI::PositiveNumber)->capture_default_str();
  };
  auto seed_flag = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "run seed (fallback: $PROMPTBLEND_SEED, then 0)");
  };

  auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the stand-in language model");
  data_flags(pre);
  basis_flags(pre);
  seed_flag(pre);
  pre->add_option("--epochs,--pretrain-epochs", o.pretrain_epochs, "pretraining epochs")
      ->check(CLI::PositiveNumber)->capture_default_str();
  pre->add_option("--out", o.out, "output directory")->required();

  auto* emb = app.add_subcommand("embed", "embed the prompt basis");
  data_flags(emb);
  basis_flags(emb);
  seed_flag(emb);
  emb->add_option("--lm", o.lm_path, "frozen model checkpoint (default: fresh model from --seed)");
  emb->add_option("--out", o.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train the weight predictor against the frozen model");
  data_flags(tr);
  basis_flags(tr);
  seed_flag(tr);
  tr->add_option("--lm", o.lm_path, "frozen model checkpoint (default: pretrain on the train split)");
  tr->add_option("--pretrain-epochs", o.pretrain_epochs, "epochs when pretraining inline")
      ->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--batch-size", o.batch_size, "batch size")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--lr", o.lr, "AdamW learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  tr->add_option("--dropout", o.dropout, "predictor dropout probability")
      ->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  tr->add_option("--top", o.top, "contributors listed per example")->capture_default_str();
  tr->add_option("--out", o.out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate control and prompted loss");
  data_flags(ev);
  basis_flags(ev);
  ev->add_option("--lm", o.lm_path, "frozen model checkpoint")->required();
  ev->add_option("--predictor", o.predictor_path, "predictor checkpoint (train's checkpoint.pbld)")
      ->required();
  ev->add_option("--out", o.out, "optional output directory");

  auto* rep = app.add_subcommand("report", "re-render reports from run directories");
  rep->add_option("--run", o.runs, "run directory holding record.json (repeatable)")->required();
  rep->add_option("--top", o.top, "contributors listed per example")->capture_default_str();
  rep->add_option("--out", o.out, "output directory")->required();

  auto* orth = app.add_subcommand("ortho", "orthogonality analysis of the prompt basis");
  basis_flags(orth);
  seed_flag(orth);
  orth->add_option("--lm", o.lm_path, "frozen model checkpoint (default: fresh model from --seed)");
  orth->add_option("--data", o.data, "dataset contributing to the fresh model's vocabulary");
  orth->add_option("--out", o.out, "optional output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*pre) return cli_detail::cmd_pretrain(o, out);
    if (*emb) return cli_detail::cmd_embed(o, out);
    if (*tr) return cli_detail::cmd_train(o, out);
    if (*ev) return cli_detail::cmd_eval(o, out);
    if (*rep) return cli_detail::cmd_report(o, out);
    if (*orth) return cli_detail::cmd_ortho(o, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args);
}

}  // namespace promptblend
