#pragma once

// Run-record serialisation and the human/machine-readable reports rendered
// from it. Rendering is pure: the same record always yields the same bytes,
// and no loss is recomputed here.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptblend/composer.hpp"
#include "promptblend/error.hpp"
#include "promptblend/trainer.hpp"

namespace promptblend {

inline std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Shortest-safe decimal: parses back to the identical double.
inline std::string exact_decimal(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string roman(std::size_t n) {
  static const char* kNumerals[] = {"I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"};
  return n >= 1 && n <= 10 ? kNumerals[n - 1] : std::to_string(n);
}

// ---------------------------------------------------------------- run record

inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["dropout"] = c.dropout;
  j["seed"] = c.seed;
  j["prompt_length"] = c.prompt_length;
  j["eval_every"] = c.eval_every;
  j["hidden1"] = c.hidden1;
  j["hidden2"] = c.hidden2;
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.prompt_length = j.at("prompt_length").get<std::size_t>();
  c.eval_every = j.at("eval_every").get<std::size_t>();
  c.hidden1 = j.at("hidden1").get<std::size_t>();
  c.hidden2 = j.at("hidden2").get<std::size_t>();
  return c;
}

inline std::string record_to_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["config"] = config_to_json(r.config);
  j["predictor"] = {{"input_dim", r.predictor.input_dim},
                    {"hidden1", r.predictor.hidden1},
                    {"hidden2", r.predictor.hidden2},
                    {"outputs", r.predictor.outputs},
                    {"dropout", r.predictor.dropout}};
  j["split"] = r.split;
  j["train_size"] = r.train_size;
  j["basis_prompts"] = r.basis_prompts;
  j["basis_gram"] = r.basis_gram;
  j["orthogonality"] = r.orthogonality;
  auto& steps = j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : r.steps) {
    steps.push_back({s.epoch, s.step, s.batch_size, s.loss});
  }
  j["epoch_means"] = r.epoch_means;
  auto& curve = j["eval_curve"] = nlohmann::ordered_json::array();
  for (const auto& p : r.eval_curve) {
    curve.push_back({p.step, p.loss});
  }
  j["control_mean"] = r.control_mean;
  j["prompted_mean"] = r.prompted_mean;
  auto& ex = j["examples"] = nlohmann::ordered_json::array();
  for (const auto& e : r.examples) {
    nlohmann::ordered_json ej;
    ej["id"] = e.id;
    ej["question"] = e.question;
    ej["loss"] = e.loss;
    ej["control_loss"] = e.control_loss;
    ej["weights"] = e.weights;
    ex.push_back(std::move(ej));
  }
  j["lm_hash_before"] = r.lm_hash_before;
  j["lm_hash_after"] = r.lm_hash_after;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j.dump(1) + "\n";
}

inline RunRecord record_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("run record is not valid JSON: ") + e.what());
  }
  try {
    RunRecord r;
    r.config = config_from_json(j.at("config"));
    const auto& p = j.at("predictor");
    r.predictor = {p.at("input_dim").get<std::size_t>(), p.at("hidden1").get<std::size_t>(),
                   p.at("hidden2").get<std::size_t>(), p.at("outputs").get<std::size_t>(),
                   p.at("dropout").get<double>()};
    r.split = j.at("split").get<std::string>();
    r.train_size = j.at("train_size").get<std::size_t>();
    r.basis_prompts = j.at("basis_prompts").get<std::vector<std::string>>();
    r.basis_gram = j.at("basis_gram").get<std::vector<double>>();
    r.orthogonality = j.at("orthogonality").get<double>();
    for (const auto& s : j.at("steps")) {
      r.steps.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(),
                         s.at(2).get<std::size_t>(), s.at(3).get<double>()});
    }
    r.epoch_means = j.at("epoch_means").get<std::vector<double>>();
    for (const auto& c : j.at("eval_curve")) {
      r.eval_curve.push_back({c.at(0).get<std::size_t>(), c.at(1).get<double>()});
    }
    r.control_mean = j.at("control_mean").get<double>();
    r.prompted_mean = j.at("prompted_mean").get<double>();
    for (const auto& e : j.at("examples")) {
      r.examples.push_back({e.at("id").get<std::string>(), e.at("question").get<std::string>(),
                            e.at("loss").get<double>(), e.at("control_loss").get<double>(),
                            e.at("weights").get<std::vector<double>>()});
    }
    r.lm_hash_before = j.at("lm_hash_before").get<std::uint64_t>();
    r.lm_hash_after = j.at("lm_hash_after").get<std::uint64_t>();
    r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run record is incomplete: ") + e.what());
  }
}

// ---------------------------------------------------------------- curves

/// CSV with header epoch,step,batch_size,loss; losses written as exact decimals.
inline std::string curve_csv(const RunRecord& r) {
  std::string out = "epoch,step,batch_size,loss\n";
  for (const auto& s : r.steps) {
    out += std::to_string(s.epoch) + "," + std::to_string(s.step) + "," +
           std::to_string(s.batch_size) + "," + exact_decimal(s.loss) + "\n";
  }
  return out;
}

inline std::vector<StepRecord> parse_curve_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != "epoch,step,batch_size,loss") {
    throw ParseError(line_no, "missing curve CSV header");
  }
  std::vector<StepRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    StepRecord s;
    std::istringstream fields(line);
    std::string f[4];
    for (auto& field : f) {
      if (!std::getline(fields, field, ',')) {
        throw ParseError(line_no, "expected 4 fields");
      }
    }
    try {
      s.epoch = std::stoull(f[0]);
      s.step = std::stoull(f[1]);
      s.batch_size = std::stoull(f[2]);
    } catch (const std::exception&) {
      throw ParseError(line_no, "non-integer field");
    }
    char* end = nullptr;
    s.loss = std::strtod(f[3].c_str(), &end);
    if (end == f[3].c_str() || *end != '\0') {
      throw ParseError(line_no, "bad loss value '" + f[3] + "'");
    }
    out.push_back(s);
  }
  return out;
}

struct CurveComparison {
  std::vector<std::string> csvs;
  std::vector<double> stability;
  std::size_t most_volatile = 0;
  std::string summary;
};

/// One CSV per record plus a stability summary. The ratio reported is
/// stability[first] / stability[second] when there are two or more records.
inline CurveComparison render_curves(const std::vector<RunRecord>& records,
                                     const std::vector<std::string>& labels = {}) {
  if (records.empty()) {
    throw ValidationError("render_curves needs at least one record");
  }
  for (const auto& r : records) {
    if (r.epoch_means.size() != records.front().epoch_means.size()) {
      throw ValidationError("records have different epoch counts (" +
                            std::to_string(records.front().epoch_means.size()) + " vs " +
                            std::to_string(r.epoch_means.size()) + ")");
    }
  }
  CurveComparison out;
  std::ostringstream s;
  s << "loss-curve comparison (per-epoch mean train loss)\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string label = i < labels.size() ? labels[i] : "run" + std::to_string(i + 1);
    out.csvs.push_back(curve_csv(r));
    const double stab = r.epoch_means.size() >= 2 ? stability_metric(r) : 0.0;
    out.stability.push_back(stab);
    s << label << ": batch_size=" << r.config.batch_size << " epochs=" << r.config.epochs
      << " steps=" << r.steps.size() << " stability=" << exact_decimal(stab) << "\n";
    if (stab > out.stability[out.most_volatile]) {
      out.most_volatile = i;
    }
  }
  if (records.size() >= 2) {
    const double denom = out.stability[1];
    s << "ratio run1/run2: " << (denom > 0.0 ? exact_decimal(out.stability[0] / denom) : "inf")
      << "\n";
  }
  const auto& mv = records[out.most_volatile];
  s << "most volatile: "
    << (out.most_volatile < labels.size() ? labels[out.most_volatile]
                                          : "run" + std::to_string(out.most_volatile + 1))
    << " (batch_size " << mv.config.batch_size << ")\n";
  out.summary = s.str();
  return out;
}

// ---------------------------------------------------------------- orthogonality

inline std::string render_ortho(const std::vector<std::string>& prompts,
                                const std::vector<double>& gram) {
  const std::size_t k = prompts.size();
  if (gram.size() != k * k) {
    throw ShapeError("gram matrix does not match basis size");
  }
  std::ostringstream s;
  s << "basis orthogonality\n";
  s << "prompts (K=" << k << "):\n";
  for (std::size_t i = 0; i < k; ++i) {
    s << "  [" << (i + 1) << "] " << prompts[i] << "\n";
  }
  s << "gram (cosine over flattened padded embeddings):\n";
  s << "     ";
  for (std::size_t b = 0; b < k; ++b) {
    char head[16];
    std::snprintf(head, sizeof head, " %7s", ("[" + std::to_string(b + 1) + "]").c_str());
    s << head;
  }
  s << "\n";
  for (std::size_t a = 0; a < k; ++a) {
    char head[16];
    std::snprintf(head, sizeof head, "%-5s", ("[" + std::to_string(a + 1) + "]").c_str());
    s << head;
    for (std::size_t b = 0; b < k; ++b) {
      char cell[24];
      std::snprintf(cell, sizeof cell, " %7s", fixed4(gram[a * k + b]).c_str());
      s << cell;
    }
    s << "\n";
  }
  s << "orthogonality score: " << fixed4(orthogonality_score(gram, k)) << "\n";
  if (const auto pair = most_parallel_pair(gram, k)) {
    s << "most parallel pair: [" << (pair->first + 1) << "] & [" << (pair->second + 1)
      << "] similarity " << fixed4(pair->similarity) << "\n";
  } else {
    s << "most parallel pair: none\n";
  }
  return s.str();
}

inline std::string render_ortho(const PromptBasis& basis) {
  return render_ortho(basis.prompts, basis.gram);
}

/// Reads the gram block back out of render_ortho output.
inline std::vector<double> parse_ortho_gram(const std::string& text, std::size_t k) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line) && line.rfind("gram", 0) != 0) {
  }
  std::getline(in, line);  // column header
  std::vector<double> gram;
  for (std::size_t a = 0; a < k; ++a) {
    if (!std::getline(in, line)) {
      throw ParseError(a + 1, "gram table truncated");
    }
    std::istringstream row(line);
    std::string label;
    row >> label;
    for (std::size_t b = 0; b < k; ++b) {
      double v = 0.0;
      if (!(row >> v)) {
        throw ParseError(a + 1, "gram row too short");
      }
      gram.push_back(v);
    }
  }
  return gram;
}

// ---------------------------------------------------------------- report

struct ReportRow {
  std::string id;
  std::string question;
  double loss = 0.0;
  double control_loss = 0.0;
  std::vector<Contributor> contributors;
};

struct ReportBundle {
  std::string text;
  std::string json;
  std::vector<ReportRow> rows;
};

/// Table of eval examples, hardest (highest prompted loss) first, with each
/// example's top-n basis prompts by signed weight. Ties in loss keep record order.
inline ReportBundle render_report(const RunRecord& r, std::size_t n_top = 3) {
  const std::size_t k = r.basis_prompts.size();
  if (n_top > k) {
    throw ValidationError("--top " + std::to_string(n_top) + " exceeds basis size " +
                          std::to_string(k));
  }
  if (r.examples.empty()) {
    throw ValidationError("run record has no evaluated examples");
  }
  ReportBundle out;
  std::vector<std::size_t> order(r.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return r.examples[a].loss > r.examples[b].loss;
  });
  for (std::size_t idx : order) {
    const auto& e = r.examples[idx];
    out.rows.push_back(
        {e.id, e.question, e.loss, e.control_loss, top_contributors(e.weights, r.basis_prompts, n_top)});
  }

  const auto& c = r.config;
  std::ostringstream t;
  t << "promptblend run report\n"
    << "======================\n"
    << "config: epochs=" << c.epochs << " batch_size=" << c.batch_size
    << " lr=" << exact_decimal(c.lr) << " beta1=" << exact_decimal(c.beta1)
    << " beta2=" << exact_decimal(c.beta2) << " eps=" << exact_decimal(c.eps)
    << " weight_decay=" << exact_decimal(c.weight_decay) << " dropout=" << exact_decimal(c.dropout)
    << " seed=" << c.seed << " prompt_length=" << c.prompt_length << "\n"
    << "predictor: linear(" << r.predictor.input_dim << "->" << r.predictor.hidden1
    << ") gelu dropout | linear(" << r.predictor.hidden1 << "->" << r.predictor.hidden2
    << ") gelu dropout | linear(" << r.predictor.hidden2 << "->" << r.predictor.outputs
    << ") dropout\n"
    << "train examples: " << r.train_size << "\n"
    << "losses and weights below: " << r.split << " split (n=" << r.examples.size() << ")\n\n";
  const double rel = r.control_mean != 0.0 ? (r.control_mean - r.prompted_mean) / r.control_mean : 0.0;
  t << "control mean loss:  " << fixed4(r.control_mean) << "\n"
    << "prompted mean loss: " << fixed4(r.prompted_mean) << "\n"
    << "relative reduction: " << fixed4(100.0 * rel) << "%\n\n";
  t << "basis prompts (K=" << k << "):\n";
  for (std::size_t i = 0; i < k; ++i) {
    t << "  [" << (i + 1) << "] " << r.basis_prompts[i] << "\n";
  }
  t << "\nLoss | Question | Top " << n_top << " Predicted Contributing Prompts\n";
  for (const auto& row : out.rows) {
    t << "----\n" << fixed4(row.loss) << " | " << row.question << "\n";
    for (std::size_t i = 0; i < row.contributors.size(); ++i) {
      t << "    " << roman(i + 1) << ". " << row.contributors[i].prompt << " ("
        << fixed4(row.contributors[i].weight) << ")\n";
    }
  }
  t << "\n";
  if (r.basis_gram.size() == k * k) {
    t << render_ortho(r.basis_prompts, r.basis_gram);
  }
  out.text = t.str();

  nlohmann::ordered_json j;
  j["config"] = config_to_json(c);
  j["split"] = r.split;
  j["eval_size"] = r.examples.size();
  j["control_mean_loss"] = fixed4(r.control_mean);
  j["prompted_mean_loss"] = fixed4(r.prompted_mean);
  j["relative_reduction_percent"] = fixed4(100.0 * rel);
  j["basis"] = r.basis_prompts;
  j["orthogonality_score"] = fixed4(orthogonality_score(r.basis_gram, k));
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : out.rows) {
    nlohmann::ordered_json rj;
    rj["id"] = row.id;
    rj["loss"] = fixed4(row.loss);
    rj["control_loss"] = fixed4(row.control_loss);
    rj["question"] = row.question;
    auto& contrib = rj["top_contributors"] = nlohmann::ordered_json::array();
    for (const auto& cb : row.contributors) {
      contrib.push_back({{"index", cb.index + 1}, {"prompt", cb.prompt}, {"weight", fixed4(cb.weight)}});
    }
    rows.push_back(std::move(rj));
  }
  out.json = j.dump(2) + "\n";
  return out;
}

}  // namespace promptblend
