#pragma once

// Prompt basis, weight predictor, linear combination, and the
// interpretability helpers built on them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "promptblend/checkpoint.hpp"
#include "promptblend/error.hpp"
#include "promptblend/frozen_lm.hpp"
#include "promptblend/rng.hpp"
#include "promptblend/tensor.hpp"
#include "promptblend/text.hpp"

namespace promptblend {

/// The seven discrete prompts used when no basis file is given.
inline std::vector<std::string> default_basis_prompts() {
  return {
      "Generate a flowchart to visually represent the logic needed to answer the question",
      "Write pseudocode for an algorithm that could determine the answer",
      "Imagine you are explaining the answer to a 5-year-old. Use simple words and analogies.",
      "Summarize the key insights needed to answer in a short poem",
      "Create a metaphor relating the question to a seemingly unrelated domain",
      "Act out an exaggerated skit to depict the logic behind the answer",
      "Prototype a computer program to compute the answer algorithmically",
  };
}

/// One prompt per line; blank lines and lines starting with '#' are skipped.
inline std::vector<std::string> parse_basis(std::istream& in) {
  std::vector<std::string> prompts;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty() || line[0] == '#' ||
        line.find_first_not_of(" \t") == std::string::npos) {
      continue;
    }
    prompts.push_back(line);
  }
  return prompts;
}

inline std::vector<std::string> load_basis_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open basis file " + path);
  }
  return parse_basis(in);
}

/// Cosine similarity matrix of the rows of a K x N matrix. Zero rows have
/// similarity 0 with everything except themselves.
inline std::vector<double> cosine_gram(std::span<const double> rows, std::size_t k, std::size_t n) {
  std::vector<double> norms(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s += rows[i * n + j] * rows[i * n + j];
    }
    norms[i] = std::sqrt(s);
  }
  std::vector<double> gram(k * k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    gram[a * k + a] = 1.0;
    for (std::size_t b = a + 1; b < k; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        dot += rows[a * n + j] * rows[b * n + j];
      }
      double c = 0.0;
      if (norms[a] > 0.0 && norms[b] > 0.0) {
        c = std::clamp(dot / (norms[a] * norms[b]), -1.0, 1.0);
      }
      gram[a * k + b] = c;
      gram[b * k + a] = c;
    }
  }
  return gram;
}

struct PromptBasis {
  std::vector<std::string> prompts;
  std::vector<std::size_t> token_lengths;
  std::size_t length = 0;  // padded row count L
  std::size_t width = 0;   // embedding width d
  Tensor embeddings;       // [K x L x d], constant
  std::vector<double> gram;
  std::vector<std::uint8_t> live_rows;  // row l is non-zero in at least one prompt
  std::uint64_t id = 0;

  std::size_t size() const { return prompts.size(); }

  std::span<const double> prompt_rows(std::size_t k) const {
    return embeddings.data().subspan(k * length * width, length * width);
  }

  double similarity(std::size_t a, std::size_t b) const { return gram.at(a * size() + b); }
};

/// Embeds every prompt (no positions) and zero-pads it to `padded_length` rows.
/// Over-long prompts are rejected rather than truncated.
inline PromptBasis build_basis(const std::vector<std::string>& prompts, const FrozenLM& lm,
                               std::size_t padded_length) {
  if (prompts.empty()) {
    throw ValidationError("prompt basis is empty");
  }
  if (padded_length == 0) {
    throw ValidationError("prompt length must be >= 1");
  }
  const std::size_t d = lm.embed_dim();
  PromptBasis basis;
  basis.prompts = prompts;
  basis.length = padded_length;
  basis.width = d;
  basis.live_rows.assign(padded_length, 0);
  std::vector<double> stack(prompts.size() * padded_length * d, 0.0);
  Fnv1a h;
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    const auto ids = tokenize(prompts[k], lm.vocab());
    if (ids.empty()) {
      throw ValidationError("basis prompt " + std::to_string(k + 1) + " is empty after tokenization");
    }
    if (ids.size() > padded_length) {
      throw LengthError("basis prompt " + std::to_string(k + 1) + " has " +
                        std::to_string(ids.size()) + " tokens, more than prompt length " +
                        std::to_string(padded_length));
    }
    basis.token_lengths.push_back(ids.size());
    Tensor rows = lm.embed_tokens(ids, false);
    std::copy(rows.data().begin(), rows.data().end(),
              stack.begin() + static_cast<std::ptrdiff_t>(k * padded_length * d));
    std::fill_n(basis.live_rows.begin(), ids.size(), 1);
    h.update(prompts[k]);
    h.update(std::string_view("\n", 1));
  }
  basis.gram = cosine_gram(stack, prompts.size(), padded_length * d);
  basis.embeddings = Tensor::from({prompts.size(), padded_length, d}, std::move(stack));
  h.update(std::to_string(padded_length));
  basis.id = h.value();
  return basis;
}

struct WeightVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const WeightVector&) const = default;
};

struct ContinuousPrompt {
  Tensor tensor;  // [L x d]
  std::uint64_t basis_id = 0;
  WeightVector weights;
  std::vector<std::uint8_t> live_rows;
};

/// sum_k w[k] * embeddings[k], differentiable in w. w has K entries.
inline Tensor combine(const PromptBasis& basis, const Tensor& w) {
  const std::size_t k = basis.size();
  if (w.size() != k) {
    throw ShapeError("weight vector has " + std::to_string(w.size()) + " entries, basis has " +
                     std::to_string(k));
  }
  const std::size_t n = basis.length * basis.width;
  Tensor flat = Tensor::from({k, n}, std::vector<double>(basis.embeddings.data().begin(),
                                                         basis.embeddings.data().end()));
  Tensor row = matmul(reshape(w, {1, k}), flat);
  return reshape(row, {basis.length, basis.width});
}

inline ContinuousPrompt combine(const PromptBasis& basis, const WeightVector& w) {
  if (w.size() != basis.size()) {
    throw ShapeError("weight vector has " + std::to_string(w.size()) + " entries, basis has " +
                     std::to_string(basis.size()));
  }
  ContinuousPrompt out;
  out.tensor = combine(basis, Tensor::from({w.size()}, w.values));
  out.basis_id = basis.id;
  out.weights = w;
  out.live_rows = basis.live_rows;
  return out;
}

/// Mean of the frozen encoder's output states over non-pad input positions.
inline Tensor question_repr(const FrozenLM& lm, std::span<const TokenId> input_ids) {
  if (input_ids.empty()) {
    throw ValidationError("question_repr: empty input");
  }
  if (std::all_of(input_ids.begin(), input_ids.end(), [](TokenId t) { return t == kPadId; })) {
    throw ValidationError("question_repr: input is all padding");
  }
  const EncoderOutput enc = lm.encode(nullptr, input_ids);
  return masked_mean_rows(enc.states, enc.keys).detach();
}

struct PredictorConfig {
  std::size_t input_dim = 64;
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 128;
  std::size_t outputs = 7;
  double dropout = 0.1;

  bool operator==(const PredictorConfig&) const = default;
};

/// Three linear layers, each followed by dropout, with GELU between them:
///   linear1 -> gelu -> dropout1 -> linear2 -> gelu -> dropout2 -> linear3 -> dropout3
/// The last layer starts at exactly zero.
class WeightPredictor {
 public:
  static WeightPredictor init(const PredictorConfig& cfg, std::uint64_t seed) {
    if (cfg.input_dim == 0 || cfg.hidden1 == 0 || cfg.hidden2 == 0 || cfg.outputs == 0) {
      throw ConfigError("predictor widths must be positive");
    }
    if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) {
      throw ConfigError("dropout must lie in [0, 1)");
    }
    WeightPredictor p;
    p.cfg_ = cfg;
    Rng rng(seed);
    auto dense = [&](std::size_t in, std::size_t out, bool zero) {
      const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
      std::vector<double> w(in * out);
      std::vector<double> b(out);
      for (double& x : w) {
        x = zero ? 0.0 : rng.uniform(-bound, bound);
      }
      for (double& x : b) {
        x = zero ? 0.0 : rng.uniform(-bound, bound);
      }
      return lm_detail::Linear{Tensor::from({in, out}, std::move(w), true),
                               Tensor::from({out}, std::move(b), true)};
    };
    p.layers_[0] = dense(cfg.input_dim, cfg.hidden1, false);
    p.layers_[1] = dense(cfg.hidden1, cfg.hidden2, false);
    p.layers_[2] = dense(cfg.hidden2, cfg.outputs, true);
    return p;
  }

  const PredictorConfig& config() const { return cfg_; }

  /// Raw weights as a differentiable [K] tensor.
  Tensor forward(const Tensor& q, bool training, Rng& rng) const {
    if (q.size() != cfg_.input_dim) {
      throw ShapeError("predictor expects input width " + std::to_string(cfg_.input_dim) +
                       ", got " + shape_str(q.shape()));
    }
    Tensor x = reshape(q, {1, cfg_.input_dim});
    x = dropout(gelu(layers_[0](x)), cfg_.dropout, training, rng);
    x = dropout(gelu(layers_[1](x)), cfg_.dropout, training, rng);
    x = dropout(layers_[2](x), cfg_.dropout, training, rng);
    return reshape(x, {cfg_.outputs});
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string base = "predictor.linear" + std::to_string(i + 1);
      out.emplace_back(base + ".weight", layers_[i].weight);
      out.emplace_back(base + ".bias", layers_[i].bias);
    }
    return out;
  }

  lm_detail::Linear& layer(std::size_t i) { return layers_.at(i); }
  const lm_detail::Linear& layer(std::size_t i) const { return layers_.at(i); }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    for (const auto& [name, t] : named_parameters()) {
      ckpt.tensors.emplace_back(name, t.detach());
    }
    std::ostringstream text;
    text << "predictor input_dim=" << cfg_.input_dim << '\n'
         << "predictor hidden1=" << cfg_.hidden1 << '\n'
         << "predictor hidden2=" << cfg_.hidden2 << '\n'
         << "predictor outputs=" << cfg_.outputs << '\n'
         << "predictor dropout=" << format_exact(cfg_.dropout) << '\n';
    ckpt.text = text.str();
    return ckpt;
  }

  static WeightPredictor from_checkpoint(const Checkpoint& ckpt) {
    PredictorConfig cfg;
    std::istringstream text(ckpt.text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(text, line)) {
      ++line_no;
      const auto space = line.find(' ');
      const auto eq = line.find('=');
      if (line.rfind("predictor ", 0) != 0 || eq == std::string::npos) {
        continue;
      }
      const std::string key = line.substr(space + 1, eq - space - 1);
      const std::string value = line.substr(eq + 1);
      if (key == "input_dim") cfg.input_dim = std::stoull(value);
      else if (key == "hidden1") cfg.hidden1 = std::stoull(value);
      else if (key == "hidden2") cfg.hidden2 = std::stoull(value);
      else if (key == "outputs") cfg.outputs = std::stoull(value);
      else if (key == "dropout") cfg.dropout = std::stod(value);
      else throw ParseError(line_no, "unknown predictor key " + key);
    }
    WeightPredictor p = init(cfg, 0);
    for (auto& [name, t] : p.named_parameters()) {
      const Tensor& stored = ckpt.tensor(name);
      if (stored.shape() != t.shape()) {
        throw ValidationError("checkpoint tensor " + name + " has shape " +
                              shape_str(stored.shape()) + ", expected " + shape_str(t.shape()));
      }
      Tensor handle = t;
      std::copy(stored.data().begin(), stored.data().end(), handle.mutable_data().begin());
    }
    return p;
  }

  static std::string format_exact(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  PredictorConfig cfg_;
  std::array<lm_detail::Linear, 3> layers_;
};

inline WeightVector predict_weights(const WeightPredictor& p, const Tensor& q, bool training,
                                    Rng& rng) {
  Tensor w = p.forward(q, training, rng);
  return {std::vector<double>(w.data().begin(), w.data().end())};
}

struct Contributor {
  std::size_t index = 0;  // position in the basis
  std::string prompt;
  double weight = 0.0;
};

/// The n prompts with the largest signed weights, descending; equal weights
/// keep basis order.
inline std::vector<Contributor> top_contributors(std::span<const double> weights,
                                                 std::span<const std::string> prompts,
                                                 std::size_t n) {
  if (weights.size() != prompts.size()) {
    throw ShapeError("top_contributors: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(prompts.size()) + " prompts");
  }
  if (n > weights.size()) {
    throw ValidationError("requested top " + std::to_string(n) + " of only " +
                          std::to_string(weights.size()) + " basis prompts");
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  std::vector<Contributor> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({order[i], prompts[order[i]], weights[order[i]]});
  }
  return out;
}

inline std::vector<Contributor> top_contributors(const WeightVector& w, const PromptBasis& basis,
                                                 std::size_t n) {
  return top_contributors(w.values, basis.prompts, n);
}

/// 1 - mean |off-diagonal cosine|; a single prompt scores 1.
inline double orthogonality_score(std::span<const double> gram, std::size_t k) {
  if (k <= 1) {
    return 1.0;
  }
  double total = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a != b) {
        total += std::abs(gram[a * k + b]);
      }
    }
  }
  return std::clamp(1.0 - total / static_cast<double>(k * (k - 1)), 0.0, 1.0);
}

inline double orthogonality_score(const PromptBasis& basis) {
  return orthogonality_score(basis.gram, basis.size());
}

struct PromptPair {
  std::size_t first = 0;
  std::size_t second = 0;
  double similarity = 0.0;
};

/// Pair with the largest |cosine|; empty for a single-prompt basis.
inline std::optional<PromptPair> most_parallel_pair(std::span<const double> gram, std::size_t k) {
  std::optional<PromptPair> best;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      const double s = gram[a * k + b];
      if (!best || std::abs(s) > std::abs(best->similarity)) {
        best = PromptPair{a, b, s};
      }
    }
  }
  return best;
}

struct RowProjection {
  TokenId token_id = kPadId;
  std::string token;
  double cosine = 0.0;
};

/// Nearest vocabulary token (by cosine) for every prompt row. Zero rows map
/// to the pad token; ties go to the lower id.
inline std::vector<RowProjection> project_to_vocab(const Tensor& prompt, const FrozenLM& lm) {
  const std::size_t d = lm.embed_dim();
  if (prompt.rank() != 2 || prompt.dim(1) != d) {
    throw ShapeError("prompt shape " + shape_str(prompt.shape()) + " does not have width " +
                     std::to_string(d));
  }
  const auto table = lm.embedding_table().data();
  const std::size_t v = lm.config().vocab_size;
  std::vector<double> norms(v);
  for (std::size_t t = 0; t < v; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      s += table[t * d + j] * table[t * d + j];
    }
    norms[t] = std::sqrt(s);
  }
  std::vector<RowProjection> out;
  for (std::size_t r = 0; r < prompt.dim(0); ++r) {
    const auto row = prompt.data().subspan(r * d, d);
    double row_norm = 0.0;
    for (double x : row) {
      row_norm += x * x;
    }
    row_norm = std::sqrt(row_norm);
    RowProjection proj{kPadId, lm.vocab().token(kPadId), 0.0};
    if (row_norm > 0.0) {
      bool found = false;
      for (std::size_t t = 0; t < v; ++t) {
        if (norms[t] == 0.0) {
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dot += row[j] * table[t * d + j];
        }
        const double c = dot / (row_norm * norms[t]);
        if (!found || c > proj.cosine) {
          proj = {static_cast<TokenId>(t), lm.vocab().token(static_cast<TokenId>(t)), c};
          found = true;
        }
      }
    }
    out.push_back(std::move(proj));
  }
  return out;
}

inline std::vector<RowProjection> project_to_vocab(const ContinuousPrompt& prompt,
                                                   const FrozenLM& lm) {
  return project_to_vocab(prompt.tensor, lm);
}

}  // namespace promptblend
