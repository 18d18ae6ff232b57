#pragma once

// Desk-scale encoder-decoder language model standing in for a pretrained
// seq2seq model. One pre-LN block per side, sinusoidal positions, shared
// token embedding table with the pad row pinned to zero.
//
// A continuous prompt enters as extra encoder rows ahead of the input
// embeddings. Prompt rows carry no positional encoding and input tokens keep
// positions 0..T-1, so any row that is exactly zero (prompt padding or a pad
// token) can be masked out of attention with no other effect on the result.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "promptblend/checkpoint.hpp"
#include "promptblend/dataset.hpp"
#include "promptblend/error.hpp"
#include "promptblend/optim.hpp"
#include "promptblend/rng.hpp"
#include "promptblend/tensor.hpp"
#include "promptblend/text.hpp"

namespace promptblend {

struct LMConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 256;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(kFirstWordId)) {
      throw ConfigError("vocab_size must exceed the reserved ids");
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim must be a positive multiple of heads");
    }
    if (ffn_dim == 0 || max_positions == 0) {
      throw ConfigError("ffn_dim and max_positions must be positive");
    }
  }

  bool operator==(const LMConfig&) const = default;
};

struct LMProvenance {
  std::uint64_t pretrain_seed = 0;
  std::uint64_t corpus_hash = 0;
  std::size_t pretrain_epochs = 0;
};

struct SeqPair {
  std::string input;
  std::string target;
  std::string prefix;  // optional discrete prompt fed through the prompt rows
};

struct EncoderOutput {
  Tensor states;                    // [(L + T) x d]
  std::vector<std::uint8_t> keys;   // 1 where the row takes part in attention
};

namespace lm_detail {

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }
};

struct Norm {
  Tensor gain;
  Tensor shift;

  Tensor operator()(const Tensor& x) const { return layer_norm_rows(x, gain, shift); }
};

struct Attention {
  std::vector<Linear> q, k, v;  // one projection per head, [d x d/h]
  std::vector<Tensor> out;      // per-head output projection [d/h x d]
  Tensor out_bias;              // [d]
};

struct FeedForward {
  Linear up;
  Linear down;

  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
};

inline std::vector<std::uint8_t> key_mask(std::size_t rows, std::span<const std::uint8_t> keys) {
  std::vector<std::uint8_t> allowed(rows * keys.size());
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(keys.begin(), keys.end(), allowed.begin() + static_cast<std::ptrdiff_t>(i * keys.size()));
  }
  return allowed;
}

inline std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> allowed(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      allowed[i * n + j] = 1;
    }
  }
  return allowed;
}

}  // namespace lm_detail

class FrozenLM {
 public:
  /// Fresh, trainable model. The output projection starts at zero, so an
  /// untrained model emits uniform logits.
  static FrozenLM init(Vocab vocab, LMConfig cfg, std::uint64_t seed) {
    cfg.vocab_size = vocab.size();
    cfg.validate();
    FrozenLM lm;
    lm.vocab_ = std::move(vocab);
    lm.cfg_ = cfg;
    Rng rng(seed);
    lm.build(
        [&](const std::string&, Shape shape, double base, double std_dev) {
          std::vector<double> data(shape_numel(shape), base);
          if (std_dev > 0.0) {
            for (double& x : data) {
              x += std_dev * rng.normal();
            }
          }
          return Tensor::from(std::move(shape), std::move(data), true);
        });
    lm.pin_pad_row();
    return lm;
  }

  const Vocab& vocab() const { return vocab_; }
  const LMConfig& config() const { return cfg_; }
  const LMProvenance& provenance() const { return provenance_; }
  std::size_t embed_dim() const { return cfg_.embed_dim; }
  bool frozen() const { return frozen_; }

  void freeze() {
    for (auto& [name, t] : params_) {
      t.set_requires_grad(false);
      t.zero_grad();
    }
    frozen_ = true;
  }

  void unfreeze() {
    for (auto& [name, t] : params_) {
      t.set_requires_grad(true);
    }
    frozen_ = false;
  }

  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params_) {
      out.push_back(t);
    }
    return out;
  }

  const Tensor& embedding_table() const { return embed_; }
  /// Mutable handle for tests that construct specific embedding geometry.
  Tensor& embedding_table() { return embed_; }

  /// FNV-1a over every parameter's bits in declaration order.
  std::uint64_t parameter_hash() const {
    Fnv1a h;
    for (const auto& [name, t] : params_) {
      h.update(name);
      h.update(t.data());
    }
    return h.value();
  }

  void pin_pad_row() {
    auto table = embed_.mutable_data();
    std::fill_n(table.begin(), cfg_.embed_dim, 0.0);
  }

  /// Rows of the embedding table for ids, optionally with positions 0..T-1 added.
  Tensor embed_tokens(std::span<const TokenId> ids, bool with_positions) const {
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
      }
    }
    Tensor rows = gather_rows(embed_, ids);
    if (!with_positions) {
      return rows;
    }
    if (ids.size() > cfg_.max_positions) {
      throw LengthError("sequence of " + std::to_string(ids.size()) + " exceeds max_positions " +
                        std::to_string(cfg_.max_positions));
    }
    return add(rows, positions(ids.size()));
  }

  /// Runs the encoder over [prompt ; input]. Zero prompt rows and pad tokens are
  /// excluded as attention keys. Rows flagged in `open_rows` stay visible even
  /// when zero (used to take gradients at a zero prompt).
  EncoderOutput encode(const Tensor* prompt, std::span<const TokenId> input_ids,
                       std::span<const std::uint8_t> open_rows = {}) const {
    if (input_ids.empty()) {
      throw ValidationError("encoder input is empty");
    }
    const std::size_t d = cfg_.embed_dim;
    std::size_t prompt_rows = 0;
    if (prompt) {
      if (prompt->rank() != 2 || prompt->dim(1) != d) {
        throw ShapeError("prompt shape " + shape_str(prompt->shape()) + " does not have width " +
                         std::to_string(d));
      }
      prompt_rows = prompt->dim(0);
      if (!open_rows.empty() && open_rows.size() != prompt_rows) {
        throw ShapeError("open_rows length does not match prompt rows");
      }
    }
    if (prompt_rows + input_ids.size() > cfg_.max_positions) {
      throw LengthError("prompt (" + std::to_string(prompt_rows) + ") plus input (" +
                        std::to_string(input_ids.size()) + ") exceeds max_positions " +
                        std::to_string(cfg_.max_positions));
    }
    EncoderOutput out;
    out.keys.reserve(prompt_rows + input_ids.size());
    for (std::size_t r = 0; r < prompt_rows; ++r) {
      bool zero = true;
      for (std::size_t j = 0; j < d && zero; ++j) {
        zero = prompt->data()[r * d + j] == 0.0;
      }
      const bool open = !open_rows.empty() && open_rows[r];
      out.keys.push_back(zero && !open ? 0 : 1);
    }
    for (TokenId id : input_ids) {
      out.keys.push_back(id == kPadId ? 0 : 1);
    }
    Tensor x = embed_tokens(input_ids, true);
    if (prompt_rows > 0) {
      x = concat_rows(*prompt, x);
    }
    const auto allowed = lm_detail::key_mask(x.dim(0), out.keys);
    x = add(x, attend(enc_attn_, enc_ln1_(x), nullptr, allowed));
    x = add(x, enc_ffn_(enc_ln2_(x)));
    out.states = enc_final_(x);
    return out;
  }

  /// Teacher-forced logits for decoder input [bos, target...].
  Tensor decode_logits(const EncoderOutput& enc, std::span<const TokenId> target_ids) const {
    std::vector<TokenId> dec_in{kBosId};
    dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end());
    Tensor y = embed_tokens(dec_in, true);
    const std::size_t n = dec_in.size();
    const auto causal = lm_detail::causal_mask(n);
    y = add(y, attend(dec_self_, dec_ln1_(y), nullptr, causal));
    const auto cross = lm_detail::key_mask(n, enc.keys);
    y = add(y, attend(dec_cross_, dec_ln2_(y), &enc.states, cross));
    y = add(y, dec_ffn_(dec_ln3_(y)));
    return lm_head_(dec_final_(y));
  }

  /// Cross-entropy of [target..., eos] given the encoder input, with no frozen check.
  /// Used by pretraining; everything else goes through loss_with_prompt.
  Tensor sequence_loss(const Tensor* prompt, std::span<const TokenId> input_ids,
                       std::span<const TokenId> target_ids,
                       std::span<const std::uint8_t> open_rows = {}) const {
    const EncoderOutput enc = encode(prompt, input_ids, open_rows);
    if (target_ids.size() + 1 > cfg_.max_positions) {
      throw LengthError("target exceeds max_positions");
    }
    Tensor logits = decode_logits(enc, target_ids);
    std::vector<TokenId> gold(target_ids.begin(), target_ids.end());
    gold.push_back(kEosId);
    return cross_entropy(logits, gold, kPadId);
  }

  /// Loss of the frozen model with an optional continuous prompt prepended.
  ///
  /// All-zero prompt rows are padding: masked out, so a zero prompt gives the
  /// control loss bit for bit. `live_rows` names prompt rows that are zero only
  /// because their current weights are; for those the returned value is still
  /// the masked loss, but the gradient is taken from the unmasked computation,
  /// which is the derivative the loss has at any nearby non-zero prompt.
  Tensor loss_with_prompt(const std::optional<Tensor>& prompt, std::span<const TokenId> input_ids,
                          std::span<const TokenId> target_ids,
                          std::span<const std::uint8_t> live_rows = {}) const {
    if (!frozen_) {
      throw ContractError("loss_with_prompt requires a frozen model");
    }
    const Tensor* p = prompt ? &*prompt : nullptr;
    Tensor value = sequence_loss(p, input_ids, target_ids);
    if (!p || live_rows.empty() || !p->requires_grad()) {
      return value;
    }
    if (live_rows.size() != p->dim(0)) {
      throw ShapeError("live_rows length does not match prompt rows");
    }
    const std::size_t d = cfg_.embed_dim;
    bool needs_open = false;
    for (std::size_t r = 0; r < p->dim(0) && !needs_open; ++r) {
      if (!live_rows[r]) {
        continue;
      }
      bool zero = true;
      for (std::size_t j = 0; j < d && zero; ++j) {
        zero = p->data()[r * d + j] == 0.0;
      }
      needs_open = zero;
    }
    if (!needs_open) {
      return value;
    }
    Tensor open = sequence_loss(p, input_ids, target_ids, live_rows);
    // value + (open - open): numerically the masked loss, differentiated through `open`.
    return add(value.detach(), sub(open, open.detach()));
  }

  /// Per-choice losses with each choice rendered as a target.
  std::vector<double> score_choices(const std::optional<Tensor>& prompt,
                                    const QAExample& example) const {
    const auto input_ids = tokenize(format_input(example), vocab_);
    std::vector<double> losses;
    for (const auto& c : example.choices) {
      const auto target_ids = tokenize(format_choice(c), vocab_);
      losses.push_back(loss_with_prompt(prompt, input_ids, target_ids).item());
    }
    return losses;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    for (const auto& [name, t] : params_) {
      ckpt.tensors.emplace_back(name, t.detach());
    }
    std::ostringstream text;
    text << "config vocab_size=" << cfg_.vocab_size << '\n'
         << "config embed_dim=" << cfg_.embed_dim << '\n'
         << "config heads=" << cfg_.heads << '\n'
         << "config ffn_dim=" << cfg_.ffn_dim << '\n'
         << "config max_positions=" << cfg_.max_positions << '\n'
         << "config frozen=" << (frozen_ ? 1 : 0) << '\n'
         << "provenance pretrain_seed=" << provenance_.pretrain_seed << '\n'
         << "provenance corpus_hash=" << provenance_.corpus_hash << '\n'
         << "provenance pretrain_epochs=" << provenance_.pretrain_epochs << '\n';
    for (const auto& w : vocab_.words()) {
      text << "vocab " << w << '\n';
    }
    ckpt.text = text.str();
    return ckpt;
  }

  static FrozenLM from_checkpoint(const Checkpoint& ckpt) {
    LMConfig cfg;
    LMProvenance prov;
    bool frozen = false;
    std::vector<std::string> words;
    std::istringstream text(ckpt.text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(text, line)) {
      ++line_no;
      if (line.rfind("vocab ", 0) == 0) {
        words.push_back(line.substr(6));
        continue;
      }
      const auto space = line.find(' ');
      const auto eq = line.find('=');
      if (space == std::string::npos || eq == std::string::npos || eq < space) {
        throw ParseError(line_no, "bad checkpoint text line: " + line);
      }
      const std::string key = line.substr(space + 1, eq - space - 1);
      const std::uint64_t value = std::stoull(line.substr(eq + 1));
      if (key == "vocab_size") cfg.vocab_size = value;
      else if (key == "embed_dim") cfg.embed_dim = value;
      else if (key == "heads") cfg.heads = value;
      else if (key == "ffn_dim") cfg.ffn_dim = value;
      else if (key == "max_positions") cfg.max_positions = value;
      else if (key == "frozen") frozen = value != 0;
      else if (key == "pretrain_seed") prov.pretrain_seed = value;
      else if (key == "corpus_hash") prov.corpus_hash = value;
      else if (key == "pretrain_epochs") prov.pretrain_epochs = value;
      else throw ParseError(line_no, "unknown checkpoint key " + key);
    }
    FrozenLM lm;
    lm.vocab_ = Vocab::from_words(std::move(words));
    if (lm.vocab_.size() != cfg.vocab_size) {
      throw ValidationError("checkpoint vocab has " + std::to_string(lm.vocab_.size()) +
                            " entries, config says " + std::to_string(cfg.vocab_size));
    }
    cfg.validate();
    lm.cfg_ = cfg;
    lm.provenance_ = prov;
    lm.build([&](const std::string& name, Shape shape, double, double) {
      const Tensor& stored = ckpt.tensor(name);
      if (stored.shape() != shape) {
        throw ValidationError("checkpoint tensor " + name + " has shape " +
                              shape_str(stored.shape()) + ", expected " + shape_str(shape));
      }
      return Tensor::from(shape, std::vector<double>(stored.data().begin(), stored.data().end()),
                          true);
    });
    if (frozen) {
      lm.freeze();
    }
    return lm;
  }

  void set_provenance(LMProvenance p) { provenance_ = p; }

 private:
  FrozenLM() = default;

  Tensor positions(std::size_t n) const {
    const std::size_t d = cfg_.embed_dim;
    if (pos_table_.size() != cfg_.max_positions * d) {
      throw StateError("positional table not initialised");
    }
    return Tensor::from({n, d}, std::vector<double>(pos_table_.begin(),
                                                    pos_table_.begin() + static_cast<std::ptrdiff_t>(n * d)));
  }

  void build_position_table() {
    const std::size_t d = cfg_.embed_dim;
    pos_table_.assign(cfg_.max_positions * d, 0.0);
    for (std::size_t pos = 0; pos < cfg_.max_positions; ++pos) {
      for (std::size_t i = 0; i < d; ++i) {
        const double rate =
            std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * rate;
        pos_table_[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
    }
  }

  Tensor attend(const lm_detail::Attention& a, const Tensor& xq, const Tensor* xkv,
                const std::vector<std::uint8_t>& allowed) const {
    const Tensor& src = xkv ? *xkv : xq;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim / cfg_.heads));
    Tensor total;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Tensor q = a.q[h](xq);
      Tensor k = a.k[h](src);
      Tensor v = a.v[h](src);
      Tensor probs = softmax_rows(scale(matmul_nt(q, k), inv_sqrt), &allowed);
      Tensor head = matmul(matmul(probs, v), a.out[h]);
      total = total.defined() ? add(total, head) : head;
    }
    return add_row_bias(total, a.out_bias);
  }

  // Declares every parameter in a fixed order. `make(name, shape, base, std)`
  // supplies storage: fresh models draw base + std * N(0, 1).
  template <typename Make>
  void build(Make&& make) {
    const std::size_t d = cfg_.embed_dim, dh = d / cfg_.heads, f = cfg_.ffn_dim,
                      v = cfg_.vocab_size;
    params_.clear();
    build_position_table();
    auto param = [&](const std::string& name, Shape shape, double std_dev, double base = 0.0) {
      Tensor t = make(name, std::move(shape), base, std_dev);
      params_.emplace_back(name, t);
      return t;
    };
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out, double std_dev) {
      return lm_detail::Linear{param(name + ".weight", {in, out}, std_dev),
                               param(name + ".bias", {out}, 0.0)};
    };
    auto norm = [&](const std::string& name) {
      return lm_detail::Norm{param(name + ".gain", {d}, 0.0, 1.0), param(name + ".shift", {d}, 0.0)};
    };
    auto attention = [&](const std::string& name) {
      lm_detail::Attention a;
      const double s = 1.0 / std::sqrt(static_cast<double>(d));
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const std::string hn = name + ".h" + std::to_string(h);
        a.q.push_back(linear(hn + ".q", d, dh, s));
        a.k.push_back(linear(hn + ".k", d, dh, s));
        a.v.push_back(linear(hn + ".v", d, dh, s));
        a.out.push_back(param(hn + ".out", {dh, d}, 1.0 / std::sqrt(static_cast<double>(d))));
      }
      a.out_bias = param(name + ".out_bias", {d}, 0.0);
      return a;
    };
    auto ffn = [&](const std::string& name) {
      return lm_detail::FeedForward{linear(name + ".up", d, f, 1.0 / std::sqrt(static_cast<double>(d))),
                                    linear(name + ".down", f, d, 1.0 / std::sqrt(static_cast<double>(f)))};
    };

    embed_ = param("embed.weight", {v, d}, 1.0);
    enc_ln1_ = norm("enc.ln1");
    enc_attn_ = attention("enc.attn");
    enc_ln2_ = norm("enc.ln2");
    enc_ffn_ = ffn("enc.ffn");
    enc_final_ = norm("enc.final");
    dec_ln1_ = norm("dec.ln1");
    dec_self_ = attention("dec.self");
    dec_ln2_ = norm("dec.ln2");
    dec_cross_ = attention("dec.cross");
    dec_ln3_ = norm("dec.ln3");
    dec_ffn_ = ffn("dec.ffn");
    dec_final_ = norm("dec.final");
    lm_head_ = linear("lm_head", d, v, 0.0);

  }

  Vocab vocab_;
  LMConfig cfg_;
  LMProvenance provenance_;
  bool frozen_ = false;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<double> pos_table_;

  Tensor embed_;
  lm_detail::Norm enc_ln1_, enc_ln2_, enc_final_;
  lm_detail::Attention enc_attn_;
  lm_detail::FeedForward enc_ffn_;
  lm_detail::Norm dec_ln1_, dec_ln2_, dec_ln3_, dec_final_;
  lm_detail::Attention dec_self_, dec_cross_;
  lm_detail::FeedForward dec_ffn_;
  lm_detail::Linear lm_head_;
};

struct PretrainOptions {
  std::size_t epochs = 6;
  std::size_t batch_size = 10;
  AdamWHyper hyper{.lr = 3e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
};

struct PretrainLog {
  double initial_loss = 0.0;              // corpus mean before any update
  std::vector<double> epoch_losses;       // mean batch loss seen during each epoch
  double final_loss = 0.0;                // corpus mean after the last update
};

inline std::uint64_t corpus_hash(const std::vector<SeqPair>& corpus) {
  Fnv1a h;
  for (const auto& pair : corpus) {
    h.update(pair.input);
    h.update(std::string_view("\x1f", 1));
    h.update(pair.target);
    h.update(std::string_view("\x1d", 1));
    h.update(pair.prefix);
    h.update(std::string_view("\x1e", 1));
  }
  return h.value();
}

namespace lm_detail {

struct EncodedPair {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
  std::vector<TokenId> prefix;
};

inline Tensor pair_loss(const FrozenLM& lm, const EncodedPair& p) {
  if (p.prefix.empty()) {
    return lm.sequence_loss(nullptr, p.input, p.target);
  }
  const Tensor prompt = lm.embed_tokens(p.prefix, false);
  return lm.sequence_loss(&prompt, p.input, p.target);
}

inline double corpus_mean_loss(const FrozenLM& lm, const std::vector<EncodedPair>& pairs) {
  double total = 0.0;
  for (const auto& p : pairs) {
    total += pair_loss(lm, p).item();
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace lm_detail

/// Teacher-forced seq2seq training of a fresh model on (input, target) text
/// pairs, then freezing it. A pair's prefix, when present, is embedded without
/// positions and enters through the same rows a continuous prompt uses. The pad embedding row is re-pinned to zero after
/// every optimizer step.
inline FrozenLM pretrain(const std::vector<SeqPair>& corpus, Vocab vocab, LMConfig cfg,
                         const PretrainOptions& opts, std::uint64_t seed,
                         PretrainLog* log = nullptr) {
  if (corpus.empty()) {
    throw ValidationError("pretraining corpus is empty");
  }
  if (opts.batch_size == 0) {
    throw ConfigError("pretraining batch size must be >= 1");
  }
  FrozenLM lm = FrozenLM::init(std::move(vocab), cfg, seed);
  std::vector<lm_detail::EncodedPair> pairs;
  pairs.reserve(corpus.size());
  for (const auto& p : corpus) {
    pairs.push_back({tokenize(p.input, lm.vocab()), tokenize(p.target, lm.vocab()),
                     tokenize(p.prefix, lm.vocab())});
  }
  PretrainLog local;
  local.initial_loss = lm_detail::corpus_mean_loss(lm, pairs);

  auto params = lm.parameters();
  AdamW opt(opts.hyper);
  Rng shuffle_rng(seed ^ 0x5EED5EEDULL);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double epoch_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<Tensor> losses;
      for (std::size_t i = start; i < end; ++i) {
        losses.push_back(lm_detail::pair_loss(lm, pairs[order[i]]));
      }
      Tensor batch = mean_of(losses);
      if (!std::isfinite(batch.item())) {
        throw DivergenceError(step, "non-finite pretraining loss");
      }
      batch.backward();
      opt.step(params);
      zero_grads(params);
      lm.pin_pad_row();
      epoch_total += batch.item();
      ++batches;
      ++step;
    }
    local.epoch_losses.push_back(epoch_total / static_cast<double>(batches));
  }
  lm.freeze();
  local.final_loss = lm_detail::corpus_mean_loss(lm, pairs);
  lm.set_provenance({seed, corpus_hash(corpus), opts.epochs});
  if (log) {
    *log = std::move(local);
  }
  return lm;
}

}  // namespace promptblend
