#ifndef LOIRE_TEXT_ENCODER_HPP_
#define LOIRE_TEXT_ENCODER_HPP_

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "loire/core/ops.hpp"
#include "loire/core/params.hpp"

namespace loire {

class TokenizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace special {
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kMask = 4;
inline constexpr int kCount = 5;
}  // namespace special

/// Lowercases and splits on whitespace; every punctuation character becomes its own token.
inline std::vector<std::string> basic_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && c != '\'') {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

/// Word-level vocabulary; the first five entries are the special tokens.
class WordVocab {
 public:
  WordVocab() : WordVocab(std::vector<std::string>{}) {}

  /// Special tokens followed by `words` (duplicates and specials skipped).
  explicit WordVocab(const std::vector<std::string>& words) {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(s);
    for (const auto& w : words)
      if (!index_.count(w)) push(w);
  }

  /// Sorted vocabulary of every token appearing in `texts`.
  static WordVocab build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : basic_tokenize(t)) words.insert(std::move(w));
    return WordVocab(std::vector<std::string>(words.begin(), words.end()));
  }

  static WordVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TokenizerError("cannot open vocab '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
    if (lines.size() < special::kCount || lines[special::kCls] != "[CLS]" ||
        lines[special::kSep] != "[SEP]")
      throw TokenizerError("vocab '" + path + "' does not start with the special tokens");
    return WordVocab(std::vector<std::string>(lines.begin() + special::kCount, lines.end()));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TokenizerError("cannot write vocab '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? special::kUnk : it->second;
  }

 private:
  void push(const std::string& w) {
    index_[w] = static_cast<int>(tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Token ids with segment ids and an attention mask (1 = real token, 0 = padding).
struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<char> mask;

  int length() const { return static_cast<int>(ids.size()); }
  int real_length() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }
};

class Tokenizer {
 public:
  explicit Tokenizer(WordVocab vocab) : vocab_(std::move(vocab)) {}

  const WordVocab& vocab() const { return vocab_; }

  /// [CLS] words [SEP], truncated to `max_len` ids with both specials kept.
  TokenSequence tokenize(const std::string& text, int max_len) const {
    if (max_len < 3) throw TokenizerError("max_len must be at least 3");
    auto words = basic_tokenize(text);
    if (words.empty()) throw TokenizerError("cannot tokenize empty text");
    if (static_cast<int>(words.size()) > max_len - 2) words.resize(max_len - 2);
    TokenSequence seq;
    seq.ids.push_back(special::kCls);
    for (const auto& w : words) seq.ids.push_back(vocab_.id(w));
    seq.ids.push_back(special::kSep);
    seq.segments.assign(seq.ids.size(), 0);
    seq.mask.assign(seq.ids.size(), 1);
    return seq;
  }

  /// [CLS] first [SEP] second [SEP]; the longer segment is trimmed first.
  TokenSequence tokenize_pair(const std::string& first, const std::string& second, int max_len) const {
    if (max_len < 5) throw TokenizerError("max_len must be at least 5 for a pair");
    auto a = basic_tokenize(first);
    auto b = basic_tokenize(second);
    if (a.empty() && b.empty()) throw TokenizerError("cannot tokenize empty text");
    while (static_cast<int>(a.size() + b.size()) > max_len - 3) {
      if (a.size() >= b.size()) a.pop_back();
      else b.pop_back();
    }
    TokenSequence seq;
    seq.ids.push_back(special::kCls);
    for (const auto& w : a) seq.ids.push_back(vocab_.id(w));
    seq.ids.push_back(special::kSep);
    const std::size_t first_len = seq.ids.size();
    for (const auto& w : b) seq.ids.push_back(vocab_.id(w));
    seq.ids.push_back(special::kSep);
    seq.segments.assign(seq.ids.size(), 1);
    std::fill(seq.segments.begin(), seq.segments.begin() + static_cast<std::ptrdiff_t>(first_len), 0);
    seq.mask.assign(seq.ids.size(), 1);
    return seq;
  }

 private:
  WordVocab vocab_;
};

/// Appends padding up to `len` ids.
inline TokenSequence pad_to(TokenSequence seq, int len) {
  while (seq.length() < len) {
    seq.ids.push_back(special::kPad);
    seq.segments.push_back(0);
    seq.mask.push_back(0);
  }
  return seq;
}

struct EncoderConfig {
  int vocab_size = 0;
  int hidden = 64;
  int layers = 2;
  int heads = 4;
  int ff = 128;
  int max_len = 32;
  double dropout = 0.1;
  std::uint64_t seed = 1;
  double init_std = 0.02;

  bool operator==(const EncoderConfig&) const = default;

  void validate() const {
    if (vocab_size <= special::kCount) throw std::invalid_argument("encoder vocab_size too small");
    if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
      throw std::invalid_argument("encoder hidden width must be divisible by the head count");
    if (layers < 1 || ff < 1) throw std::invalid_argument("encoder needs at least one layer");
    if (max_len < 8) throw std::invalid_argument("encoder max_len must be at least 8");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("encoder dropout must be in [0,1)");
    if (!(init_std > 0)) throw std::invalid_argument("encoder init_std must be positive");
  }
};

/// Per-position contextual vectors [L, d] and the mask they were computed under.
template <typename T>
struct TokenEmbeddings {
  Var<T> vectors;
  std::vector<char> mask;

  int length() const { return vectors.dim(0); }
};

enum class Mode { eval, train };

/// Sentence vector from the first (CLS) position: tanh(W e_0 + b).
template <typename T>
Var<T> pool(const TokenEmbeddings<T>& emb, const nn::Linear<T>& pooler) {
  return ag::tanh(pooler(ag::rows(emb.vectors, 0, 1)));
}

/**
 * Post-norm transformer encoder with learned token, position and segment
 * embeddings plus a tanh pooler. Parameter names are prefixed so several
 * encoders can share one checkpoint.
 */
template <typename T>
class TextEncoder {
 public:
  explicit TextEncoder(const EncoderConfig& cfg, const std::string& prefix = "encoder.")
      : cfg_(cfg), prefix_(prefix) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const int d = cfg.hidden;
    const double sd = cfg.init_std;
    tok_emb_ = params_.add_normal(prefix + "tok_emb", {cfg.vocab_size, d}, rng, sd);
    pos_emb_ = params_.add_normal(prefix + "pos_emb", {cfg.max_len, d}, rng, sd);
    seg_emb_ = params_.add_normal(prefix + "seg_emb", {2, d}, rng, sd);
    emb_ln_ = nn::LayerNorm<T>::create(params_, prefix + "emb_ln", d);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      Block b;
      b.q = nn::Linear<T>::create(params_, p + "q", d, d, rng, sd);
      b.k = nn::Linear<T>::create(params_, p + "k", d, d, rng, sd);
      b.v = nn::Linear<T>::create(params_, p + "v", d, d, rng, sd);
      b.o = nn::Linear<T>::create(params_, p + "o", d, d, rng, sd);
      b.ln1 = nn::LayerNorm<T>::create(params_, p + "ln1", d);
      b.ff1 = nn::Linear<T>::create(params_, p + "ff1", d, cfg.ff, rng, sd);
      b.ff2 = nn::Linear<T>::create(params_, p + "ff2", cfg.ff, d, rng, sd);
      b.ln2 = nn::LayerNorm<T>::create(params_, p + "ln2", d);
      blocks_.push_back(b);
    }
    pooler_ = nn::Linear<T>::create(params_, prefix + "pooler", d, d, rng, sd);
  }

  TextEncoder(const TextEncoder&) = delete;
  TextEncoder& operator=(const TextEncoder&) = delete;

  const EncoderConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const nn::Linear<T>& pooler() const { return pooler_; }
  const Var<T>& token_table() const { return tok_emb_; }

  /// Contextual embeddings e(S). Dropout is active only in train mode.
  TokenEmbeddings<T> encode(const TokenSequence& seq, Mode mode = Mode::eval,
                            std::mt19937_64* rng = nullptr) const {
    const int L = seq.length();
    if (L < 1) throw TokenizerError("encode: empty token sequence");
    if (L > cfg_.max_len) throw TokenizerError("encode: sequence longer than max_len");
    for (int id : seq.ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw TokenizerError("encode: token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(cfg_.vocab_size));
    const bool drop = mode == Mode::train && cfg_.dropout > 0 && rng != nullptr;
    const T rate = static_cast<T>(cfg_.dropout);
    std::vector<int> positions(L);
    for (int i = 0; i < L; ++i) positions[i] = i;
    Var<T> x = ag::add(ag::add(ag::embedding(tok_emb_, seq.ids), ag::embedding(pos_emb_, positions)),
                       ag::embedding(seg_emb_, seq.segments));
    x = emb_ln_(x);
    if (drop) x = ag::dropout(x, rate, *rng);
    const int d = cfg_.hidden, H = cfg_.heads, dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (const auto& b : blocks_) {
      Var<T> q = b.q(x), k = b.k(x), v = b.v(x);
      std::vector<Var<T>> heads;
      heads.reserve(H);
      for (int h = 0; h < H; ++h) {
        Var<T> qh = ag::cols(q, h * dh, (h + 1) * dh);
        Var<T> kh = ag::cols(k, h * dh, (h + 1) * dh);
        Var<T> vh = ag::cols(v, h * dh, (h + 1) * dh);
        Var<T> att = ag::softmax_rows(ag::affine(ag::matmul(qh, ag::transpose(kh)), scale), seq.mask);
        if (drop) att = ag::dropout(att, rate, *rng);
        heads.push_back(ag::matmul(att, vh));
      }
      Var<T> attn = b.o(H == 1 ? heads[0] : ag::concat_cols(heads));
      if (drop) attn = ag::dropout(attn, rate, *rng);
      x = b.ln1(ag::add(x, attn));
      Var<T> f = b.ff2(ag::gelu(b.ff1(x)));
      if (drop) f = ag::dropout(f, rate, *rng);
      x = b.ln2(ag::add(x, f));
    }
    return TokenEmbeddings<T>{x, seq.mask};
  }

  Var<T> pooled(const TokenEmbeddings<T>& emb) const { return pool(emb, pooler_); }

 private:
  struct Block {
    nn::Linear<T> q, k, v, o;
    nn::LayerNorm<T> ln1;
    nn::Linear<T> ff1, ff2;
    nn::LayerNorm<T> ln2;
  };

  EncoderConfig cfg_;
  std::string prefix_;
  ParamStore<T> params_;
  Var<T> tok_emb_, pos_emb_, seg_emb_;
  nn::LayerNorm<T> emb_ln_;
  std::vector<Block> blocks_;
  nn::Linear<T> pooler_;
};

/**
 * Masked-language-model head: dense + GELU + layer norm, then logits through
 * the transposed token table plus an output bias.
 */
template <typename T>
class MlmHead {
 public:
  MlmHead(const TextEncoder<T>& enc, const std::string& prefix = "mlm.") : table_(enc.token_table()) {
    std::mt19937_64 rng(enc.config().seed + 101);
    const int d = enc.config().hidden;
    transform_ = nn::Linear<T>::create(params_, prefix + "transform", d, d, rng);
    ln_ = nn::LayerNorm<T>::create(params_, prefix + "ln", d);
    bias_ = params_.add_constant(prefix + "bias", {enc.config().vocab_size}, T(0));
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Logits [rows, V] for the given hidden rows.
  Var<T> logits(const Var<T>& hidden) const {
    Var<T> h = ln_(ag::gelu(transform_(hidden)));
    return ag::add_bias(ag::matmul(h, ag::transpose(table_)), bias_);
  }

 private:
  Var<T> table_;
  ParamStore<T> params_;
  nn::Linear<T> transform_;
  nn::LayerNorm<T> ln_;
  Var<T> bias_;
};

class MlmError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// ceil(rate * n) with n the number of maskable (real, non-special) positions.
inline int mlm_mask_count(int maskable, double mask_rate) {
  return static_cast<int>(std::ceil(mask_rate * static_cast<double>(maskable) - 1e-12));
}

/**
 * Masks ceil(rate * L) non-special positions of every sequence with [MASK]
 * and returns the mean cross-entropy of recovering the original ids over all
 * masked positions in the batch.
 */
template <typename T>
Var<T> mlm_step(const TextEncoder<T>& enc, const MlmHead<T>& head,
                const std::vector<TokenSequence>& batch, double mask_rate, Mode mode,
                std::mt19937_64& rng) {
  if (!(mask_rate > 0 && mask_rate < 1)) throw MlmError("mask_rate must be in (0, 1)");
  if (batch.empty()) throw MlmError("mlm_step: empty batch");
  std::vector<Var<T>> row_logits;
  std::vector<int> targets;
  for (const auto& seq : batch) {
    std::vector<int> maskable;
    for (int i = 0; i < seq.length(); ++i)
      if (seq.mask[i] && seq.ids[i] >= special::kCount) maskable.push_back(i);
    if (maskable.empty()) throw MlmError("mlm_step: sequence has no maskable position");
    const int n = std::min<int>(static_cast<int>(maskable.size()),
                                mlm_mask_count(static_cast<int>(maskable.size()), mask_rate));
    std::shuffle(maskable.begin(), maskable.end(), rng);
    maskable.resize(n);
    std::sort(maskable.begin(), maskable.end());
    TokenSequence masked = seq;
    for (int p : maskable) masked.ids[p] = special::kMask;
    auto emb = enc.encode(masked, mode, &rng);
    for (int p : maskable) {
      row_logits.push_back(ag::rows(emb.vectors, p, p + 1));
      targets.push_back(seq.ids[p]);
    }
  }
  return ag::cross_entropy_rows(head.logits(ag::concat_rows(row_logits)), targets);
}

}  // namespace loire

#endif  // LOIRE_TEXT_ENCODER_HPP_
