#ifndef LOIRE_REASONER_HPP_
#define LOIRE_REASONER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "loire/checkpoint.hpp"
#include "loire/core/optim.hpp"
#include "loire/data.hpp"
#include "loire/layout_train.hpp"
#include "loire/text_encoder.hpp"

namespace loire {

class ReasonerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The knowledge encoder changed during fine-tuning.
class FreezeViolation : public ReasonerError {
 public:
  using ReasonerError::ReasonerError;
};

// ---------------------------------------------------------------------------
// Input formatting.

struct PairText {
  std::string first;
  std::string second;

  std::string joined() const { return first + " [SEP] " + second; }
  bool operator==(const PairText&) const = default;
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

/**
 * Two-segment text for question `q` and choice `j`. Multiple-choice stems
 * become (stem, choice), optionally as ("Q: stem", "A: choice"). Fill-in
 * stems are cut at the blank: (text before it, choice + text after it).
 */
inline PairText format_pair(const MCQuestion& q, std::size_t j, bool prefix) {
  if (j >= q.choices.size())
    throw std::out_of_range("format_pair: choice " + std::to_string(j) + " of " + std::to_string(q.choices.size()));
  if (q.style == QaStyle::winogrande) {
    const auto blank = q.stem.find('_');
    if (blank == std::string::npos) throw DataError("question " + q.id + " has no blank '_'");
    const std::string before = detail::trim(q.stem.substr(0, blank));
    const std::string after = detail::trim(q.stem.substr(blank + 1));
    std::string second = q.choices[j];
    if (!after.empty()) second += (std::ispunct(static_cast<unsigned char>(after[0])) ? "" : " ") + after;
    return {before, second};
  }
  if (prefix) return {"Q: " + q.stem, "A: " + q.choices[j]};
  return {q.stem, q.choices[j]};
}

// ---------------------------------------------------------------------------
// Variants.

enum class EncoderVariant { none, vibert, frozen_init, caption_mlm };

inline const char* to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::none: return "none";
    case EncoderVariant::vibert: return "vibert";
    case EncoderVariant::frozen_init: return "frozen-init";
    case EncoderVariant::caption_mlm: return "caption-mlm";
  }
  return "?";
}

inline EncoderVariant parse_variant(const std::string& s) {
  if (s == "none") return EncoderVariant::none;
  if (s == "vibert") return EncoderVariant::vibert;
  if (s == "frozen-init" || s == "frozen_init") return EncoderVariant::frozen_init;
  if (s == "caption-mlm" || s == "caption_mlm") return EncoderVariant::caption_mlm;
  throw std::invalid_argument("unknown encoder variant '" + s + "' (none|vibert|frozen-init|caption-mlm)");
}

// ---------------------------------------------------------------------------
// Scoring head.

/// score = h([E1 ; E2 M]). Without a knowledge encoder M is absent and h reads E1 only.
template <typename T>
struct ReasonerHead {
  Var<T> M;  ///< [d_v, d_lm]; empty for the text-only variant
  nn::Linear<T> h;

  bool has_projection() const { return static_cast<bool>(M.node()); }

  static ReasonerHead create(ParamStore<T>& store, int d_lm, std::optional<int> d_v, std::mt19937_64& rng,
                             const std::string& prefix = "head.") {
    ReasonerHead head;
    if (d_v) head.M = store.add_normal(prefix + "M", {*d_v, d_lm}, rng);
    head.h = nn::Linear<T>::create(store, prefix + "h", d_v ? 2 * d_lm : d_lm, 1, rng);
    return head;
  }
};

/// Scalar score [1,1] of one question-choice pair.
template <typename T>
Var<T> score_choice(const Var<T>& e1, const Var<T>* e2, const ReasonerHead<T>& head) {
  if (!head.has_projection()) {
    if (e2) throw ShapeError("score_choice: head has no projection but a knowledge vector was given");
    if (e1.size() != static_cast<std::size_t>(head.h.weight.dim(0)))
      throw ShapeError("score_choice: E1 width " + std::to_string(e1.size()) + " does not match head input " +
                       std::to_string(head.h.weight.dim(0)));
    return head.h(ag::reshape(e1, {1, static_cast<int>(e1.size())}));
  }
  if (!e2) throw ShapeError("score_choice: head expects a knowledge vector");
  const int d_v = head.M.dim(0), d_lm = head.M.dim(1);
  if (static_cast<int>(e1.size()) != d_lm || static_cast<int>(e2->size()) != d_v)
    throw ShapeError("score_choice: E1/E2 widths " + std::to_string(e1.size()) + "/" + std::to_string(e2->size()) +
                     " do not match M " + shape_str(head.M.shape()));
  Var<T> proj = ag::matmul(ag::reshape(*e2, {1, d_v}), head.M);
  return head.h(ag::concat_cols(std::vector<Var<T>>{ag::reshape(e1, {1, d_lm}), proj}));
}

/// Softmax of one question's scores.
inline std::vector<double> softmax(const std::vector<double>& scores) {
  if (scores.empty()) return {};
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double sum = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) sum += (p[i] = std::exp(scores[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

/// First index of the maximum, so ties go to the lowest choice.
inline int argmax_first(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Mean negative log-probability of the gold answers.
inline double qa_loss(const std::vector<MCQuestion>& questions, const std::vector<std::vector<double>>& probs) {
  if (questions.size() != probs.size()) throw std::invalid_argument("qa_loss: question/prediction count mismatch");
  if (questions.empty()) throw std::invalid_argument("qa_loss: empty batch");
  double total = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (!questions[i].gold) throw ReasonerError("qa_loss: question " + questions[i].id + " has no gold answer");
    const int g = *questions[i].gold;
    if (g < 0 || g >= static_cast<int>(probs[i].size())) throw ReasonerError("qa_loss: gold index out of range");
    total += -std::log(probs[i][static_cast<std::size_t>(g)]);
  }
  return total / static_cast<double>(questions.size());
}

// ---------------------------------------------------------------------------
// Model.

/**
 * Fine-tunable language model ("lm." parameters) plus scoring head
 * ("head."), optionally augmented by a frozen knowledge encoder whose
 * parameters keep the stage-1 names ("encoder."), so checkpoints load as is.
 */
template <typename T>
class Reasoner {
 public:
  Reasoner(const EncoderConfig& lm_cfg, std::optional<EncoderConfig> knowledge_cfg, bool prefix = true)
      : lm_(lm_cfg, "lm."), prefix_(prefix) {
    std::mt19937_64 rng(lm_cfg.seed + 101);
    if (knowledge_cfg) {
      knowledge_ = std::make_unique<TextEncoder<T>>(*knowledge_cfg, "encoder.");
      knowledge_->params().set_trainable(false);
    }
    head_ = ReasonerHead<T>::create(head_params_, lm_cfg.hidden,
                                    knowledge_cfg ? std::optional<int>(knowledge_cfg->hidden) : std::nullopt, rng);
    trainable_.merge(lm_.params());
    trainable_.merge(head_params_);
    all_.merge(trainable_);
    if (knowledge_) all_.merge(knowledge_->params());
  }

  Reasoner(const Reasoner&) = delete;
  Reasoner& operator=(const Reasoner&) = delete;

  TextEncoder<T>& lm() { return lm_; }
  const TextEncoder<T>& lm() const { return lm_; }
  bool has_knowledge() const { return static_cast<bool>(knowledge_); }
  TextEncoder<T>& knowledge() { return *knowledge_; }
  const TextEncoder<T>& knowledge() const { return *knowledge_; }
  ReasonerHead<T>& head() { return head_; }
  const ReasonerHead<T>& head() const { return head_; }
  ParamStore<T>& trainable() { return trainable_; }
  const ParamStore<T>& trainable() const { return trainable_; }
  ParamStore<T>& params() { return all_; }
  const ParamStore<T>& params() const { return all_; }
  bool prefix() const { return prefix_; }

  /// Digest of the knowledge encoder ("" when there is none).
  std::string knowledge_digest() const { return knowledge_ ? param_digest(knowledge_->params()) : std::string(); }

  /// Pooled knowledge vector of a pair, computed once in evaluation mode and cached.
  Var<T> knowledge_vector(const PairText& pair, const Tokenizer& tok) const {
    const std::string key = pair.joined();
    auto it = e2_cache_.find(key);
    if (it == e2_cache_.end()) {
      ag::NoGradGuard ng;
      const auto seq = tok.tokenize_pair(pair.first, pair.second, knowledge_->config().max_len);
      auto v = knowledge_->pooled(knowledge_->encode(seq, Mode::eval));
      it = e2_cache_.emplace(key, v.value()).first;
    }
    const int d = knowledge_->config().hidden;
    return Var<T>::constant({1, d}, it->second);
  }

  void clear_cache() const { e2_cache_.clear(); }

  /// Row of scores [1, n] for every choice of `q`.
  Var<T> scores(const MCQuestion& q, const Tokenizer& tok, Mode mode = Mode::eval,
                std::mt19937_64* rng = nullptr) const {
    if (q.choices.size() < 2) throw ReasonerError("question " + q.id + " has fewer than two choices");
    std::vector<Var<T>> out;
    out.reserve(q.choices.size());
    for (std::size_t j = 0; j < q.choices.size(); ++j) {
      const PairText pair = format_pair(q, j, prefix_ && q.style == QaStyle::csqa);
      const auto seq = tok.tokenize_pair(pair.first, pair.second, lm_.config().max_len);
      Var<T> e1 = lm_.pooled(lm_.encode(seq, mode, rng));
      if (knowledge_) {
        Var<T> e2 = knowledge_vector(pair, tok);
        out.push_back(score_choice(e1, &e2, head_));
      } else {
        out.push_back(score_choice<T>(e1, nullptr, head_));
      }
    }
    return ag::concat_cols(out);
  }

  std::vector<double> score_values(const MCQuestion& q, const Tokenizer& tok) const {
    ag::NoGradGuard ng;
    const Var<T> s = scores(q, tok);
    return std::vector<double>(s.value().begin(), s.value().end());
  }

  std::vector<double> predict(const MCQuestion& q, const Tokenizer& tok) const {
    return softmax(score_values(q, tok));
  }

 private:
  TextEncoder<T> lm_;
  std::unique_ptr<TextEncoder<T>> knowledge_;
  ParamStore<T> head_params_;
  ReasonerHead<T> head_;
  ParamStore<T> trainable_;
  ParamStore<T> all_;
  bool prefix_;
  mutable std::unordered_map<std::string, std::vector<T>> e2_cache_;
};

/// Mean NLL of the gold answers over a batch, differentiable in the trainable parameters.
template <typename T>
Var<T> qa_loss(const Reasoner<T>& model, const std::vector<MCQuestion>& batch, const Tokenizer& tok,
               Mode mode = Mode::eval, std::mt19937_64* rng = nullptr) {
  if (batch.empty()) throw std::invalid_argument("qa_loss: empty batch");
  std::vector<Var<T>> terms;
  for (const auto& q : batch) {
    if (!q.gold) throw ReasonerError("qa_loss: question " + q.id + " has no gold answer");
    terms.push_back(ag::nll_from_logits(model.scores(q, tok, mode, rng), *q.gold));
  }
  return ag::affine(ag::add_n(terms), static_cast<T>(1.0 / static_cast<double>(batch.size())), T(0));
}

// ---------------------------------------------------------------------------
// Evaluation.

struct QaPrediction {
  std::string id;
  std::vector<double> scores;
  int pred = 0;
  std::optional<int> gold;
};

inline nlohmann::json to_json(const QaPrediction& p) {
  return {{"id", p.id},
          {"scores", p.scores},
          {"pred", p.pred},
          {"gold", p.gold ? nlohmann::json(*p.gold) : nlohmann::json(nullptr)}};
}

struct QaEvalResult {
  double accuracy = 0;  ///< over questions that carry a gold answer
  std::size_t labeled = 0;
  std::vector<QaPrediction> predictions;
};

/// Accuracy of arbitrary per-question scores (ties to the lowest index).
inline QaEvalResult evaluate_scores(const std::vector<MCQuestion>& qs,
                                    const std::function<std::vector<double>(const MCQuestion&)>& scorer) {
  QaEvalResult r;
  std::size_t correct = 0;
  for (const auto& q : qs) {
    QaPrediction p{q.id, scorer(q), 0, q.gold};
    p.pred = argmax_first(p.scores);
    if (q.gold) {
      ++r.labeled;
      if (p.pred == *q.gold) ++correct;
    }
    r.predictions.push_back(std::move(p));
  }
  r.accuracy = r.labeled ? static_cast<double>(correct) / static_cast<double>(r.labeled) : 0.0;
  return r;
}

template <typename T>
QaEvalResult evaluate(const Reasoner<T>& model, const std::vector<MCQuestion>& qs, const Tokenizer& tok) {
  return evaluate_scores(qs, [&](const MCQuestion& q) { return model.score_values(q, tok); });
}

// ---------------------------------------------------------------------------
// Fine-tuning.

struct QaEpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double dev_accuracy = 0;
};

struct FinetuneResult {
  double best_dev_accuracy = 0;
  int best_epoch = 0;
  std::vector<QaEpochRecord> history;
  std::string digest_before;
  std::string digest_after;
};

using QaEpochCallback = std::function<void(const QaEpochRecord&)>;

/**
 * Trains the language model and head with AdamW under a linear warmup/decay
 * schedule. The knowledge encoder is never handed to the optimizer; its
 * digest is compared before and after and any change is fatal. The model
 * ends holding the parameters of the best dev epoch.
 */
template <typename T>
FinetuneResult finetune(Reasoner<T>& model, const std::vector<MCQuestion>& train, const std::vector<MCQuestion>& dev,
                        const Tokenizer& tok, const TrainConfig& cfg, const QaEpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw TrainingError("finetune: empty training set");
  for (const auto& q : train)
    if (!q.gold) throw ReasonerError("finetune: training question " + q.id + " has no gold answer");
  FinetuneResult res;
  res.digest_before = model.knowledge_digest();
  auto& params = model.trainable();
  optim::Adam<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long total_steps = static_cast<long>((train.size() + bs - 1) / bs) * cfg.epochs;
  long step = 0;
  std::vector<std::vector<T>> best_values;
  res.best_dev_accuracy = -1;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      std::vector<MCQuestion> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train[order[i]]);
      params.zero_grad();
      Var<T> loss = qa_loss(model, batch, tok, Mode::train, &rng);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw TrainingError("non-finite QA loss at epoch " + std::to_string(epoch));
      ag::backward(loss);
      opt.set_lr(optim::warmup_linear(cfg.lr, step++, total_steps, cfg.warmup_frac));
      opt.step();
      loss_sum += lv;
      ++batches;
    }
    QaEpochRecord rec{epoch, loss_sum / static_cast<double>(batches), 0.0};
    rec.dev_accuracy = dev.empty() ? 0.0 : evaluate(model, dev, tok).accuracy;
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.dev_accuracy > res.best_dev_accuracy) {
      res.best_dev_accuracy = rec.dev_accuracy;
      res.best_epoch = epoch;
      best_values.clear();
      for (std::size_t i = 0; i < params.size(); ++i) best_values.push_back(params.at(i).value());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params.at(i).mutable_value() = best_values[i];
  res.digest_after = model.knowledge_digest();
  if (res.digest_after != res.digest_before)
    throw FreezeViolation("knowledge encoder digest changed during fine-tuning: " + res.digest_before + " -> " +
                          res.digest_after);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation.

struct AblationRow {
  EncoderVariant variant = EncoderVariant::none;
  std::size_t params = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> dev_accuracy;  ///< best dev accuracy per seed
  double mean = 0;
  double stddev = 0;  ///< population standard deviation over seeds
  std::string knowledge_digest;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  bool params_equal = true;  ///< across variants that carry a knowledge encoder
};

inline nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json j;
  j["params_equal"] = t.params_equal;
  j["variants"] = nlohmann::json::object();
  for (const auto& r : t.rows)
    j["variants"][to_string(r.variant)] = {{"params", r.params},   {"dev_accuracy", r.dev_accuracy},
                                           {"seeds", r.seeds},     {"mean", r.mean},
                                           {"stddev", r.stddev},   {"knowledge_digest", r.knowledge_digest}};
  return j;
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

struct AblationSetup {
  EncoderConfig lm;
  EncoderConfig knowledge;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool prefix = true;
  /// Knowledge weights per variant; frozen_init needs none (the seeded initial weights are used).
  std::map<EncoderVariant, const Checkpoint*> sources;
};

using AblationCallback = std::function<void(EncoderVariant, std::uint64_t, const FinetuneResult&)>;

/// Builds the reasoner for one variant and seed, loading its knowledge weights.
template <typename T>
std::unique_ptr<Reasoner<T>> make_reasoner(EncoderVariant v, const AblationSetup& setup, std::uint64_t seed) {
  EncoderConfig lm = setup.lm;
  lm.seed = seed;
  auto model = std::make_unique<Reasoner<T>>(
      lm, v == EncoderVariant::none ? std::nullopt : std::optional<EncoderConfig>(setup.knowledge), setup.prefix);
  if (v == EncoderVariant::vibert || v == EncoderVariant::caption_mlm) {
    auto it = setup.sources.find(v);
    if (it == setup.sources.end() || !it->second)
      throw ReasonerError(std::string("variant ") + to_string(v) + " needs an encoder checkpoint");
    apply_checkpoint(*it->second, model->knowledge().params());
  } else if (v == EncoderVariant::frozen_init) {
    auto it = setup.sources.find(v);
    if (it != setup.sources.end() && it->second) apply_checkpoint(*it->second, model->knowledge().params());
  }
  return model;
}

template <typename T>
AblationTable run_ablation(const std::vector<MCQuestion>& train, const std::vector<MCQuestion>& dev,
                           const Tokenizer& tok, const std::vector<EncoderVariant>& variants,
                           const AblationSetup& setup, const AblationCallback& on_run = {}) {
  if (setup.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  AblationTable table;
  std::map<EncoderVariant, std::size_t> counts;
  for (EncoderVariant v : variants) counts[v] = make_reasoner<T>(v, setup, setup.seeds.front())->params().count();
  std::optional<std::size_t> knowledge_params;
  std::string detail;
  for (EncoderVariant v : variants) {
    detail += std::string(" ") + to_string(v) + "=" + std::to_string(counts[v]);
    if (v == EncoderVariant::none) continue;
    if (knowledge_params && *knowledge_params != counts[v]) table.params_equal = false;
    knowledge_params = counts[v];
  }
  if (!table.params_equal) throw ReasonerError("ablation variants differ in parameter count:" + detail);
  for (EncoderVariant v : variants) {
    AblationRow row;
    row.variant = v;
    row.seeds = setup.seeds;
    row.params = counts[v];
    for (std::uint64_t seed : setup.seeds) {
      auto model = make_reasoner<T>(v, setup, seed);
      row.knowledge_digest = model->knowledge_digest();
      TrainConfig tc = setup.train;
      tc.seed = seed;
      auto res = finetune(*model, train, dev, tok, tc);
      if (on_run) on_run(v, seed, res);
      row.dev_accuracy.push_back(res.best_dev_accuracy);
    }
    std::tie(row.mean, row.stddev) = mean_std(row.dev_accuracy);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace loire

#endif  // LOIRE_REASONER_HPP_
