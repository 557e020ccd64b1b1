#ifndef LOIRE_PIPELINE_HPP_
#define LOIRE_PIPELINE_HPP_

// Glue shared by the command-line tool and the acceptance run: corpus
// assembly, config completion from data, stage runners and checkpoint meta.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "loire/checkpoint.hpp"
#include "loire/config.hpp"
#include "loire/data.hpp"
#include "loire/layout.hpp"
#include "loire/layout_train.hpp"
#include "loire/reasoner.hpp"
#include "loire/text_encoder.hpp"

namespace loire {

/// JSON Lines sink for progress and metrics. Wall-clock values never go here.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::ostream* out) : out_(out) {}

  void write(const std::string& event, nlohmann::json fields = nlohmann::json::object()) {
    if (!out_) return;
    nlohmann::json rec{{"event", event}};
    for (auto& [k, v] : fields.items()) rec[k] = v;
    *out_ << rec.dump() << '\n';
    out_->flush();
  }

  bool enabled() const { return out_ != nullptr; }

 private:
  std::ostream* out_ = nullptr;
};

inline nlohmann::json metrics_json(const LayoutMetrics& m) {
  return {{"label_accuracy", m.label_accuracy},
          {"bbox_mse", m.bbox_mse},
          {"loss", m.loss},
          {"label_steps", m.label_steps},
          {"box_steps", m.box_steps}};
}

inline GrammarConfig grammar_config(const DataConfig& d) {
  return GrammarConfig{d.grammar_classes, d.grammar_grid, d.grammar_seed};
}

/**
 * One word vocabulary for both stages: the knowledge encoder reads QA pairs
 * with the same ids it saw captions with.
 */
inline WordVocab corpus_vocab(const std::vector<Scene>& scenes, const std::vector<MCQuestion>& questions) {
  std::vector<std::string> texts;
  texts.reserve(scenes.size() + questions.size() * 6);
  for (const auto& s : scenes) texts.push_back(s.caption);
  for (const auto& q : questions)
    for (std::size_t j = 0; j < q.choices.size(); ++j)
      for (bool prefix : {false, true}) {
        if (prefix && q.style != QaStyle::csqa) continue;
        const PairText pair = format_pair(q, j, prefix);
        texts.push_back(pair.first);
        texts.push_back(pair.second);
      }
  return WordVocab::build(texts);
}

struct SynthCorpus {
  LabelVocab labels;
  std::vector<Scene> scenes;
  std::vector<MCQuestion> questions;
  WordVocab vocab;
};

inline SynthCorpus make_synth_corpus(const DataConfig& d) {
  const GrammarConfig g = grammar_config(d);
  SynthCorpus c;
  std::tie(c.labels, c.scenes) = synth_grammar_generate(g, static_cast<std::size_t>(d.scenes));
  c.questions = synth_qa_generate(g, c.scenes, static_cast<std::size_t>(d.questions), d.choices);
  c.vocab = corpus_vocab(c.scenes, c.questions);
  return c;
}

struct CorpusPaths {
  std::filesystem::path dir;
  std::filesystem::path scenes() const { return dir / "scenes.jsonl"; }
  std::filesystem::path labels() const { return dir / "labels.txt"; }
  std::filesystem::path questions() const { return dir / "questions.jsonl"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
};

inline void save_synth_corpus(const SynthCorpus& c, const CorpusPaths& p) {
  std::filesystem::create_directories(p.dir);
  save_layout_dataset(p.scenes().string(), c.scenes, c.labels);
  c.labels.save(p.labels().string());
  save_csqa(p.questions().string(), c.questions);
  c.vocab.save(p.vocab().string());
}

/// Fills the sizes that a profile leaves at zero from the data.
inline RunConfig complete_config(RunConfig cfg, int vocab_size, int num_classes) {
  if (cfg.encoder.vocab_size == 0) cfg.encoder.vocab_size = vocab_size;
  if (cfg.reasoner.lm.vocab_size == 0) cfg.reasoner.lm.vocab_size = vocab_size;
  if (cfg.layout.num_classes == 0) cfg.layout.num_classes = num_classes;
  return cfg;
}

/// Points every seed-consuming component of a run at `seed`.
inline void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.encoder.seed = seed;
  cfg.layout_train.seed = seed;
  cfg.mlm.train.seed = seed;
  cfg.reasoner.lm.seed = seed;
  cfg.reasoner.train.seed = seed;
}

// ---------------------------------------------------------------------------
// Stage 1.

struct Stage1Data {
  std::vector<LayoutExample> train;
  std::vector<LayoutExample> val;
  std::vector<std::size_t> val_index;  ///< scene indices of `val`
};

inline Stage1Data stage1_data(const std::vector<Scene>& scenes, const Tokenizer& tok, const RunConfig& cfg) {
  Stage1Data d;
  auto [tr, va] = split_indices(scenes.size(), cfg.layout_train.val_frac, cfg.layout_train.seed);
  for (auto i : tr) d.train.push_back(make_layout_example(scenes[i], tok, cfg.encoder.max_len, cfg.layout));
  for (auto i : va) d.val.push_back(make_layout_example(scenes[i], tok, cfg.encoder.max_len, cfg.layout));
  d.val_index = va;
  return d;
}

template <typename T>
LayoutTrainResult run_stage1(LayoutModel<T>& model, const Stage1Data& data, const RunConfig& cfg,
                             MetricsLog& log) {
  log.write("stage1_start", {{"train", data.train.size()},
                             {"val", data.val.size()},
                             {"params", model.params().count()},
                             {"config", to_json(cfg.layout_train)}});
  auto res = train_layout(model, data.train, data.val, cfg.layout_train, [&](const EpochRecord& r) {
    nlohmann::json j = metrics_json(r.metrics);
    j["epoch"] = r.epoch;
    j["split"] = r.split;
    log.write("stage1_epoch", j);
  });
  nlohmann::json done = metrics_json(res.best_val);
  done["best_epoch"] = res.best_epoch;
  log.write("stage1_done", done);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint meta.

inline nlohmann::json checkpoint_meta(const std::string& kind, const RunConfig& cfg, const WordVocab& vocab) {
  return {{"kind", kind},
          {"encoder", to_json(cfg.encoder)},
          {"vocab_hash", vocab_hash(vocab.tokens())},
          {"seed", cfg.seed},
          {"precision", cfg.precision}};
}

/// Stage-1 checkpoint: every layout model parameter plus its configs and label names.
template <typename T>
Checkpoint layout_checkpoint(const LayoutModel<T>& model, const RunConfig& cfg, const WordVocab& vocab,
                             const LabelVocab& labels) {
  auto meta = checkpoint_meta("layout", cfg, vocab);
  meta["layout"] = to_json(cfg.layout);
  meta["labels"] = labels.names();
  return make_checkpoint(model.params(), meta);
}

/// Encoder-only checkpoint (parameters keep the "encoder." prefix).
template <typename T>
Checkpoint encoder_checkpoint(const TextEncoder<T>& enc, const std::string& kind, const RunConfig& cfg,
                              const WordVocab& vocab) {
  return make_checkpoint(enc.params(), checkpoint_meta(kind, cfg, vocab));
}

inline EncoderConfig encoder_config_from_meta(const nlohmann::json& meta) {
  RunConfig tmp;
  try {
    detail::read_encoder(meta.at("encoder"), tmp.encoder);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint has no usable encoder config: ") + e.what());
  }
  return tmp.encoder;
}

/// Refuses a knowledge checkpoint whose encoder config or vocabulary differs from the run's.
inline void check_encoder_compat(const Checkpoint& ck, const EncoderConfig& expected, const WordVocab& vocab,
                                 const std::string& what) {
  const EncoderConfig got = encoder_config_from_meta(ck.meta);
  // Seed, dropout and init scale do not change what the stored weights mean.
  auto shape = [](const EncoderConfig& c) {
    return std::make_tuple(c.vocab_size, c.hidden, c.layers, c.heads, c.ff, c.max_len);
  };
  if (shape(got) != shape(expected))
    throw ConfigError(what + " encoder config " + to_json(got).dump() + " differs from the run's " +
                      to_json(expected).dump());
  if (ck.meta.contains("vocab_hash") && ck.meta.at("vocab_hash") != vocab_hash(vocab.tokens()))
    throw ConfigError(what + " was trained with a different vocabulary");
}

// ---------------------------------------------------------------------------
// Stage 2.

struct QaSplit {
  std::vector<MCQuestion> train;
  std::vector<MCQuestion> dev;
};

inline QaSplit split_questions(const std::vector<MCQuestion>& qs, double dev_frac, std::uint64_t seed) {
  auto [tr, dv] = split_indices(qs.size(), dev_frac, seed);
  QaSplit s;
  for (auto i : tr) s.train.push_back(qs[i]);
  for (auto i : dv) s.dev.push_back(qs[i]);
  return s;
}

inline AblationSetup ablation_setup(const RunConfig& cfg) {
  AblationSetup s;
  s.lm = cfg.reasoner.lm;
  s.knowledge = cfg.encoder;
  s.train = cfg.reasoner.train;
  s.seeds = cfg.reasoner.seeds;
  s.prefix = cfg.reasoner.prefix;
  return s;
}

inline nlohmann::json qa_epoch_json(const QaEpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"dev_accuracy", r.dev_accuracy}};
}

}  // namespace loire

#endif  // LOIRE_PIPELINE_HPP_
