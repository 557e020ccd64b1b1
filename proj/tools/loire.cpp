#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "loire/pipeline.hpp"
#include "loire/render.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loire;

namespace {

/// Bad or missing command input; maps to exit code 1 like config errors.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Relative paths resolve against $LOIRE_DATA_ROOT when it is set.
fs::path under_root(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  const char* root = std::getenv("LOIRE_DATA_ROOT");
  return (root && *root) ? fs::path(root) / path : path;
}

fs::path input_path(const std::string& p, const std::string& what) {
  if (p.empty()) throw InputError("missing " + what);
  const fs::path path = under_root(p);
  if (!fs::exists(path)) throw InputError(what + " '" + path.string() + "' does not exist");
  return path;
}

fs::path output_path(const std::string& p) {
  const fs::path path = under_root(p);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

struct Common {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string log;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config overlaid on the profile");
  cmd->add_option("--profile", c.profile, "starting profile")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", c.seed, "seed for every seeded component of the run");
  cmd->add_option("--set", c.sets, "dotted override, e.g. layout.raster=64 (repeatable)");
  cmd->add_option("--log", c.log, "JSON Lines metrics log (default: logs/<command>.jsonl)");
}

RunConfig load_config(const Common& c) {
  json doc;
  if (!c.config.empty()) doc = load_json_file(input_path(c.config, "config file").string());
  RunConfig cfg = resolve_config(c.profile, doc, c.sets);
  if (c.seed) apply_seed(cfg, *c.seed);
  return cfg;
}

class LogFile {
 public:
  LogFile(const Common& c, const std::string& command) {
    const fs::path p = output_path(c.log.empty() ? "logs/" + command + ".jsonl" : c.log);
    out_.open(p, std::ios::binary | std::ios::trunc);
    if (!out_) throw InputError("cannot write log '" + p.string() + "'");
    log_ = MetricsLog(&out_);
  }
  MetricsLog& operator*() { return log_; }

 private:
  std::ofstream out_;
  MetricsLog log_;
};

struct Corpus {
  LabelVocab labels;
  WordVocab vocab;
  std::vector<Scene> scenes;
  std::vector<MCQuestion> questions;
};

Corpus load_corpus(const std::string& dir, bool need_scenes, bool need_questions) {
  const CorpusPaths p{under_root(dir)};
  Corpus c;
  c.vocab = WordVocab::load(input_path(p.vocab().string(), "vocabulary").string());
  c.labels = LabelVocab::load(input_path(p.labels().string(), "label list").string());
  if (need_scenes) c.scenes = load_layout_dataset(input_path(p.scenes().string(), "scene file").string(), c.labels);
  if (need_questions)
    c.questions = load_mcqa(input_path(p.questions().string(), "question file").string(), QaStyle::csqa);
  return c;
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << body)) throw std::runtime_error("cannot write '" + path.string() + "'");
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

// ---------------------------------------------------------------------------

int cmd_synth(const Common& common, long n, long questions, const std::string& out) {
  RunConfig cfg = load_config(common);
  if (common.seed) cfg.data.grammar_seed = *common.seed;
  if (n > 0) cfg.data.scenes = static_cast<int>(n);
  if (questions > 0) cfg.data.questions = static_cast<int>(questions);
  LogFile log(common, "synth");
  const SynthCorpus corpus = make_synth_corpus(cfg.data);
  const CorpusPaths paths{output_path(out)};
  save_synth_corpus(corpus, paths);
  json files;
  for (const auto& p : {paths.scenes(), paths.labels(), paths.questions(), paths.vocab()}) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    files[p.filename().string()] = sha256_hex(ss.str());
  }
  json summary{{"scenes", corpus.scenes.size()},
               {"questions", corpus.questions.size()},
               {"classes", corpus.labels.size()},
               {"vocab", corpus.vocab.size()},
               {"grammar_seed", cfg.data.grammar_seed},
               {"sha256", files}};
  (*log).write("synth", summary);
  std::cout << "wrote corpus to " << paths.dir.string() << "\n";
  print_json(summary);
  return 0;
}

int cmd_prepare(const Common& common, const std::string& in, const std::string& labels_path,
                const std::string& out) {
  const RunConfig cfg = load_config(common);
  LogFile log(common, "prepare-data");
  const LabelVocab labels = LabelVocab::load(input_path(labels_path, "label list").string());
  const auto scenes = load_layout_dataset(input_path(in, "scene file").string(), labels);
  std::vector<Scene> kept;
  std::size_t boxes_in = 0, boxes_out = 0;
  std::vector<std::string> rejected;
  for (const auto& s : scenes) {
    boxes_in += s.boxes.size();
    auto f = filter_and_normalize(s, cfg.data.min_area_frac, static_cast<std::size_t>(cfg.data.max_objects));
    if (!f) {
      rejected.push_back(s.id);
      continue;
    }
    f->boxes = canonical_order(f->boxes);
    boxes_out += f->boxes.size();
    kept.push_back(std::move(*f));
  }
  save_layout_dataset(output_path(out).string(), kept, labels);
  json report{{"scenes_in", scenes.size()},
              {"scenes_kept", kept.size()},
              {"rejections", rejected.size()},
              {"rejected_ids", rejected},
              {"boxes_in", boxes_in},
              {"boxes_kept", boxes_out},
              {"min_area_frac", cfg.data.min_area_frac},
              {"max_objects", cfg.data.max_objects}};
  (*log).write("prepare_data", report);
  std::cout << "kept " << kept.size() << " of " << scenes.size() << " scenes, " << rejected.size()
            << " rejected\n";
  print_json(report);
  return 0;
}

template <typename T>
int cmd_train_layout(const Common& common, RunConfig cfg, const std::string& data, const std::string& out) {
  const Corpus corpus = load_corpus(data, true, false);
  cfg = complete_config(cfg, corpus.vocab.size(), corpus.labels.size());
  LogFile log(common, "train-layout");
  const Tokenizer tok(corpus.vocab);
  LayoutModel<T> model(cfg.encoder, cfg.layout);
  const auto split = stage1_data(corpus.scenes, tok, cfg);
  const auto res = run_stage1(model, split, cfg, *log);
  const fs::path path = output_path(out);
  save_checkpoint(layout_checkpoint(model, cfg, corpus.vocab, corpus.labels), path.string());
  std::cout << "best epoch " << res.best_epoch << ": val label accuracy " << res.best_val.label_accuracy
            << ", bbox mse " << res.best_val.bbox_mse << "\ncheckpoint " << path.string() << "\n";
  return 0;
}

template <typename T>
std::unique_ptr<LayoutModel<T>> layout_model_from(const Checkpoint& ck, const WordVocab& vocab) {
  if (ck.meta.value("kind", "") != "layout") throw ConfigError("checkpoint is not a layout checkpoint");
  RunConfig tmp;
  tmp.encoder = encoder_config_from_meta(ck.meta);
  try {
    detail::read_layout(ck.meta.at("layout"), tmp.layout);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint has no usable layout config: ") + e.what());
  }
  if (ck.meta.value("vocab_hash", "") != vocab_hash(vocab.tokens()))
    throw ConfigError("checkpoint was trained with a different vocabulary");
  auto model = std::make_unique<LayoutModel<T>>(tmp.encoder, tmp.layout);
  apply_checkpoint(ck, model->params());
  return model;
}

template <typename T>
int cmd_eval_layout(const Common& common, const RunConfig& cfg, const std::string& ckpt, const std::string& data,
                    bool all) {
  const Corpus corpus = load_corpus(data, true, false);
  LogFile log(common, "eval-layout");
  const auto model = layout_model_from<T>(load_checkpoint(input_path(ckpt, "checkpoint").string()), corpus.vocab);
  std::vector<Scene> scenes;
  if (all) {
    scenes = corpus.scenes;
  } else {
    for (auto i : split_indices(corpus.scenes.size(), cfg.layout_train.val_frac, cfg.layout_train.seed).second)
      scenes.push_back(corpus.scenes[i]);
  }
  const auto m = eval_layout(*model, scenes, Tokenizer(corpus.vocab));
  json j = metrics_json(m);
  j["scenes"] = scenes.size();
  j["split"] = all ? "all" : "val";
  (*log).write("eval_layout", j);
  print_json(j);
  return 0;
}

int cmd_gradcheck(const Common& common, const std::string& target, const std::string& part, std::size_t samples,
                  double eps, double tol) {
  RunConfig cfg = load_config(common);
  LogFile log(common, "gradcheck");
  DataConfig d = cfg.data;
  d.scenes = 16;
  d.questions = 8;
  const SynthCorpus corpus = make_synth_corpus(d);
  const Tokenizer tok(corpus.vocab);
  const EncoderConfig enc{corpus.vocab.size(), 16, 1, 2, 32, 16, 0.0, cfg.seed};
  GradCheckResult r;
  if (target == "layout") {
    const LayoutConfig lc{corpus.labels.size(), 8, 4, 6, 5, 12, 3, 6};
    LayoutModel<double> model(enc, lc);
    const auto ex = make_layout_example(corpus.scenes.front(), tok, enc.max_len, lc);
    r = grad_check(model, parse_model_part(part), ex, eps, samples, cfg.seed);
  } else {
    Reasoner<double> model(enc, enc, true);
    const std::vector<MCQuestion> batch(corpus.questions.begin(), corpus.questions.begin() + 2);
    r = grad_check_params<double>(
        model.trainable(), [](const std::string&) { return true; },
        [&] { return qa_loss(model, batch, tok, Mode::eval, nullptr); }, eps, samples, cfg.seed);
  }
  json j{{"target", target},  {"part", target == "layout" ? part : "lm+head"},
         {"samples", r.checked}, {"epsilon", eps},
         {"max_rel_error", r.max_rel_error}, {"worst", r.worst_param},
         {"tolerance", tol}, {"pass", r.max_rel_error < tol}};
  (*log).write("gradcheck", j);
  print_json(j);
  return r.max_rel_error < tol ? 0 : 2;
}

template <typename T>
int cmd_train_mlm(const Common& common, RunConfig cfg, const std::string& data, const std::string& out) {
  const Corpus corpus = load_corpus(data, true, false);
  cfg = complete_config(cfg, corpus.vocab.size(), corpus.labels.size());
  LogFile log(common, "train-mlm");
  TextEncoder<T> enc(cfg.encoder, "encoder.");
  MlmHead<T> head(enc);
  std::vector<std::string> captions;
  for (const auto& s : corpus.scenes) captions.push_back(s.caption);
  (*log).write("mlm_start", {{"captions", captions.size()}, {"mask_rate", cfg.mlm.mask_rate},
                             {"config", to_json(cfg.mlm.train)}});
  const auto r = train_mlm_ablation(enc, head, captions, Tokenizer(corpus.vocab), cfg.mlm.train, cfg.mlm.mask_rate);
  (*log).write("mlm_done", {{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss},
                            {"steps", r.step_losses.size()}});
  const fs::path path = output_path(out);
  save_checkpoint(encoder_checkpoint(enc, "caption_mlm", cfg, corpus.vocab), path.string());
  std::cout << "MLM loss " << r.initial_loss << " -> " << r.final_loss << "\ncheckpoint " << path.string() << "\n";
  return 0;
}

struct QaInputs {
  std::string data = "synth";
  std::string questions;
  std::string dev;
  std::string style;
};

/// Train/dev questions: explicit files, or the seeded split of the corpus questions.
QaSplit qa_split(const RunConfig& cfg, const Corpus& corpus, const QaInputs& in) {
  const QaStyle style = parse_style(in.style.empty() ? cfg.reasoner.style : in.style);
  std::vector<MCQuestion> all =
      in.questions.empty() ? corpus.questions : load_mcqa(input_path(in.questions, "question file").string(), style);
  for (auto& q : all) q.style = style;
  if (!in.dev.empty()) {
    QaSplit s{all, load_mcqa(input_path(in.dev, "dev question file").string(), style)};
    return s;
  }
  return split_questions(all, cfg.data.qa_dev_frac, cfg.seed);
}

json reasoner_meta(const RunConfig& cfg, EncoderVariant v, const WordVocab& vocab) {
  json meta = checkpoint_meta("reasoner", cfg, vocab);
  meta["variant"] = to_string(v);
  meta["lm"] = to_json(cfg.reasoner.lm);
  meta["prefix"] = cfg.reasoner.prefix;
  return meta;
}

void write_predictions(const std::string& path, const QaEvalResult& r) {
  if (path.empty()) return;
  std::string body;
  for (const auto& p : r.predictions) body += to_json(p).dump() + "\n";
  write_text(output_path(path), body);
}

template <typename T>
int cmd_finetune(const Common& common, RunConfig cfg, const QaInputs& in, const std::string& variant_name,
                 const std::string& encoder_ckpt, const std::string& out, const std::string& predictions) {
  const EncoderVariant variant = parse_variant(variant_name);
  const Corpus corpus = load_corpus(in.data, false, in.questions.empty());
  cfg = complete_config(cfg, corpus.vocab.size(), corpus.labels.size());
  LogFile log(common, "finetune-qa");
  const Tokenizer tok(corpus.vocab);
  const QaSplit split = qa_split(cfg, corpus, in);
  AblationSetup setup = ablation_setup(cfg);
  std::optional<Checkpoint> source;
  if (!encoder_ckpt.empty()) {
    if (variant == EncoderVariant::none) throw InputError("variant none takes no encoder checkpoint");
    source = load_checkpoint(input_path(encoder_ckpt, "encoder checkpoint").string());
    check_encoder_compat(*source, cfg.encoder, corpus.vocab, "checkpoint '" + encoder_ckpt + "'");
    setup.sources[variant] = &*source;
  } else if (variant == EncoderVariant::vibert || variant == EncoderVariant::caption_mlm) {
    throw InputError(std::string("variant ") + to_string(variant) + " needs --encoder");
  }
  auto model = make_reasoner<T>(variant, setup, cfg.seed);
  (*log).write("finetune_start", {{"variant", to_string(variant)},
                                  {"train", split.train.size()},
                                  {"dev", split.dev.size()},
                                  {"params", model->params().count()},
                                  {"trainable", model->trainable().count()},
                                  {"config", to_json(cfg.reasoner.train)}});
  TrainConfig tc = cfg.reasoner.train;
  tc.seed = cfg.seed;
  const auto res = finetune(*model, split.train, split.dev, tok, tc,
                            [&](const QaEpochRecord& r) { (*log).write("finetune_epoch", qa_epoch_json(r)); });
  json done{{"best_dev_accuracy", res.best_dev_accuracy},
            {"best_epoch", res.best_epoch},
            {"digest_before", res.digest_before},
            {"digest_after", res.digest_after}};
  (*log).write("finetune_done", done);
  const fs::path path = output_path(out);
  json meta = reasoner_meta(cfg, variant, corpus.vocab);
  meta["knowledge_digest"] = res.digest_after;
  save_checkpoint(make_checkpoint(model->params(), meta), path.string());
  write_predictions(predictions, evaluate(*model, split.dev, tok));
  std::cout << "variant " << to_string(variant) << ": best dev accuracy " << res.best_dev_accuracy << " (epoch "
            << res.best_epoch << ")\nknowledge digest unchanged: "
            << (res.digest_before == res.digest_after ? "yes" : "no") << "\ncheckpoint " << path.string() << "\n";
  return 0;
}

template <typename T>
int cmd_eval_qa(const Common& common, RunConfig cfg, const QaInputs& in, const std::string& ckpt,
                const std::string& predictions) {
  const Corpus corpus = load_corpus(in.data, false, in.questions.empty());
  LogFile log(common, "eval-qa");
  const Checkpoint ck = load_checkpoint(input_path(ckpt, "reasoner checkpoint").string());
  if (ck.meta.value("kind", "") != "reasoner") throw ConfigError("checkpoint is not a reasoner checkpoint");
  if (ck.meta.value("vocab_hash", "") != vocab_hash(corpus.vocab.tokens()))
    throw ConfigError("checkpoint was trained with a different vocabulary");
  RunConfig tmp;
  try {
    detail::read_encoder(ck.meta.at("lm"), tmp.reasoner.lm);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("reasoner checkpoint has no usable lm config: ") + e.what());
  }
  const EncoderVariant variant = parse_variant(ck.meta.value("variant", "none"));
  std::optional<EncoderConfig> knowledge;
  if (variant != EncoderVariant::none) knowledge = encoder_config_from_meta(ck.meta);
  Reasoner<T> model(tmp.reasoner.lm, knowledge, ck.meta.value("prefix", true));
  apply_checkpoint(ck, model.params());
  std::vector<MCQuestion> qs;
  if (in.questions.empty()) {
    qs = qa_split(cfg, corpus, in).dev;
  } else {
    const QaStyle style = parse_style(in.style.empty() ? cfg.reasoner.style : in.style);
    qs = load_mcqa(input_path(in.questions, "question file").string(), style);
  }
  const auto r = evaluate(model, qs, Tokenizer(corpus.vocab));
  write_predictions(predictions, r);
  json j{{"variant", to_string(variant)}, {"questions", qs.size()}, {"labeled", r.labeled}, {"accuracy", r.accuracy}};
  (*log).write("eval_qa", j);
  print_json(j);
  return 0;
}

std::vector<EncoderVariant> parse_variant_list(const std::string& s) {
  std::vector<EncoderVariant> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_variant(item));
  if (out.empty()) throw InputError("no variants given");
  return out;
}

template <typename T>
int cmd_ablation(const Common& common, RunConfig cfg, const QaInputs& in, const std::string& variants_arg,
                 const std::map<EncoderVariant, std::string>& ckpts, bool count_only, const std::string& out) {
  const auto variants = parse_variant_list(variants_arg);
  const Corpus corpus = load_corpus(in.data, false, in.questions.empty());
  cfg = complete_config(cfg, corpus.vocab.size(), corpus.labels.size());
  LogFile log(common, "ablation");
  AblationSetup setup = ablation_setup(cfg);
  std::map<EncoderVariant, Checkpoint> loaded;
  for (const auto& [v, path] : ckpts) {
    if (path.empty()) continue;
    loaded[v] = load_checkpoint(input_path(path, std::string(to_string(v)) + " checkpoint").string());
    check_encoder_compat(loaded[v], cfg.encoder, corpus.vocab, std::string(to_string(v)) + " checkpoint");
    setup.sources[v] = &loaded[v];
  }
  for (EncoderVariant v : variants)
    if ((v == EncoderVariant::vibert || v == EncoderVariant::caption_mlm) && !loaded.count(v))
      throw InputError(std::string("variant ") + to_string(v) + " needs its checkpoint (--" +
                       (v == EncoderVariant::vibert ? "vibert" : "caption-mlm") + ")");

  json table;
  if (count_only) {
    table["variants"] = json::object();
    std::optional<std::size_t> shared;
    bool equal = true;
    for (EncoderVariant v : variants) {
      const auto n = make_reasoner<T>(v, setup, setup.seeds.front())->params().count();
      table["variants"][to_string(v)] = {{"params", n}};
      if (v == EncoderVariant::none) continue;
      if (shared && *shared != n) equal = false;
      shared = n;
    }
    table["params_equal"] = equal;
    if (!equal) {
      print_json(table);
      throw ReasonerError("ablation variants differ in parameter count");
    }
  } else {
    const QaSplit split = qa_split(cfg, corpus, in);
    const Tokenizer tok(corpus.vocab);
    const auto t = run_ablation<T>(split.train, split.dev, tok, variants, setup,
                                   [&](EncoderVariant v, std::uint64_t seed, const FinetuneResult& r) {
                                     (*log).write("ablation_run", {{"variant", to_string(v)},
                                                                   {"seed", seed},
                                                                   {"best_dev_accuracy", r.best_dev_accuracy},
                                                                   {"best_epoch", r.best_epoch}});
                                   });
    table = to_json(t);
  }
  (*log).write("ablation_table", table);
  if (!out.empty()) write_text(output_path(out), table.dump(2) + "\n");
  print_json(table);
  return 0;
}

template <typename T>
int cmd_render(const Common& common, const std::string& ckpt, const std::string& caption, const std::string& data,
               long index, const std::string& format_name, int size, const std::string& out) {
  const RenderFormat format = parse_render_format(format_name);
  if (size < 1) throw InputError("--size must be positive");
  LogFile log(common, "render");
  std::vector<LabeledBox> boxes;
  LabelVocab labels;
  std::string title = caption;
  if (!ckpt.empty()) {
    if (caption.empty()) throw InputError("--caption is required with --checkpoint");
    const Corpus corpus = load_corpus(data, false, false);
    const auto model = layout_model_from<T>(load_checkpoint(input_path(ckpt, "checkpoint").string()), corpus.vocab);
    boxes = generate(*model, Tokenizer(corpus.vocab), caption, model->decoder().config().max_steps).boxes;
    labels = corpus.labels;
  } else {
    const Corpus corpus = load_corpus(data, true, false);
    if (index < 0 || index >= static_cast<long>(corpus.scenes.size()))
      throw InputError("--index " + std::to_string(index) + " outside the " + std::to_string(corpus.scenes.size()) +
                       " scenes");
    const Scene& s = corpus.scenes[static_cast<std::size_t>(index)];
    boxes = s.boxes;
    labels = corpus.labels;
    title = s.caption;
  }
  const fs::path path = output_path(out);
  render_layout(boxes, labels, path.string(), format, size, title);
  json j{{"boxes", boxes.size()}, {"format", format_name}, {"out", path.string()}};
  (*log).write("render", j);
  std::cout << "rendered " << boxes.size() << " boxes to " << path.string() << "\n";
  return 0;
}

template <typename F>
int by_precision(const RunConfig& cfg, F&& f) {
  return cfg.precision == "f64" ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage layout-grounded commonsense reasoning pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  QaInputs qa;

  auto* synth = app.add_subcommand("synth", "emit the synthetic grammar and QA corpora");
  add_common(synth, common);
  long synth_n = 0, synth_q = 0;
  std::string synth_out = "synth";
  synth->add_option("--n", synth_n, "number of scenes (default: data.scenes)");
  synth->add_option("--questions", synth_q, "number of questions (default: data.questions)");
  synth->add_option("--out", synth_out, "output directory");

  auto* prep = app.add_subcommand("prepare-data", "filter, normalize and order scenes; report rejections");
  add_common(prep, common);
  std::string prep_in, prep_labels, prep_out = "prepared.jsonl";
  prep->add_option("--in", prep_in, "scene file (JSON Lines)")->required();
  prep->add_option("--labels", prep_labels, "label list, one name per line")->required();
  prep->add_option("--out", prep_out, "output scene file");

  std::string data_dir = "synth";
  auto* tl = app.add_subcommand("train-layout", "stage 1: train the layout generator and ViBERT");
  add_common(tl, common);
  std::string tl_out = "stage1.ckpt";
  tl->add_option("--data", data_dir, "corpus directory");
  tl->add_option("--out", tl_out, "checkpoint path");

  auto* el = app.add_subcommand("eval-layout", "teacher-forced label accuracy and bbox MSE");
  add_common(el, common);
  std::string el_ckpt = "stage1.ckpt";
  bool el_all = false;
  el->add_option("--checkpoint", el_ckpt, "layout checkpoint");
  el->add_option("--data", data_dir, "corpus directory");
  el->add_flag("--all", el_all, "score every scene instead of the held-out split");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check in double precision");
  add_common(gc, common);
  std::string gc_target = "layout", gc_part = "full";
  std::size_t gc_samples = 200;
  double gc_eps = 1e-5, gc_tol = 1e-3;
  gc->add_option("--target", gc_target, "layout or qa")->check(CLI::IsMember({"layout", "qa"}));
  gc->add_option("--part", gc_part, "encoder|convgru|label-head|box-head|full (layout only)");
  gc->add_option("--samples", gc_samples, "sampled weights");
  gc->add_option("--eps", gc_eps, "central-difference step");
  gc->add_option("--tol", gc_tol, "maximum relative error");

  auto* mlm = app.add_subcommand("train-mlm", "caption masked-LM encoder for the ablation");
  add_common(mlm, common);
  std::string mlm_out = "caption_mlm.ckpt";
  mlm->add_option("--data", data_dir, "corpus directory");
  mlm->add_option("--out", mlm_out, "encoder checkpoint path");

  auto add_qa = [&](CLI::App* cmd) {
    cmd->add_option("--data", qa.data, "corpus directory (vocabulary, labels, questions)");
    cmd->add_option("--questions", qa.questions, "question file in place of the corpus questions");
    cmd->add_option("--dev", qa.dev, "dev question file (default: seeded split)");
    cmd->add_option("--style", qa.style, "csqa or winogrande (default: reasoner.style)");
  };

  auto* ft = app.add_subcommand("finetune-qa", "stage 2: fine-tune the reasoner with a frozen encoder variant");
  add_common(ft, common);
  add_qa(ft);
  std::string ft_variant = "vibert", ft_encoder, ft_out = "reasoner.ckpt", ft_pred;
  ft->add_option("--variant", ft_variant, "none|vibert|frozen-init|caption-mlm");
  ft->add_option("--encoder", ft_encoder, "knowledge encoder checkpoint");
  ft->add_option("--out", ft_out, "reasoner checkpoint path");
  ft->add_option("--predictions", ft_pred, "dev predictions (JSON Lines)");

  auto* eq = app.add_subcommand("eval-qa", "accuracy and per-question predictions");
  add_common(eq, common);
  add_qa(eq);
  std::string eq_ckpt = "reasoner.ckpt", eq_pred;
  eq->add_option("--checkpoint", eq_ckpt, "reasoner checkpoint");
  eq->add_option("--predictions", eq_pred, "predictions output (JSON Lines)");

  auto* ab = app.add_subcommand("ablation", "fine-tune every variant over the configured seeds");
  add_common(ab, common);
  add_qa(ab);
  std::string ab_variants = "none,vibert,frozen-init,caption-mlm", ab_out;
  std::map<EncoderVariant, std::string> ab_ckpts{
      {EncoderVariant::vibert, ""}, {EncoderVariant::caption_mlm, ""}, {EncoderVariant::frozen_init, ""}};
  bool ab_count_only = false;
  ab->add_option("--variants", ab_variants, "comma-separated variants");
  ab->add_option("--vibert", ab_ckpts[EncoderVariant::vibert], "stage-1 checkpoint");
  ab->add_option("--caption-mlm", ab_ckpts[EncoderVariant::caption_mlm], "caption MLM encoder checkpoint");
  ab->add_option("--frozen-init", ab_ckpts[EncoderVariant::frozen_init], "optional initial encoder checkpoint");
  ab->add_flag("--count-only", ab_count_only, "report parameter counts without training");
  ab->add_option("--out", ab_out, "table output (JSON)");

  auto* rd = app.add_subcommand("render", "draw a generated or ground-truth layout");
  add_common(rd, common);
  std::string rd_ckpt, rd_caption, rd_format = "svg", rd_out = "layout.svg";
  long rd_index = 0;
  int rd_size = 256;
  rd->add_option("--checkpoint", rd_ckpt, "layout checkpoint (generate from --caption)");
  rd->add_option("--caption", rd_caption, "caption to generate from");
  rd->add_option("--data", data_dir, "corpus directory");
  rd->add_option("--index", rd_index, "scene index when rendering ground truth");
  rd->add_option("--format", rd_format, "svg or text-grid");
  rd->add_option("--size", rd_size, "canvas pixels (svg) or grid cells (text-grid)");
  rd->add_option("--out", rd_out, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, synth_n, synth_q, synth_out);
    if (prep->parsed()) return cmd_prepare(common, prep_in, prep_labels, prep_out);
    if (gc->parsed()) return cmd_gradcheck(common, gc_target, gc_part, gc_samples, gc_eps, gc_tol);
    const RunConfig cfg = load_config(common);
    return by_precision(cfg, [&](auto tag) -> int {
      using T = decltype(tag);
      if (tl->parsed()) return cmd_train_layout<T>(common, cfg, data_dir, tl_out);
      if (el->parsed()) return cmd_eval_layout<T>(common, cfg, el_ckpt, data_dir, el_all);
      if (mlm->parsed()) return cmd_train_mlm<T>(common, cfg, data_dir, mlm_out);
      if (ft->parsed()) return cmd_finetune<T>(common, cfg, qa, ft_variant, ft_encoder, ft_out, ft_pred);
      if (eq->parsed()) return cmd_eval_qa<T>(common, cfg, qa, eq_ckpt, eq_pred);
      if (ab->parsed()) return cmd_ablation<T>(common, cfg, qa, ab_variants, ab_ckpts, ab_count_only, ab_out);
      if (rd->parsed()) return cmd_render<T>(common, rd_ckpt, rd_caption, data_dir, rd_index, rd_format, rd_size, rd_out);
      return 1;
    });
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 1;
  } catch (const TokenizerError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
