#ifndef LOIRE_LAYOUT_TRAIN_HPP_
#define LOIRE_LAYOUT_TRAIN_HPP_

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "loire/core/optim.hpp"
#include "loire/data.hpp"
#include "loire/layout.hpp"
#include "loire/text_encoder.hpp"

namespace loire {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 5e-5;
  int batch_size = 32;
  int epochs = 15;
  int step_size = 3;
  double gamma = 0.8;
  std::uint64_t seed = 1;
  std::string optimizer = "adam";  // adam | adamw
  double weight_decay = 0.0;
  double warmup_frac = 0.1;
  double val_frac = 0.05;
  bool serial = true;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train lr must be positive");
    if (epochs < 1) throw std::invalid_argument("train epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("train batch_size must be at least 1");
    if (optimizer != "adam" && optimizer != "adamw")
      throw std::invalid_argument("train optimizer must be adam or adamw");
    if (val_frac < 0 || val_frac >= 1) throw std::invalid_argument("train val_frac must be in [0,1)");
  }
};

struct LayoutMetrics {
  double label_accuracy = 0;
  double bbox_mse = 0;
  double loss = 0;
  long label_steps = 0;
  long box_steps = 0;
};

/// One teacher-forced training example: rasters are built from ground truth only.
struct LayoutExample {
  TokenSequence tokens;
  std::vector<LabeledBox> boxes;  ///< canonical order
  std::vector<int> labels;        ///< boxes' labels followed by the end class
  std::vector<LayoutRaster> rasters;  ///< rasters[t] holds boxes[0, t)
};

inline LayoutExample make_layout_example(const Scene& scene, const Tokenizer& tok, int max_len,
                                         const LayoutConfig& cfg) {
  if (!is_canonically_ordered(scene.boxes))
    throw std::invalid_argument("scene '" + scene.id + "' boxes are not in canonical order");
  LayoutExample ex;
  ex.tokens = tok.tokenize(scene.caption, max_len);
  ex.boxes = scene.boxes;
  for (const auto& b : scene.boxes) {
    if (b.label < 0 || b.label >= cfg.num_classes)
      throw std::invalid_argument("scene '" + scene.id + "' label " + std::to_string(b.label) +
                                  " outside the model's " + std::to_string(cfg.num_classes) + " classes");
    ex.labels.push_back(b.label);
  }
  ex.labels.push_back(cfg.end_class());
  std::vector<LabeledBox> prefix;
  for (std::size_t t = 0; t <= scene.boxes.size(); ++t) {
    ex.rasters.push_back(rasterize(prefix, cfg.num_classes, cfg.raster, cfg.raster));
    if (t < scene.boxes.size()) prefix.push_back(scene.boxes[t]);
  }
  return ex;
}

/// Per-step decoder output in a teacher-forced pass; `box` is undefined on the end step.
template <typename T>
struct StepOutput {
  Var<T> logits;
  Var<T> box;
};

struct StepTarget {
  int label = 0;
  std::array<double, 4> box{};  ///< ignored on the end step
};

inline std::vector<StepTarget> layout_targets(const LayoutExample& ex) {
  std::vector<StepTarget> out;
  for (std::size_t t = 0; t < ex.labels.size(); ++t) {
    StepTarget s;
    s.label = ex.labels[t];
    if (t < ex.boxes.size()) s.box = {ex.boxes[t].x, ex.boxes[t].y, ex.boxes[t].w, ex.boxes[t].h};
    out.push_back(s);
  }
  return out;
}

/**
 * Joint layout loss: sum over steps of ||b_hat - b*||_2 - log p(l*). The box
 * term is skipped on the final (end-class) step.
 */
template <typename T>
Var<T> layout_loss(const std::vector<StepOutput<T>>& steps, const std::vector<StepTarget>& targets,
                   int end_class) {
  if (steps.size() != targets.size())
    throw std::invalid_argument("layout_loss: " + std::to_string(steps.size()) + " steps vs " +
                                std::to_string(targets.size()) + " targets");
  if (targets.empty() || targets.back().label != end_class)
    throw std::invalid_argument("layout_loss: the final target must be the end class");
  std::vector<Var<T>> terms;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    terms.push_back(ag::nll_from_logits(steps[t].logits, targets[t].label));
    if (t + 1 < steps.size()) {
      std::vector<T> b(targets[t].box.begin(), targets[t].box.end());
      terms.push_back(ag::l2_norm(ag::sub(steps[t].box, Var<T>::constant({1, 4}, std::move(b)))));
    }
  }
  return ag::add_n(terms);
}

/// The same loss evaluated on plain probability vectors and box values.
inline double layout_loss_value(const std::vector<std::vector<double>>& label_dists,
                                const std::vector<std::array<double, 4>>& boxes,
                                const std::vector<StepTarget>& targets, int end_class) {
  if (label_dists.size() != targets.size() || boxes.size() + 1 < targets.size())
    throw std::invalid_argument("layout_loss: length mismatch");
  if (targets.empty() || targets.back().label != end_class)
    throw std::invalid_argument("layout_loss: the final target must be the end class");
  double loss = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    loss -= std::log(label_dists[t].at(static_cast<std::size_t>(targets[t].label)));
    if (t + 1 < targets.size()) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += (boxes[t][k] - targets[t].box[k]) * (boxes[t][k] - targets[t].box[k]);
      loss += std::sqrt(s);
    }
  }
  return loss;
}

/// Teacher-forced pass over one example.
template <typename T>
std::vector<StepOutput<T>> teacher_forced_steps(const LayoutModel<T>& model, const LayoutExample& ex,
                                                Mode mode = Mode::eval, std::mt19937_64* rng = nullptr) {
  const auto& dec = model.decoder();
  auto tokens = model.encoder().encode(ex.tokens, mode, rng);
  Var<T> pooled = model.encoder().pooled(tokens);
  LayoutState<T> state = dec.initial_state();
  std::vector<StepOutput<T>> out;
  std::vector<int> history;
  for (std::size_t t = 0; t < ex.labels.size(); ++t) {
    state = dec.step_encode(ex.rasters[t], state);
    auto ls = dec.decode_label(state, pooled, tokens, history);
    StepOutput<T> s;
    s.logits = ls.logits;
    if (t < ex.boxes.size()) {
      s.box = dec.decode_box(state, tokens, ls.u, ex.labels[t]).box;
      history.push_back(ex.labels[t]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Var<T> example_loss(const LayoutModel<T>& model, const LayoutExample& ex, Mode mode = Mode::eval,
                    std::mt19937_64* rng = nullptr) {
  return layout_loss(teacher_forced_steps(model, ex, mode, rng), layout_targets(ex),
                     model.decoder().config().end_class());
}

/// Running sums behind LayoutMetrics.
struct MetricAccumulator {
  long correct = 0, label_steps = 0, box_steps = 0, examples = 0;
  double sq_err = 0, loss = 0;

  template <typename T>
  void add(const std::vector<StepOutput<T>>& steps, const std::vector<StepTarget>& targets, double ex_loss) {
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& z = steps[t].logits.value();
      const int pred = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
      correct += pred == targets[t].label;
      ++label_steps;
      if (t + 1 < steps.size()) {
        for (int k = 0; k < 4; ++k) {
          const double d = static_cast<double>(steps[t].box[k]) - targets[t].box[k];
          sq_err += d * d;
        }
        ++box_steps;
      }
    }
    loss += ex_loss;
    ++examples;
  }

  LayoutMetrics result() const {
    LayoutMetrics m;
    m.label_accuracy = label_steps ? static_cast<double>(correct) / label_steps : 0.0;
    m.bbox_mse = box_steps ? sq_err / (4.0 * box_steps) : 0.0;
    m.loss = examples ? loss / examples : 0.0;
    m.label_steps = label_steps;
    m.box_steps = box_steps;
    return m;
  }
};

/// Teacher-forced metrics: each step is scored given the ground-truth prefix.
template <typename T>
LayoutMetrics eval_layout(const LayoutModel<T>& model, const std::vector<LayoutExample>& data) {
  ag::NoGradGuard no_grad;
  MetricAccumulator acc;
  const int end = model.decoder().config().end_class();
  for (const auto& ex : data) {
    auto steps = teacher_forced_steps(model, ex);
    auto targets = layout_targets(ex);
    acc.add(steps, targets, static_cast<double>(layout_loss(steps, targets, end).item()));
  }
  return acc.result();
}

template <typename T>
LayoutMetrics eval_layout(const LayoutModel<T>& model, const std::vector<Scene>& scenes, const Tokenizer& tok) {
  const auto& cfg = model.decoder().config();
  std::vector<LayoutExample> data;
  data.reserve(scenes.size());
  for (const auto& s : scenes) {
    for (const auto& b : s.boxes)
      if (b.label >= cfg.num_classes)
        throw std::invalid_argument("eval_layout: scene '" + s.id + "' uses label " + std::to_string(b.label) +
                                    " but the checkpoint has " + std::to_string(cfg.num_classes) + " classes");
    data.push_back(make_layout_example(s, tok, model.encoder().config().max_len, cfg));
  }
  return eval_layout(model, data);
}

/// Seeded split: the last ceil(frac * n) shuffled indices are held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double frac,
                                                                                 std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto held = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n)));
  std::vector<std::size_t> train(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> val(idx.end() - static_cast<std::ptrdiff_t>(held), idx.end());
  return {train, val};
}

struct EpochRecord {
  int epoch = 0;
  std::string split;
  LayoutMetrics metrics;
};

struct LayoutTrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  LayoutMetrics best_val;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/**
 * Teacher-forced training with Adam/AdamW and a step learning-rate schedule.
 * The batch loss is the mean over scenes of each scene's summed loss. When a
 * validation set is given, the model ends holding the parameters of the
 * epoch with the lowest validation loss.
 */
template <typename T>
LayoutTrainResult train_layout(LayoutModel<T>& model, const std::vector<LayoutExample>& train,
                               const std::vector<LayoutExample>& val, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw TrainingError("train_layout: empty dataset");
  auto& params = model.params();
  optim::Adam<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.optimizer == "adamw" ? cfg.weight_decay : 0.0});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  LayoutTrainResult result;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<T>> best_values;
  const int end = model.decoder().config().end_class();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    opt.set_lr(optim::step_lr(cfg.lr, epoch - 1, cfg.step_size, cfg.gamma));
    std::shuffle(order.begin(), order.end(), rng);
    MetricAccumulator acc;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      params.zero_grad();
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = train[order[i]];
        auto steps = teacher_forced_steps(model, ex, Mode::train, &rng);
        auto targets = layout_targets(ex);
        Var<T> loss = layout_loss(steps, targets, end);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
          throw TrainingError("non-finite layout loss (" + std::to_string(lv) + ") at epoch " +
                              std::to_string(epoch) + " on training example " + std::to_string(order[i]));
        ag::backward(loss);
        acc.add(steps, targets, lv);
      }
      opt.step(1.0 / static_cast<double>(stop - start));
    }
    EpochRecord tr{epoch, "train", acc.result()};
    result.history.push_back(tr);
    if (on_epoch) on_epoch(tr);
    if (!val.empty()) {
      EpochRecord vr{epoch, "val", eval_layout(model, val)};
      result.history.push_back(vr);
      if (on_epoch) on_epoch(vr);
      if (vr.metrics.loss < best_loss) {
        best_loss = vr.metrics.loss;
        result.best_epoch = epoch;
        result.best_val = vr.metrics;
        best_values.clear();
        for (std::size_t i = 0; i < params.size(); ++i) best_values.push_back(params.at(i).value());
      }
    } else {
      result.best_epoch = epoch;
    }
  }
  if (!best_values.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params.at(i).mutable_value() = best_values[i];
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

enum class ModelPart { encoder, convgru, label_head, box_head, full };

inline ModelPart parse_model_part(const std::string& s) {
  if (s == "encoder") return ModelPart::encoder;
  if (s == "convgru") return ModelPart::convgru;
  if (s == "label_head" || s == "label-head") return ModelPart::label_head;
  if (s == "box_head" || s == "box-head") return ModelPart::box_head;
  if (s == "full") return ModelPart::full;
  throw std::invalid_argument("unknown model part '" + s + "'");
}

inline bool part_contains(ModelPart part, const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  switch (part) {
    case ModelPart::encoder: return starts("encoder.");
    case ModelPart::convgru: return starts("layout.stem") || starts("layout.gru");
    case ModelPart::label_head:
      return starts("layout.label_") || starts("layout.u_proj") || starts("layout.g1") || starts("layout.g2");
    case ModelPart::box_head: return starts("layout.box_") || starts("layout.theta");
    case ModelPart::full: return true;
  }
  return false;
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_param;
};

/// Denominator floor of the relative error: gradients below it are compared absolutely.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

/**
 * Compares backpropagated gradients of `loss_fn` with central differences on
 * `samples` entries drawn round-robin across the selected tensors.
 */
template <typename T, typename LossFn>
GradCheckResult grad_check_params(ParamStore<T>& params, const std::function<bool(const std::string&)>& select,
                                  LossFn&& loss_fn, double epsilon, std::size_t samples, std::uint64_t seed) {
  std::vector<std::size_t> tensors;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (select(params.names()[i]) && params.at(i).requires_grad()) tensors.push_back(i);
  if (tensors.empty()) throw std::invalid_argument("grad_check: no parameters selected");
  params.zero_grad();
  Var<T> loss = loss_fn();
  ag::backward(loss);
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::vector<std::vector<std::size_t>> pools(tensors.size());
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    pools[k].resize(params.at(tensors[k]).size());
    std::iota(pools[k].begin(), pools[k].end(), std::size_t{0});
    std::shuffle(pools[k].begin(), pools[k].end(), rng);
  }
  for (std::size_t round = 0; picks.size() < samples; ++round) {
    bool any = false;
    for (std::size_t k = 0; k < tensors.size() && picks.size() < samples; ++k)
      if (round < pools[k].size()) {
        picks.emplace_back(tensors[k], pools[k][round]);
        any = true;
      }
    if (!any) break;
  }
  GradCheckResult res;
  for (const auto& [ti, ei] : picks) {
    auto& p = params.at(ti);
    const double analytic = static_cast<double>(p.grad()[ei]);
    const T orig = p.value()[ei];
    double plus, minus;
    {
      ag::NoGradGuard ng;
      p.mutable_value()[ei] = orig + static_cast<T>(epsilon);
      plus = static_cast<double>(loss_fn().item());
      p.mutable_value()[ei] = orig - static_cast<T>(epsilon);
      minus = static_cast<double>(loss_fn().item());
      p.mutable_value()[ei] = orig;
    }
    const double numeric = (plus - minus) / (2 * epsilon);
    const double err = relative_error(analytic, numeric);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_param = params.names()[ti] + "[" + std::to_string(ei) + "]";
    }
    ++res.checked;
  }
  return res;
}

/// Gradient check of the layout loss on one example, restricted to a model part.
template <typename T>
GradCheckResult grad_check(LayoutModel<T>& model, ModelPart part, const LayoutExample& ex, double epsilon = 1e-5,
                           std::size_t samples = 200, std::uint64_t seed = 1) {
  return grad_check_params<T>(
      model.params(), [part](const std::string& n) { return part_contains(part, n); },
      [&] { return example_loss(model, ex); }, epsilon, samples, seed);
}

// ---------------------------------------------------------------------------
// Caption masked-language-model ablation.

struct MlmTrainResult {
  double initial_loss = 0;  ///< held-fixed masking, before any update
  double final_loss = 0;    ///< same masking, after training
  std::vector<double> step_losses;
};

/// Loss of a fixed masking pattern (seeded) over all sequences, evaluation mode.
template <typename T>
double mlm_fixed_loss(const TextEncoder<T>& enc, const MlmHead<T>& head, const std::vector<TokenSequence>& seqs,
                      double mask_rate, std::uint64_t seed) {
  ag::NoGradGuard ng;
  std::mt19937_64 rng(seed);
  return static_cast<double>(mlm_step(enc, head, seqs, mask_rate, Mode::eval, rng).item());
}

/**
 * Trains `enc` (and `head`) on captions with the MLM objective only. The
 * encoder architecture is unchanged, so the result is a drop-in replacement
 * for a layout-trained encoder of the same config.
 */
template <typename T>
MlmTrainResult train_mlm_ablation(TextEncoder<T>& enc, MlmHead<T>& head, const std::vector<std::string>& captions,
                                  const Tokenizer& tok, const TrainConfig& cfg, double mask_rate = 0.15) {
  cfg.validate();
  if (captions.empty()) throw TrainingError("train_mlm_ablation: empty caption corpus");
  std::vector<TokenSequence> seqs;
  for (const auto& c : captions) seqs.push_back(tok.tokenize(c, enc.config().max_len));
  ParamStore<T> all;
  all.merge(enc.params());
  all.merge(head.params());
  optim::Adam<T> opt(all, {cfg.lr, 0.9, 0.999, 1e-8, cfg.optimizer == "adamw" ? cfg.weight_decay : 0.0});
  MlmTrainResult res;
  res.initial_loss = mlm_fixed_loss(enc, head, seqs, mask_rate, cfg.seed + 7);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(optim::step_lr(cfg.lr, epoch, cfg.step_size, cfg.gamma));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TokenSequence> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(seqs[order[i]]);
      all.zero_grad();
      Var<T> loss = mlm_step(enc, head, batch, mask_rate, Mode::train, rng);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw TrainingError("non-finite MLM loss at epoch " + std::to_string(epoch + 1));
      ag::backward(loss);
      opt.step();
      res.step_losses.push_back(lv);
    }
  }
  res.final_loss = mlm_fixed_loss(enc, head, seqs, mask_rate, cfg.seed + 7);
  return res;
}

}  // namespace loire

#endif  // LOIRE_LAYOUT_TRAIN_HPP_
