#ifndef LOIRE_LAYOUT_HPP_
#define LOIRE_LAYOUT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "loire/core/ops.hpp"
#include "loire/core/params.hpp"
#include "loire/data.hpp"
#include "loire/text_encoder.hpp"

namespace loire {

/// Binary occupancy volume [C][H][W]; entry (l, w, h) is column w, row h of channel l.
class LayoutRaster {
 public:
  LayoutRaster(int channels, int width, int height)
      : c_(channels), w_(width), h_(height), occ_(static_cast<std::size_t>(channels) * width * height, 0) {}

  int channels() const { return c_; }
  int width() const { return w_; }
  int height() const { return h_; }
  std::uint8_t at(int l, int w, int h) const { return occ_[index(l, w, h)]; }
  void set(int l, int w, int h) { occ_[index(l, w, h)] = 1; }
  const std::vector<std::uint8_t>& data() const { return occ_; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(occ_.begin(), occ_.end(), 1)); }

  bool operator==(const LayoutRaster&) const = default;

  template <typename T>
  Var<T> to_var() const {
    std::vector<T> v(occ_.begin(), occ_.end());
    return Var<T>::constant({c_, h_, w_}, std::move(v));
  }

 private:
  std::size_t index(int l, int w, int h) const {
    return (static_cast<std::size_t>(l) * h_ + h) * w_ + w;
  }

  int c_, w_, h_;
  std::vector<std::uint8_t> occ_;
};

namespace detail {

/// Half-open index range of pixels whose centre (i + 0.5) / n lies in [lo, hi).
inline std::pair<int, int> covered_range(double lo, double hi, int n) {
  auto center = [n](int i) { return (i + 0.5) / n; };
  auto first_at_or_above = [&](double v) {
    int i = static_cast<int>(std::ceil(v * n - 0.5));
    i = std::clamp(i, 0, n);
    while (i > 0 && center(i - 1) >= v) --i;
    while (i < n && center(i) < v) ++i;
    return i;
  };
  return {first_at_or_above(lo), first_at_or_above(hi)};
}

}  // namespace detail

/**
 * A pixel is covered by a box when its centre lies in the half-open extent
 * [x, x + w) x [y, y + h). Same-label boxes union.
 */
inline LayoutRaster rasterize(const std::vector<LabeledBox>& boxes, int C, int W, int H) {
  if (W < 1 || H < 1) throw std::invalid_argument("rasterize: raster must be at least 1x1");
  LayoutRaster r(C, W, H);
  for (const auto& b : boxes) {
    if (b.label < 0 || b.label >= C) throw std::invalid_argument("rasterize: label out of range");
    const auto [x0, x1] = detail::covered_range(b.x, b.x + b.w, W);
    const auto [y0, y1] = detail::covered_range(b.y, b.y + b.h, H);
    for (int h = y0; h < y1; ++h)
      for (int w = x0; w < x1; ++w) r.set(b.label, w, h);
  }
  return r;
}

struct LayoutConfig {
  int num_classes = 80;
  int raster = 64;
  int stem_channels = 16;
  int state_channels = 64;
  int label_embed = 32;
  int hidden = 128;
  int head_channels = 8;
  int max_steps = 20;

  bool operator==(const LayoutConfig&) const = default;

  int grid() const { return (raster + 3) / 4; }
  int end_class() const { return num_classes; }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("layout num_classes must be positive");
    if (raster < 8) throw std::invalid_argument("layout raster must be at least 8");
    if (stem_channels < 1 || state_channels < 1 || label_embed < 1 || hidden < 1 || head_channels < 1)
      throw std::invalid_argument("layout widths must be positive");
    if (max_steps < 1) throw std::invalid_argument("layout max_steps must be positive");
  }
};

/// Spatial recurrent feature map e^I_t with shape [d_I, H', W'].
template <typename T>
using LayoutState = Var<T>;

template <typename T>
struct SpatialAttention {
  Var<T> context;  ///< [1, d_I + 2]: attended features then attended cell coordinates
  Var<T> weights;  ///< [1, N]
  Var<T> keys;     ///< [N, d_I]
};

template <typename T>
struct TextAttention {
  Var<T> context;  ///< [1, d_t]
  Var<T> weights;  ///< [1, L]
};

template <typename T>
struct LabelStep {
  Var<T> logits;  ///< [1, C + 1]
  Var<T> u;       ///< u^l_t
  Var<T> c;       ///< c^l_t
  SpatialAttention<T> spatial;
  TextAttention<T> text;

  std::vector<T> distribution() const {
    const auto& z = logits.value();
    std::vector<T> p(z.size());
    const T mx = *std::max_element(z.begin(), z.end());
    T s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
    for (auto& v : p) v /= s;
    return p;
  }
};

template <typename T>
struct BoxStep {
  Var<T> box;  ///< [1, 4] in (0, 1): x, y, w, h
  Var<T> u;    ///< u^b_t
  Var<T> c;    ///< c^b_t
  SpatialAttention<T> spatial;
  TextAttention<T> text;
};

/**
 * Layout encoder (strided stem + convolutional GRU) and the two-headed box
 * decoder. Text inputs come from a separate TextEncoder whose width is
 * `text_width`.
 */
template <typename T>
class LayoutDecoder {
 public:
  LayoutDecoder(const LayoutConfig& cfg, int text_width, std::uint64_t seed,
                const std::string& prefix = "layout.")
      : cfg_(cfg), text_width_(text_width) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const int C = cfg.num_classes, s = cfg.stem_channels, dI = cfg.state_channels;
    const int N = cfg.grid() * cfg.grid(), hidden = cfg.hidden, le = cfg.label_embed;
    const int head_grid = (cfg.grid() + 1) / 2;
    auto fan = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    stem1_ = nn::Conv2d<T>::create(params_, prefix + "stem1", C, s, 3, 2, 1, rng, fan(C * 9));
    stem2_ = nn::Conv2d<T>::create(params_, prefix + "stem2", s, s, 3, 2, 1, rng, fan(s * 9));
    gru_zr_ = nn::Conv2d<T>::create(params_, prefix + "gru_zr", s + dI, 2 * dI, 3, 1, 1, rng, fan((s + dI) * 9));
    gru_n_ = nn::Conv2d<T>::create(params_, prefix + "gru_n", s + dI, dI, 3, 1, 1, rng, fan((s + dI) * 9));

    label_pos_ = params_.add_normal(prefix + "label_attn.pos", {N, dI}, rng, 0.1);
    label_query_ = params_.add_normal(prefix + "label_attn.query", {text_width, dI}, rng, fan(text_width));
    label_head_ = nn::Conv2d<T>::create(params_, prefix + "label_head", dI, cfg.head_channels, 3, 2, 1, rng, fan(dI * 9));
    const int u_in = cfg.head_channels * head_grid * head_grid + dI + 2;
    u_proj_ = nn::Linear<T>::create(params_, prefix + "u_proj", u_in, hidden, rng, fan(u_in));
    label_emb_ = params_.add_normal(prefix + "label_emb", {C + 1, le}, rng, 0.1);
    label_text_ = params_.add_normal(prefix + "label_text.w", {hidden + le, text_width}, rng, fan(hidden + le));
    g1_ = nn::Linear<T>::create(params_, prefix + "g1", hidden + text_width, hidden, rng, fan(hidden + text_width));
    g2_ = nn::Linear<T>::create(params_, prefix + "g2", hidden, C + 1, rng, fan(hidden));

    box_text_ = params_.add_normal(prefix + "box_text.w", {hidden + le, text_width}, rng, fan(hidden + le));
    box_pos_ = params_.add_normal(prefix + "box_attn.pos", {N, dI}, rng, 0.1);
    box_query_ = params_.add_normal(prefix + "box_attn.query", {text_width, dI}, rng, fan(text_width));
    const int theta_in = text_width + dI + 2;
    theta1_ = nn::Linear<T>::create(params_, prefix + "theta1", theta_in, hidden, rng, fan(theta_in));
    theta2_ = nn::Linear<T>::create(params_, prefix + "theta2", hidden, 4, rng, fan(hidden));

    const int G = cfg.grid();
    std::vector<T> coords;
    coords.reserve(static_cast<std::size_t>(N) * 2);
    for (int i = 0; i < G; ++i)
      for (int j = 0; j < G; ++j) {
        coords.push_back(static_cast<T>((j + 0.5) / G));
        coords.push_back(static_cast<T>((i + 0.5) / G));
      }
    cell_coords_ = Var<T>::constant({N, 2}, std::move(coords));
  }

  LayoutDecoder(const LayoutDecoder&) = delete;
  LayoutDecoder& operator=(const LayoutDecoder&) = delete;

  const LayoutConfig& config() const { return cfg_; }
  int text_width() const { return text_width_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// e^I_0: all zeros.
  LayoutState<T> initial_state() const {
    return Var<T>::zeros({cfg_.state_channels, cfg_.grid(), cfg_.grid()});
  }

  /// One ConvGRU update from the raster of boxes placed so far.
  LayoutState<T> step_encode(const LayoutRaster& raster, const LayoutState<T>& prev) const {
    if (raster.channels() != cfg_.num_classes || raster.width() != cfg_.raster ||
        raster.height() != cfg_.raster)
      throw ShapeError("layout_step_encode: raster " + std::to_string(raster.channels()) + "x" +
                       std::to_string(raster.width()) + "x" + std::to_string(raster.height()) +
                       " does not match config");
    const Shape expected{cfg_.state_channels, cfg_.grid(), cfg_.grid()};
    if (prev.shape() != expected)
      throw ShapeError("layout_step_encode: state " + shape_str(prev.shape()) + " expected " +
                       shape_str(expected));
    Var<T> x = ag::gelu(stem2_(ag::gelu(stem1_(raster.to_var<T>()))));
    const int G = cfg_.grid(), s = cfg_.stem_channels, dI = cfg_.state_channels;
    const int N = G * G;
    Var<T> x2 = ag::reshape(x, {s, N});
    Var<T> h2 = ag::reshape(prev, {dI, N});
    Var<T> xh = ag::reshape(ag::concat_rows<T>({x2, h2}), {s + dI, G, G});
    Var<T> zr = ag::reshape(ag::sigmoid(gru_zr_(xh)), {2 * dI, N});
    Var<T> z = ag::rows(zr, 0, dI);
    Var<T> r = ag::rows(zr, dI, 2 * dI);
    Var<T> xrh = ag::reshape(ag::concat_rows<T>({x2, ag::mul(r, h2)}), {s + dI, G, G});
    Var<T> n = ag::reshape(ag::tanh(gru_n_(xrh)), {dI, N});
    // h' = h + z * (n - h)
    Var<T> h_new = ag::add(h2, ag::mul(z, ag::sub(n, h2)));
    return ag::reshape(h_new, {dI, G, G});
  }

  /// Label distribution for the next object given the layout state and caption.
  LabelStep<T> decode_label(const LayoutState<T>& state, const Var<T>& pooled,
                            const TokenEmbeddings<T>& tokens, const std::vector<int>& history) const {
    const int G = cfg_.grid(), dI = cfg_.state_channels, N = G * G;
    LabelStep<T> out;
    out.spatial = spatial_attention(state, pooled, label_pos_, label_query_);
    // Reweight the state by the attention map (mean weight 1) before the conv head.
    Var<T> weighted = ag::mul_row(ag::reshape(state, {dI, N}), ag::affine(out.spatial.weights, static_cast<T>(N)));
    Var<T> head = ag::gelu(label_head_(ag::reshape(weighted, {dI, G, G})));
    Var<T> flat = ag::reshape(head, {1, static_cast<int>(head.size())});
    out.u = ag::gelu(u_proj_(ag::concat_cols<T>({flat, out.spatial.context})));
    Var<T> hist = history_summary(history);
    out.text = text_attention(ag::concat_cols<T>({out.u, hist}), label_text_, tokens);
    out.c = out.text.context;
    out.logits = g2_(ag::gelu(g1_(ag::concat_cols<T>({out.u, out.c}))));
    return out;
  }

  /// Box for an object of class `label`: text attention first, then spatial attention, then regression.
  BoxStep<T> decode_box(const LayoutState<T>& state, const TokenEmbeddings<T>& tokens,
                        const Var<T>& u_label, int label) const {
    if (label < 0 || label > cfg_.num_classes) throw std::invalid_argument("decode_box: label out of range");
    BoxStep<T> out;
    Var<T> lab = ag::embedding(label_emb_, {label});
    out.text = text_attention(ag::concat_cols<T>({u_label, lab}), box_text_, tokens);
    out.c = out.text.context;
    out.spatial = spatial_attention(state, out.c, box_pos_, box_query_);
    out.u = out.spatial.context;
    out.box = ag::sigmoid(theta2_(ag::gelu(theta1_(ag::concat_cols<T>({out.c, out.u})))));
    return out;
  }

  /// Mean label embedding over the history, zeros when empty.
  Var<T> history_summary(const std::vector<int>& history) const {
    if (history.empty()) return Var<T>::zeros({1, cfg_.label_embed});
    return ag::mean_rows(ag::embedding(label_emb_, history));
  }

  /// Single-query softmax over the grid cells; keys are state features plus learned positions.
  SpatialAttention<T> spatial_attention(const LayoutState<T>& state, const Var<T>& query,
                                        const Var<T>& pos, const Var<T>& query_proj) const {
    const int G = cfg_.grid(), dI = cfg_.state_channels, N = G * G;
    SpatialAttention<T> out;
    out.keys = ag::add(ag::transpose(ag::reshape(state, {dI, N})), pos);
    Var<T> q = ag::matmul(query, query_proj);  // [1, dI]
    out.weights = ag::softmax_rows(
        ag::affine(ag::matmul(q, ag::transpose(out.keys)), T(1) / std::sqrt(static_cast<T>(dI))));
    out.context = ag::concat_cols<T>({ag::matmul(out.weights, out.keys), ag::matmul(out.weights, cell_coords_)});
    return out;
  }

  /// General (bilinear) attention over non-padding tokens.
  static TextAttention<T> text_attention(const Var<T>& query, const Var<T>& bilinear,
                                         const TokenEmbeddings<T>& tokens) {
    TextAttention<T> out;
    Var<T> scores = ag::matmul(ag::matmul(query, bilinear), ag::transpose(tokens.vectors));
    out.weights = ag::softmax_rows(scores, tokens.mask);
    out.context = ag::matmul(out.weights, tokens.vectors);
    return out;
  }

 private:
  LayoutConfig cfg_;
  int text_width_;
  ParamStore<T> params_;
  nn::Conv2d<T> stem1_, stem2_, gru_zr_, gru_n_, label_head_;
  Var<T> label_pos_, label_query_, label_emb_, label_text_, box_text_, box_pos_, box_query_;
  nn::Linear<T> u_proj_, g1_, g2_, theta1_, theta2_;
  Var<T> cell_coords_;
};

/**
 * The stage-1 model: caption encoder plus layout decoder sharing one
 * parameter namespace ("encoder." and "layout.").
 */
template <typename T>
class LayoutModel {
 public:
  LayoutModel(const EncoderConfig& enc_cfg, const LayoutConfig& layout_cfg)
      : encoder_(enc_cfg, "encoder."), decoder_(layout_cfg, enc_cfg.hidden, enc_cfg.seed + 17, "layout.") {
    all_.merge(encoder_.params());
    all_.merge(decoder_.params());
  }

  TextEncoder<T>& encoder() { return encoder_; }
  const TextEncoder<T>& encoder() const { return encoder_; }
  LayoutDecoder<T>& decoder() { return decoder_; }
  const LayoutDecoder<T>& decoder() const { return decoder_; }
  ParamStore<T>& params() { return all_; }
  const ParamStore<T>& params() const { return all_; }

 private:
  TextEncoder<T> encoder_;
  LayoutDecoder<T> decoder_;
  ParamStore<T> all_;
};

struct GeneratedLayout {
  std::vector<LabeledBox> boxes;
  bool terminated = false;
};

/// Clamps a predicted box so it lies inside the canvas (generation time only).
inline LabeledBox finalize_box(int label, double x, double y, double w, double h) {
  w = std::clamp(w, 1e-6, 1.0);
  h = std::clamp(h, 1e-6, 1.0);
  x = std::clamp(x, 0.0, 1.0 - w);
  y = std::clamp(y, 0.0, 1.0 - h);
  return LabeledBox{label, x, y, w, h};
}

/**
 * Greedy autoregressive generation: rasterize, update the state, take the
 * most probable label, stop on the end class, otherwise regress its box.
 */
template <typename T>
GeneratedLayout generate(const LayoutModel<T>& model, const TokenSequence& caption, int max_steps) {
  ag::NoGradGuard no_grad;
  const auto& dec = model.decoder();
  const auto& cfg = dec.config();
  auto tokens = model.encoder().encode(caption, Mode::eval);
  Var<T> pooled = model.encoder().pooled(tokens);
  LayoutState<T> state = dec.initial_state();
  GeneratedLayout out;
  std::vector<int> history;
  for (int t = 0; t < max_steps; ++t) {
    state = dec.step_encode(rasterize(out.boxes, cfg.num_classes, cfg.raster, cfg.raster), state);
    auto ls = dec.decode_label(state, pooled, tokens, history);
    const auto& z = ls.logits.value();
    const int label = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    if (label == cfg.end_class()) {
      out.terminated = true;
      return out;
    }
    auto bs = dec.decode_box(state, tokens, ls.u, label);
    const auto& b = bs.box.value();
    out.boxes.push_back(finalize_box(label, b[0], b[1], b[2], b[3]));
    history.push_back(label);
  }
  return out;
}

template <typename T>
GeneratedLayout generate(const LayoutModel<T>& model, const Tokenizer& tok, const std::string& caption,
                         int max_steps) {
  return generate(model, tok.tokenize(caption, model.encoder().config().max_len), max_steps);
}

}  // namespace loire

#endif  // LOIRE_LAYOUT_HPP_
