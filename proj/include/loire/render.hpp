#ifndef LOIRE_RENDER_HPP_
#define LOIRE_RENDER_HPP_

#include <cctype>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "loire/data.hpp"
#include "loire/layout.hpp"

namespace loire {

class RenderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RenderFormat { svg, text_grid };

inline RenderFormat parse_render_format(const std::string& s) {
  if (s == "svg") return RenderFormat::svg;
  if (s == "text" || s == "text-grid" || s == "text_grid") return RenderFormat::text_grid;
  throw std::invalid_argument("unknown render format '" + s + "' (svg|text-grid)");
}

/// Grid letter of a category: the first character of its name, '?' when it has none.
inline char category_letter(const LabelVocab& vocab, int label) {
  const std::string& n = vocab.name(label);
  return n.empty() ? '?' : static_cast<char>(std::tolower(static_cast<unsigned char>(n[0])));
}

/**
 * W x H character grid ('.' for empty). Pixel coverage follows the
 * rasterizer exactly and boxes are painted in the given order.
 */
inline std::string render_text_grid(const std::vector<LabeledBox>& boxes, const LabelVocab& vocab, int W, int H) {
  if (W < 1 || H < 1) throw std::invalid_argument("render: grid must be at least 1x1");
  std::vector<std::string> rows(static_cast<std::size_t>(H), std::string(static_cast<std::size_t>(W), '.'));
  for (const auto& b : boxes) {
    const auto [x0, x1] = detail::covered_range(b.x, b.x + b.w, W);
    const auto [y0, y1] = detail::covered_range(b.y, b.y + b.h, H);
    const char c = category_letter(vocab, b.label);
    for (int h = y0; h < y1; ++h)
      for (int w = x0; w < x1; ++w) rows[static_cast<std::size_t>(h)][static_cast<std::size_t>(w)] = c;
  }
  std::string out;
  for (const auto& r : rows) out += r + "\n";
  return out;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// SVG with one outlined, captioned rectangle per box, drawn in canonical order.
inline std::string render_svg(const std::vector<LabeledBox>& boxes, const LabelVocab& vocab, int size = 256,
                              const std::string& caption = "") {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double s = size;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) + "\" height=\"" +
                    std::to_string(size) + "\" viewBox=\"0 0 " + std::to_string(size) + " " + std::to_string(size) +
                    "\">\n";
  out += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(size) + "\" height=\"" + std::to_string(size) +
         "\" fill=\"white\" stroke=\"black\"/>\n";
  if (!caption.empty()) out += "  <title>" + detail::xml_escape(caption) + "</title>\n";
  for (const auto& b : canonical_order(boxes)) {
    const char* colour = palette[static_cast<std::size_t>(b.label) % std::size(palette)];
    const std::string name = detail::xml_escape(vocab.name(b.label));
    out += "  <g>\n";
    out += "    <rect x=\"" + detail::fmt(b.x * s) + "\" y=\"" + detail::fmt(b.y * s) + "\" width=\"" +
           detail::fmt(b.w * s) + "\" height=\"" + detail::fmt(b.h * s) + "\" fill=\"" + colour +
           "\" fill-opacity=\"0.15\" stroke=\"" + colour + "\" stroke-width=\"2\"/>\n";
    out += "    <text x=\"" + detail::fmt(b.x * s + 3) + "\" y=\"" + detail::fmt(b.y * s + 13) +
           "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + colour + "\">" + name + "</text>\n";
    out += "  </g>\n";
  }
  out += "</svg>\n";
  return out;
}

/// Writes the layout to `path`. For text grids `size` is the grid width and height.
inline void render_layout(const std::vector<LabeledBox>& boxes, const LabelVocab& vocab, const std::string& path,
                          RenderFormat format, int size, const std::string& caption = "") {
  const std::string body =
      format == RenderFormat::svg ? render_svg(boxes, vocab, size, caption) : render_text_grid(boxes, vocab, size, size);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RenderError("cannot write '" + path + "'");
  f << body;
  if (!f) throw RenderError("failed writing '" + path + "'");
}

}  // namespace loire

#endif  // LOIRE_RENDER_HPP_
