#ifndef LOIRE_DATA_HPP_
#define LOIRE_DATA_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

// Scene-layout and multiple-choice datasets: loaders, preprocessing and the
// deterministic synthetic scene grammar used as the desk-scale oracle.

namespace loire {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Category names; index C (one past the last real category) is the end class.
class LabelVocab {
 public:
  LabelVocab() = default;
  explicit LabelVocab(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], static_cast<int>(i)).second)
        throw DataError("duplicate category name '" + names_[i] + "'");
    }
  }

  int size() const { return static_cast<int>(names_.size()); }
  int end_index() const { return size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown label \"" + name + "\"");
    return it->second;
  }

  static LabelVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label vocab '" + path + "'");
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
    return LabelVocab(std::move(names));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write label vocab '" + path + "'");
    for (const auto& n : names_) out << n << '\n';
  }

  bool operator==(const LabelVocab& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

/// One object: label plus top-left corner and extent as fractions of the canvas.
struct LabeledBox {
  int label = 0;
  double x = 0, y = 0, w = 0, h = 0;

  bool operator==(const LabeledBox&) const = default;
};

struct Scene {
  std::string id;
  std::string caption;
  std::vector<LabeledBox> boxes;

  bool operator==(const Scene&) const = default;
};

enum class QaStyle { csqa, winogrande };

inline const char* to_string(QaStyle s) { return s == QaStyle::csqa ? "csqa" : "winogrande"; }

inline QaStyle parse_style(const std::string& s) {
  if (s == "csqa") return QaStyle::csqa;
  if (s == "winogrande") return QaStyle::winogrande;
  throw DataError("unknown question style '" + s + "'");
}

struct MCQuestion {
  std::string id;
  std::string stem;
  std::vector<std::string> choices;
  std::optional<int> gold;
  QaStyle style = QaStyle::csqa;

  bool operator==(const MCQuestion&) const = default;
};

inline constexpr double kBoxEps = 1e-6;

/// Clamps a normalized box into the unit canvas. Returns false if nothing is left.
inline bool clamp_box(LabeledBox& b) {
  const double x0 = std::clamp(b.x, 0.0, 1.0), y0 = std::clamp(b.y, 0.0, 1.0);
  const double x1 = std::clamp(b.x + b.w, 0.0, 1.0), y1 = std::clamp(b.y + b.h, 0.0, 1.0);
  b.x = x0;
  b.y = y0;
  b.w = x1 - x0;
  b.h = y1 - y0;
  return b.w > 0 && b.h > 0;
}

inline bool box_is_valid(const LabeledBox& b, int num_classes) {
  return b.label >= 0 && b.label < num_classes && b.x >= 0 && b.x <= 1 && b.y >= 0 && b.y <= 1 &&
         b.w > 0 && b.h > 0 && b.x + b.w <= 1 + kBoxEps && b.y + b.h <= 1 + kBoxEps;
}

namespace detail {

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace detail

/**
 * Reads a JSON-Lines scene file. Pixel coordinates are divided by the
 * record's canvas size; a record carrying a "captions" array instead of a
 * single "caption" yields one scene per caption sharing the same boxes.
 * Boxes left with no extent after clamping to the canvas are dropped.
 */
inline std::vector<Scene> load_layout_dataset(const std::string& path, const LabelVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scene file '" + path + "'");
  std::vector<Scene> scenes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (detail::is_blank(line)) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed scene record at line " + std::to_string(lineno) + " (" + where +
                      "): " + e.what());
    }
    try {
      const double width = rec.at("width").get<double>();
      const double height = rec.at("height").get<double>();
      if (width <= 0 || height <= 0) throw DataError("non-positive canvas size");
      std::vector<LabeledBox> boxes;
      for (const auto& obj : rec.at("objects")) {
        const auto label = obj.at("label").get<std::string>();
        if (!vocab.contains(label))
          throw DataError("unknown label \"" + label + "\" at line " + std::to_string(lineno));
        LabeledBox b{vocab.index_of(label), obj.at("x").get<double>() / width,
                     obj.at("y").get<double>() / height, obj.at("w").get<double>() / width,
                     obj.at("h").get<double>() / height};
        if (clamp_box(b)) boxes.push_back(b);
      }
      std::vector<std::string> captions;
      if (rec.contains("captions")) {
        captions = rec.at("captions").get<std::vector<std::string>>();
      } else {
        captions.push_back(rec.at("caption").get<std::string>());
      }
      const auto id = rec.at("id").is_string() ? rec.at("id").get<std::string>() : rec.at("id").dump();
      for (std::size_t k = 0; k < captions.size(); ++k) {
        Scene s{captions.size() > 1 ? id + "#" + std::to_string(k) : id, captions[k], boxes};
        scenes.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed scene record at line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.find("line") != std::string::npos) throw;
      throw DataError(msg + " at line " + std::to_string(lineno));
    }
  }
  return scenes;
}

inline void save_layout_dataset(const std::string& path, const std::vector<Scene>& scenes,
                                const LabelVocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write scene file '" + path + "'");
  for (const auto& s : scenes) {
    nlohmann::json rec;
    rec["id"] = s.id;
    rec["caption"] = s.caption;
    rec["width"] = 1;
    rec["height"] = 1;
    rec["objects"] = nlohmann::json::array();
    for (const auto& b : s.boxes)
      rec["objects"].push_back(
          {{"label", vocab.name(b.label)}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    out << rec.dump() << '\n';
  }
}

/// Drops boxes below `min_area_frac`; nullopt means the scene is rejected.
inline std::optional<Scene> filter_and_normalize(const Scene& scene, double min_area_frac,
                                                 std::size_t max_objects) {
  Scene out{scene.id, scene.caption, {}};
  for (const auto& b : scene.boxes)
    if (b.w * b.h >= min_area_frac) out.boxes.push_back(b);
  if (out.boxes.empty() || out.boxes.size() > max_objects) return std::nullopt;
  return out;
}

/// Strict "comes before" in generation order: lowest bottom edge first, then left to right.
inline bool canonical_less(const LabeledBox& a, const LabeledBox& b) {
  const double ba = a.y + a.h, bb = b.y + b.h;
  if (ba != bb) return ba > bb;
  if (a.x != b.x) return a.x < b.x;
  return a.label < b.label;
}

inline std::vector<LabeledBox> canonical_order(std::vector<LabeledBox> boxes) {
  std::stable_sort(boxes.begin(), boxes.end(), canonical_less);
  return boxes;
}

inline bool is_canonically_ordered(const std::vector<LabeledBox>& boxes) {
  return std::is_sorted(boxes.begin(), boxes.end(), canonical_less);
}

namespace detail {

inline int choice_index_from_key(const nlohmann::json& choices, const std::string& key) {
  for (std::size_t i = 0; i < choices.size(); ++i)
    if (choices[i].value("label", std::string()) == key) return static_cast<int>(i);
  if (key.size() == 1 && key[0] >= 'A' && key[0] <= 'Z') return key[0] - 'A';
  return -1;
}

}  // namespace detail

/// Reads CommonsenseQA or WinoGrande JSON Lines into one normalized form.
inline std::vector<MCQuestion> load_mcqa(const std::string& path, QaStyle style) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open question file '" + path + "'");
  std::vector<MCQuestion> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (detail::is_blank(line)) continue;
    const std::string at = " at line " + std::to_string(lineno);
    MCQuestion q;
    q.style = style;
    try {
      const auto rec = nlohmann::json::parse(line);
      if (style == QaStyle::csqa) {
        q.id = rec.value("id", std::to_string(lineno));
        const auto& question = rec.at("question");
        q.stem = question.at("stem").get<std::string>();
        const auto& choices = question.at("choices");
        for (const auto& c : choices) q.choices.push_back(c.at("text").get<std::string>());
        if (rec.contains("answerKey") && !rec.at("answerKey").is_null()) {
          const int g = detail::choice_index_from_key(choices, rec.at("answerKey").get<std::string>());
          if (g < 0 || g >= static_cast<int>(q.choices.size()))
            throw DataError("gold label out of range" + at);
          q.gold = g;
        }
      } else {
        q.id = rec.contains("qID") ? rec.at("qID").get<std::string>() : std::to_string(lineno);
        q.stem = rec.at("sentence").get<std::string>();
        if (std::count(q.stem.begin(), q.stem.end(), '_') != 1)
          throw DataError("winogrande sentence must contain exactly one blank \"_\"" + at);
        q.choices = {rec.at("option1").get<std::string>(), rec.at("option2").get<std::string>()};
        if (rec.contains("answer") && !rec.at("answer").is_null()) {
          const auto a = rec.at("answer").get<std::string>();
          if (a != "1" && a != "2") throw DataError("gold label out of range" + at);
          q.gold = a == "1" ? 0 : 1;
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed question record" + at + ": " + e.what());
    }
    if (q.choices.size() < 2) throw DataError("question needs at least two choices" + at);
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scene grammar.

struct GrammarConfig {
  int num_classes = 8;
  int grid = 4;
  std::uint64_t seed = 7;
};

enum class Relation { left_of = 0, right_of = 1, above = 2, below = 3 };

inline constexpr std::array<const char*, 4> kRelationWords = {"left of", "right of", "above",
                                                              "below"};
inline constexpr std::array<const char*, 2> kSizeWords = {"small", "large"};

inline const std::vector<std::string>& grammar_object_names() {
  static const std::vector<std::string> names = {
      "cat",   "dog",   "sofa",  "tree",  "car",  "bus",   "person", "chair", "table", "cup",
      "bird",  "horse", "boat",  "bench", "kite", "clock", "book",   "vase",  "bed",   "sheep"};
  return names;
}

/**
 * The fixed partner map of the grammar. Classes sit on a seeded ring; a
 * subject is "left of" and "above" its successor and "right of" and "below"
 * its predecessor. Each class therefore co-occurs with exactly two others.
 */
class SceneGrammar {
 public:
  explicit SceneGrammar(const GrammarConfig& cfg) : cfg_(cfg) {
    const int K = cfg.num_classes;
    if (K < 6 || K > static_cast<int>(grammar_object_names().size()))
      throw DataError("grammar num_classes must be in [6, " +
                      std::to_string(grammar_object_names().size()) + "]");
    if (cfg.grid < 4) throw DataError("grammar grid must be at least 4");
    std::mt19937_64 rng(cfg.seed);
    std::vector<int> perm(K);
    for (int i = 0; i < K; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> pos(K);
    for (int i = 0; i < K; ++i) pos[perm[i]] = i;
    for (int r = 0; r < 4; ++r) {
      partner_[r].resize(K);
      const int shift = (r == static_cast<int>(Relation::left_of) || r == static_cast<int>(Relation::above)) ? 1 : K - 1;
      for (int a = 0; a < K; ++a) partner_[r][a] = perm[(pos[a] + shift) % K];
    }
  }

  const GrammarConfig& config() const { return cfg_; }
  LabelVocab vocab() const {
    const auto& all = grammar_object_names();
    return LabelVocab(std::vector<std::string>(all.begin(), all.begin() + cfg_.num_classes));
  }

  /// Object that a subject of class `a` is paired with under relation `r`.
  int partner(Relation r, int a) const { return partner_[static_cast<int>(r)][a]; }

  /// Subject class paired with object `b` under relation `r`.
  int subject_for(Relation r, int b) const {
    const auto& p = partner_[static_cast<int>(r)];
    return static_cast<int>(std::find(p.begin(), p.end(), b) - p.begin());
  }

  std::string caption(int a, bool a_large, Relation r, int b, bool b_large) const {
    const auto& names = grammar_object_names();
    return std::string("a ") + kSizeWords[a_large] + " " + names[a] + " " +
           kRelationWords[static_cast<int>(r)] + " a " + kSizeWords[b_large] + " " + names[b];
  }

  /// Box of an object with the given size whose centre is (cx, cy).
  LabeledBox place(int label, bool large, double cx, double cy) const {
    const double side = (large ? 2.0 : 1.0) / cfg_.grid;
    return LabeledBox{label, cx - side / 2, cy - side / 2, side, side};
  }

  /// Layout for "a <a> <r> a <b>": the subject and object sit in opposite halves.
  std::vector<LabeledBox> layout(int a, bool a_large, Relation r, int b, bool b_large) const {
    double ax = 0.5, ay = 0.5, bx = 0.5, by = 0.5;
    switch (r) {
      case Relation::left_of: ax = 0.25, bx = 0.75; break;
      case Relation::right_of: ax = 0.75, bx = 0.25; break;
      case Relation::above: ay = 0.25, by = 0.75; break;
      case Relation::below: ay = 0.75, by = 0.25; break;
    }
    return canonical_order({place(a, a_large, ax, ay), place(b, b_large, bx, by)});
  }

 private:
  GrammarConfig cfg_;
  std::array<std::vector<int>, 4> partner_;
};

/**
 * Generates `n` scenes from the grammar. Every caption determines its layout
 * exactly, so the caption-to-layout mapping is a function.
 */
inline std::pair<LabelVocab, std::vector<Scene>> synth_grammar_generate(const GrammarConfig& config,
                                                                       std::size_t n) {
  if (n < 1) throw DataError("synth_grammar_generate: n must be at least 1");
  SceneGrammar g(config);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> cls(0, config.num_classes - 1), rel(0, 3), coin(0, 1);
  std::vector<Scene> scenes;
  scenes.reserve(n);
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    const int a = cls(rng);
    const auto r = static_cast<Relation>(rel(rng));
    const bool al = coin(rng) != 0;
    const bool bl = coin(rng) != 0;
    const int b = g.partner(r, a);
    std::snprintf(id, sizeof(id), "synth-%06zu", i);
    scenes.push_back(Scene{id, g.caption(a, al, r, b, bl), g.layout(a, al, r, b, bl)});
  }
  return {g.vocab(), std::move(scenes)};
}

namespace detail {

/// Recovers (subject, subject_large, relation, object, object_large) from a grammar caption.
inline std::optional<std::tuple<int, bool, Relation, int, bool>> parse_grammar_caption(
    const std::string& caption, const LabelVocab& vocab) {
  for (int r = 0; r < 4; ++r) {
    const std::string word = std::string(" ") + kRelationWords[r] + " a ";
    const auto pos = caption.find(word);
    if (pos == std::string::npos) continue;
    const std::string left = caption.substr(0, pos), right = caption.substr(pos + word.size());
    auto split = [&](const std::string& s, bool skip_article) -> std::optional<std::pair<bool, int>> {
      std::string rest = s;
      if (skip_article) {
        if (rest.rfind("a ", 0) != 0) return std::nullopt;
        rest = rest.substr(2);
      }
      const auto sp = rest.find(' ');
      if (sp == std::string::npos) return std::nullopt;
      const std::string size = rest.substr(0, sp), name = rest.substr(sp + 1);
      if ((size != "small" && size != "large") || !vocab.contains(name)) return std::nullopt;
      return std::make_pair(size == "large", vocab.index_of(name));
    };
    const auto subj = split(left, true);
    const auto obj = split(right, false);
    if (!subj || !obj) return std::nullopt;
    return std::make_tuple(subj->second, subj->first, static_cast<Relation>(r), obj->second,
                           obj->first);
  }
  return std::nullopt;
}

}  // namespace detail

/**
 * Questions of the form "what is <relation> a <size> <object> ?" built from
 * facts observed in grammar scenes. The gold choice is the unique subject
 * the grammar pairs with that object and relation; distractors are classes
 * that never co-occur with the object in any scene.
 */
inline std::vector<MCQuestion> synth_qa_generate(const GrammarConfig& config,
                                                 const std::vector<Scene>& scenes, std::size_t n,
                                                 int num_choices = 5) {
  SceneGrammar g(config);
  const LabelVocab vocab = g.vocab();
  if (num_choices < 2) throw DataError("num_choices must be at least 2");
  // (relation, object, object_large) -> subject, in sorted order for determinism.
  std::map<std::tuple<int, int, bool>, int> facts;
  std::vector<std::vector<bool>> cooccur(config.num_classes, std::vector<bool>(config.num_classes, false));
  for (const auto& s : scenes) {
    const auto parsed = detail::parse_grammar_caption(s.caption, vocab);
    if (!parsed) continue;
    const auto [a, al, r, b, bl] = *parsed;
    facts[{static_cast<int>(r), b, bl}] = a;
    cooccur[a][b] = cooccur[b][a] = true;
  }
  if (facts.empty()) throw DataError("synth_qa_generate: no grammar facts in the scene list");
  std::vector<std::pair<std::tuple<int, int, bool>, int>> fact_list(facts.begin(), facts.end());
  std::mt19937_64 rng(config.seed ^ 0x5bd1e9955bd1e995ULL);
  std::uniform_int_distribution<std::size_t> pick(0, fact_list.size() - 1);
  std::vector<MCQuestion> out;
  out.reserve(n);
  const auto& names = grammar_object_names();
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [key, subject] = fact_list[pick(rng)];
    const auto [r, b, bl] = key;
    std::vector<int> pool;
    for (int c = 0; c < config.num_classes; ++c)
      if (c != subject && c != b && !cooccur[b][c]) pool.push_back(c);
    if (static_cast<int>(pool.size()) < num_choices - 1)
      throw DataError("synth_qa_generate: only " + std::to_string(pool.size()) + " classes never co-occur with '" +
                      names[b] + "', need " + std::to_string(num_choices - 1) + " distractors");
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<int> options(pool.begin(), pool.begin() + (num_choices - 1));
    options.push_back(subject);
    std::shuffle(options.begin(), options.end(), rng);
    MCQuestion q;
    std::snprintf(id, sizeof(id), "synthqa-%06zu", i);
    q.id = id;
    q.stem = std::string("what is ") + kRelationWords[r] + " a " + kSizeWords[bl] + " " + names[b] + " ?";
    for (std::size_t k = 0; k < options.size(); ++k) {
      q.choices.push_back(names[options[k]]);
      if (options[k] == subject) q.gold = static_cast<int>(k);
    }
    q.style = QaStyle::csqa;
    out.push_back(std::move(q));
  }
  return out;
}

/// Writes questions in the CommonsenseQA JSON-Lines schema.
inline void save_csqa(const std::string& path, const std::vector<MCQuestion>& qs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write question file '" + path + "'");
  for (const auto& q : qs) {
    nlohmann::json rec;
    rec["id"] = q.id;
    rec["question"]["stem"] = q.stem;
    rec["question"]["choices"] = nlohmann::json::array();
    for (std::size_t i = 0; i < q.choices.size(); ++i)
      rec["question"]["choices"].push_back(
          {{"label", std::string(1, static_cast<char>('A' + i))}, {"text", q.choices[i]}});
    if (q.gold) rec["answerKey"] = std::string(1, static_cast<char>('A' + *q.gold));
    out << rec.dump() << '\n';
  }
}

}  // namespace loire

#endif  // LOIRE_DATA_HPP_
