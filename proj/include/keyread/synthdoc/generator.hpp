#pragma once

// Deterministic synthetic documents: labelled key/value fields, distractor
// lines that reuse field patterns under wrong labels, and an address line,
// stamped with a 5x7 bitmap font onto a small grayscale raster.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "keyread/numcore/errors.hpp"
#include "keyread/numcore/random.hpp"
#include "keyread/synthdoc/font.hpp"
#include "keyread/synthdoc/image.hpp"

namespace keyread::synthdoc {

constexpr int kCellSize = 8;

// Pattern language: '#' digit, '@' uppercase letter, anything else literal;
// '|' separates whole-value alternatives ("USD|EUR").
struct FieldSpec {
  std::string key;
  std::string pattern;
  std::vector<std::string> labels;
  double presence = 1.0;

  bool operator==(const FieldSpec&) const = default;
};

inline std::vector<FieldSpec> default_fields() {
  return {
      {"number", "INV-#####", {"NO:", "INV:", "NUM:", "NR:"}, 1.0},
      {"date", "##/##/##", {"DATE:", "DT:", "ON:"}, 1.0},
      {"amount", "###.##", {"TOT:", "SUM:", "AMT:", "DUE:"}, 1.0},
      {"currency", "USD|EUR|AUD", {"CUR:"}, 1.0},
  };
}

inline std::vector<std::string> split_alternatives(const std::string& pattern) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto bar = pattern.find('|', start);
    out.push_back(pattern.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return out;
}

inline std::string generate_value(const std::string& pattern, Rng& rng) {
  const auto alts = split_alternatives(pattern);
  const std::string& alt = alts[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(alts.size()) - 1))];
  std::string out;
  for (char c : alt) {
    if (c == '#') out.push_back(static_cast<char>('0' + uniform_int(rng, 0, 9)));
    else if (c == '@') out.push_back(static_cast<char>('A' + uniform_int(rng, 0, 25)));
    else out.push_back(c);
  }
  return out;
}

inline bool matches_pattern(std::string_view value, const std::string& pattern) {
  for (const auto& alt : split_alternatives(pattern)) {
    if (alt.size() != value.size()) continue;
    bool ok = true;
    for (std::size_t i = 0; i < alt.size() && ok; ++i) {
      const char v = value[i];
      if (alt[i] == '#') ok = v >= '0' && v <= '9';
      else if (alt[i] == '@') ok = v >= 'A' && v <= 'Z';
      else ok = v == alt[i];
    }
    if (ok) return true;
  }
  return false;
}

inline int pattern_max_length(const std::string& pattern) {
  int n = 0;
  for (const auto& alt : split_alternatives(pattern)) n = std::max(n, static_cast<int>(utf8_decode(alt).size()));
  return n;
}

struct PlacedGlyph {
  char32_t ch;
  int row;
  int col;
};

// Stamps `text` with its top-left glyph corner at (row, col). Returns the tight
// rectangle covering all glyph cells, or nothing for an empty string.
inline std::optional<Box> render_string(GrayImage& image, std::string_view text, int row, int col,
                                        const GlyphFont& font = GlyphFont::builtin(),
                                        std::vector<PlacedGlyph>* placed = nullptr) {
  const std::u32string glyphs = utf8_decode(text);
  if (glyphs.empty()) return std::nullopt;
  const int width = text_width(glyphs.size());
  if (row < 0 || col < 0 || row + kGlyphHeight > image.height || col + width > image.width) {
    throw Error("text run \"" + std::string(text) + "\" at (" + std::to_string(row) + ", " + std::to_string(col) +
                ") overflows a " + std::to_string(image.height) + "x" + std::to_string(image.width) + " image");
  }
  for (std::size_t k = 0; k < glyphs.size(); ++k) {
    const GlyphBitmap& bm = font.glyph(glyphs[k]);
    const int x0 = col + static_cast<int>(k) * kGlyphAdvance;
    for (int r = 0; r < kGlyphHeight; ++r)
      for (int c = 0; c < kGlyphWidth; ++c)
        if (bm[r * kGlyphWidth + c]) image.at(row + r, x0 + c) = 1.0f;
    if (placed) placed->push_back({glyphs[k], row, x0});
  }
  return Box{row, col, row + kGlyphHeight, col + width};
}

enum class LabelPlacement { Left, Right, Below };
enum class CurrencyMode { Code, Symbol };

struct FieldLayout {
  int field = 0;  // index into the generator's field list
  LabelPlacement placement = LabelPlacement::Left;
  std::string label;
  int line = 0;  // memory row of the first line
  int col = 0;   // pixel column of the line start
};

struct DistractorLayout {
  int line = 0;
  int col = 0;
  std::string label;      // wrong label for a pattern distractor
  int source_field = -1;  // field whose pattern supplies the value; -1 for filler text
  std::string text;       // filler text
};

struct DocTemplate {
  int id = 0;
  int row_offset = 0;  // pixel offset of glyph tops inside a memory row
  std::vector<FieldLayout> fields;
  std::vector<DistractorLayout> distractors;
  int address_line = 0;
  int address_col = 0;
  CurrencyMode currency_mode = CurrencyMode::Code;
  double noise = 0.005;
};

struct GeneratorConfig {
  int height = 64;
  int width = 96;
  int templates = 140;
  int docs_per_template = 16;
  double test_fraction = 0.1;
  double noise = 0.005;
  int distractors_min = 1;
  int distractors_max = 3;
  std::vector<FieldSpec> fields = default_fields();
  std::vector<std::string> keys = {"number"};

  bool operator==(const GeneratorConfig&) const = default;

  int field_index(std::string_view key) const {
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (fields[i].key == key) return static_cast<int>(i);
    return -1;
  }
};

namespace detail {

inline const std::vector<std::string>& distractor_labels() {
  static const std::vector<std::string> labels = {"REF:", "PO:", "ACCT:", "ORD:", "ID:", "TAX:", "VAT:", "TEL:"};
  return labels;
}

inline const std::vector<std::string>& filler_lines() {
  static const std::vector<std::string> lines = {"ACME GMBH",  "THANK YOU", "PAGE 1/1",   "INVOICE",
                                                 "NET 30",     "BILL TO:",  "SHIP TO:",   "ORIGINAL",
                                                 "COPY",       "PAID",      "QTY UNIT",   "TOTAL DUE",
                                                 "STORE 12",   "DEPT 4-A",  "SERVICE",    "SUPPLIES"};
  return lines;
}

struct Country {
  const char* code;
  const char* currency;
  std::vector<const char*> cities;
};

inline const std::vector<Country>& countries() {
  static const std::vector<Country> cs = {
      {"US", "USD", {"AUSTIN", "DENVER", "BOSTON", "DALLAS"}},
      {"AU", "AUD", {"SYDNEY", "PERTH", "HOBART", "DARWIN"}},
      {"DE", "EUR", {"BERLIN", "BONN", "KIEL", "ESSEN"}},
      {"FR", "EUR", {"PARIS", "LYON", "NICE", "LILLE"}},
  };
  return cs;
}

inline const char* currency_symbol(std::string_view code) {
  if (code == "EUR") return "€";
  return "$";
}

constexpr int kAddressChars = 9;  // longest "<CITY> <CC>"

inline int glyph_count(std::string_view s) { return static_cast<int>(utf8_decode(s).size()); }

// Pixel width of a run sequence laid out left to right with single spaces.
inline int runs_width(const std::vector<int>& glyph_counts) {
  int total = 0;
  for (int n : glyph_counts) total += n;
  total += static_cast<int>(glyph_counts.size()) - 1;
  return text_width(static_cast<std::size_t>(total));
}

}  // namespace detail

// Whether `field` carries the currency as a code or symbol next to it.
inline int attached_currency(const GeneratorConfig& cfg, int field) {
  if (cfg.fields[field].key != "amount") return -1;
  return cfg.field_index("currency");
}

inline bool is_attached(const GeneratorConfig& cfg, int field) {
  return cfg.fields[field].key == "currency" && cfg.field_index("amount") >= 0;
}

namespace detail {

// Glyph count of the value group (value plus attached currency) at its widest.
inline int value_group_glyphs(const GeneratorConfig& cfg, int field, CurrencyMode mode) {
  int n = pattern_max_length(cfg.fields[field].pattern);
  const int cur = attached_currency(cfg, field);
  if (cur >= 0) n += mode == CurrencyMode::Code ? 1 + pattern_max_length(cfg.fields[cur].pattern) : 1;
  return n;
}

inline DocTemplate try_make_template(const GeneratorConfig& cfg, std::uint64_t seed, int id, int attempt) {
  require(cfg.height % kCellSize == 0 && cfg.width % kCellSize == 0, "generator extents must be divisible by 8");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id), 0x7e3a + static_cast<std::uint64_t>(attempt)));
  const int lines = cfg.height / kCellSize;
  DocTemplate t;
  t.id = id;
  t.noise = cfg.noise;
  t.row_offset = uniform_int(rng, 0, kCellSize - kGlyphHeight);
  t.currency_mode = bernoulli(rng, 0.5) ? CurrencyMode::Code : CurrencyMode::Symbol;

  struct Block {
    int rows;
    int width;
    int field = -1;       // >= 0: field layout index
    int distractor = -1;  // >= 0: distractor index
    bool address = false;
  };
  std::vector<Block> blocks;

  for (int f = 0; f < static_cast<int>(cfg.fields.size()); ++f) {
    if (is_attached(cfg, f)) continue;
    const FieldSpec& spec = cfg.fields[f];
    require(!spec.labels.empty(), "field " + spec.key + " has no labels");
    FieldLayout fl;
    fl.field = f;
    fl.label = spec.labels[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(spec.labels.size()) - 1))];
    fl.placement = static_cast<LabelPlacement>(uniform_int(rng, 0, 2));
    const int label_glyphs = glyph_count(fl.label);
    const int value_glyphs = value_group_glyphs(cfg, f, t.currency_mode);
    int width = runs_width({label_glyphs, value_glyphs});
    if (fl.placement != LabelPlacement::Below && width > cfg.width) fl.placement = LabelPlacement::Below;
    if (fl.placement == LabelPlacement::Below) width = text_width(static_cast<std::size_t>(std::max(label_glyphs, value_glyphs)));
    if (width > cfg.width) throw Error("field " + spec.key + " cannot fit the image width");
    t.fields.push_back(fl);
    blocks.push_back({fl.placement == LabelPlacement::Below ? 2 : 1, width, static_cast<int>(t.fields.size()) - 1});
  }

  std::vector<int> sources;
  for (int f = 0; f < static_cast<int>(cfg.fields.size()); ++f)
    if (!is_attached(cfg, f) && cfg.fields[f].key != "currency") sources.push_back(f);
  const int ndis = uniform_int(rng, cfg.distractors_min, std::max(cfg.distractors_min, cfg.distractors_max));
  for (int d = 0; d < ndis; ++d) {
    DistractorLayout dl;
    int width;
    if (!sources.empty() && bernoulli(rng, 0.7)) {
      dl.source_field = sources[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(sources.size()) - 1))];
      const auto& pool = distractor_labels();
      dl.label = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      width = runs_width({glyph_count(dl.label), pattern_max_length(cfg.fields[dl.source_field].pattern)});
    } else {
      const auto& pool = filler_lines();
      dl.text = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      width = text_width(static_cast<std::size_t>(glyph_count(dl.text)));
    }
    if (width > cfg.width) continue;
    t.distractors.push_back(dl);
    blocks.push_back({1, width, -1, static_cast<int>(t.distractors.size()) - 1});
  }

  auto used_rows = [&] {
    int n = 1;  // address line
    for (const auto& b : blocks) n += b.rows;
    return n;
  };
  while (used_rows() > lines && !t.distractors.empty()) {
    t.distractors.pop_back();
    blocks.pop_back();
  }
  if (used_rows() > lines) throw Error("layout overflow: fields need more lines than the image has");

  shuffle(blocks, rng);
  const bool address_top = bernoulli(rng, 0.5);
  const Block address{1, text_width(kAddressChars), -1, -1, true};
  if (address_top) blocks.insert(blocks.begin(), address);
  else blocks.push_back(address);

  std::vector<int> gaps(blocks.size() + 1, 0);
  for (int free = lines - used_rows(); free > 0; --free) ++gaps[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(gaps.size()) - 1))];
  if (address_top) {  // keep the address in a corner
    gaps.back() += gaps.front();
    gaps.front() = 0;
  } else {
    gaps.front() += gaps.back();
    gaps.back() = 0;
  }

  int line = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    line += gaps[i];
    const Block& b = blocks[i];
    // columns snap to the cell grid like rows do
    const int slots = (cfg.width - b.width) / kCellSize;
    const int col = kCellSize * (b.address ? (bernoulli(rng, 0.5) ? 0 : slots) : uniform_int(rng, 0, slots));
    if (b.address) {
      t.address_line = line;
      t.address_col = col;
    } else if (b.field >= 0) {
      t.fields[b.field].line = line;
      t.fields[b.field].col = col;
    } else {
      t.distractors[b.distractor].line = line;
      t.distractors[b.distractor].col = col;
    }
    line += b.rows;
  }
  return t;
}

}  // namespace detail

constexpr int kLayoutRetries = 16;

// Layout for template `id`; fully determined by (config, seed, id).
inline DocTemplate make_template(const GeneratorConfig& cfg, std::uint64_t seed, int id) {
  std::string last;
  for (int attempt = 0; attempt < kLayoutRetries; ++attempt) {
    try {
      return detail::try_make_template(cfg, seed, id, attempt);
    } catch (const ContractViolation&) {
      throw;
    } catch (const Error& e) {
      last = e.what();
    }
  }
  throw Error("template " + std::to_string(id) + ": no valid layout after " + std::to_string(kLayoutRetries) +
              " draws (" + last + ")");
}

// A rendered document: every present field plus distractors, with ground truth
// per key. Boxes exist only for present fields.
struct RenderedDoc {
  GrayImage image;
  std::vector<std::uint8_t> cellmap;  // (H/8) x (W/8) class ids
  std::map<std::string, std::string> values;
  std::map<std::string, Box> boxes;
};

inline std::vector<std::uint8_t> make_cellmap(int height, int width, const std::vector<PlacedGlyph>& glyphs) {
  const int hc = height / kCellSize, wc = width / kCellSize;
  std::vector<std::uint8_t> cells(static_cast<std::size_t>(hc) * wc, 0);
  const int half = kCellSize / 2;
  for (const auto& g : glyphs) {
    const int cls = char_class(g.ch);
    if (cls == 0) continue;
    for (int i = 0; i < hc; ++i) {
      const int cy = i * kCellSize + half;
      if (cy < g.row || cy >= g.row + kGlyphHeight) continue;
      for (int j = 0; j < wc; ++j) {
        const int cx = j * kCellSize + half;
        if (cx >= g.col && cx < g.col + kGlyphWidth) cells[static_cast<std::size_t>(i) * wc + j] = static_cast<std::uint8_t>(cls);
      }
    }
  }
  return cells;
}

inline RenderedDoc render_document(const GeneratorConfig& cfg, const DocTemplate& t, Rng& rng,
                                   const GlyphFont& font = GlyphFont::builtin()) {
  RenderedDoc doc;
  doc.image = GrayImage(cfg.height, cfg.width);
  std::vector<PlacedGlyph> glyphs;
  std::vector<Box> occupied;
  auto stamp = [&](const std::string& text, int line, int col) -> std::optional<Box> {
    auto box = render_string(doc.image, text, line * kCellSize + t.row_offset, col, font, &glyphs);
    if (box) {
      for (const auto& o : occupied)
        if (o.overlaps(*box)) throw Error("layout overflow: overlapping text runs");
      occupied.push_back(*box);
    }
    return box;
  };
  const int adv = kGlyphAdvance;

  // Draw presence and values for every field first so the draw order is fixed.
  std::vector<std::string> values(cfg.fields.size());
  for (std::size_t f = 0; f < cfg.fields.size(); ++f) {
    const bool present = bernoulli(rng, cfg.fields[f].presence);
    std::string v = generate_value(cfg.fields[f].pattern, rng);
    values[f] = present ? v : std::string();
    doc.values[cfg.fields[f].key] = values[f];
  }
  const int cur_field = cfg.field_index("currency");
  const detail::Country* country = nullptr;
  {
    std::vector<const detail::Country*> options;
    for (const auto& c : detail::countries())
      if (cur_field < 0 || values[cur_field].empty() || values[cur_field] == c.currency) options.push_back(&c);
    if (options.empty())
      for (const auto& c : detail::countries()) options.push_back(&c);
    country = options[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(options.size()) - 1))];
  }
  const std::string city = country->cities[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(country->cities.size()) - 1))];

  for (const auto& fl : t.fields) {
    const std::string& value = values[fl.field];
    const int cur = attached_currency(cfg, fl.field);
    const std::string& cur_value = cur >= 0 ? values[cur] : std::string();
    const bool symbol = cur >= 0 && t.currency_mode == CurrencyMode::Symbol && !cur_value.empty() && !value.empty();
    const bool code = cur >= 0 && t.currency_mode == CurrencyMode::Code && !cur_value.empty();
    if (value.empty() && !code) continue;

    const int label_w = detail::glyph_count(fl.label);
    int vline = fl.line, vcol = fl.col;
    if (fl.placement == LabelPlacement::Left) {
      vcol = fl.col + (label_w + 1) * adv;
    } else if (fl.placement == LabelPlacement::Below) {
      vline = fl.line + 1;
    }
    int col = vcol;
    if (symbol) {
      stamp(detail::currency_symbol(cur_value), vline, col);
      col += adv;
    }
    if (!value.empty()) {
      if (auto box = stamp(value, vline, col)) doc.boxes[cfg.fields[fl.field].key] = *box;
    }
    const int value_slots = pattern_max_length(cfg.fields[fl.field].pattern);
    int end_col = col + (value_slots + 1) * adv;
    if (code) {
      if (auto box = stamp(cur_value, vline, end_col)) doc.boxes[cfg.fields[cur].key] = *box;
      end_col += (detail::glyph_count(cur_value) + 1) * adv;
    }
    if (value.empty()) continue;  // absent field: no label either
    if (fl.placement == LabelPlacement::Left) {
      stamp(fl.label, fl.line, fl.col);
    } else if (fl.placement == LabelPlacement::Right) {
      stamp(fl.label, fl.line, end_col);
    } else {
      stamp(fl.label, fl.line, fl.col);
    }
  }

  for (const auto& dl : t.distractors) {
    if (dl.source_field >= 0) {
      const std::string v = generate_value(cfg.fields[dl.source_field].pattern, rng);
      stamp(dl.label, dl.line, dl.col);
      stamp(v, dl.line, dl.col + (detail::glyph_count(dl.label) + 1) * adv);
    } else {
      stamp(dl.text, dl.line, dl.col);
    }
  }

  stamp(city, t.address_line, t.address_col);
  const int cc_col = t.address_col + (detail::glyph_count(city) + 1) * adv;
  auto cc_box = stamp(country->code, t.address_line, cc_col);
  if (cur_field >= 0 && !values[cur_field].empty() && t.currency_mode == CurrencyMode::Symbol && cc_box) {
    doc.boxes[cfg.fields[cur_field].key] = *cc_box;
  }

  doc.cellmap = make_cellmap(cfg.height, cfg.width, glyphs);
  if (t.noise > 0) {
    for (auto& px : doc.image.pixels)
      if (bernoulli(rng, t.noise)) px = bernoulli(rng, 0.5) ? 1.0f : 0.0f;
  }
  return doc;
}

struct DocSample {
  GrayImage image;
  std::string key;
  std::string value;  // empty: field absent
  std::optional<Box> box;
  std::vector<std::uint8_t> cellmap;
  int template_id = 0;
};

inline DocSample generate_sample(const DocTemplate& t, const GeneratorConfig& cfg, const std::string& key, Rng& rng) {
  require(cfg.field_index(key) >= 0, "generate_sample: key \"" + key + "\" is not a configured field");
  RenderedDoc doc = render_document(cfg, t, rng);
  DocSample s;
  s.image = std::move(doc.image);
  s.key = key;
  s.value = doc.values.at(key);
  if (auto it = doc.boxes.find(key); it != doc.boxes.end() && !s.value.empty()) s.box = it->second;
  s.cellmap = std::move(doc.cellmap);
  s.template_id = t.id;
  return s;
}

}  // namespace keyread::synthdoc
