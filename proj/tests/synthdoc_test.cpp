#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "keyread/synthdoc/dataset.hpp"

using namespace keyread;
using namespace keyread::synthdoc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("keyread_synthdoc_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

GeneratorConfig small_config(int templates = 10, int docs = 4) {
  GeneratorConfig cfg;
  cfg.templates = templates;
  cfg.docs_per_template = docs;
  return cfg;
}

}  // namespace

TEST(Font, CoversCharsetWithBinaryBitmaps) {
  const auto& font = GlyphFont::builtin();
  EXPECT_EQ(font.glyph_count(), charset().size());
  for (char32_t ch : charset()) {
    ASSERT_TRUE(font.has(ch));
    for (auto v : font.glyph(ch)) EXPECT_TRUE(v == 0 || v == 1);
  }
  EXPECT_THROW(font.glyph(U'a'), Error);
  EXPECT_EQ(class_count(), 44);
  EXPECT_EQ(char_class(U'0'), 1);
  EXPECT_EQ(char_class(U' '), 0);
}

TEST(Font, Utf8RoundTrip) {
  const std::string s = "AB €$";
  EXPECT_EQ(utf8_encode(utf8_decode(s)), s);
  EXPECT_EQ(utf8_decode(s).size(), 5u);
  EXPECT_THROW(utf8_decode(std::string("\xE2\x82")), Error);
}

TEST(RenderString, SingleGlyphBox) {
  GrayImage img(64, 96);
  auto box = render_string(img, "A", 0, 0);
  ASSERT_TRUE(box);
  EXPECT_EQ(*box, (Box{0, 0, 7, 5}));
}

TEST(RenderString, SpacingArithmetic) {
  GrayImage img(64, 96);
  auto box = render_string(img, "AB", 3, 10);
  ASSERT_TRUE(box);
  EXPECT_EQ(box->width(), 11);
  EXPECT_EQ(box->height(), 7);
  // Spacing column between glyphs stays blank.
  for (int r = 3; r < 10; ++r) EXPECT_EQ(img.at(r, 15), 0.0f);
}

TEST(RenderString, EmptyStringIsNoOp) {
  GrayImage img(64, 96);
  const GrayImage before = img;
  EXPECT_FALSE(render_string(img, "", 0, 0));
  EXPECT_EQ(img, before);
}

TEST(RenderString, OverflowThrows) {
  GrayImage img(64, 96);
  EXPECT_THROW(render_string(img, "ABCDEFGHIJKLMNOPQ", 0, 0), Error);
  EXPECT_THROW(render_string(img, "A", 60, 0), Error);
  EXPECT_THROW(render_string(img, "A", 0, -1), Error);
}

TEST(RenderString, InkMatchesBitmap) {
  GrayImage img(16, 16);
  render_string(img, "7", 2, 3);
  const auto& bm = GlyphFont::builtin().glyph(U'7');
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) {
      const bool inside = r >= 2 && r < 9 && c >= 3 && c < 8;
      const float expect = inside ? bm[(r - 2) * kGlyphWidth + (c - 3)] : 0.0f;
      EXPECT_EQ(img.at(r, c), expect);
    }
}

TEST(Pattern, GeneratedValuesMatch) {
  Rng rng(3);
  for (const auto& f : default_fields())
    for (int i = 0; i < 200; ++i) {
      const auto v = generate_value(f.pattern, rng);
      EXPECT_TRUE(matches_pattern(v, f.pattern)) << v;
    }
  EXPECT_FALSE(matches_pattern("INV-1234", "INV-#####"));
  EXPECT_FALSE(matches_pattern("INV-1234A", "INV-#####"));
  EXPECT_TRUE(matches_pattern("EUR", "USD|EUR|AUD"));
  EXPECT_FALSE(matches_pattern("GBP", "USD|EUR|AUD"));
}

TEST(Sample, PresenceOneGivesPatternValue) {
  auto cfg = small_config();
  const auto tpl = make_template(cfg, 1, 0);
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    auto s = generate_sample(tpl, cfg, "number", rng);
    EXPECT_FALSE(s.value.empty());
    EXPECT_TRUE(matches_pattern(s.value, "INV-#####")) << s.value;
    EXPECT_TRUE(s.box);
  }
}

TEST(Sample, PresenceZeroGivesEmptyValueAndNoBox) {
  auto cfg = small_config();
  cfg.fields[cfg.field_index("number")].presence = 0.0;
  const auto tpl = make_template(cfg, 1, 0);
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    auto s = generate_sample(tpl, cfg, "number", rng);
    EXPECT_EQ(s.value, "");
    EXPECT_FALSE(s.box);
  }
}

TEST(Sample, UnknownKeyViolatesContract) {
  auto cfg = small_config();
  const auto tpl = make_template(cfg, 1, 0);
  Rng rng(1);
  EXPECT_THROW(generate_sample(tpl, cfg, "vendor", rng), ContractViolation);
}

TEST(Sample, Deterministic) {
  auto cfg = small_config();
  const auto a_tpl = make_template(cfg, 5, 3);
  const auto b_tpl = make_template(cfg, 5, 3);
  Rng ra(77), rb(77);
  auto a = generate_sample(a_tpl, cfg, "number", ra);
  auto b = generate_sample(b_tpl, cfg, "number", rb);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.cellmap, b.cellmap);
}

TEST(Sample, ShapesAndRange) {
  auto cfg = small_config();
  const auto tpl = make_template(cfg, 2, 1);
  Rng rng(4);
  auto s = generate_sample(tpl, cfg, "number", rng);
  EXPECT_EQ(s.image.height, 64);
  EXPECT_EQ(s.image.width, 96);
  EXPECT_EQ(s.cellmap.size(), 8u * 12u);
  for (float v : s.image.pixels) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  for (auto c : s.cellmap) EXPECT_LT(c, class_count());
}

// Every value glyph lies inside the box: the document restricted to the box is
// exactly the value rendered alone at the box corner (noise off).
TEST(Sample, BoxSoundness) {
  auto cfg = small_config(30, 1);
  cfg.noise = 0.0;
  cfg.keys = {"number", "date", "amount"};
  for (int tid = 0; tid < cfg.templates; ++tid) {
    const auto tpl = make_template(cfg, 11, tid);
    Rng rng(derive_seed(11, tid, 0));
    const auto doc = render_document(cfg, tpl, rng);
    for (const auto& key : cfg.keys) {
      const auto& value = doc.values.at(key);
      ASSERT_TRUE(doc.boxes.count(key)) << key;
      const Box box = doc.boxes.at(key);
      EXPECT_EQ(box.width(), text_width(utf8_decode(value).size()));
      GrayImage alone(cfg.height, cfg.width);
      render_string(alone, value, box.row0, box.col0);
      for (int r = 0; r < cfg.height; ++r)
        for (int c = 0; c < cfg.width; ++c) {
          if (alone.at(r, c) > 0) {
            EXPECT_TRUE(box.contains(r, c));
          }
          if (box.contains(r, c)) {
            EXPECT_EQ(doc.image.at(r, c), alone.at(r, c)) << key << " " << r << "," << c;
          }
        }
    }
  }
}

// A labelled cell must show that character's bitmap at some column placing
// the cell center inside it; cells whose center misses the text band are
// background.
TEST(Sample, CellmapMatchesCenterGlyph) {
  auto cfg = small_config(20, 1);
  cfg.noise = 0.0;
  const auto& font = GlyphFont::builtin();
  for (int tid = 0; tid < cfg.templates; ++tid) {
    const auto tpl = make_template(cfg, 13, tid);
    Rng rng(derive_seed(13, tid, 0));
    const auto doc = render_document(cfg, tpl, rng);
    const int hc = cfg.height / 8, wc = cfg.width / 8;
    int labelled = 0;
    for (int i = 0; i < hc; ++i) {
      const int top = i * 8 + tpl.row_offset;
      for (int j = 0; j < wc; ++j) {
        const int cls = doc.cellmap[i * wc + j];
        const int cy = i * 8 + 4, cx = j * 8 + 4;
        if (cy < top || cy >= top + kGlyphHeight) {
          EXPECT_EQ(cls, 0);
          continue;
        }
        if (cls == 0) continue;
        ++labelled;
        const auto& bm = font.glyph(charset()[cls - 1]);
        bool found = false;
        for (int x = cx - kGlyphWidth + 1; x <= cx && !found; ++x) {
          if (x < 0 || x + kGlyphWidth > cfg.width) continue;
          bool same = true;
          for (int r = 0; r < kGlyphHeight && same; ++r)
            for (int c = 0; c < kGlyphWidth && same; ++c) same = doc.image.at(top + r, x + c) == bm[r * kGlyphWidth + c];
          // Blank flanks make the match unambiguous against glyph fragments.
          if (same && x > 0)
            for (int r = 0; r < kGlyphHeight; ++r) same = same && doc.image.at(top + r, x - 1) == 0.0f;
          found = same;
        }
        EXPECT_TRUE(found) << "template " << tid << " cell " << i << "," << j << " class " << cls;
      }
    }
    EXPECT_GT(labelled, 10);
  }
}

TEST(Cellmap, SingleGlyphOracle) {
  // Glyph 'A' (class 11) at (8, 6): covers rows 8..14, cols 6..10; cell (1,1)
  // center is (12, 12) which is outside, cell (1,0) center (12, 4) outside.
  auto cells = make_cellmap(16, 24, {{U'A', 8, 6}});
  EXPECT_EQ(std::count(cells.begin(), cells.end(), 0), 6);
  cells = make_cellmap(16, 24, {{U'A', 8, 9}});
  EXPECT_EQ(cells[1 * 3 + 1], char_class(U'A'));
  EXPECT_EQ(char_class(U'A'), 11);
  EXPECT_EQ(std::count(cells.begin(), cells.end(), 0), 5);
  cells = make_cellmap(16, 24, {{U' ', 8, 9}});
  EXPECT_EQ(std::count(cells.begin(), cells.end(), 0), 6);
}

TEST(Sample, NoOverlapAcrossManyTemplates) {
  GeneratorConfig cfg = small_config(200, 2);
  cfg.keys = {"number", "amount", "currency", "date"};
  for (int tid = 0; tid < cfg.templates; ++tid) {
    const auto tpl = make_template(cfg, 21, tid);
    Rng rng(tid);
    EXPECT_NO_THROW(render_document(cfg, tpl, rng));
  }
}

TEST(Sample, PresenceRateWithinTwoPercent) {
  auto cfg = small_config();
  cfg.fields[cfg.field_index("number")].presence = 0.7;
  cfg.noise = 0.0;
  const auto tpl = make_template(cfg, 3, 0);
  Rng rng(1234);
  const int n = 10000;
  int missing = 0;
  for (int i = 0; i < n; ++i) missing += generate_sample(tpl, cfg, "number", rng).value.empty();
  EXPECT_NEAR(static_cast<double>(missing) / n, 0.3, 0.02);
}

TEST(Sample, SymbolModeUsesCountryToken) {
  GeneratorConfig cfg = small_config(60, 2);
  cfg.noise = 0.0;
  int symbol_templates = 0;
  for (int tid = 0; tid < cfg.templates; ++tid) {
    const auto tpl = make_template(cfg, 8, tid);
    if (tpl.currency_mode != CurrencyMode::Symbol) continue;
    ++symbol_templates;
    Rng rng(tid);
    const auto doc = render_document(cfg, tpl, rng);
    const Box b = doc.boxes.at("currency");
    EXPECT_EQ(b.width(), text_width(2));
    EXPECT_EQ(b.row0, tpl.address_line * 8 + tpl.row_offset);
  }
  EXPECT_GT(symbol_templates, 0);
}

TEST(Dataset, TemplateDisjointSplit) {
  auto cfg = small_config(100, 2);
  const auto ds = generate_dataset(cfg, 42);
  std::set<int> train, test;
  for (const auto& r : ds.train) train.insert(r.template_id);
  for (const auto& r : ds.test) test.insert(r.template_id);
  EXPECT_EQ(test.size(), 10u);
  EXPECT_EQ(train.size(), 90u);
  for (int t : test) EXPECT_FALSE(train.count(t));
}

TEST(Dataset, RecordsScaleWithKeys) {
  auto cfg = small_config(100, 10);
  cfg.keys = {"number", "amount"};
  const auto ds = generate_dataset(cfg, 1);
  EXPECT_EQ(ds.docs.size(), 1000u);
  EXPECT_EQ(ds.train.size() + ds.test.size(), 2000u);
}

TEST(Dataset, TooFewTemplatesThrows) {
  EXPECT_THROW(generate_dataset(small_config(1, 4), 0), Error);
}

TEST(Dataset, DeterministicManifests) {
  auto cfg = small_config(12, 3);
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  write_dataset(a, generate_dataset(cfg, 99));
  write_dataset(b, generate_dataset(cfg, 99));
  EXPECT_EQ(slurp(a / "train.jsonl"), slurp(b / "train.jsonl"));
  EXPECT_EQ(slurp(a / "test.jsonl"), slurp(b / "test.jsonl"));
  EXPECT_EQ(slurp(a / "images" / "t0003_d001.pgm"), slurp(b / "images" / "t0003_d001.pgm"));
  write_dataset(b, generate_dataset(cfg, 100));
  EXPECT_NE(slurp(a / "train.jsonl"), slurp(b / "train.jsonl"));
}

TEST(Pgm, HeaderWidthBeforeHeight) {
  EXPECT_EQ(pgm_header(64, 96), "P5\n96 64\n255\n");
  const auto dir = scratch_dir("pgm");
  write_image(dir / "x.pgm", GrayImage(64, 96));
  const auto bytes = slurp(dir / "x.pgm");
  EXPECT_EQ(bytes.substr(0, 13), "P5\n96 64\n255\n");
  EXPECT_EQ(bytes.size(), 13u + 64u * 96u);
}

TEST(Pgm, MalformedHeadersRejected) {
  const auto dir = scratch_dir("pgm_bad");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  EXPECT_THROW(read_pgm(write("a.pgm", "P2\n1 1\n255\n\x01")), ParseError);
  EXPECT_THROW(read_pgm(write("b.pgm", "P5\nx 1\n255\n\x01")), ParseError);
  EXPECT_THROW(read_pgm(write("c.pgm", "P5\n1 1\n65535\n\x01")), ParseError);
  EXPECT_THROW(read_pgm(write("d.pgm", "P5\n2 2\n255\n\x01")), ParseError);
  const auto ok = read_pgm(write("e.pgm", "P5\n# comment\n2 1\n255\n\x01\x02"));
  EXPECT_EQ(ok.width, 2);
  EXPECT_EQ(ok.bytes, (std::vector<std::uint8_t>{1, 2}));
}

TEST(Dataset, WriteReadRoundTrip) {
  auto cfg = small_config(6, 3);
  cfg.keys = {"number", "amount"};
  cfg.fields[0].presence = 0.5;
  const auto ds = generate_dataset(cfg, 5);
  const auto dir = scratch_dir("roundtrip");
  write_dataset(dir, ds);
  const auto back = read_dataset(dir);
  EXPECT_EQ(back.config, ds.config);
  EXPECT_EQ(back.seed, ds.seed);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.test.size(), ds.test.size());
  auto check = [&](const Record& a, const Record& b) {
    EXPECT_EQ(a.key, b.key);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.box, b.box);
    EXPECT_EQ(a.template_id, b.template_id);
    const auto& da = ds.docs[a.doc];
    const auto& db = back.docs[b.doc];
    EXPECT_EQ(da.cellmap, db.cellmap);
    ASSERT_EQ(da.image.pixels.size(), db.image.pixels.size());
    for (std::size_t i = 0; i < da.image.pixels.size(); ++i)
      EXPECT_EQ(quantize(da.image.pixels[i]), quantize(db.image.pixels[i]));
  };
  for (std::size_t i = 0; i < ds.train.size(); ++i) check(ds.train[i], back.train[i]);
  for (std::size_t i = 0; i < ds.test.size(); ++i) check(ds.test[i], back.test[i]);
  EXPECT_TRUE(back.has_cellmaps());
}

TEST(Dataset, MissingValueNamesLine) {
  auto cfg = small_config(4, 2);
  const auto dir = scratch_dir("missing_value");
  write_dataset(dir, generate_dataset(cfg, 5));
  std::string manifest = slurp(dir / "train.jsonl");
  const auto first_nl = manifest.find('\n');
  std::string line2 = manifest.substr(first_nl + 1, manifest.find('\n', first_nl + 1) - first_nl - 1);
  auto j = json::parse(line2);
  j.erase("value");
  manifest = manifest.substr(0, first_nl + 1) + j.dump() + "\n";
  std::ofstream(dir / "train.jsonl", std::ios::binary) << manifest;
  try {
    read_dataset(dir);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
    EXPECT_NE(std::string(e.what()).find("value"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Dataset, MalformedJsonLine) {
  auto cfg = small_config(4, 2);
  const auto dir = scratch_dir("bad_json");
  write_dataset(dir, generate_dataset(cfg, 5));
  std::ofstream(dir / "test.jsonl", std::ios::binary) << "{\"image\": \n";
  try {
    read_dataset(dir);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1);
  }
}

TEST(Config, StrictKeysAndPresenceShorthand) {
  GeneratorConfig cfg;
  merge_generator_config(json::parse(R"({"templates": 20, "presence": {"number": 0.7}})"), cfg);
  EXPECT_EQ(cfg.templates, 20);
  EXPECT_DOUBLE_EQ(cfg.fields[cfg.field_index("number")].presence, 0.7);
  try {
    merge_generator_config(json::parse(R"({"tempaltes": 20})"), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("tempaltes"), std::string::npos);
  }
  GeneratorConfig bad;
  bad.height = 60;
  EXPECT_THROW(validate(bad), Error);
  bad = GeneratorConfig{};
  bad.keys = {"vendor"};
  EXPECT_THROW(validate(bad), Error);
}
