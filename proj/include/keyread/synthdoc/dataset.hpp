#pragma once

// Template-disjoint datasets and their on-disk form: PGM images and cellmaps
// plus line-delimited JSON manifests, all relative to a dataset root.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "keyread/json_util.hpp"
#include "keyread/synthdoc/generator.hpp"

namespace keyread::synthdoc {

struct Document {
  std::string name;
  int template_id = 0;
  GrayImage image;
  std::vector<std::uint8_t> cellmap;  // empty when the dataset carries none
};

struct Record {
  int doc = 0;  // index into Dataset::docs
  std::string key;
  std::string value;
  std::optional<Box> box;
  int template_id = 0;
};

struct Dataset {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  std::vector<Document> docs;
  std::vector<Record> train;
  std::vector<Record> test;

  int height() const { return config.height; }
  int width() const { return config.width; }
  bool has_cellmaps() const {
    for (const auto& d : docs)
      if (d.cellmap.empty()) return false;
    return !docs.empty();
  }
};

inline void to_json(json& j, const FieldSpec& f) {
  j = json{{"key", f.key}, {"pattern", f.pattern}, {"labels", f.labels}, {"presence", f.presence}};
}

inline void from_json(const json& j, FieldSpec& f) {
  reject_unknown_keys(j, {"key", "pattern", "labels", "presence"}, "field spec");
  f = FieldSpec{};
  f.key = j.at("key").get<std::string>();
  f.pattern = j.at("pattern").get<std::string>();
  read_if(j, "labels", f.labels);
  read_if(j, "presence", f.presence);
  if (f.presence < 0.0 || f.presence > 1.0) throw Error("field " + f.key + ": presence must lie in [0, 1]");
}

inline void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"height", c.height},
           {"width", c.width},
           {"templates", c.templates},
           {"docs_per_template", c.docs_per_template},
           {"test_fraction", c.test_fraction},
           {"noise", c.noise},
           {"distractors_min", c.distractors_min},
           {"distractors_max", c.distractors_max},
           {"fields", c.fields},
           {"keys", c.keys}};
}

// Applies the members present in `j` on top of `c`.
inline void merge_generator_config(const json& j, GeneratorConfig& c) {
  reject_unknown_keys(j,
                      {"height", "width", "templates", "docs_per_template", "test_fraction", "noise",
                       "distractors_min", "distractors_max", "fields", "keys", "presence"},
                      "generator config");
  read_if(j, "height", c.height);
  read_if(j, "width", c.width);
  read_if(j, "templates", c.templates);
  read_if(j, "docs_per_template", c.docs_per_template);
  read_if(j, "test_fraction", c.test_fraction);
  read_if(j, "noise", c.noise);
  read_if(j, "distractors_min", c.distractors_min);
  read_if(j, "distractors_max", c.distractors_max);
  read_if(j, "fields", c.fields);
  read_if(j, "keys", c.keys);
  // Shorthand: {"presence": {"number": 0.7}} overrides per-field presence.
  if (auto it = j.find("presence"); it != j.end()) {
    for (const auto& [k, v] : it->items()) {
      const int idx = c.field_index(k);
      if (idx < 0) throw Error("generator config: presence for unknown field \"" + k + "\"");
      c.fields[idx].presence = v.get<double>();
    }
  }
}

inline void validate(const GeneratorConfig& c) {
  if (c.height <= 0 || c.width <= 0 || c.height % kCellSize != 0 || c.width % kCellSize != 0) {
    throw Error("generator config: image extents must be positive multiples of 8");
  }
  if (c.templates < 2) throw Error("generator config: need at least 2 templates for a train/test split");
  if (c.docs_per_template < 1) throw Error("generator config: docs_per_template must be positive");
  if (c.test_fraction <= 0.0 || c.test_fraction >= 1.0) throw Error("generator config: test_fraction must be in (0, 1)");
  if (c.distractors_min < 0 || c.distractors_max < c.distractors_min) throw Error("generator config: bad distractor range");
  for (const auto& f : c.fields) {
    if (f.presence < 0.0 || f.presence > 1.0) throw Error("field " + f.key + ": presence must lie in [0, 1]");
    for (char32_t ch : utf8_decode(f.pattern))
      if (ch != U'#' && ch != U'@' && ch != U'|' && !GlyphFont::builtin().has(ch))
        throw Error("field " + f.key + ": pattern character outside the font charset");
  }
  for (const auto& k : c.keys)
    if (c.field_index(k) < 0) throw Error("generator config: key \"" + k + "\" has no field spec");
}

inline std::string doc_name(int template_id, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "t%04d_d%03d", template_id, index);
  return buf;
}

// Template ids are split between train and test before any sample is drawn, so
// no layout appears in both splits. One record per (document, key).
inline Dataset generate_dataset(const GeneratorConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Dataset ds;
  ds.config = cfg;
  ds.seed = seed;
  std::vector<int> ids(static_cast<std::size_t>(cfg.templates));
  for (int i = 0; i < cfg.templates; ++i) ids[i] = i;
  Rng split_rng(derive_seed(seed, 0x5e1177, 0));
  shuffle(ids, split_rng);
  const int n_test = std::clamp(static_cast<int>(std::lround(cfg.templates * cfg.test_fraction)), 1, cfg.templates - 1);
  std::vector<bool> is_test(static_cast<std::size_t>(cfg.templates), false);
  for (int i = 0; i < n_test; ++i) is_test[ids[i]] = true;

  for (int tid = 0; tid < cfg.templates; ++tid) {
    const DocTemplate tpl = make_template(cfg, seed, tid);
    for (int d = 0; d < cfg.docs_per_template; ++d) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(tid), 0x1000 + static_cast<std::uint64_t>(d)));
      RenderedDoc rd = render_document(cfg, tpl, rng);
      const int doc_index = static_cast<int>(ds.docs.size());
      ds.docs.push_back({doc_name(tid, d), tid, std::move(rd.image), std::move(rd.cellmap)});
      for (const auto& key : cfg.keys) {
        Record r{doc_index, key, rd.values.at(key), std::nullopt, tid};
        if (auto it = rd.boxes.find(key); it != rd.boxes.end() && !r.value.empty()) r.box = it->second;
        (is_test[tid] ? ds.test : ds.train).push_back(std::move(r));
      }
    }
  }
  return ds;
}

namespace detail {

inline json record_json(const Dataset& ds, const Record& r) {
  const Document& d = ds.docs.at(r.doc);
  json j{{"image", "images/" + d.name + ".pgm"},
         {"key", r.key},
         {"value", r.value},
         {"box", nullptr},
         {"template_id", r.template_id}};
  if (r.box) j["box"] = {r.box->row0, r.box->col0, r.box->row1, r.box->col1};
  if (!d.cellmap.empty()) j["cellmap"] = "cellmaps/" + d.name + ".pgm";
  return j;
}

}  // namespace detail

inline void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "cellmaps");
  const int hc = ds.height() / kCellSize, wc = ds.width() / kCellSize;
  for (const auto& d : ds.docs) {
    write_image(root / "images" / (d.name + ".pgm"), d.image);
    if (!d.cellmap.empty()) write_pgm(root / "cellmaps" / (d.name + ".pgm"), {hc, wc, d.cellmap});
  }
  for (const auto& [name, split] : {std::pair{"train.jsonl", &ds.train}, std::pair{"test.jsonl", &ds.test}}) {
    std::ofstream out(root / name, std::ios::binary);
    if (!out) throw Error("cannot write manifest " + (root / name).string());
    for (const auto& r : *split) out << detail::record_json(ds, r).dump() << '\n';
  }
  std::ofstream meta(root / "dataset.json", std::ios::binary);
  meta << json{{"seed", ds.seed}, {"generator", ds.config}}.dump(2) << '\n';
}

inline std::vector<Record> read_manifest(const std::filesystem::path& root, const std::string& name, Dataset& ds,
                                         std::map<std::string, int>& doc_index) {
  const auto path = root / name;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("manifest not found: " + path.string());
  std::vector<Record> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(name + ": malformed JSON (" + std::string(e.what()) + ")", lineno);
    }
    for (const char* req : {"image", "key", "value", "template_id"}) {
      if (!j.is_object() || !j.contains(req)) {
        throw ParseError(name + ": record is missing \"" + std::string(req) + "\"", lineno);
      }
    }
    Record r;
    try {
      r.key = j.at("key").get<std::string>();
      r.value = j.at("value").get<std::string>();
      r.template_id = j.at("template_id").get<int>();
      if (j.contains("box") && !j["box"].is_null()) {
        const auto b = j["box"].get<std::vector<int>>();
        if (b.size() != 4) throw ParseError(name + ": box needs 4 coordinates", lineno);
        r.box = Box{b[0], b[1], b[2], b[3]};
      }
    } catch (const json::exception& e) {
      throw ParseError(name + ": bad field type (" + std::string(e.what()) + ")", lineno);
    }
    const std::string image = j.at("image").get<std::string>();
    auto [it, fresh] = doc_index.try_emplace(image, static_cast<int>(ds.docs.size()));
    if (fresh) {
      Document d;
      d.name = std::filesystem::path(image).stem().string();
      d.template_id = r.template_id;
      d.image = read_image(root / image);
      if (j.contains("cellmap")) d.cellmap = read_pgm(root / j["cellmap"].get<std::string>()).bytes;
      ds.docs.push_back(std::move(d));
    }
    r.doc = it->second;
    out.push_back(std::move(r));
  }
  return out;
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw Error("dataset root not found: " + root.string());
  Dataset ds;
  if (std::ifstream meta(root / "dataset.json"); meta) {
    json j;
    try {
      j = json::parse(meta);
    } catch (const json::parse_error& e) {
      throw ParseError("dataset.json: " + std::string(e.what()), 0);
    }
    read_if(j, "seed", ds.seed);
    if (j.contains("generator")) merge_generator_config(j["generator"], ds.config);
  }
  std::map<std::string, int> index;
  ds.train = read_manifest(root, "train.jsonl", ds, index);
  ds.test = read_manifest(root, "test.jsonl", ds, index);
  if (!ds.docs.empty()) {
    ds.config.height = ds.docs.front().image.height;
    ds.config.width = ds.docs.front().image.width;
    for (const auto& d : ds.docs)
      if (d.image.height != ds.config.height || d.image.width != ds.config.width)
        throw Error("dataset images have inconsistent extents (" + d.name + ")");
  }
  return ds;
}

}  // namespace keyread::synthdoc
