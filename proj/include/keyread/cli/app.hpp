#pragma once

// Subcommand dispatch for the keyread executable. Exit status: 0 success,
// 1 contract or validation error, 2 usage error.

#include <zlib.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "keyread/cli/heatmap.hpp"
#include "keyread/gradcheck_suite.hpp"
#include "keyread/log.hpp"
#include "keyread/train/trainer.hpp"

namespace keyread::cli {

namespace fs = std::filesystem;

inline json read_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Error("config file not found: " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

// `section.field=value`; the value is read as JSON when it parses, otherwise
// as a bare string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("--set expects section.field=value, got \"" + assignment + "\"");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) throw Error("--set " + path + ": \"" + parts[i] + "\" is not a section");
  }
  (*node)[parts.back()] = value;
}

inline train::RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = read_config_file(path);
  if (!j.is_object()) throw Error("config: top level must be a JSON object");
  for (const auto& o : overrides) apply_override(j, o);
  train::RunConfig rc;
  train::merge_run_config(j, rc);
  return rc;
}

inline std::string config_hash(const json& j) {
  const std::string s = j.dump();
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x",
                static_cast<unsigned>(::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()))));
  return buf;
}

inline void repro_line(const std::string& cmd, std::uint64_t seed, const json& effective) {
  log().info("repro: {} seed={} config_hash={}", cmd, seed, config_hash(effective));
}

inline std::uint64_t trained_seed(const train::Checkpoint& ck) {
  if (ck.extra.contains("train")) return ck.extra["train"].value("seed", std::uint64_t{0});
  return 0;
}

inline json effective_json(const train::RunConfig& rc) {
  json j;
  train::to_json(j, rc);
  return j;
}

// ----- subcommands -----

inline int cmd_gen_data(const std::string& config, const std::vector<std::string>& sets, std::uint64_t seed,
                        const std::string& out, std::ostream& os) {
  const auto rc = load_run_config(config, sets);
  repro_line("gen-data", seed, effective_json(rc));
  synthdoc::validate(rc.generator);
  const auto ds = synthdoc::generate_dataset(rc.generator, seed);
  synthdoc::write_dataset(out, ds);
  os << "wrote " << ds.docs.size() << " documents, " << ds.train.size() << " train / " << ds.test.size()
     << " test records to " << out << "\n";
  return 0;
}

inline void check_extents(const synthdoc::Dataset& ds, const model::ModelConfig& mc) {
  if (ds.docs.empty()) throw Error("dataset is empty");
  if (ds.height() != mc.height || ds.width() != mc.width)
    throw Error("dataset images are " + std::to_string(ds.height()) + "x" + std::to_string(ds.width()) +
                " but the model expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width));
}

inline int cmd_pretrain(const std::string& data, const std::string& config, const std::vector<std::string>& sets,
                        std::optional<std::uint64_t> seed, const std::string& out_ckpt, std::ostream& os) {
  auto rc = load_run_config(config, sets);
  if (seed) rc.train.seed = *seed;
  repro_line("pretrain", rc.train.seed, effective_json(rc));
  const auto ds = synthdoc::read_dataset(data);
  check_extents(ds, rc.model);
  train::Net m(rc.model, rc.train.seed);
  train::Trainer tr(m, ds, rc.train);
  const auto r = tr.pretrain();
  train::save_checkpoint(out_ckpt, tr.checkpoint());
  os << json{{"cell_accuracy", r.cell_accuracy}, {"glyph_accuracy", r.glyph_accuracy}, {"steps", r.steps}}.dump()
     << "\n";
  return 0;
}

inline int cmd_train(const std::string& data, const std::string& config, const std::vector<std::string>& sets,
                     std::optional<std::uint64_t> seed, const std::string& init_ckpt, const std::string& out_ckpt,
                     const std::string& phase, std::ostream& os) {
  auto rc = load_run_config(config, sets);
  if (seed) rc.train.seed = *seed;
  repro_line("train", rc.train.seed, effective_json(rc));
  const auto ds = synthdoc::read_dataset(data);

  std::optional<train::Checkpoint> init;
  if (!init_ckpt.empty()) init = train::load_checkpoint(init_ckpt);
  const bool full_resume = init && init->phase != "pretrain" && init->phase != "init";
  if (full_resume && !(init->model == rc.model))
    throw Error("model config differs from the one stored in " + init_ckpt);
  train::Net m = full_resume ? train::model_from_checkpoint(*init) : train::Net(rc.model, rc.train.seed);
  check_extents(ds, m.config());
  if (init && !full_resume) {
    train::load_partial(m, *init, {"encoder."});
  } else if (!init) {
    log().warn("no --init-ckpt: phase 1 will train on top of a randomly initialised encoder");
  }
  train::Trainer tr(m, ds, rc.train);
  if (full_resume) tr.resume(*init);

  json summary = json::object();
  if (phase == "1" || phase == "both") summary["phase1"] = tr.phase1();
  if (phase == "2" || phase == "both") summary["phase2"] = tr.phase2();
  train::save_checkpoint(out_ckpt, tr.checkpoint());
  os << summary.dump() << "\n";
  return 0;
}

inline int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& split,
                    const std::string& report, const std::string& predictions, std::ostream& os) {
  const auto ck = train::load_checkpoint(ckpt);
  json eff;
  model::to_json(eff, ck.model);
  repro_line("eval", trained_seed(ck), json{{"model", eff}, {"split", split}});
  const auto ds = synthdoc::read_dataset(data);
  const train::Net m = train::model_from_checkpoint(ck);
  check_extents(ds, m.config());
  const auto examples = train::to_examples(split == "train" ? ds.train : ds.test, m.config());
  if (examples.empty()) throw Error("no " + split + " records for the model's keys");
  int eval_batch = 32;
  if (ck.extra.contains("train")) eval_batch = ck.extra["train"].value("eval_batch", 32);
  const auto res = train::evaluate_examples(m, ds, examples, eval_batch);

  std::ostringstream lines;
  for (const auto& [key, s] : res.table.per_key)
    lines << json{{"key", key}, {"n", s.n}, {"exact_match", s.exact_match()}}.dump() << "\n";
  lines << json{{"key", "*"}, {"n", res.table.overall.n}, {"exact_match", res.table.overall.exact_match()}}.dump()
        << "\n";
  if (report.empty()) {
    os << lines.str();
  } else {
    std::ofstream out(report, std::ios::binary);
    if (!out) throw Error("cannot write report " + report);
    out << lines.str();
    os << "overall exact match " << res.exact_match() << " on " << res.table.overall.n << " records\n";
  }
  if (!predictions.empty()) {
    std::ofstream out(predictions, std::ios::binary);
    if (!out) throw Error("cannot write predictions " + predictions);
    for (const auto& p : res.predictions)
      out << json{{"image", ds.docs[static_cast<std::size_t>(examples[p.index].doc)].name},
                  {"key", p.key},
                  {"truth", p.truth},
                  {"predicted", p.predicted},
                  {"hit", p.hit}}
                 .dump()
          << "\n";
  }
  return 0;
}

inline int cmd_extract(std::vector<std::string> images, const std::string& batch_file, const std::string& key,
                       const std::string& ckpt, const std::string& heatmap, std::ostream& os) {
  if (!batch_file.empty()) {
    std::ifstream in(batch_file);
    if (!in) throw Error("batch file not found: " + batch_file);
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) images.push_back(line);
  }
  if (images.empty()) throw Error("extract needs --image or --batch");
  if (!heatmap.empty() && images.size() != 1) throw Error("--heatmap needs exactly one image");
  const auto ck = train::load_checkpoint(ckpt);
  json eff;
  model::to_json(eff, ck.model);
  repro_line("extract", trained_seed(ck), json{{"model", eff}, {"key", key}});
  const train::Net m = train::model_from_checkpoint(ck);
  const auto& mc = m.config();
  const int key_id = mc.key_id(key);
  for (const auto& path : images) {
    const auto img = synthdoc::read_image(path);
    if (img.height != mc.height || img.width != mc.width)
      throw Error("image " + path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                  " but the checkpoint expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width) +
                  " (height x width)");
    const synthdoc::GrayImage* one[] = {&img};
    Tape<float> off(false);
    auto mem = m.encode_eval(off, model::image_batch<float>(one, mc.height, mc.width));
    const int keys[] = {key_id};
    const auto out = m.greedy_decode(mem, keys);
    os << out[0].value << "\n";
    if (!heatmap.empty())
      synthdoc::write_pgm(heatmap,
                          export_attention_map(out[0].attention, mc.mem_height(), mc.mem_width(), mc.height, mc.width));
  }
  return 0;
}

inline int cmd_gradcheck(const std::string& op, bool full_model, std::uint64_t seed, int samples, std::ostream& os) {
  repro_line("gradcheck", seed, json{{"op", op}, {"full_model", full_model}, {"samples", samples}});
  bool ok = true;
  auto report = [&](const std::string& name, const GradCheckResult& r, double tol) {
    const bool pass = r.max_rel_error <= tol;
    ok = ok && pass;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-14s max_rel_error=%.3e checked=%d tol=%.0e %s\n", name.c_str(),
                  r.max_rel_error, r.checked, tol, pass ? "PASS" : "FAIL");
    os << buf;
  };
  const bool all = op.empty() && !full_model;
  for (const auto& [name, check] : gradcheck::ops_registry())
    if (all || name == op) report(name, check(seed), 1e-4);
  if (all || full_model) report("full-model", gradcheck::full_model(seed, samples), 1e-3);
  return ok ? 0 : 1;
}

// ----- dispatch -----

inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"Key-conditioned field extraction from document images", "keyread"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config, data, out, out_ckpt, init_ckpt, ckpt, report, predictions, key, heatmap, batch_file, op;
  std::string phase = "both", split = "test";
  std::vector<std::string> sets, images;
  std::uint64_t seed = 0;
  int samples = 200;
  bool full_model = false;

  auto add_config = [&](CLI::App* sc) {
    sc->add_option("--config", config, "JSON config file (generator, model, train sections)");
    sc->add_option("--set", sets, "Override one field, e.g. --set train.lr=1e-3");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_config(gen);
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Pretrain the encoder on cell labels");
  add_config(pre);
  pre->add_option("--data", data, "Dataset root")->required();
  auto* pre_seed = pre->add_option("--seed", seed, "Training seed (overrides train.seed)");
  pre->add_option("--out-ckpt", out_ckpt, "Output checkpoint")->required();

  auto* trn = app.add_subcommand("train", "Two-phase training");
  add_config(trn);
  trn->add_option("--data", data, "Dataset root")->required();
  auto* trn_seed = trn->add_option("--seed", seed, "Training seed (overrides train.seed)");
  trn->add_option("--init-ckpt", init_ckpt, "Pretrained encoder or earlier training checkpoint");
  trn->add_option("--out-ckpt", out_ckpt, "Output checkpoint")->required();
  trn->add_option("--phase", phase, "Which phases to run")->check(CLI::IsMember({"1", "2", "both"}));

  auto* ev = app.add_subcommand("eval", "Exact-match evaluation");
  ev->add_option("--data", data, "Dataset root")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--report", report, "JSONL report path (stdout when omitted)");
  ev->add_option("--predictions", predictions, "Per-record JSONL predictions");

  auto* ex = app.add_subcommand("extract", "Read one field from document images");
  ex->add_option("--image", images, "PGM image (repeatable)");
  ex->add_option("--batch", batch_file, "File listing one image path per line");
  ex->add_option("--key", key, "Field key")->required();
  ex->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ex->add_option("--heatmap", heatmap, "Write the summed attention map as PGM");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::vector<std::string> op_names;
  for (const auto& [name, _] : gradcheck::ops_registry()) op_names.push_back(name);
  auto* op_opt = gc->add_option("--op", op, "Check a single op")->check(CLI::IsMember(op_names));
  gc->add_flag("--full-model", full_model, "Check the full model loss")->excludes(op_opt);
  gc->add_option("--seed", seed, "Seed");
  gc->add_option("--samples", samples, "Coordinates sampled for --full-model")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, os, es);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, os, es);
  } catch (const CLI::ParseError& e) {
    es << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(config, sets, seed, out, os);
    if (*pre)
      return cmd_pretrain(data, config, sets, pre_seed->count() ? std::optional(seed) : std::nullopt, out_ckpt, os);
    if (*trn)
      return cmd_train(data, config, sets, trn_seed->count() ? std::optional(seed) : std::nullopt, init_ckpt, out_ckpt,
                       phase, os);
    if (*ev) return cmd_eval(data, ckpt, split, report, predictions, os);
    if (*ex) return cmd_extract(images, batch_file, key, ckpt, heatmap, os);
    if (*gc) return cmd_gradcheck(op, full_model, seed, samples, os);
  } catch (const ContractViolation& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace keyread::cli
