#pragma once

// Encoder pretraining on cellmaps, phase 1 (frozen encoder, cached memories),
// phase 2 (everything trainable) and exact-match evaluation.

#include <algorithm>
#include <chrono>
#include <functional>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "keyread/log.hpp"
#include "keyread/model/network.hpp"
#include "keyread/synthdoc/dataset.hpp"
#include "keyread/train/checkpoint.hpp"
#include "keyread/train/config.hpp"
#include "keyread/train/metrics.hpp"

namespace keyread::train {

using Net = model::Model<float>;

struct Example {
  int doc = 0;
  int key_id = 0;
  std::string key;
  std::string value;
  std::optional<synthdoc::Box> box;
  int template_id = 0;
};

struct Splits {
  std::vector<Example> train, val, test;
};

// Keeps records for the model's keys; a seeded share of the training
// templates becomes the validation split, so all three are template-disjoint.
inline std::vector<Example> to_examples(const std::vector<synthdoc::Record>& recs, const model::ModelConfig& mc) {
  std::vector<Example> out;
  for (const auto& r : recs) {
    auto it = std::find(mc.keys.begin(), mc.keys.end(), r.key);
    if (it == mc.keys.end()) continue;
    out.push_back({r.doc, static_cast<int>(it - mc.keys.begin()), r.key, r.value, r.box, r.template_id});
  }
  return out;
}

inline Splits make_splits(const synthdoc::Dataset& ds, const model::ModelConfig& mc, const TrainConfig& tc) {
  Splits s;
  auto train = to_examples(ds.train, mc);
  s.test = to_examples(ds.test, mc);
  for (const auto& k : mc.keys) {
    const bool any = std::any_of(train.begin(), train.end(), [&](const Example& e) { return e.key == k; });
    if (!any) throw Error("dataset has no training records for key \"" + k + "\"");
  }
  std::set<int> tids;
  for (const auto& e : train) tids.insert(e.template_id);
  std::vector<int> ids(tids.begin(), tids.end());
  if (ids.size() < 2) throw Error("need at least 2 training templates to carve a validation split");
  Rng rng(derive_seed(tc.seed, 0x7a1));
  shuffle(ids, rng);
  const int n_val = std::clamp(static_cast<int>(std::lround(ids.size() * tc.val_fraction)), 1,
                               static_cast<int>(ids.size()) - 1);
  const std::set<int> val(ids.begin(), ids.begin() + n_val);
  for (auto& e : train) (val.count(e.template_id) ? s.val : s.train).push_back(std::move(e));
  return s;
}

struct Prediction {
  std::size_t index = 0;  // position in the evaluated example list
  std::string key, truth, predicted;
  bool hit = false;
  std::vector<std::vector<float>> attention;
};

struct EvalResult {
  ScoreTable table;
  std::vector<Prediction> predictions;
  double exact_match() const { return table.overall.exact_match(); }
};

struct EvalPoint {
  long step = 0;
  double loss = 0.0;
  double exact_match = 0.0;
};

struct PhaseResult {
  std::string phase;
  std::vector<EvalPoint> curve;
  double best = -1.0;
  long best_step = 0;
  long steps = 0;
  bool early_stopped = false;
  double seconds = 0.0;
};

struct PretrainResult {
  std::vector<double> interval_loss;  // mean training loss per evaluation interval
  double cell_accuracy = 0.0;         // all cells, held-out documents
  double glyph_accuracy = 0.0;        // non-background cells only
  long steps = 0;
  double seconds = 0.0;
};

inline Var<float> doc_images(const synthdoc::Dataset& ds, const std::vector<int>& docs, const model::ModelConfig& mc) {
  std::vector<const synthdoc::GrayImage*> imgs;
  for (int d : docs) imgs.push_back(&ds.docs[static_cast<std::size_t>(d)].image);
  return model::image_batch<float>(imgs, mc.height, mc.width);
}

using MemoryFn = std::function<Var<float>(const std::vector<int>& docs)>;

// Batched greedy decoding and exact-match scoring; `memory` overrides the
// eval-mode encoder when given.
inline EvalResult evaluate_examples(const Net& model, const synthdoc::Dataset& ds, const std::vector<Example>& examples,
                                    int eval_batch, const MemoryFn& memory = {}) {
  EvalResult res;
  std::vector<Scored> rows;
  const auto step = static_cast<std::size_t>(eval_batch);
  for (std::size_t s = 0; s < examples.size(); s += step) {
    const std::size_t end = std::min(examples.size(), s + step);
    std::vector<int> docs, keys;
    for (std::size_t i = s; i < end; ++i) {
      docs.push_back(examples[i].doc);
      keys.push_back(examples[i].key_id);
    }
    Var<float> mem;
    if (memory) {
      mem = memory(docs);
    } else {
      Tape<float> off(false);
      mem = model.encode_eval(off, doc_images(ds, docs, model.config()));
    }
    auto out = model.greedy_decode(mem, keys);
    for (std::size_t i = s; i < end; ++i) {
      auto& o = out[i - s];
      Prediction p;
      p.index = i;
      p.key = examples[i].key;
      p.truth = examples[i].value;
      p.predicted = o.value;
      p.hit = exact_match(p.predicted, p.truth);
      p.attention = std::move(o.attention);
      rows.push_back({p.key, p.predicted, p.truth});
      res.predictions.push_back(std::move(p));
    }
  }
  res.table = score(rows);
  return res;
}

inline void to_json(json& j, const PhaseResult& r) {
  json curve = json::array();
  for (const auto& p : r.curve) curve.push_back({p.step, p.loss, p.exact_match});
  j = json{{"best", r.best}, {"best_step", r.best_step}, {"steps", r.steps}, {"early_stopped", r.early_stopped},
           {"curve", curve}};
}

class Trainer {
 public:
  Trainer(Net& model, const synthdoc::Dataset& ds, TrainConfig cfg)
      : model_(model), ds_(ds), cfg_(std::move(cfg)), data_rng_(derive_seed(cfg_.seed, 0xda7a)),
        drop_rng_(derive_seed(cfg_.seed, 0xd409)) {
    validate(cfg_);
    splits_ = make_splits(ds_, model_.config(), cfg_);
    if (ds_.height() != model_.config().height || ds_.width() != model_.config().width)
      throw Error("dataset images are " + std::to_string(ds_.height()) + "x" + std::to_string(ds_.width()) +
                  " but the model expects " + std::to_string(model_.config().height) + "x" +
                  std::to_string(model_.config().width));
  }

  const Splits& splits() const { return splits_; }
  const TrainConfig& config() const { return cfg_; }
  long step() const { return step_; }
  const std::string& phase() const { return phase_; }
  AdamState<float>& adam() { return adam_; }
  json& history() { return history_; }

  // ----- data -----

  Var<float> images(const std::vector<int>& docs) const { return doc_images(ds_, docs, model_.config()); }

  Var<float> cached_memory(const std::vector<int>& docs) const {
    const auto& mc = model_.config();
    const std::size_t per = static_cast<std::size_t>(mc.cells()) * mc.mem_depth();
    Tensor<float> t({static_cast<int>(docs.size()), mc.mem_height(), mc.mem_width(), mc.mem_depth()});
    for (std::size_t i = 0; i < docs.size(); ++i) {
      auto it = cache_.find(docs[i]);
      require(it != cache_.end(), "memory cache miss");
      std::copy(it->second.begin(), it->second.end(), t.data() + i * per);
    }
    return Var<float>(std::move(t));
  }

  // Encoder outputs in eval mode for every document the decoder phases touch.
  void build_cache() {
    std::set<int> docs;
    for (const auto* split : {&splits_.train, &splits_.val})
      for (const auto& e : *split) docs.insert(e.doc);
    cache_.clear();
    const std::vector<int> all(docs.begin(), docs.end());
    const auto& mc = model_.config();
    const std::size_t per = static_cast<std::size_t>(mc.cells()) * mc.mem_depth();
    for (std::size_t s = 0; s < all.size(); s += static_cast<std::size_t>(cfg_.eval_batch)) {
      std::vector<int> chunk(all.begin() + static_cast<std::ptrdiff_t>(s),
                             all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), s + cfg_.eval_batch)));
      Tape<float> off(false);
      auto mem = model_.encode(off, images(chunk), model::Mode::Eval);
      for (std::size_t i = 0; i < chunk.size(); ++i)
        cache_[chunk[i]].assign(mem.value().data() + i * per, mem.value().data() + (i + 1) * per);
    }
  }

  // ----- evaluation -----

  EvalResult evaluate(const std::vector<Example>& examples, bool use_cache = false) const {
    MemoryFn cached;
    if (use_cache) cached = [this](const std::vector<int>& docs) { return cached_memory(docs); };
    return evaluate_examples(model_, ds_, examples, cfg_.eval_batch, cached);
  }

  // Cell classification accuracy of the aux head on the given documents.
  std::pair<double, double> cell_accuracy(const std::vector<int>& docs) const {
    long all = 0, hit = 0, glyph = 0, glyph_hit = 0;
    const int cells = model_.config().cells();
    for (std::size_t s = 0; s < docs.size(); s += static_cast<std::size_t>(cfg_.eval_batch)) {
      std::vector<int> chunk(docs.begin() + static_cast<std::ptrdiff_t>(s),
                             docs.begin() + static_cast<std::ptrdiff_t>(std::min(docs.size(), s + cfg_.eval_batch)));
      Tape<float> off(false);
      auto logits = model_.aux_logits(off, model_.encode(off, images(chunk), model::Mode::Eval));
      for (std::size_t i = 0; i < chunk.size(); ++i)
        for (int c = 0; c < cells; ++c) {
          const float* z = logits.value().data() + (i * cells + c) * model::kAuxClasses;
          const int arg = static_cast<int>(std::max_element(z, z + model::kAuxClasses) - z);
          const int truth = ds_.docs[chunk[i]].cellmap[c];
          ++all;
          hit += arg == truth;
          if (truth != 0) {
            ++glyph;
            glyph_hit += arg == truth;
          }
        }
    }
    return {all ? static_cast<double>(hit) / all : 0.0, glyph ? static_cast<double>(glyph_hit) / glyph : 0.0};
  }

  // ----- single optimizer steps -----

  double step_pretrain() {
    const auto docs = sample_docs();
    const auto& mc = model_.config();
    std::vector<int> cells;
    cells.reserve(docs.size() * mc.cells());
    for (int d : docs) cells.insert(cells.end(), ds_.docs[d].cellmap.begin(), ds_.docs[d].cellmap.end());
    Tape<float> tape;
    auto mem = model_.encode(tape, images(docs), model::Mode::Train, &drop_rng_);
    auto loss = model_.aux_loss(tape, mem, cells);
    const double value = loss.value()[0];
    guard(value, 0.0);
    auto params = model_.encoder_params();
    for (const auto& p : model_.aux_params()) params.push_back(p);
    zero(params);
    tape.backward(loss);
    adam_update(params, adam_);
    ++step_;
    return value;
  }

  double step_phase1() {
    if (cache_.empty()) build_cache();
    const auto batch = sample_examples();
    Tape<float> tape;
    auto res = model_.sequence_loss(tape, cached_memory(batch.docs), batch.keys, batch.values);
    return finish_step(tape, res, model_.decoder_params());
  }

  double step_phase2() {
    const auto batch = sample_examples();
    Tape<float> tape;
    auto mem = model_.encode(tape, images(batch.docs), model::Mode::Train, &drop_rng_);
    auto res = model_.sequence_loss(tape, mem, batch.keys, batch.values);
    auto params = model_.encoder_params();
    for (const auto& p : model_.decoder_params()) params.push_back(p);
    return finish_step(tape, res, params);
  }

  // ----- phases -----

  PretrainResult pretrain() {
    for (const auto& d : ds_.docs)
      if (d.cellmap.empty()) throw Error("dataset has no cellmaps; encoder pretraining needs them");
    begin_phase("pretrain", cfg_.pretrain_lr, true);
    PretrainResult r;
    const auto t0 = std::chrono::steady_clock::now();
    const auto held_out = docs_of(splits_.val);
    double acc = 0;
    long n = 0;
    for (int s = 1; s <= cfg_.pretrain_steps; ++s) {
      acc += step_pretrain();
      ++n;
      if (s % cfg_.pretrain_eval_interval == 0 || s == cfg_.pretrain_steps) {
        r.interval_loss.push_back(acc / n);
        log().info("pretrain step {} loss {:.4f}", s, acc / n);
        acc = 0;
        n = 0;
      }
    }
    std::tie(r.cell_accuracy, r.glyph_accuracy) = cell_accuracy(held_out);
    r.steps = cfg_.pretrain_steps;
    r.seconds = elapsed(t0);
    log().info("pretrain done: held-out cell accuracy {:.4f} (glyph cells {:.4f}) in {:.0f}s", r.cell_accuracy,
               r.glyph_accuracy, r.seconds);
    history_["pretrain"] = {{"cell_accuracy", r.cell_accuracy},
                            {"glyph_accuracy", r.glyph_accuracy},
                            {"interval_loss", r.interval_loss}};
    return r;
  }

  PhaseResult phase1() {
    begin_phase("phase1", cfg_.lr, phase_ == "init" || phase_ == "pretrain");
    build_cache();
    auto r = run_phase(cfg_.phase1_steps, cfg_.patience, true);
    history_["phase1"] = r;
    return r;
  }

  PhaseResult phase2() {
    // Fresh moments for every parameter: decoder moments carried over from phase 1 stall
    // learning of glyphs the pretrained encoder never labelled. Continuing phase 2 keeps them.
    begin_phase("phase2", cfg_.lr, phase_ != "phase2");
    cache_.clear();
    auto r = run_phase(cfg_.phase2_steps, cfg_.phase2_patience, false);
    history_["phase2"] = r;
    return r;
  }

  // ----- checkpoints -----

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.model = model_.config();
    ck.vocab = model_.vocab().chars();
    ck.phase = phase_;
    ck.step = step_;
    ck.rng = {{"data", rng_state(data_rng_)}, {"dropout", rng_state(drop_rng_)}};
    json tc;
    to_json(tc, cfg_);
    ck.extra = {{"train", tc}, {"history", history_}};
    ck.tensors = model_.state();
    ck.adam_config = adam_.config;
    ck.adam = adam_.slots;
    return ck;
  }

  // Restores optimizer, RNG and phase bookkeeping (model weights are loaded
  // separately, see model_from_checkpoint).
  void resume(const Checkpoint& ck) {
    phase_ = ck.phase;
    step_ = ck.step;
    adam_.config = ck.adam_config;
    adam_.slots = ck.adam;
    if (ck.rng.contains("data")) set_rng_state(data_rng_, ck.rng["data"].get<std::string>());
    if (ck.rng.contains("dropout")) set_rng_state(drop_rng_, ck.rng["dropout"].get<std::string>());
    if (ck.extra.contains("history")) history_ = ck.extra["history"];
  }

 private:
  struct Batch {
    std::vector<int> docs, keys;
    std::vector<std::string> values;
  };

  static double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  static std::vector<int> docs_of(const std::vector<Example>& ex) {
    std::set<int> s;
    for (const auto& e : ex) s.insert(e.doc);
    return {s.begin(), s.end()};
  }

  std::vector<int> sample_docs() {
    if (train_docs_.empty()) train_docs_ = docs_of(splits_.train);
    std::vector<int> out;
    for (int i = 0; i < cfg_.batch; ++i)
      out.push_back(train_docs_[static_cast<std::size_t>(uniform_int(data_rng_, 0, static_cast<int>(train_docs_.size()) - 1))]);
    return out;
  }

  Batch sample_examples() {
    Batch b;
    const int n = static_cast<int>(splits_.train.size());
    for (int i = 0; i < cfg_.batch; ++i) {
      const auto& e = splits_.train[static_cast<std::size_t>(uniform_int(data_rng_, 0, n - 1))];
      b.docs.push_back(e.doc);
      b.keys.push_back(e.key_id);
      b.values.push_back(e.value);
    }
    return b;
  }

  static void zero(const std::vector<NamedParam<float>>& params) {
    for (const auto& p : params) p.var.zero_grad();
  }

  void begin_phase(const std::string& name, double lr, bool fresh) {
    if (fresh) adam_.slots.clear();
    adam_.config.lr = lr;
    phase_ = name;
    initial_loss_.reset();
  }

  void guard(double loss, double entropy) {
    if (!std::isfinite(loss))
      throw Error("non-finite loss at step " + std::to_string(step_ + 1) + " (" + phase_ + ")");
    if (!initial_loss_) {
      initial_loss_ = loss;
      return;
    }
    if (loss > 10.0 * *initial_loss_) {
      const double bound = std::log(static_cast<double>(model_.config().cells()));
      throw Error("loss diverged at step " + std::to_string(step_ + 1) + " (" + phase_ + "): " + std::to_string(loss) +
                  " > 10x initial " + std::to_string(*initial_loss_) + "; mean attention entropy " +
                  std::to_string(entropy) + " nats vs uniform bound " + std::to_string(bound) +
                  (entropy > 0.9 * bound ? " (attention is near uniform: likely bypassed)" : ""));
    }
  }

  double finish_step(Tape<float>& tape, const model::SequenceLoss<float>& res,
                     const std::vector<NamedParam<float>>& params) {
    const double value = res.loss.value()[0];
    guard(value, res.attention_entropy);
    zero(params);
    tape.backward(res.loss);
    adam_update(params, adam_);
    ++step_;
    last_char_acc_ = res.counted ? static_cast<double>(res.correct) / res.counted : 0.0;
    return value;
  }

  PhaseResult run_phase(int budget, int patience, bool cached) {
    PhaseResult r;
    r.phase = phase_;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, Tensor<float>>> best_state;
    double acc = 0;
    long n = 0, since_best = 0;
    for (int s = 1; s <= budget; ++s) {
      acc += cached ? step_phase1() : step_phase2();
      ++n;
      if (s % cfg_.log_interval == 0) log().debug("{} step {} loss {:.4f}", phase_, s, acc / n);
      if (s % cfg_.eval_interval != 0 && s != budget) continue;
      const double em = evaluate(splits_.val, cached).exact_match();
      r.curve.push_back({s, acc / n, em});
      log().info("{} step {} loss {:.4f} val exact match {:.4f} ({:.0f}s)", phase_, s, acc / n, em, elapsed(t0));
      acc = 0;
      n = 0;
      if (em > r.best) {
        r.best = em;
        r.best_step = s;
        since_best = 0;
        if (!cached) best_state = model_.state();
      } else if (patience > 0 && ++since_best >= patience) {
        r.early_stopped = true;
        r.steps = s;
        break;
      }
      r.steps = s;
    }
    if (!best_state.empty()) model_.load_state(best_state);
    r.seconds = elapsed(t0);
    log().info("{} finished after {} steps: best val exact match {:.4f} at step {}{}", phase_, r.steps, r.best,
               r.best_step, r.early_stopped ? " (patience)" : "");
    return r;
  }

  Net& model_;
  const synthdoc::Dataset& ds_;
  TrainConfig cfg_;
  Splits splits_;
  AdamState<float> adam_;
  Rng data_rng_, drop_rng_;
  long step_ = 0;
  std::string phase_ = "init";
  std::optional<double> initial_loss_;
  double last_char_acc_ = 0.0;
  std::map<int, std::vector<float>> cache_;
  std::vector<int> train_docs_;
  json history_ = json::object();

 public:
  double last_char_accuracy() const { return last_char_acc_; }
};

// Builds the model a checkpoint describes and loads its weights.
inline Net model_from_checkpoint(const Checkpoint& ck) {
  Net m(ck.model, 0);
  if (ck.vocab != m.vocab().chars()) throw Error("checkpoint vocabulary differs from the built-in character set");
  m.load_state(ck.tensors);
  return m;
}

// Loads only the tensors whose names start with one of `prefixes`.
inline void load_partial(Net& m, const Checkpoint& ck, const std::vector<std::string>& prefixes) {
  auto state = m.state();
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& [n, t] : ck.tensors) stored[n] = &t;
  for (auto& [name, t] : state) {
    bool wanted = false;
    for (const auto& p : prefixes) wanted = wanted || name.rfind(p, 0) == 0;
    if (!wanted) continue;
    auto it = stored.find(name);
    if (it == stored.end()) throw Error("checkpoint is missing tensor " + name);
    if (it->second->shape() != t.shape())
      throw Error("shape mismatch for " + name + ": checkpoint " + shape_str(it->second->shape()) + ", model " +
                  shape_str(t.shape()));
    t = *it->second;
  }
  m.load_state(state);
}

}  // namespace keyread::train
