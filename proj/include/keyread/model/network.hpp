#pragma once

// Encoder, spatially augmented memory, recursive attention and LSTM decoder.
// Everything runs batched: images [B,H,W,1], memory [B,H/8,W/8,8C].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "keyread/model/config.hpp"
#include "keyread/model/vocab.hpp"
#include "keyread/numcore/adam.hpp"
#include "keyread/numcore/ops.hpp"
#include "keyread/numcore/random.hpp"

namespace keyread::model {

constexpr int kAuxClasses = 44;  // generator charset + background

enum class Mode { Train, Eval };

template <typename T>
struct ConvUnit {
  int in = 0, out = 0, stride = 1, dilation = 1;
  Var<T> kernel, gamma, beta;
  Tensor<T> running_mean, running_var;
};

template <typename T>
struct DecoderInputs {
  int batch = 0;
  Var<T> memory;     // augmented, [B, P, E]
  Var<T> projected;  // W_m·m, [B, P, D_a]
  Var<T> keys;       // [B, D_k]
};

template <typename T>
struct DecoderState {
  Var<T> h, c;            // [B, D_h]
  Var<T> attention;       // previous weights, [B, P]
  std::vector<int> prev;  // previous output token per row
};

template <typename T>
struct StepOutput {
  Var<T> logits;   // [B, V]
  Var<T> weights;  // [B, P]
  DecoderState<T> state;
};

template <typename T>
struct SequenceLoss {
  Var<T> loss;  // mean over the batch of per-sequence summed cross-entropy
  long correct = 0;
  long counted = 0;  // value characters and EOS; warm-up targets excluded
  double attention_entropy = 0.0;  // mean over steps and rows, in nats
};

template <typename T>
struct Extraction {
  std::string value;
  std::vector<int> tokens;                 // every emitted token, warm-up included
  std::vector<std::vector<T>> attention;   // one H'·W' grid per step
};

// Token layout for teacher forcing, step-major: entry [t * B + b].
struct SequenceBatch {
  int steps = 0;
  int batch = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    validate(cfg_);
    build();
    initialize(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const CharVocab& vocab() const { return vocab_; }
  int vocab_size() const { return vocab_.size(); }

  std::vector<NamedParam<T>> params() const { return params_; }
  std::vector<NamedParam<T>> encoder_params() const { return with_prefix("encoder."); }
  std::vector<NamedParam<T>> decoder_params() const {
    std::vector<NamedParam<T>> out;
    for (const auto& p : params_)
      if (p.name.rfind("encoder.", 0) != 0 && p.name.rfind("aux.", 0) != 0) out.push_back(p);
    return out;
  }
  std::vector<NamedParam<T>> aux_params() const { return with_prefix("aux."); }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.emplace_back(conv_name(i) + ".running_mean", &convs_[i].running_mean);
      out.emplace_back(conv_name(i) + ".running_var", &convs_[i].running_var);
    }
    return out;
  }

  // Parameters then buffers, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& p : params_) out.emplace_back(p.name, p.var.value());
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.emplace_back(conv_name(i) + ".running_mean", convs_[i].running_mean);
      out.emplace_back(conv_name(i) + ".running_var", convs_[i].running_var);
    }
    return out;
  }

  template <typename U>
  void load_state(const std::vector<std::pair<std::string, Tensor<U>>>& tensors) {
    std::map<std::string, const Tensor<U>*> by_name;
    for (const auto& [n, t] : tensors) by_name[n] = &t;
    auto fetch = [&](const std::string& name, Tensor<T>& dst) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw Error("state is missing tensor " + name);
      if (it->second->shape() != dst.shape())
        throw Error("shape mismatch for " + name + ": stored " + shape_str(it->second->shape()) + ", model expects " +
                    shape_str(dst.shape()));
      dst = it->second->template cast<T>();
    };
    for (auto& p : params_) fetch(p.name, p.var.node()->value);
    for (auto& [n, t] : buffers()) fetch(n, *t);
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> m(cfg_, 0);
    m.load_state(state());
    return m;
  }

  // ----- encoder -----

  Var<T> encode(Tape<T>& tape, const Var<T>& images, Mode mode, Rng* rng = nullptr) {
    require(images.value().rank() == 4 && images.shape()[3] == 1,
            "encode: images must be [B,H,W,1], got " + shape_str(images.shape()));
    if (images.shape()[1] != cfg_.height || images.shape()[2] != cfg_.width)
      throw Error("encode: image extents " + std::to_string(images.shape()[1]) + "x" +
                  std::to_string(images.shape()[2]) + " do not match the configured " + std::to_string(cfg_.height) +
                  "x" + std::to_string(cfg_.width));
    const bool train = mode == Mode::Train;
    require(!train || cfg_.dropout == 0.0 || rng, "encode: training mode needs an rng for dropout");
    ops::BatchNormOptions bn;
    bn.training = train;
    bn.update_stats = train;
    Var<T> x = images;
    for (auto& u : convs_) {
      x = ops::conv2d(tape, x, u.kernel, Var<T>{}, u.stride, u.dilation);
      if (train) x = ops::dropout(tape, x, cfg_.dropout, true, *rng);
      x = ops::batchnorm2d(tape, x, u.gamma, u.beta, ops::RunningStats<T>{&u.running_mean, &u.running_var}, bn);
      x = ops::relu(tape, x);
    }
    return x;
  }

  // Eval mode reads running statistics but never writes them.
  Var<T> encode_eval(Tape<T>& tape, const Var<T>& images) const {
    return const_cast<Model*>(this)->encode(tape, images, Mode::Eval);
  }

  // memory ⊕ one-hot row ⊕ one-hot column on the channel axis.
  Var<T> augment(Tape<T>& tape, const Var<T>& memory) const {
    require(memory.value().rank() == 4, "augment: memory must be [B,H',W',D]");
    const int b = memory.shape()[0], hh = memory.shape()[1], ww = memory.shape()[2];
    Tensor<T> coords({b, hh, ww, hh + ww});
    for (int n = 0; n < b; ++n)
      for (int i = 0; i < hh; ++i)
        for (int j = 0; j < ww; ++j) {
          T* cell = coords.data() + ((static_cast<std::size_t>(n) * hh + i) * ww + j) * (hh + ww);
          cell[i] = T(1);
          cell[hh + j] = T(1);
        }
    return ops::concat(tape, {memory, Var<T>(std::move(coords))}, 3);
  }

  // ----- auxiliary per-cell classifier -----

  Var<T> aux_logits(Tape<T>& tape, const Var<T>& memory) const {
    return ops::linear(tape, memory, aux_w_, aux_b_);
  }

  // Summed per-cell cross-entropy, averaged over the batch. `cells` holds
  // B·H'·W' class ids in memory order.
  Var<T> aux_loss(Tape<T>& tape, const Var<T>& memory, std::span<const int> cells) const {
    auto logits = aux_logits(tape, memory);
    auto total = ops::cross_entropy(tape, logits, cells);
    return ops::scale(tape, total, T(1) / static_cast<T>(memory.shape()[0]));
  }

  // ----- decoder -----

  DecoderInputs<T> prepare(Tape<T>& tape, const Var<T>& memory, std::span<const int> key_ids) const {
    require(memory.value().rank() == 4 && memory.shape()[1] == cfg_.mem_height() &&
                memory.shape()[2] == cfg_.mem_width() && memory.shape()[3] == cfg_.mem_depth(),
            "decoder: memory shape " + shape_str(memory.shape()) + " does not match the config");
    const int b = memory.shape()[0];
    require(static_cast<int>(key_ids.size()) == b, "decoder: one key id per batch row");
    for (int k : key_ids)
      if (k < 0 || k >= static_cast<int>(cfg_.keys.size())) throw Error("decoder: key id out of range");
    DecoderInputs<T> in;
    in.batch = b;
    in.memory = ops::reshape(tape, augment(tape, memory), Shape{b, cfg_.cells(), cfg_.aug_depth()});
    in.projected = ops::linear(tape, in.memory, w_m_);
    in.keys = ops::embed(tape, key_embed_, key_ids);
    return in;
  }

  DecoderState<T> initial_state(int batch) const {
    DecoderState<T> s;
    s.h = Var<T>(Tensor<T>({batch, cfg_.hidden}));
    s.c = Var<T>(Tensor<T>({batch, cfg_.hidden}));
    s.attention = Var<T>(Tensor<T>({batch, cfg_.cells()}, T(1) / static_cast<T>(cfg_.cells())));
    s.prev.assign(static_cast<std::size_t>(batch), CharVocab::kSos);
    return s;
  }

  // score = v·tanh(W_m m + W_k k + W_a h + W_b o + W_c a), softmax over cells,
  // context over the augmented memory.
  std::pair<Var<T>, Var<T>> attend(Tape<T>& tape, const DecoderInputs<T>& in, const Var<T>& h_prev,
                                   const Var<T>& o_prev_emb, const Var<T>& a_prev) const {
    auto q = ops::add(tape, ops::linear(tape, in.keys, w_k_), ops::linear(tape, h_prev, w_a_));
    q = ops::add(tape, q, ops::linear(tape, o_prev_emb, w_b_));
    q = ops::add(tape, q, ops::linear(tape, a_prev, w_c_));
    auto hidden = ops::tanh(tape, ops::add_broadcast(tape, in.projected, q));
    auto weights = ops::softmax(tape, ops::dot_last(tape, hidden, v_));
    auto context = ops::weighted_sum(tape, weights, in.memory);
    return {context, weights};
  }

  // One decoder step. The returned state's `prev` still holds the caller's
  // o_{t-1}; callers overwrite it with the token chosen for this step.
  StepOutput<T> step(Tape<T>& tape, const DecoderState<T>& s, std::span<const int> l_prev,
                     const DecoderInputs<T>& in) const {
    require(static_cast<int>(l_prev.size()) == in.batch, "decoder step: one input token per row");
    auto l_emb = ops::embed(tape, char_embed_, l_prev);
    const bool same = std::equal(l_prev.begin(), l_prev.end(), s.prev.begin(), s.prev.end());
    auto o_emb = same ? l_emb : ops::embed(tape, char_embed_, std::span<const int>(s.prev));
    auto [context, weights] = attend(tape, in, s.h, o_emb, s.attention);
    auto x = ops::concat(tape, {l_emb, context, in.keys}, 1);
    auto [h, c] = ops::lstm_step(tape, x, s.h, s.c, lstm_w_, lstm_b_);
    auto logits = ops::linear(tape, ops::concat(tape, {h, context}, 1), out_w_, out_b_);
    StepOutput<T> o;
    o.logits = logits;
    o.weights = weights;
    o.state = DecoderState<T>{h, c, weights, s.prev};
    return o;
  }

  SequenceBatch make_sequences(const std::vector<std::string>& values) const {
    SequenceBatch sb;
    sb.batch = static_cast<int>(values.size());
    std::vector<std::vector<int>> chars;
    int longest = 0;
    for (const auto& v : values) {
      chars.push_back(vocab_.encode(v));
      const int n = static_cast<int>(chars.back().size());
      if (n + 1 > cfg_.t_max)
        throw Error("target \"" + v + "\" needs " + std::to_string(n + 1) + " decode steps, T_max is " +
                    std::to_string(cfg_.t_max));
      longest = std::max(longest, n);
    }
    sb.steps = cfg_.n_warm + longest + 1;
    sb.inputs.assign(static_cast<std::size_t>(sb.steps) * sb.batch, CharVocab::kPad);
    sb.targets.assign(sb.inputs.size(), CharVocab::kPad);
    for (int b = 0; b < sb.batch; ++b) {
      std::vector<int> tgt(static_cast<std::size_t>(cfg_.n_warm), CharVocab::kWarm);
      tgt.insert(tgt.end(), chars[b].begin(), chars[b].end());
      tgt.push_back(CharVocab::kEos);
      for (std::size_t t = 0; t < tgt.size(); ++t) {
        sb.targets[t * sb.batch + b] = tgt[t];
        sb.inputs[t * sb.batch + b] = t == 0 ? CharVocab::kSos : tgt[t - 1];
      }
    }
    return sb;
  }

  SequenceLoss<T> sequence_loss(Tape<T>& tape, const Var<T>& memory, std::span<const int> key_ids,
                                const std::vector<std::string>& values) const {
    const SequenceBatch sb = make_sequences(values);
    auto in = prepare(tape, memory, key_ids);
    auto state = initial_state(sb.batch);
    std::vector<Var<T>> logits;
    SequenceLoss<T> res;
    for (int t = 0; t < sb.steps; ++t) {
      std::span<const int> tok(sb.inputs.data() + static_cast<std::size_t>(t) * sb.batch, sb.batch);
      state.prev.assign(tok.begin(), tok.end());
      auto out = step(tape, state, tok, in);
      logits.push_back(out.logits);
      for (T w : out.weights.value().values())
        if (w > T(0)) res.attention_entropy -= static_cast<double>(w) * std::log(static_cast<double>(w));
      state = std::move(out.state);
    }
    res.attention_entropy /= static_cast<double>(sb.steps) * sb.batch;
    auto all = ops::concat(tape, logits, 0);
    auto total = ops::cross_entropy_seq(tape, all, sb.targets, CharVocab::kPad);
    res.loss = ops::scale(tape, total, T(1) / static_cast<T>(sb.batch));
    const int v = vocab_size();
    for (std::size_t r = 0; r < sb.targets.size(); ++r) {
      const int tgt = sb.targets[r];
      if (tgt == CharVocab::kPad || tgt == CharVocab::kWarm) continue;
      const T* z = all.value().data() + r * v;
      const int arg = static_cast<int>(std::max_element(z, z + v) - z);
      res.correct += arg == tgt;
      ++res.counted;
    }
    return res;
  }

  // Warm-up steps are forced to WARM; afterwards each row feeds back its own
  // argmax until EOS or T_max steps.
  std::vector<Extraction<T>> greedy_decode(const Var<T>& memory, std::span<const int> key_ids) const {
    Tape<T> tape(false);
    auto in = prepare(tape, memory, key_ids);
    const int b = in.batch;
    auto state = initial_state(b);
    std::vector<Extraction<T>> res(static_cast<std::size_t>(b));
    std::vector<bool> done(static_cast<std::size_t>(b), false);
    std::vector<int> tok(static_cast<std::size_t>(b), CharVocab::kSos);
    const int v = vocab_size();
    const int steps = cfg_.n_warm + cfg_.t_max;
    for (int t = 0; t < steps; ++t) {
      auto out = step(tape, state, tok, in);
      state = std::move(out.state);
      bool all_done = true;
      for (int r = 0; r < b; ++r) {
        if (done[r]) continue;
        const T* w = out.weights.value().data() + static_cast<std::size_t>(r) * cfg_.cells();
        res[r].attention.emplace_back(w, w + cfg_.cells());
        int next;
        if (t < cfg_.n_warm) {
          next = CharVocab::kWarm;
        } else {
          const T* z = out.logits.value().data() + static_cast<std::size_t>(r) * v;
          next = static_cast<int>(std::max_element(z, z + v) - z);
        }
        res[r].tokens.push_back(next);
        tok[r] = next;
        if (next == CharVocab::kEos) done[r] = true;
        all_done = all_done && done[r];
      }
      state.prev = tok;
      if (all_done) break;
    }
    for (auto& e : res) e.value = vocab_.decode(e.tokens);
    return res;
  }

  // Named access for tests and diagnostics.
  Var<T> param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.var;
    throw Error("no parameter named " + name);
  }

  ConvUnit<T>& conv(std::size_t i) { return convs_.at(i); }
  std::size_t conv_count() const { return convs_.size(); }

 private:
  static std::string conv_name(std::size_t i) { return "encoder.conv" + std::to_string(i); }

  std::vector<NamedParam<T>> with_prefix(const std::string& prefix) const {
    std::vector<NamedParam<T>> out;
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
    return out;
  }

  Var<T> add_param(const std::string& name, Shape shape) {
    Var<T> v(Tensor<T>(std::move(shape)), true);
    params_.push_back({name, v});
    return v;
  }

  void build() {
    const int c = cfg_.channels;
    struct Spec {
      int in, out, stride, dilation;
    };
    std::vector<Spec> specs = {{1, c, 1, 1}};
    int width = c;
    for (int block = 0; block < 3; ++block) {
      const int out = c << (block + 1);
      const int dil = block == 2 ? 2 : 1;
      for (int k = 0; k < 3; ++k) {
        specs.push_back({width, out, k == 0 ? 2 : 1, dil});
        width = out;
      }
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      ConvUnit<T> u;
      u.in = specs[i].in;
      u.out = specs[i].out;
      u.stride = specs[i].stride;
      u.dilation = specs[i].dilation;
      u.kernel = add_param(conv_name(i) + ".kernel", {3, 3, u.in, u.out});
      u.gamma = add_param(conv_name(i) + ".gamma", {u.out});
      u.beta = add_param(conv_name(i) + ".beta", {u.out});
      u.running_mean = Tensor<T>({u.out});
      u.running_var = Tensor<T>({u.out}, T(1));
      convs_.push_back(std::move(u));
    }
    const int v = vocab_.size(), e = cfg_.aug_depth(), da = cfg_.attention, dh = cfg_.hidden;
    char_embed_ = add_param("decoder.char_embed", {v, cfg_.char_embed});
    key_embed_ = add_param("decoder.key_embed", {static_cast<int>(cfg_.keys.size()), cfg_.key_embed});
    w_m_ = add_param("attention.W_m", {da, e});
    w_k_ = add_param("attention.W_k", {da, cfg_.key_embed});
    w_a_ = add_param("attention.W_a", {da, dh});
    w_b_ = add_param("attention.W_b", {da, cfg_.char_embed});
    w_c_ = add_param("attention.W_c", {da, cfg_.cells()});
    v_ = add_param("attention.v", {da});
    lstm_w_ = add_param("decoder.lstm.weight", {4 * dh, cfg_.char_embed + e + cfg_.key_embed + dh});
    lstm_b_ = add_param("decoder.lstm.bias", {4 * dh});
    out_w_ = add_param("decoder.out.weight", {v, dh + e});
    out_b_ = add_param("decoder.out.bias", {v});
    aux_w_ = add_param("aux.weight", {kAuxClasses, cfg_.mem_depth()});
    aux_b_ = add_param("aux.bias", {kAuxClasses});
  }

  // Uniform ±1/sqrt(fan_in) for weights, BN at identity, embeddings ±0.1,
  // forget-gate bias 1.
  void initialize(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x1417));
    auto fill = [&](Var<T>& p, double bound) {
      for (auto& x : p.node()->value.values()) x = static_cast<T>(uniform(rng, -bound, bound));
    };
    for (auto& p : params_) {
      auto& t = p.var.node()->value;
      const std::string& n = p.name;
      if (n.ends_with(".gamma")) {
        std::fill(t.storage().begin(), t.storage().end(), T(1));
      } else if (n.ends_with(".beta") || n.ends_with("bias")) {
        std::fill(t.storage().begin(), t.storage().end(), T(0));
      } else if (n.ends_with("_embed")) {
        fill(p.var, 0.1);
      } else if (n.ends_with(".kernel")) {
        fill(p.var, 1.0 / std::sqrt(static_cast<double>(t.dim(0) * t.dim(1) * t.dim(2))));
      } else if (n == "attention.v") {
        fill(p.var, 1.0 / std::sqrt(static_cast<double>(t.dim(0))));
      } else {
        fill(p.var, 1.0 / std::sqrt(static_cast<double>(t.dim(1))));
      }
    }
    auto& b = lstm_b_.node()->value;
    for (int j = 0; j < cfg_.hidden; ++j) b[static_cast<std::size_t>(cfg_.hidden + j)] = T(1);
  }

  ModelConfig cfg_;
  CharVocab vocab_;
  std::vector<NamedParam<T>> params_;
  std::vector<ConvUnit<T>> convs_;
  Var<T> char_embed_, key_embed_, w_m_, w_k_, w_a_, w_b_, w_c_, v_, lstm_w_, lstm_b_, out_w_, out_b_, aux_w_, aux_b_;
};

// Batch of grayscale images as [B,H,W,1]. Pixels arrive row-major per image.
template <typename T, typename ImageRange>
Var<T> image_batch(const ImageRange& images, int height, int width) {
  const int b = static_cast<int>(std::size(images));
  require(b > 0, "image_batch: empty batch");
  Tensor<T> t({b, height, width, 1});
  std::size_t off = 0;
  for (const auto& img : images) {
    const auto& px = img->pixels;
    if (img->height != height || img->width != width)
      throw Error("image extents " + std::to_string(img->height) + "x" + std::to_string(img->width) +
                  " do not match the model's " + std::to_string(height) + "x" + std::to_string(width));
    for (float p : px) t[off++] = static_cast<T>(p);
  }
  return Var<T>(std::move(t));
}

}  // namespace keyread::model
