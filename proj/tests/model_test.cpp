#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "keyread/model/network.hpp"
#include "keyread/numcore/gradcheck.hpp"

using namespace keyread;
using namespace keyread::model;

namespace {

template <typename T>
Var<T> random_images(int b, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t({b, h, w, 1});
  for (auto& x : t.values()) x = static_cast<T>(bernoulli(rng, 0.2) ? 1.0 : 0.0);
  return Var<T>(std::move(t));
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 16;
  c.width = 24;
  c.channels = 2;
  c.hidden = 6;
  c.attention = 5;
  c.key_embed = 3;
  c.char_embed = 4;
  c.keys = {"number", "amount"};
  c.t_max = 8;
  return c;
}

template <typename T>
void zero_all(Model<T>& m) {
  for (auto& p : m.params()) std::fill(p.var.node()->value.storage().begin(), p.var.node()->value.storage().end(), T(0));
}

template <typename T>
Var<T> random_memory(const ModelConfig& c, int b, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t({b, c.mem_height(), c.mem_width(), c.mem_depth()});
  for (auto& x : t.values()) x = static_cast<T>(uniform(rng, 0.0, 1.0));
  return Var<T>(std::move(t));
}

}  // namespace

TEST(Vocab, RoundTripAndSpecials) {
  CharVocab v;
  EXPECT_EQ(v.size(), 105);
  for (int id = 0; id < v.size(); ++id) EXPECT_EQ(v.token_id(v.token(id)), id);
  const std::string s = "INV-00042 $1.50";
  const auto ids = v.encode(s);
  EXPECT_EQ(v.decode(ids), s);
  EXPECT_EQ(v.encode("€"), std::vector<int>{CharVocab::kOov});
  EXPECT_EQ(v.encode("a€b").size(), 3u);
  std::vector<int> with_specials = {CharVocab::kWarm, ids[0], CharVocab::kPad, ids[1], CharVocab::kEos};
  EXPECT_EQ(v.decode(with_specials), "IN");
}

TEST(Config, Validation) {
  ModelConfig c;
  c.height = 65;
  EXPECT_THROW(validate(c), Error);
  c = ModelConfig{};
  c.keys.clear();
  EXPECT_THROW(validate(c), Error);
  c = ModelConfig{};
  json j;
  to_json(j, c);
  ModelConfig back;
  back.channels = 99;
  merge_model_config(j, back);
  EXPECT_EQ(back, c);
  EXPECT_THROW(merge_model_config(json::parse(R"({"chanels": 4})"), back), Error);
}

TEST(Shapes, DeskScaleChain) {
  Model<float> m(ModelConfig{}, 1);
  Tape<float> tape(false);
  auto mem = m.encode(tape, random_images<float>(2, 64, 96, 3), Mode::Eval);
  EXPECT_EQ(mem.shape(), (Shape{2, 8, 12, 64}));
  EXPECT_EQ(m.augment(tape, mem).shape(), (Shape{2, 8, 12, 84}));
  EXPECT_EQ(m.aux_logits(tape, mem).shape(), (Shape{2, 8, 12, 44}));
}

TEST(Shapes, PaperScaleChain) {
  ModelConfig c;
  c.height = 832;
  c.width = 640;
  c.channels = 32;
  c.hidden = 256;
  c.attention = 256;
  Model<float> m(c, 1);
  Tape<float> tape(false);
  auto mem = m.encode(tape, random_images<float>(1, 832, 640, 3), Mode::Eval);
  EXPECT_EQ(mem.shape(), (Shape{1, 104, 80, 256}));
  EXPECT_EQ(m.augment(tape, mem).shape(), (Shape{1, 104, 80, 440}));
}

TEST(Shapes, IndivisibleExtentRejected) {
  Model<float> m(ModelConfig{}, 1);
  Tape<float> tape(false);
  EXPECT_THROW(m.encode(tape, random_images<float>(1, 65, 96, 3), Mode::Eval), Error);
  ModelConfig c;
  c.height = 65;
  EXPECT_THROW(Model<float>(c, 1), Error);
}

TEST(Augment, OneHotCoordinates) {
  Model<float> m(ModelConfig{}, 1);
  Tape<float> tape(false);
  Var<float> zeros(Tensor<float>({1, 8, 12, 64}));
  auto aug = m.augment(tape, zeros);
  const float* cell = aug.value().data() + (2 * 12 + 5) * 84;
  std::vector<int> ones;
  for (int k = 0; k < 84; ++k) {
    EXPECT_TRUE(cell[k] == 0.0f || cell[k] == 1.0f);
    if (cell[k] == 1.0f) ones.push_back(k);
  }
  EXPECT_EQ(ones, (std::vector<int>{64 + 2, 64 + 8 + 5}));
  // Feature block passes through unchanged.
  auto mem = random_memory<float>(ModelConfig{}, 1, 5);
  auto aug2 = m.augment(tape, mem);
  for (int p = 0; p < 96; ++p)
    for (int k = 0; k < 64; ++k) EXPECT_EQ(aug2.value()[p * 84 + k], mem.value()[p * 64 + k]);
}

TEST(Attention, ZeroScoreVectorIsUniform) {
  const auto c = tiny_config();
  Model<double> m(c, 2);
  std::fill(m.param("attention.v").node()->value.storage().begin(),
            m.param("attention.v").node()->value.storage().end(), 0.0);
  Tape<double> tape(false);
  auto mem = random_memory<double>(c, 2, 7);
  const int keys[2] = {0, 1};
  auto in = m.prepare(tape, mem, keys);
  auto s = m.initial_state(2);
  const int toks[2] = {CharVocab::kSos, CharVocab::kSos};
  auto out = m.step(tape, s, toks, in);
  const int p = c.cells(), e = c.aug_depth();
  for (double w : out.weights.value().values()) EXPECT_NEAR(w, 1.0 / p, 1e-15);
  auto [ctx, w] = m.attend(tape, in, s.h, ops::embed(tape, m.param("decoder.char_embed"), std::span<const int>(toks)),
                           s.attention);
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < e; ++k) {
      double mean = 0;
      for (int i = 0; i < p; ++i) mean += in.memory.value()[(static_cast<std::size_t>(b) * p + i) * e + k];
      EXPECT_NEAR(ctx.value()[b * e + k], mean / p, 1e-12);
    }
}

TEST(Attention, WeightsAreDistributions) {
  const auto c = tiny_config();
  Model<float> m(c, 3);
  for (auto& x : m.param("attention.v").node()->value.values()) x *= 20.0f;
  auto mem = random_memory<float>(c, 3, 8);
  const int keys[3] = {0, 1, 0};
  auto res = m.greedy_decode(mem, keys);
  for (const auto& r : res) {
    EXPECT_LE(r.tokens.size(), static_cast<std::size_t>(c.n_warm + c.t_max));
    for (const auto& grid : r.attention) {
      double s = 0;
      for (float w : grid) {
        EXPECT_GE(w, 0.0f);
        s += w;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

// 2x2 memory, every term of the score written out per cell.
TEST(Attention, TwoByTwoBruteForce) {
  ModelConfig c = tiny_config();
  c.height = 16;
  c.width = 16;
  Model<double> m(c, 4);
  Rng rng(10);
  for (auto& p : m.params())
    for (auto& x : p.var.node()->value.values()) x = uniform(rng, -0.8, 0.8);
  Tape<double> tape(false);
  auto mem = random_memory<double>(c, 1, 9);
  const int key[1] = {1};
  auto in = m.prepare(tape, mem, key);
  Var<double> h(Tensor<double>({1, c.hidden}));
  for (auto& x : h.mutable_value().values()) x = uniform(rng, -1, 1);
  Var<double> oemb(Tensor<double>({1, c.char_embed}));
  for (auto& x : oemb.mutable_value().values()) x = uniform(rng, -1, 1);
  Var<double> aprev(Tensor<double>({1, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4}));
  auto [ctx, w] = m.attend(tape, in, h, oemb, aprev);

  const int e = c.aug_depth(), da = c.attention, d = c.mem_depth();
  ASSERT_EQ(e, d + 4);
  auto P = [&](const char* name) { return m.param(name).value(); };
  const auto Wm = P("attention.W_m"), Wk = P("attention.W_k"), Wa = P("attention.W_a"), Wb = P("attention.W_b"),
             Wc = P("attention.W_c"), v = P("attention.v"), K = P("decoder.key_embed");
  double scores[4];
  std::vector<std::vector<double>> cells(4, std::vector<double>(e, 0.0));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const int cell = i * 2 + j;
      for (int k = 0; k < d; ++k) cells[cell][k] = mem.value()[cell * d + k];
      cells[cell][d + i] = 1.0;
      cells[cell][d + 2 + j] = 1.0;
      double s = 0;
      for (int a = 0; a < da; ++a) {
        double z = 0;
        for (int k = 0; k < e; ++k) z += Wm[a * e + k] * cells[cell][k];
        for (int k = 0; k < c.key_embed; ++k) z += Wk[a * c.key_embed + k] * K[1 * c.key_embed + k];
        for (int k = 0; k < c.hidden; ++k) z += Wa[a * c.hidden + k] * h.value()[k];
        for (int k = 0; k < c.char_embed; ++k) z += Wb[a * c.char_embed + k] * oemb.value()[k];
        for (int k = 0; k < 4; ++k) z += Wc[a * 4 + k] * aprev.value()[k];
        s += v[a] * std::tanh(z);
      }
      scores[cell] = s;
    }
  const double mx = *std::max_element(scores, scores + 4);
  double total = 0, weights[4];
  for (int i = 0; i < 4; ++i) total += weights[i] = std::exp(scores[i] - mx);
  for (int i = 0; i < 4; ++i) {
    weights[i] /= total;
    EXPECT_NEAR(w.value()[i], weights[i], 1e-12);
  }
  for (int k = 0; k < e; ++k) {
    double expect = 0;
    for (int i = 0; i < 4; ++i) expect += weights[i] * cells[i][k];
    EXPECT_NEAR(ctx.value()[k], expect, 1e-12);
  }
}

TEST(Decoder, LogitsLengthAndPurity) {
  const auto c = tiny_config();
  Model<float> m(c, 5);
  Tape<float> tape(false);
  auto mem = random_memory<float>(c, 2, 1);
  const int keys[2] = {0, 1};
  auto in = m.prepare(tape, mem, keys);
  auto s = m.initial_state(2);
  const int toks[2] = {CharVocab::kSos, CharVocab::kSos};
  auto a = m.step(tape, s, toks, in);
  auto b = m.step(tape, s, toks, in);
  EXPECT_EQ(a.logits.shape(), (Shape{2, m.vocab_size()}));
  EXPECT_EQ(a.logits.value(), b.logits.value());
  EXPECT_EQ(a.state.h.value(), b.state.h.value());
}

TEST(Decoder, ZeroParametersGiveLnV) {
  const auto c = tiny_config();
  Model<double> m(c, 5);
  zero_all(m);
  Tape<double> tape(false);
  auto mem = random_memory<double>(c, 2, 1);
  const int keys[2] = {0, 1};
  auto res = m.sequence_loss(tape, mem, keys, {"INV-1", ""});
  // Steps: (2 + 5 + 1) and (2 + 0 + 1); loss is the batch mean.
  const double lnv = std::log(static_cast<double>(m.vocab_size()));
  EXPECT_NEAR(res.loss.value()[0], (8 + 3) * lnv / 2.0, 1e-9);
  auto s = m.initial_state(2);
  auto in = m.prepare(tape, mem, keys);
  const int toks[2] = {CharVocab::kSos, CharVocab::kSos};
  auto out = m.step(tape, s, toks, in);
  for (double z : out.logits.value().values()) EXPECT_EQ(z, 0.0);
}

TEST(Decoder, SequenceConstruction) {
  Model<float> m(tiny_config(), 1);
  auto sb = m.make_sequences({""});
  EXPECT_EQ(sb.steps, 3);
  EXPECT_EQ(sb.targets, (std::vector<int>{CharVocab::kWarm, CharVocab::kWarm, CharVocab::kEos}));
  EXPECT_EQ(sb.inputs, (std::vector<int>{CharVocab::kSos, CharVocab::kWarm, CharVocab::kWarm}));
  auto two = m.make_sequences({"AB", ""});
  EXPECT_EQ(two.steps, 5);
  const int a = m.vocab().encode("A")[0], b = m.vocab().encode("B")[0];
  const int W = CharVocab::kWarm, E = CharVocab::kEos, S = CharVocab::kSos, P = CharVocab::kPad;
  EXPECT_EQ(two.targets, (std::vector<int>{W, W, W, W, a, E, b, P, E, P}));
  EXPECT_EQ(two.inputs, (std::vector<int>{S, S, W, W, W, W, a, P, b, P}));
  EXPECT_NO_THROW(m.make_sequences({"1234567"}));
  EXPECT_THROW(m.make_sequences({"12345678"}), Error);  // 8 chars + EOS > T_max 8
}

TEST(Decoder, UntrainedLossNearUniform) {
  Model<float> m(ModelConfig{}, 11);
  Tape<float> tape(false);
  Rng rng(3);
  auto mem = m.encode(tape, random_images<float>(8, 64, 96, 3), Mode::Eval);
  std::vector<int> keys(8, 0);
  std::vector<std::string> values;
  for (int i = 0; i < 8; ++i) values.push_back("INV-" + std::to_string(10000 + uniform_int(rng, 0, 89999)));
  auto res = m.sequence_loss(tape, mem, keys, values);
  const double per_step = res.loss.value()[0] / (2 + 9 + 1);
  const double lnv = std::log(105.0);
  EXPECT_NEAR(per_step, lnv, 0.05 * lnv);
  EXPECT_TRUE(std::isfinite(res.loss.value()[0]));
  EXPECT_GT(res.loss.value()[0], 0.0f);
}

TEST(Decoder, GreedyDeterministicAndBounded) {
  const auto c = tiny_config();
  Model<float> m(c, 12);
  auto mem = random_memory<float>(c, 4, 2);
  const int keys[4] = {0, 1, 1, 0};
  auto a = m.greedy_decode(mem, keys);
  auto b = m.greedy_decode(mem, keys);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].value, b[i].value);
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_LE(a[i].tokens.size(), static_cast<std::size_t>(c.n_warm + c.t_max));
    EXPECT_EQ(a[i].tokens[0], CharVocab::kWarm);
    EXPECT_EQ(a[i].tokens[1], CharVocab::kWarm);
    EXPECT_EQ(a[i].attention.size(), a[i].tokens.size());
    for (char ch : a[i].value) EXPECT_NE(m.vocab().encode(std::string(1, ch))[0], CharVocab::kOov);
  }
  // A row decodes the same alone as inside a batch.
  auto single = m.greedy_decode(Var<float>(Tensor<float>({1, c.mem_height(), c.mem_width(), c.mem_depth()},
                                                         std::vector<float>(mem.value().data() + 2 * c.cells() * c.mem_depth(),
                                                                            mem.value().data() + 3 * c.cells() * c.mem_depth()))),
                                std::vector<int>{1});
  EXPECT_EQ(single[0].tokens, a[2].tokens);
}

TEST(Aux, UniformBackgroundLoss) {
  Model<double> m(ModelConfig{}, 1);
  for (auto& p : m.aux_params()) std::fill(p.var.node()->value.storage().begin(), p.var.node()->value.storage().end(), 0.0);
  Tape<double> tape(false);
  auto mem = random_memory<double>(ModelConfig{}, 1, 4);
  std::vector<int> cells(96, 0);
  EXPECT_NEAR(m.aux_loss(tape, mem, cells).value()[0], 96 * std::log(44.0), 1e-9);
}

TEST(Aux, GradientReachesEveryEncoderParameter) {
  const auto c = tiny_config();
  Model<float> m(c, 6);
  Tape<float> tape;
  Rng rng(1);
  auto mem = m.encode(tape, random_images<float>(2, c.height, c.width, 5), Mode::Train, &rng);
  std::vector<int> cells(2 * c.cells());
  for (auto& x : cells) x = uniform_int(rng, 0, 43);
  tape.backward(m.aux_loss(tape, mem, cells));
  for (const auto& p : m.encoder_params()) {
    double norm = 0;
    for (float g : p.var.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

TEST(Model, FullGradcheck) {
  const auto start = std::chrono::steady_clock::now();
  const auto c = tiny_config();
  Model<double> m = Model<float>(c, 7).cast<double>();
  auto images = random_images<double>(2, c.height, c.width, 8);
  const std::vector<int> keys = {0, 1};
  const std::vector<std::string> values = {"INV-7", "3.5"};
  auto loss = [&](Tape<double>& tape) {
    Rng rng(42);  // identical dropout masks on every evaluation
    auto mem = m.encode(tape, images, Mode::Train, &rng);
    return m.sequence_loss(tape, mem, keys, values).loss;
  };
  std::vector<Var<double>> params;
  for (const auto& p : m.params())
    if (p.name.rfind("aux.", 0) != 0) params.push_back(p.var);
  auto r = finite_diff_check(loss, params, {.samples = 200, .step = 1e-5, .seed = 3});
  EXPECT_GE(r.checked, 50);
  EXPECT_LE(r.max_rel_error, 1e-3);
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::minutes(2));
}

TEST(Model, FrozenEncoderUnchangedByDecoderStep) {
  const auto c = tiny_config();
  Model<float> m(c, 9);
  const auto before = m.state();
  AdamState<float> adam;
  for (int it = 0; it < 3; ++it) {
    Tape<float> off(false);
    auto mem = m.encode(off, random_images<float>(2, c.height, c.width, it), Mode::Eval);
    Tape<float> tape;
    const int keys[2] = {0, 1};
    tape.backward(m.sequence_loss(tape, mem, keys, {"A1", "B"}).loss);
    adam_update(m.decoder_params(), adam);
  }
  const auto after = m.state();
  int changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].first.rfind("encoder.", 0) == 0) EXPECT_EQ(before[i].second, after[i].second) << before[i].first;
    else changed += before[i].second != after[i].second;
  }
  EXPECT_GT(changed, 0);
  for (const auto& [name, slot] : adam.slots) EXPECT_NE(name.rfind("encoder.", 0), 0u) << name;
}

TEST(Model, CastRoundTrip) {
  Model<float> m(tiny_config(), 3);
  Model<float> back = m.cast<double>().cast<float>();
  EXPECT_EQ(back.state(), m.state());
  Model<float> other(tiny_config(), 4);
  EXPECT_NE(other.state(), m.state());
  ModelConfig wider = tiny_config();
  wider.hidden = 7;
  Model<float> w(wider, 1);
  EXPECT_THROW(w.load_state(m.state()), Error);
}
