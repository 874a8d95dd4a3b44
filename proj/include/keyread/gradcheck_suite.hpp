#pragma once

// Named finite-difference checks for every differentiable op, plus the
// full teacher-forced model loss on a tiny configuration.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "keyread/model/network.hpp"
#include "keyread/numcore/gradcheck.hpp"
#include "keyread/numcore/ops.hpp"

namespace keyread::gradcheck {

using VarD = Var<double>;
using Check = std::function<GradCheckResult(std::uint64_t seed)>;

namespace detail {

inline VarD rand_var(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& x : t.values()) x = uniform(rng, lo, hi);
  return VarD(std::move(t), true);
}

// Projects an op output onto fixed random weights so each coordinate gets a
// distinct adjoint.
inline GradCheckResult run(Rng& rng, const std::function<VarD(Tape<double>&)>& f, const std::vector<VarD>& params,
                           std::uint64_t seed) {
  Tape<double> probe(false);
  const int n = static_cast<int>(f(probe).size());
  Tensor<double> w({n});
  for (auto& x : w.values()) x = uniform(rng, -1.0, 1.0);
  const VarD weights(std::move(w));
  auto loss = [&](Tape<double>& t) {
    auto flat = ops::reshape(t, f(t), Shape{1, n});
    return ops::sum(t, ops::dot_last(t, flat, weights));
  };
  return finite_diff_check(loss, params, {60, 1e-5, seed});
}

inline GradCheckResult worst(std::initializer_list<GradCheckResult> rs) {
  GradCheckResult out;
  for (const auto& r : rs) {
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.checked += r.checked;
  }
  return out;
}

}  // namespace detail

inline const std::map<std::string, Check>& ops_registry() {
  using detail::rand_var;
  using detail::run;
  static const std::map<std::string, Check> reg = {
      {"conv2d",
       [](std::uint64_t s) {
         Rng rng(s);
         GradCheckResult out;
         for (int stride : {1, 2})
           for (int dil : {1, 2}) {
             auto x = rand_var({2, 4, 6, 2}, rng);
             auto k = rand_var({3, 3, 2, 3}, rng);
             auto b = rand_var({3}, rng);
             auto r = run(rng, [&](Tape<double>& t) { return ops::conv2d(t, x, k, b, stride, dil); }, {x, k, b}, s);
             out = detail::worst({out, r});
           }
         return out;
       }},
      {"relu",
       [](std::uint64_t s) {
         Rng rng(s);
         // Keep inputs away from the kink.
         auto x = rand_var({3, 5}, rng, 0.1, 1.0);
         auto y = rand_var({3, 5}, rng, -1.0, -0.1);
         return detail::worst({run(rng, [&](Tape<double>& t) { return ops::relu(t, x); }, {x}, s),
                               run(rng, [&](Tape<double>& t) { return ops::relu(t, y); }, {y}, s)});
       }},
      {"tanh",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({3, 5}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::tanh(t, x); }, {x}, s);
       }},
      {"sigmoid",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({3, 5}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::sigmoid(t, x); }, {x}, s);
       }},
      {"softmax",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({3, 5}, rng, -3, 3);
         return run(rng, [&](Tape<double>& t) { return ops::softmax(t, x); }, {x}, s);
       }},
      {"linear",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({3, 5}, rng);
         auto w = rand_var({4, 5}, rng);
         auto b = rand_var({4}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::linear(t, x, w, b); }, {x, w, b}, s);
       }},
      {"dot_last",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({2, 3, 5}, rng);
         auto v = rand_var({5}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::dot_last(t, x, v); }, {x, v}, s);
       }},
      {"add",
       [](std::uint64_t s) {
         Rng rng(s);
         auto a = rand_var({3, 4}, rng);
         auto b = rand_var({3, 4}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::scale(t, ops::add(t, a, b), 1.5); }, {a, b}, s);
       }},
      {"concat",
       [](std::uint64_t s) {
         Rng rng(s);
         auto a = rand_var({2, 3, 2}, rng);
         auto b = rand_var({2, 3, 4}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::concat(t, {a, b}, 2); }, {a, b}, s);
       }},
      {"embed",
       [](std::uint64_t s) {
         Rng rng(s);
         auto table = rand_var({5, 3}, rng);
         static const int ids[] = {4, 1, 4};
         return run(rng, [&](Tape<double>& t) { return ops::embed(t, table, std::span<const int>(ids)); }, {table}, s);
       }},
      {"add_broadcast",
       [](std::uint64_t s) {
         Rng rng(s);
         auto m = rand_var({2, 3, 4}, rng);
         auto q = rand_var({2, 4}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::add_broadcast(t, m, q); }, {m, q}, s);
       }},
      {"weighted_sum",
       [](std::uint64_t s) {
         Rng rng(s);
         auto w = rand_var({2, 3}, rng);
         auto m = rand_var({2, 3, 4}, rng);
         return run(rng, [&](Tape<double>& t) { return ops::weighted_sum(t, w, m); }, {w, m}, s);
       }},
      {"dropout",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({4, 6}, rng);
         return run(
             rng,
             [&](Tape<double>& t) {
               Rng mask(s + 1);
               return ops::dropout(t, x, 0.3, true, mask);
             },
             {x}, s);
       }},
      {"batchnorm",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({2, 3, 3, 2}, rng);
         auto g = rand_var({2}, rng, 0.5, 1.5);
         auto b = rand_var({2}, rng);
         Tensor<double> rm({2}), rv({2}, 1.0);
         ops::BatchNormOptions train;
         train.update_stats = false;
         ops::BatchNormOptions eval;
         eval.training = false;
         return detail::worst(
             {run(rng, [&](Tape<double>& t) { return ops::batchnorm2d(t, x, g, b, {&rm, &rv}, train); }, {x, g, b}, s),
              run(rng, [&](Tape<double>& t) { return ops::batchnorm2d(t, x, g, b, {&rm, &rv}, eval); }, {x, g, b}, s)});
       }},
      {"lstm_step",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = rand_var({2, 3}, rng);
         auto h = rand_var({2, 4}, rng);
         auto c = rand_var({2, 4}, rng);
         auto w = rand_var({16, 7}, rng);
         auto b = rand_var({16}, rng);
         return run(
             rng,
             [&](Tape<double>& t) {
               auto [h1, c1] = ops::lstm_step(t, x, h, c, w, b);
               return ops::concat(t, {h1, c1}, 1);
             },
             {x, h, c, w, b}, s);
       }},
      {"cross_entropy",
       [](std::uint64_t s) {
         Rng rng(s);
         auto logits = rand_var({4, 6}, rng, -3, 3);
         static const int tg[] = {0, 5, 2, 3};
         auto a = finite_diff_check([&](Tape<double>& t) { return ops::cross_entropy_seq(t, logits, tg, 2); },
                                    {logits}, {24, 1e-5, s});
         auto b = finite_diff_check([&](Tape<double>& t) { return ops::cross_entropy(t, logits, tg); }, {logits},
                                    {24, 1e-5, s});
         return detail::worst({a, b});
       }},
  };
  return reg;
}

inline model::ModelConfig tiny_model_config() {
  model::ModelConfig c;
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

// Teacher-forced loss of the whole model (encoder in training mode with a
// replayed dropout mask) in double precision; aux head excluded.
inline GradCheckResult full_model(std::uint64_t seed, int samples = 200) {
  const auto c = tiny_model_config();
  model::Model<double> m = model::Model<float>(c, seed).cast<double>();
  Rng rng(derive_seed(seed, 0x9c));
  Tensor<double> img({2, c.height, c.width, 1});
  for (auto& x : img.values()) x = uniform01(rng);
  const VarD images(std::move(img));
  const std::vector<int> keys = {0, 1};
  const std::vector<std::string> values = {"INV-7", "3.5"};
  auto loss = [&](Tape<double>& tape) {
    Rng drop(derive_seed(seed, 0xd0));
    auto mem = m.encode(tape, images, model::Mode::Train, &drop);
    return m.sequence_loss(tape, mem, keys, values).loss;
  };
  std::vector<VarD> params;
  for (const auto& p : m.params())
    if (p.name.rfind("aux.", 0) != 0) params.push_back(p.var);
  return finite_diff_check(loss, params, {samples, 1e-5, seed});
}

}  // namespace keyread::gradcheck
