#pragma once

// Differentiable operations over Var<T>. Every op computes its value eagerly
// and, when any input requires a gradient, records one adjoint closure on the
// tape. Adjoints accumulate (+=) so a value used by several consumers receives
// the sum of their contributions.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "keyread/numcore/errors.hpp"
#include "keyread/numcore/random.hpp"
#include "keyread/numcore/tensor.hpp"

namespace keyread::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

namespace detail {

template <typename T>
Var<T> make_output(Tape<T>& tape, Tensor<T> value, std::initializer_list<const Var<T>*> inputs) {
  bool needs = false;
  if (tape.enabled()) {
    for (const Var<T>* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  }
  return Var<T>(std::move(value), needs);
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
std::span<const T> cspan(std::span<T> s) {
  return {s.data(), s.size()};
}

inline int rows_of(const Shape& shape) {
  int r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

}  // namespace detail

enum class Activation { Relu, Tanh, Sigmoid };

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> v = a.value();
  detail::accumulate<T>(v.values(), b.value().values());
  auto out = detail::make_output(tape, std::move(v), {&a, &b});
  if (out.requires_grad()) {
    tape.record([a, b, out] {
      if (!out.has_grad()) return;
      auto g = detail::cspan(out.grad());
      if (a.requires_grad()) detail::accumulate(a.grad(), g);
      if (b.requires_grad()) detail::accumulate(b.grad(), g);
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> v = a.value();
  for (auto& x : v.values()) x *= factor;
  auto out = detail::make_output(tape, std::move(v), {&a});
  if (out.requires_grad()) {
    tape.record([a, out, factor] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
    });
  }
  return out;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& a) {
  T total = 0;
  for (T x : a.value().values()) total += x;
  auto out = detail::make_output(tape, Tensor<T>({1}, {total}), {&a});
  if (out.requires_grad()) {
    tape.record([a, out] {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& x : a.grad()) x += g;
    });
  }
  return out;
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& a, Shape shape) {
  auto out = detail::make_output(tape, a.value().reshaped(std::move(shape)), {&a});
  if (out.requires_grad()) {
    tape.record([a, out] {
      if (!out.has_grad()) return;
      detail::accumulate(a.grad(), detail::cspan(out.grad()));
    });
  }
  return out;
}

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& a, Activation kind) {
  Tensor<T> v = a.value();
  for (auto& x : v.values()) {
    switch (kind) {
      case Activation::Relu: x = x > T(0) ? x : T(0); break;
      case Activation::Tanh: x = std::tanh(x); break;
      case Activation::Sigmoid: x = T(1) / (T(1) + std::exp(-x)); break;
    }
  }
  auto out = detail::make_output(tape, std::move(v), {&a});
  if (out.requires_grad()) {
    tape.record([a, out, kind] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      const auto y = out.value().values();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        switch (kind) {
          case Activation::Relu: ga[i] += y[i] > T(0) ? g[i] : T(0); break;
          case Activation::Tanh: ga[i] += g[i] * (T(1) - y[i] * y[i]); break;
          case Activation::Sigmoid: ga[i] += g[i] * y[i] * (T(1) - y[i]); break;
        }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& a) { return activation(tape, a, Activation::Relu); }
template <typename T>
Var<T> tanh(Tape<T>& tape, const Var<T>& a) { return activation(tape, a, Activation::Tanh); }
template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& a) { return activation(tape, a, Activation::Sigmoid); }

// Softmax over the last axis, row by row.
template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& a) {
  const int n = a.shape().back();
  const int rows = detail::rows_of(a.shape());
  Tensor<T> v = a.value();
  for (int r = 0; r < rows; ++r) {
    T* x = v.data() + static_cast<std::size_t>(r) * n;
    const T mx = *std::max_element(x, x + n);
    T total = 0;
    for (int i = 0; i < n; ++i) total += (x[i] = std::exp(x[i] - mx));
    for (int i = 0; i < n; ++i) x[i] /= total;
  }
  auto out = detail::make_output(tape, std::move(v), {&a});
  if (out.requires_grad()) {
    tape.record([a, out, n, rows] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      const auto y = out.value().values();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * n;
        T dot = 0;
        for (int i = 0; i < n; ++i) dot += g[off + i] * y[off + i];
        for (int i = 0; i < n; ++i) ga[off + i] += y[off + i] * (g[off + i] - dot);
      }
    });
  }
  return out;
}

// y = x·Wᵀ + b applied over the last axis of x. `bias` may be undefined.
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}) {
  require(weight.value().rank() == 2, "linear: weight must be a matrix, got " + shape_str(weight.shape()));
  const int m = weight.shape()[0];
  const int n = weight.shape()[1];
  require(x.shape().back() == n, "linear: input extent " + std::to_string(x.shape().back()) +
                                     " does not match weight " + shape_str(weight.shape()));
  if (bias.defined()) require(bias.shape() == Shape{m}, "linear: bias shape " + shape_str(bias.shape()));
  const int rows = detail::rows_of(x.shape());
  Shape out_shape = x.shape();
  out_shape.back() = m;
  Tensor<T> v(out_shape);
  MatMap<T> y(v.data(), rows, m);
  CMatMap<T> xm(x.value().data(), rows, n);
  CMatMap<T> w(weight.value().data(), m, n);
  y.noalias() = xm * w.transpose();
  if (bias.defined()) y.rowwise() += CVecMap<T>(bias.value().data(), m).transpose();
  auto out = detail::make_output(tape, std::move(v), {&x, &weight, &bias});
  if (out.requires_grad()) {
    tape.record([x, weight, bias, out, rows, m, n] {
      if (!out.has_grad()) return;
      CMatMap<T> g(out.grad().data(), rows, m);
      if (x.requires_grad()) {
        MatMap<T>(x.grad().data(), rows, n).noalias() += g * CMatMap<T>(weight.value().data(), m, n);
      }
      if (weight.requires_grad()) {
        MatMap<T>(weight.grad().data(), m, n).noalias() += g.transpose() * CMatMap<T>(x.value().data(), rows, n);
      }
      if (bias.defined() && bias.requires_grad()) {
        VecMap<T>(bias.grad().data(), m) += g.colwise().sum().transpose();
      }
    });
  }
  return out;
}

// Contraction of the last axis of x with a vector: x[..., n]·v[n] -> x[...].
template <typename T>
Var<T> dot_last(Tape<T>& tape, const Var<T>& x, const Var<T>& v) {
  const int n = x.shape().back();
  require(v.shape() == Shape{n}, "dot_last: vector shape " + shape_str(v.shape()) + " vs input " + shape_str(x.shape()));
  require(x.value().rank() >= 2, "dot_last: input needs rank >= 2");
  const int rows = detail::rows_of(x.shape());
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<T> y(out_shape);
  VecMap<T>(y.data(), rows).noalias() = CMatMap<T>(x.value().data(), rows, n) * CVecMap<T>(v.value().data(), n);
  auto out = detail::make_output(tape, std::move(y), {&x, &v});
  if (out.requires_grad()) {
    tape.record([x, v, out, rows, n] {
      if (!out.has_grad()) return;
      CVecMap<T> g(out.grad().data(), rows);
      if (x.requires_grad()) {
        MatMap<T>(x.grad().data(), rows, n).noalias() += g * CVecMap<T>(v.value().data(), n).transpose();
      }
      if (v.requires_grad()) {
        VecMap<T>(v.grad().data(), n).noalias() += CMatMap<T>(x.value().data(), rows, n).transpose() * g;
      }
    });
  }
  return out;
}

// x[B, P, D] + q[B, D] broadcast over P.
template <typename T>
Var<T> add_broadcast(Tape<T>& tape, const Var<T>& x, const Var<T>& q) {
  require(x.value().rank() == 3 && q.value().rank() == 2 && x.shape()[0] == q.shape()[0] &&
              x.shape()[2] == q.shape()[1],
          "add_broadcast: shapes " + shape_str(x.shape()) + " and " + shape_str(q.shape()));
  const int b = x.shape()[0], p = x.shape()[1], d = x.shape()[2];
  Tensor<T> v = x.value();
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < p; ++j) {
      T* row = v.data() + (static_cast<std::size_t>(i) * p + j) * d;
      const T* qr = q.value().data() + static_cast<std::size_t>(i) * d;
      for (int k = 0; k < d; ++k) row[k] += qr[k];
    }
  auto out = detail::make_output(tape, std::move(v), {&x, &q});
  if (out.requires_grad()) {
    tape.record([x, q, out, b, p, d] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) detail::accumulate(x.grad(), detail::cspan(g));
      if (q.requires_grad()) {
        auto gq = q.grad();
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < p; ++j)
            for (int k = 0; k < d; ++k) gq[static_cast<std::size_t>(i) * d + k] += g[(static_cast<std::size_t>(i) * p + j) * d + k];
      }
    });
  }
  return out;
}

// Batched weighted sum: w[B, P], m[B, P, E] -> Σ_p w[b,p]·m[b,p,:] of shape [B, E].
template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& w, const Var<T>& m) {
  require(w.value().rank() == 2 && m.value().rank() == 3 && w.shape()[0] == m.shape()[0] &&
              w.shape()[1] == m.shape()[1],
          "weighted_sum: shapes " + shape_str(w.shape()) + " and " + shape_str(m.shape()));
  const int b = m.shape()[0], p = m.shape()[1], e = m.shape()[2];
  Tensor<T> v({b, e});
  for (int i = 0; i < b; ++i) {
    CMatMap<T> mi(m.value().data() + static_cast<std::size_t>(i) * p * e, p, e);
    CVecMap<T> wi(w.value().data() + static_cast<std::size_t>(i) * p, p);
    VecMap<T>(v.data() + static_cast<std::size_t>(i) * e, e).noalias() = mi.transpose() * wi;
  }
  auto out = detail::make_output(tape, std::move(v), {&w, &m});
  if (out.requires_grad()) {
    tape.record([w, m, out, b, p, e] {
      if (!out.has_grad()) return;
      for (int i = 0; i < b; ++i) {
        CVecMap<T> g(out.grad().data() + static_cast<std::size_t>(i) * e, e);
        if (w.requires_grad()) {
          CMatMap<T> mi(m.value().data() + static_cast<std::size_t>(i) * p * e, p, e);
          VecMap<T>(w.grad().data() + static_cast<std::size_t>(i) * p, p).noalias() += mi * g;
        }
        if (m.requires_grad()) {
          CVecMap<T> wi(w.value().data() + static_cast<std::size_t>(i) * p, p);
          MatMap<T>(m.grad().data() + static_cast<std::size_t>(i) * p * e, p, e).noalias() += wi * g.transpose();
        }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> concat(Tape<T>& tape, const std::vector<Var<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no parts");
  const int rank = parts[0].value().rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.value().rank() == rank, "concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      require(i == axis || p.shape()[i] == parts[0].shape()[i],
              "concat: off-axis extents differ, " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  const std::size_t out_block = out_shape[axis] * inner;
  Tensor<T> v(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t block = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.value().data() + o * block, block, v.data() + o * out_block + offset);
    }
    offsets.push_back(offset);
    offset += block;
  }
  bool needs = false;
  if (tape.enabled())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  Var<T> out(std::move(v), needs);
  if (needs) {
    tape.record([parts, out, offsets, outer, inner, out_block, axis] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        const std::size_t block = parts[k].shape()[axis] * inner;
        auto gp = parts[k].grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += g[o * out_block + offsets[k] + i];
      }
    });
  }
  return out;
}

// Row lookup: table[V, D], ids -> [ids.size(), D].
template <typename T>
Var<T> embed(Tape<T>& tape, const Var<T>& table, std::span<const int> ids) {
  require(table.value().rank() == 2, "embed: table must be a matrix");
  require(!ids.empty(), "embed: no indices");
  const int vocab = table.shape()[0], d = table.shape()[1];
  Tensor<T> v({static_cast<int>(ids.size()), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= vocab) {
      throw Error("embed: index " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[r]) * d, d, v.data() + r * d);
  }
  auto out = detail::make_output(tape, std::move(v), {&table});
  if (out.requires_grad()) {
    std::vector<int> idx(ids.begin(), ids.end());
    tape.record([table, out, idx, d] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int k = 0; k < d; ++k) gt[static_cast<std::size_t>(idx[r]) * d + k] += g[r * d + k];
    });
  }
  return out;
}

template <typename T>
Var<T> embed(Tape<T>& tape, const Var<T>& table, int index) {
  const int ids[1] = {index};
  auto rows = embed(tape, table, std::span<const int>(ids, 1));
  return reshape(tape, rows, Shape{table.shape()[1]});
}

// Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is the identity.
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double p, bool training, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = uniform01(rng) < p ? T(0) : keep_scale;
  Tensor<T> v = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) v[i] *= mask[i];
  auto out = detail::make_output(tape, std::move(v), {&x});
  if (out.requires_grad()) {
    tape.record([x, out, mask = std::move(mask)] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
};

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.9;  // weight of the previous running value
  bool training = true;
  bool update_stats = true;
};

// Per-channel normalization of [..., C] over every other axis.
template <typename T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T> stats,
                   const BatchNormOptions& opt) {
  const int c = x.shape().back();
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "batchnorm2d: gamma/beta must have " + std::to_string(c) + " entries");
  require(stats.mean && stats.var && stats.mean->size() == static_cast<std::size_t>(c) &&
              stats.var->size() == static_cast<std::size_t>(c),
          "batchnorm2d: running statistics missing or mis-sized");
  const int rows = detail::rows_of(x.shape());
  const T* xv = x.value().data();
  std::vector<T> mean(c, T(0)), invstd(c, T(0));
  if (opt.training) {
    std::vector<double> acc(c, 0.0), acc2(c, 0.0);
    for (int r = 0; r < rows; ++r)
      for (int k = 0; k < c; ++k) acc[k] += xv[static_cast<std::size_t>(r) * c + k];
    for (int k = 0; k < c; ++k) acc[k] /= rows;
    for (int r = 0; r < rows; ++r)
      for (int k = 0; k < c; ++k) {
        const double dlt = xv[static_cast<std::size_t>(r) * c + k] - acc[k];
        acc2[k] += dlt * dlt;
      }
    for (int k = 0; k < c; ++k) {
      const double var = acc2[k] / rows;
      mean[k] = static_cast<T>(acc[k]);
      invstd[k] = static_cast<T>(1.0 / std::sqrt(var + opt.epsilon));
      if (opt.update_stats) {
        const double unbiased = rows > 1 ? acc2[k] / (rows - 1) : var;
        auto& rm = (*stats.mean)[k];
        auto& rv = (*stats.var)[k];
        rm = static_cast<T>(opt.momentum * rm + (1.0 - opt.momentum) * acc[k]);
        rv = static_cast<T>(opt.momentum * rv + (1.0 - opt.momentum) * unbiased);
      }
    }
  } else {
    for (int k = 0; k < c; ++k) {
      mean[k] = (*stats.mean)[k];
      invstd[k] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*stats.var)[k]) + opt.epsilon));
    }
  }
  Tensor<T> xhat(x.shape());
  Tensor<T> v(x.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (int r = 0; r < rows; ++r)
    for (int k = 0; k < c; ++k) {
      const std::size_t i = static_cast<std::size_t>(r) * c + k;
      xhat[i] = (xv[i] - mean[k]) * invstd[k];
      v[i] = gm[k] * xhat[i] + bt[k];
    }
  auto out = detail::make_output(tape, std::move(v), {&x, &gamma, &beta});
  if (out.requires_grad()) {
    tape.record([x, gamma, beta, out, xhat = std::move(xhat), invstd = std::move(invstd), rows, c,
                 training = opt.training] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
      for (int r = 0; r < rows; ++r)
        for (int k = 0; k < c; ++k) {
          const std::size_t i = static_cast<std::size_t>(r) * c + k;
          sum_g[k] += g[i];
          sum_gx[k] += g[i] * xhat[i];
        }
      if (gamma.requires_grad()) detail::accumulate(gamma.grad(), std::span<const T>(sum_gx));
      if (beta.requires_grad()) detail::accumulate(beta.grad(), std::span<const T>(sum_g));
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      const T* gm = gamma.value().data();
      for (int r = 0; r < rows; ++r)
        for (int k = 0; k < c; ++k) {
          const std::size_t i = static_cast<std::size_t>(r) * c + k;
          if (training) {
            gx[i] += gm[k] * invstd[k] / rows * (rows * g[i] - sum_g[k] - xhat[i] * sum_gx[k]);
          } else {
            gx[i] += g[i] * gm[k] * invstd[k];
          }
        }
    });
  }
  return out;
}

// "Same"-padded cross-correlation. input [N,]H,W,Cin; kernel kh,kw,Cin,Cout;
// `bias` may be undefined.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, int stride,
              int dilation) {
  const int rank = input.value().rank();
  require(rank == 3 || rank == 4, "conv2d: input must be [H,W,C] or [N,H,W,C], got " + shape_str(input.shape()));
  require(kernel.value().rank() == 4, "conv2d: kernel must be [kh,kw,Cin,Cout]");
  require(stride > 0 && dilation > 0, "conv2d: stride and dilation must be positive");
  const int n = rank == 4 ? input.shape()[0] : 1;
  const int h = input.shape()[rank - 3], w = input.shape()[rank - 2], cin = input.shape()[rank - 1];
  const int kh = kernel.shape()[0], kw = kernel.shape()[1], cout = kernel.shape()[3];
  require(kernel.shape()[2] == cin, "conv2d: kernel expects " + std::to_string(kernel.shape()[2]) +
                                        " input channels, input has " + std::to_string(cin));
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: same padding needs odd kernel extents");
  if (bias.defined()) require(bias.shape() == Shape{cout}, "conv2d: bias must have " + std::to_string(cout) + " entries");
  if (h % stride != 0 || w % stride != 0) {
    throw Error("conv2d: spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
                " not divisible by stride " + std::to_string(stride));
  }
  const int ho = h / stride, wo = w / stride;
  const int pad_y = dilation * (kh - 1) / 2, pad_x = dilation * (kw - 1) / 2;
  const int k = kh * kw * cin;
  const int pixels = n * ho * wo;

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(pixels) * k, T(0));
  const T* xv = input.value().data();
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T* row = cols->data() + (static_cast<std::size_t>(b * ho + oy) * wo + ox) * k;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky * dilation - pad_y;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx * dilation - pad_x;
            if (ix < 0 || ix >= w) continue;
            std::copy_n(xv + (static_cast<std::size_t>(b * h + iy) * w + ix) * cin, cin,
                        row + (ky * kw + kx) * cin);
          }
        }
      }

  Shape out_shape = rank == 4 ? Shape{n, ho, wo, cout} : Shape{ho, wo, cout};
  Tensor<T> v(out_shape);
  MatMap<T> y(v.data(), pixels, cout);
  y.noalias() = CMatMap<T>(cols->data(), pixels, k) * CMatMap<T>(kernel.value().data(), k, cout);
  if (bias.defined()) y.rowwise() += CVecMap<T>(bias.value().data(), cout).transpose();

  auto out = detail::make_output(tape, std::move(v), {&input, &kernel, &bias});
  if (out.requires_grad()) {
    tape.record([input, kernel, bias, out, cols, n, h, w, cin, kh, kw, cout, ho, wo, pad_y, pad_x, k, pixels,
                 stride, dilation] {
      if (!out.has_grad()) return;
      CMatMap<T> g(out.grad().data(), pixels, cout);
      if (kernel.requires_grad()) {
        MatMap<T>(kernel.grad().data(), k, cout).noalias() += CMatMap<T>(cols->data(), pixels, k).transpose() * g;
      }
      if (bias.defined() && bias.requires_grad()) VecMap<T>(bias.grad().data(), cout) += g.colwise().sum().transpose();
      if (!input.requires_grad()) return;
      RowMat<T> dcols = g * CMatMap<T>(kernel.value().data(), k, cout).transpose();
      auto gx = input.grad();
      for (int b = 0; b < n; ++b)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const T* row = dcols.data() + (static_cast<std::size_t>(b * ho + oy) * wo + ox) * k;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride + ky * dilation - pad_y;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride + kx * dilation - pad_x;
                if (ix < 0 || ix >= w) continue;
                T* dst = gx.data() + (static_cast<std::size_t>(b * h + iy) * w + ix) * cin;
                const T* src = row + (ky * kw + kx) * cin;
                for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
              }
            }
          }
    });
  }
  return out;
}

// LSTM cell update from precomputed gate preactivations [B, 4·Dh] ordered
// (input, forget, candidate, output). Returns {h, c}.
template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell(Tape<T>& tape, const Var<T>& gates, const Var<T>& c_prev) {
  require(gates.value().rank() == 2 && c_prev.value().rank() == 2, "lstm_cell: expects batched [B, .] inputs");
  const int b = gates.shape()[0];
  const int dh = c_prev.shape()[1];
  require(gates.shape()[1] == 4 * dh && c_prev.shape()[0] == b,
          "lstm_cell: gates " + shape_str(gates.shape()) + " incompatible with state " + shape_str(c_prev.shape()));
  auto act = std::make_shared<std::vector<T>>(gates.size());
  Tensor<T> hv({b, dh}), cv({b, dh});
  for (int r = 0; r < b; ++r) {
    const T* z = gates.value().data() + static_cast<std::size_t>(r) * 4 * dh;
    T* a = act->data() + static_cast<std::size_t>(r) * 4 * dh;
    for (int j = 0; j < dh; ++j) {
      a[j] = T(1) / (T(1) + std::exp(-z[j]));
      a[dh + j] = T(1) / (T(1) + std::exp(-z[dh + j]));
      a[2 * dh + j] = std::tanh(z[2 * dh + j]);
      a[3 * dh + j] = T(1) / (T(1) + std::exp(-z[3 * dh + j]));
      const std::size_t s = static_cast<std::size_t>(r) * dh + j;
      cv[s] = a[dh + j] * c_prev.value()[s] + a[j] * a[2 * dh + j];
      hv[s] = a[3 * dh + j] * std::tanh(cv[s]);
    }
  }
  const bool needs = tape.enabled() && (gates.requires_grad() || c_prev.requires_grad());
  Var<T> h(std::move(hv), needs), c(std::move(cv), needs);
  if (needs) {
    tape.record([gates, c_prev, h, c, act, b, dh] {
      if (!h.has_grad() && !c.has_grad()) return;
      auto gh = h.grad();
      auto gc = c.grad();
      std::span<T> gz = gates.requires_grad() ? gates.grad() : std::span<T>{};
      std::span<T> gcp = c_prev.requires_grad() ? c_prev.grad() : std::span<T>{};
      for (int r = 0; r < b; ++r) {
        const T* a = act->data() + static_cast<std::size_t>(r) * 4 * dh;
        for (int j = 0; j < dh; ++j) {
          const std::size_t s = static_cast<std::size_t>(r) * dh + j;
          const T i = a[j], f = a[dh + j], g = a[2 * dh + j], o = a[3 * dh + j];
          const T tc = std::tanh(c.value()[s]);
          const T dc = gc[s] + gh[s] * o * (T(1) - tc * tc);
          if (!gz.empty()) {
            T* dz = gz.data() + static_cast<std::size_t>(r) * 4 * dh;
            dz[j] += dc * g * i * (T(1) - i);
            dz[dh + j] += dc * c_prev.value()[s] * f * (T(1) - f);
            dz[2 * dh + j] += dc * i * (T(1) - g * g);
            dz[3 * dh + j] += gh[s] * tc * o * (T(1) - o);
          }
          if (!gcp.empty()) gcp[s] += dc * f;
        }
      }
    });
  }
  return {h, c};
}

// One LSTM step: gates = [x, h_prev]·Wᵀ + b with W of shape [4·Dh, Din + Dh].
template <typename T>
std::pair<Var<T>, Var<T>> lstm_step(Tape<T>& tape, const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev,
                                    const Var<T>& weight, const Var<T>& bias) {
  require(h_prev.shape() == c_prev.shape(), "lstm_step: h and c shapes differ");
  const int dh = h_prev.shape().back();
  require(weight.value().rank() == 2 && weight.shape()[0] == 4 * dh &&
              weight.shape()[1] == x.shape().back() + dh,
          "lstm_step: weight " + shape_str(weight.shape()) + " does not fit input " + shape_str(x.shape()) +
              " and state " + shape_str(h_prev.shape()));
  const bool batched = x.value().rank() == 2;
  auto xb = batched ? x : reshape(tape, x, Shape{1, x.shape()[0]});
  auto hb = batched ? h_prev : reshape(tape, h_prev, Shape{1, dh});
  auto cb = batched ? c_prev : reshape(tape, c_prev, Shape{1, dh});
  auto gates = linear(tape, concat(tape, {xb, hb}, 1), weight, bias);
  auto [h, c] = lstm_cell(tape, gates, cb);
  if (batched) return {h, c};
  return {reshape(tape, h, Shape{dh}), reshape(tape, c, Shape{dh})};
}

// Σ_rows −log softmax(logits[r])[targets[r]], skipping rows whose target is `ignore`.
template <typename T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> targets, int ignore = -1) {
  const int v = logits.shape().back();
  const int rows = detail::rows_of(logits.shape());
  require(logits.value().rank() >= 1, "cross_entropy: empty logits");
  if (logits.value().rank() == 1) require(targets.size() == 1, "cross_entropy: one target per row");
  else require(static_cast<int>(targets.size()) == rows, "cross_entropy: target count does not match rows");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  double loss = 0;
  for (int r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore) continue;
    if (t < 0 || t >= v) throw Error("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(v) + ")");
    const T* z = logits.value().data() + static_cast<std::size_t>(r) * v;
    T* p = probs->data() + static_cast<std::size_t>(r) * v;
    const T mx = *std::max_element(z, z + v);
    double total = 0;
    for (int i = 0; i < v; ++i) total += (p[i] = std::exp(z[i] - mx));
    for (int i = 0; i < v; ++i) p[i] = static_cast<T>(p[i] / total);
    loss += std::log(total) + mx - z[t];
  }
  auto out = detail::make_output(tape, Tensor<T>({1}, {static_cast<T>(loss)}), {&logits});
  if (out.requires_grad()) {
    std::vector<int> tg(targets.begin(), targets.end());
    tape.record([logits, out, probs, tg = std::move(tg), rows, v, ignore] {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gl = logits.grad();
      for (int r = 0; r < rows; ++r) {
        if (tg[r] == ignore) continue;
        const T* p = probs->data() + static_cast<std::size_t>(r) * v;
        T* d = gl.data() + static_cast<std::size_t>(r) * v;
        for (int i = 0; i < v; ++i) d[i] += g * p[i];
        d[tg[r]] -= g;
      }
    });
  }
  return out;
}

// Sequence loss over logits [T, V]; PAD positions are excluded.
template <typename T>
Var<T> cross_entropy_seq(Tape<T>& tape, const Var<T>& logits, std::span<const int> targets, int pad_id) {
  return cross_entropy(tape, logits, targets, pad_id);
}

}  // namespace keyread::ops
