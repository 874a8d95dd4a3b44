#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "keyread/numcore/random.hpp"
#include "keyread/numcore/tensor.hpp"

namespace keyread {

struct GradCheckOptions {
  int samples = 50;
  double step = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Compares reverse-mode gradients of `loss_fn` against central differences on
// a random sample of parameter coordinates. loss_fn must be deterministic and
// record its graph on the tape it is handed.
inline GradCheckResult finite_diff_check(const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                         const std::vector<Var<double>>& params,
                                         const GradCheckOptions& opt = {}) {
  require(!params.empty(), "finite_diff_check: no parameters");
  for (const auto& p : params) p.zero_grad();
  Tape<double> tape;
  const Var<double> loss = loss_fn(tape);
  if (!std::isfinite(loss.value()[0])) throw Error("finite_diff_check: loss is not finite");
  tape.backward(loss);

  auto eval = [&] {
    Tape<double> off(false);
    const double v = loss_fn(off).value()[0];
    if (!std::isfinite(v)) throw Error("finite_diff_check: perturbed loss is not finite");
    return v;
  };

  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  Rng rng(opt.seed);
  GradCheckResult result;
  const int count = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opt.samples), total));
  std::vector<std::size_t> picks;
  if (static_cast<std::size_t>(count) == total) {
    for (std::size_t i = 0; i < total; ++i) picks.push_back(i);
  } else {
    for (int i = 0; i < count; ++i) picks.push_back(rng() % total);
  }
  for (std::size_t flat : picks) {
    std::size_t k = 0;
    while (flat >= params[k].size()) flat -= params[k++].size();
    auto& values = params[k].node()->value;
    const double analytic = params[k].grad()[flat];
    const double saved = values[flat];
    values[flat] = saved + opt.step;
    const double up = eval();
    values[flat] = saved - opt.step;
    const double down = eval();
    values[flat] = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace keyread
