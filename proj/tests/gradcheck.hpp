#pragma once
// Central finite-difference gradient checks for the double-precision engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "calseg/autodiff.hpp"

namespace gradcheck {

using DTensor = calseg::ad::BasicTensor<double>;
using DVar = calseg::ad::BasicVar<double>;
using DTape = calseg::ad::BasicTape<double>;
using Build = std::function<DVar(DTape&, const std::vector<DVar>&)>;

inline DTensor random_tensor(calseg::ad::Shape shape, std::mt19937_64& rng, double scale = 1.0,
                             double min_abs = 0.0) {
  DTensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) {
    do v = n(rng);
    while (std::abs(v) < min_abs);
  }
  return t;
}

struct Result {
  double max_rel = 0;
  std::size_t checked = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Checks d/dx of sum(build(x) * R) for a fixed random R, over every element
// of every input.
inline Result check(const Build& build, const std::vector<DTensor>& inputs, std::uint64_t seed, double h = 1e-3,
                    double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  DTensor weights;
  auto eval = [&](const std::vector<DTensor>& xs, std::vector<DTensor>* grads) {
    DTape tape;
    std::vector<DVar> vars;
    for (const auto& x : xs) vars.emplace_back(x, grads != nullptr);
    DVar out = build(tape, vars);
    if (weights.shape() != out.shape()) weights = random_tensor(out.shape(), rng);
    DVar loss = calseg::ad::sum(tape, calseg::ad::mul(tape, out, DVar(weights)));
    const double value = loss.value()[0];
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return value;
  };

  std::vector<DTensor> analytic;
  eval(inputs, &analytic);
  Result r;
  std::vector<DTensor> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k)
    for (std::size_t i = 0; i < xs[k].numel(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double fp = eval(xs, nullptr);
      xs[k][i] = orig - h;
      const double fm = eval(xs, nullptr);
      xs[k][i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      r.max_rel = std::max(r.max_rel, rel_error(analytic[k][i], numeric, floor));
      ++r.checked;
    }
  return r;
}

}  // namespace gradcheck
