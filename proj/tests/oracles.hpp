#pragma once
// Independent reference implementations used by the unit and acceptance
// suites. Deliberately naive: no shared code with the library beyond types.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "calseg/datastore.hpp"
#include "calseg/metrics.hpp"

namespace oracle {

inline double naive_variance(const std::vector<double>& x) {
  double m = 0;
  for (double v : x) m += v;
  m /= double(x.size());
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / double(x.size());
}

inline std::vector<double> trace(const calseg::Block& b, std::size_t h, std::size_t w) {
  std::vector<double> t(b.n_frames());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = b.at(i, h, w);
  return t;
}

// Correlation formula evaluated literally, constant series -> 0.
inline double direct_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return double(sxy / std::sqrt(sxx * syy));
}

// Exhaustive Otsu: for every interior boundary k in [1, 255] split the pixels
// by their own bin index and score w0 w1 (mu0 - mu1)^2 as an exact fraction.
// Returns the lowest maximizing k.
inline std::size_t brute_force_otsu_index(const std::vector<float>& values) {
  float lo = values[0], hi = values[0];
  for (float v : values) lo = std::min(lo, v), hi = std::max(hi, v);
  std::vector<std::uint64_t> bins(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = (double(values[i]) - lo) / (double(hi) - lo) * 256.0;
    bins[i] = std::min<std::uint64_t>(255, std::uint64_t(std::max(0.0, std::floor(u))));
  }
  std::size_t best_k = 0;
  unsigned __int128 best_num = 0, best_den = 1;
  for (std::size_t k = 1; k <= 255; ++k) {
    std::uint64_t n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (auto b : bins) {
      if (b < k)
        ++n0, s0 += b;
      else
        ++n1, s1 += b;
    }
    unsigned __int128 num = 0, den = 1;
    if (n0 && n1) {
      __int128 d = __int128(s0) * n1 - __int128(s1) * n0;
      if (d < 0) d = -d;
      num = (unsigned __int128)d * (unsigned __int128)d;
      den = (unsigned __int128)n0 * n1;
    }
    if (best_k == 0 || num * best_den > best_num * den) best_k = k, best_num = num, best_den = den;
  }
  return best_k;
}

inline calseg::Confusion tally(const calseg::MaskMap& pred, const calseg::MaskMap& truth) {
  calseg::Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred.values()[i], t = truth.values()[i];
    c.tp += p && t;
    c.tn += !p && !t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

// Metric formulas written out as printed, with the documented degenerate
// conventions.
inline double dice(const calseg::Confusion& c) {
  const double den = double(c.fn) + double(c.fp) + 2.0 * double(c.tp);
  return den == 0 ? 1.0 : 2.0 * double(c.tp) / den;
}
inline double sensitivity(const calseg::Confusion& c) {
  return c.fn + c.tp == 0 ? 1.0 : double(c.tp) / (double(c.fn) + double(c.tp));
}
inline double accuracy(const calseg::Confusion& c) {
  return (double(c.tp) + double(c.tn)) / double(c.total());
}
inline double mcc(const calseg::Confusion& c) {
  const double n = double(c.total());
  const double s = (double(c.tp) + double(c.fn)) / n;
  const double p = (double(c.tp) + double(c.fp)) / n;
  const double den = p * s * (1 - s) * (1 - p);
  if (den == 0) return 0.0;
  return (double(c.tp) / n - s * p) / std::sqrt(den);
}

// Central finite-difference gradient of f at x, step h.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// KL(N(mu, sigma^2) || N(0, sp^2)) by Simpson quadrature of q ln(q / p) on
// mu +- 12 sigma.
inline double kl_quadrature(double mu, double sigma, double sp, int intervals = 20000) {
  const double a = mu - 12 * sigma, b = mu + 12 * sigma, h = (b - a) / intervals;
  auto f = [&](double w) {
    const double lq = -0.5 * std::log(2 * M_PI * sigma * sigma) - (w - mu) * (w - mu) / (2 * sigma * sigma);
    const double lp = -0.5 * std::log(2 * M_PI * sp * sp) - w * w / (2 * sp * sp);
    return std::exp(lq) * (lq - lp);
  };
  double s = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

inline calseg::MaskMap random_mask(std::size_t h, std::size_t w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution d(p);
  calseg::MaskMap m(h, w);
  for (auto& v : m.values()) v = d(rng);
  return m;
}

}  // namespace oracle
