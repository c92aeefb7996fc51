#include "calseg/features.hpp"

#include <algorithm>
#include <cmath>

#include "calseg/errors.hpp"

namespace calseg {

namespace {

template <typename T>
double pearson_impl(std::span<const T> x, std::span<const T> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: length mismatch");
  if (x.size() < 2) throw ShapeError("pearson: need at least 2 samples");
  const auto constant = [](std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [&](T e) { return e == v.front(); });
  };
  if (constant(x) || constant(y)) return 0.0;

  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  const double denom = std::sqrt(sxx) * std::sqrt(syy);
  if (denom == 0.0) return 0.0;
  return std::clamp(sxy / denom, -1.0, 1.0);
}

}  // namespace

ImageMap mean_map(const Block& block) {
  const std::size_t P = block.pixels(), T = block.n_frames();
  std::vector<double> sum(P, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto f = block.frame(t);
    for (std::size_t p = 0; p < P; ++p) sum[p] += f[p];
  }
  ImageMap out(block.height(), block.width());
  for (std::size_t p = 0; p < P; ++p) out.values()[p] = static_cast<float>(sum[p] / double(T));
  return out;
}

ImageMap variance_map(const Block& block) {
  const std::size_t P = block.pixels(), T = block.n_frames();
  std::vector<double> mean(P, 0.0), acc(P, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto f = block.frame(t);
    for (std::size_t p = 0; p < P; ++p) mean[p] += f[p];
  }
  for (auto& m : mean) m /= double(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto f = block.frame(t);
    for (std::size_t p = 0; p < P; ++p) {
      const double d = f[p] - mean[p];
      acc[p] += d * d;
    }
  }
  ImageMap out(block.height(), block.width());
  for (std::size_t p = 0; p < P; ++p) out.values()[p] = static_cast<float>(acc[p] / double(T));
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) { return pearson_impl(x, y); }
double pearson(std::span<const float> x, std::span<const float> y) { return pearson_impl(x, y); }

Array3 correlation_stack(const Block& block) {
  const std::size_t H = block.height(), W = block.width(), T = block.n_frames(), P = H * W;

  // Centered traces laid out pixel-major so each pair reduction is contiguous.
  std::vector<double> centered(P * T);
  std::vector<double> norm(P, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    double* c = centered.data() + p * T;
    bool constant = true;
    const float first = block.data()[p];
    double mean = 0;
    for (std::size_t t = 0; t < T; ++t) {
      const float v = block.data()[t * P + p];
      constant = constant && v == first;
      mean += v;
    }
    mean /= double(T);
    double ss = 0;
    for (std::size_t t = 0; t < T; ++t) {
      c[t] = constant ? 0.0 : block.data()[t * P + p] - mean;
      ss += c[t] * c[t];
    }
    norm[p] = std::sqrt(ss);
  }

  Array3 out(kNeighborOffsets.size(), H, W);
  for (std::size_t i = 0; i < kNeighborOffsets.size(); ++i) {
    const auto [dr, dc] = kNeighborOffsets[i];
    for (std::size_t h = 0; h < H; ++h) {
      const long nh = long(h) + dr;
      if (nh < 0 || nh >= long(H)) continue;
      for (std::size_t w = 0; w < W; ++w) {
        const long nw = long(w) + dc;
        if (nw < 0 || nw >= long(W)) continue;
        const std::size_t p = h * W + w, q = std::size_t(nh) * W + std::size_t(nw);
        const double denom = norm[p] * norm[q];
        if (denom == 0.0) continue;
        // Reduce in a pair-symmetric order so channel(o) at p equals channel(-o) at p+o bit for bit.
        const double* a = centered.data() + std::min(p, q) * T;
        const double* b = centered.data() + std::max(p, q) * T;
        double dot = 0;
        for (std::size_t t = 0; t < T; ++t) dot += a[t] * b[t];
        out(i, h, w) = static_cast<float>(std::clamp(dot / denom, -1.0, 1.0));
      }
    }
  }
  return out;
}

std::vector<float> minmax_normalize_channel(std::span<const float> values) {
  std::vector<float> out(values.size(), 0.0f);
  if (values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return out;
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<float>(std::clamp((values[i] - lo) / (hi - lo), 0.0, 1.0));
  return out;
}

FeatureStack build_feature_stack(const Block& block, CorrelationStrategy strategy) {
  if (strategy != CorrelationStrategy::kNeighborsFullSeries) throw ConfigError("unsupported correlation strategy");
  const std::size_t H = block.height(), W = block.width();
  FeatureStack stack;
  stack.block_id = block.block_id();
  stack.channels = Array3(kFeatureChannels, H, W);

  const ImageMap var = variance_map(block);
  std::ranges::copy(minmax_normalize_channel(var.values()), stack.channels.channel(0).begin());
  const Array3 corr = correlation_stack(block);
  for (std::size_t i = 0; i < corr.channels(); ++i)
    std::ranges::copy(minmax_normalize_channel(corr.channel(i)), stack.channels.channel(i + 1).begin());
  return stack;
}

}  // namespace calseg
