#include "calseg/groundtruth.hpp"

#include <algorithm>
#include <cmath>

#include "calseg/errors.hpp"
#include "calseg/features.hpp"

namespace calseg {

std::size_t otsu_bin(float v, double lo, double hi) {
  const double u = (double(v) - lo) / (hi - lo) * double(kOtsuBins);
  return std::min<std::size_t>(kOtsuBins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(u))));
}

OtsuResult otsu_threshold(const ImageMap& map) {
  if (map.size() == 0) throw DegenerateInputError("otsu: empty map");
  const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(), map.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) throw DegenerateInputError("otsu: constant map");

  OtsuResult r;
  for (float v : map.values()) ++r.histogram[otsu_bin(v, lo, hi)];

  std::uint64_t total_count = 0, total_sum = 0;
  for (std::size_t b = 0; b < kOtsuBins; ++b) {
    total_count += r.histogram[b];
    total_sum += b * r.histogram[b];
  }

  // Bin indices stand in for intensities, so every partial sum is an exact
  // integer. With n0, n1 the class counts and s0, s1 their index sums,
  //   w0 w1 (mu0 - mu1)^2 = (s0 n1 - s1 n0)^2 / (n0 n1 N^2),
  // which is compared exactly as a fraction while it fits in 128 bits.
  const bool exact = total_count <= (std::uint64_t{1} << 18);
  unsigned __int128 best_num = 0, best_den = 1;
  long double best_ld = -1;
  std::uint64_t n0 = 0, s0 = 0;
  std::size_t best_k = 1;
  bool found = false;
  for (std::size_t k = 1; k < kOtsuBins; ++k) {
    n0 += r.histogram[k - 1];
    s0 += (k - 1) * r.histogram[k - 1];
    const std::uint64_t n1 = total_count - n0, s1 = total_sum - s0;
    // An empty class scores 0.
    const __int128 d = static_cast<__int128>(s0) * n1 - static_cast<__int128>(s1) * n0;
    const unsigned __int128 num = static_cast<unsigned __int128>(d < 0 ? -d : d);
    const unsigned __int128 den = (n0 == 0 || n1 == 0) ? 1 : static_cast<unsigned __int128>(n0) * n1;
    bool better;
    if (exact) {
      const unsigned __int128 num2 = num * num;
      better = !found || num2 * best_den > best_num * den;
      if (better) best_num = num2, best_den = den;
    } else {
      const long double v = static_cast<long double>(num) * static_cast<long double>(num) / static_cast<long double>(den);
      better = !found || v > best_ld;
      if (better) best_ld = v;
    }
    if (better) found = true, best_k = k;
  }

  // Between-class variance of the chosen split, in index units.
  double best = 0;
  {
    std::uint64_t c0 = 0, t0 = 0;
    for (std::size_t b = 0; b < best_k; ++b) c0 += r.histogram[b], t0 += b * r.histogram[b];
    const std::uint64_t c1 = total_count - c0;
    if (c0 > 0 && c1 > 0) {
      const double N = double(total_count);
      const double mu0 = double(t0) / double(c0), mu1 = double(total_sum - t0) / double(c1);
      best = (double(c0) / N) * (double(c1) / N) * (mu0 - mu1) * (mu0 - mu1);
    }
  }

  const double bin_width = (hi - lo) / double(kOtsuBins);
  r.threshold_index = best_k;
  r.threshold = lo + double(best_k) * bin_width;
  r.between_class_variance = best * bin_width * bin_width;
  return r;
}

MaskMap make_groundtruth(const Block& block) {
  const ImageMap var = variance_map(block);
  const OtsuResult otsu = otsu_threshold(var);
  MaskMap mask(block.height(), block.width());
  for (std::size_t p = 0; p < var.size(); ++p) mask.values()[p] = var.values()[p] > otsu.threshold ? 1 : 0;
  return mask;
}

}  // namespace calseg
