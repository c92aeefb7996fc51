#pragma once

#include <array>
#include <cstdint>

#include "calseg/datastore.hpp"

namespace calseg {

inline constexpr std::size_t kOtsuBins = 256;

struct OtsuResult {
  /// Value of the chosen bin boundary: min + index * (max - min) / 256.
  double threshold = 0;
  /// Boundary index in [1, 255]; bins [0, index) form the background class.
  std::size_t threshold_index = 0;
  /// w0 * w1 * (mu0 - mu1)^2 in the map's value units.
  double between_class_variance = 0;
  std::array<std::uint64_t, kOtsuBins> histogram{};
};

/// Bin of `v` when [lo, hi] is split into 256 equal bins; hi maps to bin 255.
std::size_t otsu_bin(float v, double lo, double hi);

/// Histogram Otsu. Ties resolve to the lowest boundary.
/// Throws DegenerateInputError for a constant map.
OtsuResult otsu_threshold(const ImageMap& map);

/// Foreground where the block's temporal variance exceeds its Otsu threshold.
MaskMap make_groundtruth(const Block& block);

}  // namespace calseg
