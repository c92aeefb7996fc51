#pragma once

// Per-pixel spatio-temporal features: the temporal variance summary map and
// Pearson correlations of each pixel's trace with 12 fixed neighbors.

#include <array>
#include <span>
#include <vector>

#include "calseg/datastore.hpp"

namespace calseg {

struct Offset {
  int dr;
  int dc;
};

/// All nonzero offsets with |dr| + |dc| <= 2, lexicographic by (dr, dc).
/// Correlation channel i always refers to kNeighborOffsets[i].
inline constexpr std::array<Offset, 12> kNeighborOffsets{{
    {-2, 0}, {-1, -1}, {-1, 0}, {-1, 1}, {0, -2}, {0, -1}, {0, 1}, {0, 2}, {1, -1}, {1, 0}, {1, 1}, {2, 0},
}};

/// Population (1/T) temporal variance per pixel.
ImageMap variance_map(const Block& block);

/// Temporal mean per pixel. Diagnostic only; not a network input.
ImageMap mean_map(const Block& block);

/// Pearson correlation of two equal-length series, clamped to [-1, 1].
/// Returns 0 when either series is constant. Throws ShapeError on length
/// mismatch or fewer than 2 samples.
double pearson(std::span<const double> x, std::span<const double> y);
double pearson(std::span<const float> x, std::span<const float> y);

/// 12 x H x W correlations with kNeighborOffsets; out-of-image neighbors give 0.
Array3 correlation_stack(const Block& block);

/// (v - min) / (max - min); all zeros for a constant input.
std::vector<float> minmax_normalize_channel(std::span<const float> values);

enum class CorrelationStrategy {
  /// 12 spatial neighbors over the full series.
  kNeighborsFullSeries,
};

FeatureStack build_feature_stack(const Block& block,
                                 CorrelationStrategy strategy = CorrelationStrategy::kNeighborsFullSeries);

}  // namespace calseg
