#pragma once

#include <cstdint>

#include "calseg/bunet.hpp"
#include "calseg/datastore.hpp"

namespace calseg {

inline constexpr std::size_t kDefaultEnsembleSize = 40;

struct InferenceResult {
  ImageMap probability;  // per-pixel mean over passes
  ImageMap uncertainty;  // per-pixel population variance over passes
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

/// n eval-mode flipout passes, pass i seeded with split_seed(seed, i).
/// Passes are reduced in index order, so the result does not depend on the
/// order in which they ran.
InferenceResult mc_ensemble(const BUNet& net, const FeatureStack& x, std::size_t n = kDefaultEnsembleSize,
                            std::uint64_t seed = 0);

/// Single stochastic pass i of mc_ensemble (probabilities, H x W).
ImageMap ensemble_pass(const BUNet& net, const FeatureStack& x, std::uint64_t seed, std::size_t index);

/// 1 where prob > threshold.
MaskMap binarize(const ImageMap& prob, double threshold = 0.5);

Json inference_sidecar(const InferenceResult& r, double threshold);

}  // namespace calseg
