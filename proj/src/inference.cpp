#include "calseg/inference.hpp"

#include "calseg/errors.hpp"
#include "calseg/rng.hpp"

namespace calseg {

ImageMap ensemble_pass(const BUNet& net, const FeatureStack& x, std::uint64_t seed, std::size_t index) {
  // Eval-mode batch norm never touches the running statistics, so the shared
  // network is only read here.
  BUNet& shared = const_cast<BUNet&>(net);
  ad::Tape tape(/*recording=*/false);
  Rng rng = make_rng(split_seed(seed, index));
  const ad::Var input(to_input_tensor({&x}));
  const ad::Var out = forward_flipout(tape, shared, input, ad::Mode::kEval, rng);
  const std::size_t H = x.channels.height(), W = x.channels.width();
  return ImageMap(H, W, std::vector<float>(out.value().data().begin(), out.value().data().end()));
}

InferenceResult mc_ensemble(const BUNet& net, const FeatureStack& x, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("mc_ensemble: n must be positive");
  const std::size_t H = x.channels.height(), W = x.channels.width(), P = H * W;

  // Welford update in pass-index order.
  std::vector<double> mean(P, 0.0), m2(P, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const ImageMap pass = ensemble_pass(net, x, seed, i);
    for (std::size_t p = 0; p < P; ++p) {
      const double v = pass.values()[p];
      const double delta = v - mean[p];
      mean[p] += delta / double(i + 1);
      m2[p] += delta * (v - mean[p]);
    }
  }

  InferenceResult r{ImageMap(H, W), ImageMap(H, W), n, seed};
  for (std::size_t p = 0; p < P; ++p) {
    r.probability.values()[p] = static_cast<float>(mean[p]);
    r.uncertainty.values()[p] = static_cast<float>(std::max(0.0, m2[p] / double(n)));
  }
  return r;
}

MaskMap binarize(const ImageMap& prob, double threshold) {
  MaskMap mask(prob.height(), prob.width());
  for (std::size_t p = 0; p < prob.size(); ++p) mask.values()[p] = prob.values()[p] > threshold ? 1 : 0;
  return mask;
}

Json inference_sidecar(const InferenceResult& r, double threshold) {
  Json j;
  j["n_samples"] = r.n_samples;
  j["seed"] = r.seed;
  j["threshold"] = threshold;
  return j;
}

}  // namespace calseg
