#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "calseg/errors.hpp"
#include "calseg/inference.hpp"

using namespace calseg;

namespace {

FeatureStack random_stack(std::uint64_t seed, std::size_t h = 32, std::size_t w = 32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  FeatureStack s{seed, Array3(kFeatureChannels, h, w)};
  for (std::size_t c = 0; c < kFeatureChannels; ++c)
    for (auto& v : s.channels.channel(c)) v = u(rng);
  return s;
}

void scale_sigma(BUNet& net, double factor) {
  for (auto* l : net.flipout_layers())
    for (auto* rho : {&l->rho_kernel, &l->rho_bias})
      for (auto& v : rho->mutable_value().data()) v = float(softplus_inverse(factor * softplus(v)));
}

double mean_of(const ImageMap& m) {
  return std::accumulate(m.values().begin(), m.values().end(), 0.0) / double(m.size());
}

}  // namespace

TEST_CASE("mc_ensemble: a single pass has zero uncertainty") {
  const BUNet net = init_params<float>(NetConfig{}, 1);
  const auto x = random_stack(2);
  const auto r = mc_ensemble(net, x, 1, 5);
  for (float v : r.uncertainty.values()) CHECK(v == 0.0f);
  CHECK(r.probability == ensemble_pass(net, x, 5, 0));
  CHECK_THROWS_AS(mc_ensemble(net, x, 0, 5), ConfigError);
}

TEST_CASE("mc_ensemble: a collapsed posterior reproduces the mean-weight network") {
  BUNet net = init_params<float>(NetConfig{}, 3);
  for (auto* l : net.flipout_layers()) {
    l->rho_kernel.mutable_value().fill(-40.0f);
    l->rho_bias.mutable_value().fill(-40.0f);
  }
  const auto x = random_stack(4);
  const auto r = mc_ensemble(net, x, 8, 1);
  ad::Tape tape(false);
  const auto det = forward_deterministic(tape, net, ad::Var(to_input_tensor({&x})), ad::Mode::kEval).value();
  for (std::size_t p = 0; p < r.probability.size(); ++p) {
    CHECK(r.uncertainty.values()[p] < 1e-10);
    CHECK(std::abs(r.probability.values()[p] - det[p]) < 1e-6);
  }
}

TEST_CASE("mc_ensemble: 40 passes match a store-everything reference, in any order") {
  BUNet net = init_params<float>(NetConfig{}, 6);
  scale_sigma(net, 20);
  const auto x = random_stack(7);
  const auto r = mc_ensemble(net, x, 40, 11);
  CHECK(r.n_samples == 40);

  std::vector<ImageMap> passes;
  for (std::size_t i = 40; i-- > 0;) passes.push_back(ensemble_pass(net, x, 11, i));
  double max_dm = 0, max_dv = 0;
  for (std::size_t p = 0; p < r.probability.size(); ++p) {
    long double s = 0;
    for (const auto& m : passes) s += m.values()[p];
    const long double mean = s / 40;
    long double ss = 0;
    for (const auto& m : passes) ss += (m.values()[p] - mean) * (m.values()[p] - mean);
    max_dm = std::max(max_dm, double(std::abs(r.probability.values()[p] - mean)));
    max_dv = std::max(max_dv, double(std::abs(r.uncertainty.values()[p] - ss / 40)));
  }
  CHECK(max_dm < 1e-6);
  CHECK(max_dv < 1e-6);
  CHECK(mean_of(r.uncertainty) > 0);

  const auto again = mc_ensemble(net, x, 40, 11);
  CHECK(again.probability == r.probability);
  CHECK(again.uncertainty == r.uncertainty);
}

TEST_CASE("mc_ensemble: a wider posterior does not lower the uncertainty") {
  BUNet narrow = init_params<float>(NetConfig{}, 9), wide = init_params<float>(NetConfig{}, 9);
  scale_sigma(wide, 10);
  const auto x = random_stack(10);
  CHECK(mean_of(mc_ensemble(wide, x, 40, 2).uncertainty) >= mean_of(mc_ensemble(narrow, x, 40, 2).uncertainty));
}

TEST_CASE("binarize: strict threshold, monotone in the threshold") {
  const ImageMap prob(1, 5, {0.0f, 0.49f, 0.5f, 0.51f, 1.0f});
  CHECK(binarize(prob).values()[2] == 0);
  const std::vector<std::uint8_t> expect{0, 0, 0, 1, 1};
  CHECK(std::equal(expect.begin(), expect.end(), binarize(prob).values().begin()));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  ImageMap m(16, 16);
  for (auto& v : m.values()) v = u(rng);
  std::size_t prev = m.size() + 1;
  for (double t = 0; t <= 1.0; t += 0.05) {
    const auto b = binarize(m, t);
    const std::size_t n = std::accumulate(b.values().begin(), b.values().end(), std::size_t(0));
    CHECK(n <= prev);
    prev = n;
  }
}
