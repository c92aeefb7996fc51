#pragma once

// Synthetic calcium-imaging blocks with known activity footprints.
//
//   frames[t](h,w) = baseline + sum_k amplitude * a_k(t) * G_k(h,w) + noise
//   a_k(t) = a_k(t-1) * exp(-1/decay_tau) + spike_k(t),  spike ~ Bernoulli(rate)
//
// G_k is a unit-peak Gaussian of sigma `neuron_radius_px`, set to exactly zero
// where it falls below kSupportCutoff so that pixels outside every footprint
// carry no signal at all.

#include <cstdint>
#include <utility>
#include <vector>

#include "calseg/datastore.hpp"

namespace calseg {

struct SimConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_frames = 60;
  std::size_t n_neurons = 3;
  /// Upper bound for a per-block neuron count drawn uniformly in
  /// [n_neurons, n_neurons_max]. 0 means "same as n_neurons".
  std::size_t n_neurons_max = 0;
  double neuron_radius_px = 2.5;
  double spike_rate_per_frame = 0.08;
  double decay_tau_frames = 4.0;
  double amplitude = 1.0;
  double baseline = 1.0;
  double noise_sigma = 0.1;
  double min_center_separation_px = 10.0;
  double frame_rate_hz = 0.5;

  /// Throws ConfigError if any field is out of range.
  void validate() const;
};

Json to_json(const SimConfig& config);
/// Missing fields keep their defaults; unknown fields are rejected.
SimConfig sim_config_from_json(const Json& j);

struct SimBlock {
  Block block;
  MaskMap truth_mask;
  std::vector<std::pair<std::size_t, std::size_t>> neuron_centers;

  bool operator==(const SimBlock&) const = default;
};

/// Footprint level (fraction of peak) that defines the true mask.
inline constexpr double kFootprintCutoff = 0.2;
/// Below this fraction of peak a footprint contributes nothing.
inline constexpr double kSupportCutoff = 0.01;

/// Distance from a neuron center at which its footprint equals kFootprintCutoff.
double footprint_radius(double sigma);

SimBlock generate_block(const SimConfig& config, std::uint64_t seed, std::uint64_t block_id = 0);

/// Block i uses split_seed(seed, i) and block_id i.
std::vector<SimBlock> generate_dataset(const SimConfig& config, std::size_t n_blocks, std::uint64_t seed);

}  // namespace calseg
