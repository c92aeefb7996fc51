#include "calseg/synthgen.hpp"

#include <cmath>
#include <random>
#include <string>

#include "calseg/errors.hpp"
#include "calseg/rng.hpp"

namespace calseg {

namespace {

constexpr int kPlacementAttempts = 10000;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("sim config: " + what);
}

}  // namespace

void SimConfig::validate() const {
  require(height >= 1 && width >= 1, "height and width must be positive");
  require(n_frames >= 2, "n_frames must be >= 2");
  require(n_neurons_max == 0 || n_neurons_max >= n_neurons, "n_neurons_max must be >= n_neurons");
  require(std::isfinite(neuron_radius_px) && neuron_radius_px > 0, "neuron_radius_px must be positive");
  require(spike_rate_per_frame >= 0 && spike_rate_per_frame <= 1, "spike_rate_per_frame must be in [0,1]");
  require(std::isfinite(decay_tau_frames) && decay_tau_frames > 0, "decay_tau_frames must be positive");
  require(std::isfinite(amplitude) && amplitude > 0, "amplitude must be positive");
  require(std::isfinite(baseline), "baseline must be finite");
  require(std::isfinite(noise_sigma) && noise_sigma >= 0, "noise_sigma must be non-negative");
  require(std::isfinite(min_center_separation_px) && min_center_separation_px >= 0,
          "min_center_separation_px must be non-negative");
  require(std::isfinite(frame_rate_hz) && frame_rate_hz > 0, "frame_rate_hz must be positive");
}

Json to_json(const SimConfig& c) {
  Json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["n_frames"] = c.n_frames;
  j["n_neurons"] = c.n_neurons;
  j["n_neurons_max"] = c.n_neurons_max;
  j["neuron_radius_px"] = c.neuron_radius_px;
  j["spike_rate_per_frame"] = c.spike_rate_per_frame;
  j["decay_tau_frames"] = c.decay_tau_frames;
  j["amplitude"] = c.amplitude;
  j["baseline"] = c.baseline;
  j["noise_sigma"] = c.noise_sigma;
  j["min_center_separation_px"] = c.min_center_separation_px;
  j["frame_rate_hz"] = c.frame_rate_hz;
  return j;
}

SimConfig sim_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("sim config must be a JSON object");
  SimConfig c;
  auto count = [&](const char* key, std::size_t& field) {
    const auto& v = j[key];
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError(std::string("sim.") + key + " must be a non-negative integer");
    field = v.get<std::size_t>();
  };
  auto real = [&](const char* key, double& field) {
    const auto& v = j[key];
    if (!v.is_number()) throw ConfigError(std::string("sim.") + key + " must be a number");
    field = v.get<double>();
  };
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key == "height") count("height", c.height);
    else if (key == "width") count("width", c.width);
    else if (key == "n_frames") count("n_frames", c.n_frames);
    else if (key == "n_neurons") count("n_neurons", c.n_neurons);
    else if (key == "n_neurons_max") count("n_neurons_max", c.n_neurons_max);
    else if (key == "neuron_radius_px") real("neuron_radius_px", c.neuron_radius_px);
    else if (key == "spike_rate_per_frame") real("spike_rate_per_frame", c.spike_rate_per_frame);
    else if (key == "decay_tau_frames") real("decay_tau_frames", c.decay_tau_frames);
    else if (key == "amplitude") real("amplitude", c.amplitude);
    else if (key == "baseline") real("baseline", c.baseline);
    else if (key == "noise_sigma") real("noise_sigma", c.noise_sigma);
    else if (key == "min_center_separation_px") real("min_center_separation_px", c.min_center_separation_px);
    else if (key == "frame_rate_hz") real("frame_rate_hz", c.frame_rate_hz);
    else throw ConfigError("sim: unknown field '" + key + "'");
  }
  c.validate();
  return c;
}

double footprint_radius(double sigma) { return sigma * std::sqrt(2.0 * std::log(1.0 / kFootprintCutoff)); }

SimBlock generate_block(const SimConfig& config, std::uint64_t seed, std::uint64_t block_id) {
  config.validate();
  Rng rng = make_rng(seed);
  const std::size_t H = config.height, W = config.width, T = config.n_frames;

  std::size_t n_neurons = config.n_neurons;
  if (config.n_neurons_max > config.n_neurons) {
    std::uniform_int_distribution<std::size_t> pick(config.n_neurons, config.n_neurons_max);
    n_neurons = pick(rng);
  }

  // Keep the true footprint inside the frame when there is room for it.
  const auto margin = static_cast<std::size_t>(std::ceil(footprint_radius(config.neuron_radius_px)));
  const bool use_margin = H > 2 * margin && W > 2 * margin;
  std::uniform_int_distribution<std::size_t> row_dist(use_margin ? margin : 0, use_margin ? H - 1 - margin : H - 1);
  std::uniform_int_distribution<std::size_t> col_dist(use_margin ? margin : 0, use_margin ? W - 1 - margin : W - 1);

  std::vector<std::pair<std::size_t, std::size_t>> centers;
  int attempts = 0;
  const double min_sep2 = config.min_center_separation_px * config.min_center_separation_px;
  while (centers.size() < n_neurons) {
    if (++attempts > kPlacementAttempts)
      throw PlacementError("cannot place " + std::to_string(n_neurons) + " neurons with separation " +
                           std::to_string(config.min_center_separation_px));
    const std::size_t r = row_dist(rng), c = col_dist(rng);
    bool ok = true;
    for (const auto& [pr, pc] : centers) {
      const double dr = double(r) - double(pr), dc = double(c) - double(pc);
      if (dr * dr + dc * dc < min_sep2) {
        ok = false;
        break;
      }
    }
    if (ok) centers.emplace_back(r, c);
  }

  // Footprints, truncated to exact zeros below the support cutoff.
  std::vector<std::vector<double>> footprints(n_neurons, std::vector<double>(H * W, 0.0));
  MaskMap truth(H, W);
  const double inv_two_sigma2 = 1.0 / (2.0 * config.neuron_radius_px * config.neuron_radius_px);
  for (std::size_t k = 0; k < n_neurons; ++k) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        const double dr = double(h) - double(centers[k].first), dc = double(w) - double(centers[k].second);
        const double g = std::exp(-(dr * dr + dc * dc) * inv_two_sigma2);
        if (g >= kSupportCutoff) footprints[k][h * W + w] = g;
        if (g > kFootprintCutoff) truth(h, w) = 1;
      }
    }
  }

  // Calcium traces: instantaneous rise, exponential decay.
  std::bernoulli_distribution spike(config.spike_rate_per_frame);
  const double decay = std::exp(-1.0 / config.decay_tau_frames);
  std::vector<std::vector<double>> traces(n_neurons, std::vector<double>(T, 0.0));
  for (std::size_t k = 0; k < n_neurons; ++k) {
    double a = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      a = a * decay + (spike(rng) ? 1.0 : 0.0);
      traces[k][t] = a;
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<float> frames(T * H * W);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t p = 0; p < H * W; ++p) {
      double v = config.baseline;
      for (std::size_t k = 0; k < n_neurons; ++k) v += config.amplitude * traces[k][t] * footprints[k][p];
      if (config.noise_sigma > 0) v += config.noise_sigma * noise(rng);
      frames[t * H * W + p] = static_cast<float>(v);
    }
  }

  return SimBlock{Block(block_id, T, H, W, std::move(frames), config.frame_rate_hz), std::move(truth),
                  std::move(centers)};
}

std::vector<SimBlock> generate_dataset(const SimConfig& config, std::size_t n_blocks, std::uint64_t seed) {
  if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1");
  std::vector<SimBlock> out;
  out.reserve(n_blocks);
  for (std::size_t i = 0; i < n_blocks; ++i) out.push_back(generate_block(config, split_seed(seed, i), i));
  return out;
}

}  // namespace calseg
