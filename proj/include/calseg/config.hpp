#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "calseg/bunet.hpp"
#include "calseg/datastore.hpp"
#include "calseg/synthgen.hpp"
#include "calseg/training.hpp"

namespace calseg {

struct InferConfig {
  std::size_t n_samples = 40;
  double threshold = 0.5;
};

/// Top-level pipeline document. Every section is optional; absent sections
/// and fields keep the defaults (desk-scale network, 60 epochs, batch 2,
/// lr 0.0005, 40 ensemble samples).
struct PipelineConfig {
  SimConfig sim;
  Hyperparams train;
  InferConfig infer;
  NetConfig net;
  std::map<std::string, std::string> paths;
};

/// Validates structure, types and ranges; throws ConfigError with the
/// offending field on failure. Mirrors docs/config.schema.json.
PipelineConfig pipeline_config_from_json(const Json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
Json to_json(const PipelineConfig& config);

}  // namespace calseg
