#include "calseg/config.hpp"

#include <fstream>

#include "calseg/errors.hpp"

namespace calseg {

namespace {

InferConfig infer_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("infer must be a JSON object");
  InferConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_samples") {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 1) throw ConfigError("infer.n_samples must be >= 1");
      c.n_samples = v.get<std::size_t>();
    } else if (key == "threshold") {
      if (!v.is_number() || v.get<double>() < 0 || v.get<double>() > 1)
        throw ConfigError("infer.threshold must be a number in [0, 1]");
      c.threshold = v.get<double>();
    } else {
      throw ConfigError("infer: unknown field '" + key + "'");
    }
  }
  return c;
}

}  // namespace

PipelineConfig pipeline_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "sim") c.sim = sim_config_from_json(v);
    else if (key == "train") c.train = hyperparams_from_json(v);
    else if (key == "infer") c.infer = infer_config_from_json(v);
    else if (key == "net") c.net = net_config_from_json(v);
    else if (key == "paths") {
      if (!v.is_object()) throw ConfigError("paths must be a JSON object");
      for (const auto& [name, dir] : v.items()) {
        if (!dir.is_string()) throw ConfigError("paths." + name + " must be a string");
        c.paths[name] = dir.get<std::string>();
      }
    } else if (key == "$schema") {
      continue;
    } else {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return pipeline_config_from_json(j);
}

Json to_json(const PipelineConfig& c) {
  Json j;
  j["sim"] = to_json(c.sim);
  j["train"] = to_json(c.train);
  j["infer"] = {{"n_samples", c.infer.n_samples}, {"threshold", c.infer.threshold}};
  j["net"] = to_json(c.net);
  j["paths"] = Json::object();
  for (const auto& [k, v] : c.paths) j["paths"][k] = v;
  return j;
}

}  // namespace calseg
