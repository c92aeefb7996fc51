#pragma once
// Pipeline commands behind the `calseg` executable. Each returns a process
// exit code and writes diagnostics to `err`:
//   0 success, 2 usage/config/shape error, 3 I/O or format error,
//   4 numeric failure (NaN or non-finite data).
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "calseg/config.hpp"

namespace calseg {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitNumeric = 4,
};

namespace fs = std::filesystem;

struct SimulateArgs {
  std::optional<fs::path> config;
  fs::path out;
  std::size_t blocks = 1;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  fs::path features, labels;
  std::optional<fs::path> config;
  fs::path out;
  std::uint64_t seed = 0;
  std::string half;  // "", "first" or "second"
};

struct PredictArgs {
  fs::path ckpt, features, out;
  std::size_t samples = 40;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  /// Split file written by train; restricts prediction to its test ids.
  std::optional<fs::path> split;
};

struct RenderArgs {
  fs::path block, prob, uncert, truth, out;
};

int cmd_simulate(const SimulateArgs& args, std::ostream& err);
int cmd_features(const fs::path& in, const fs::path& out, std::ostream& err);
int cmd_make_gt(const fs::path& in, const fs::path& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& err);
int cmd_predict(const PredictArgs& args, std::ostream& err);
int cmd_evaluate(const fs::path& pred, const fs::path& truth, const fs::path& report, std::ostream& err);
int cmd_repro(const fs::path& run1, const fs::path& run2, const fs::path& report, std::ostream& err);
int cmd_render(const RenderArgs& args, std::ostream& err);

/// Maps a calseg exception (or any std::exception) to its exit code.
int exit_code_for(const std::exception& e);

/// 16-bit RGB overlay of truth (red) and prediction (green) contours on the
/// grayscale `background`; pixels on both contours come out yellow.
PngImage render_overlay(const ImageMap& background, const MaskMap& truth, const MaskMap& pred);

/// Boundary pixels of a mask: foreground with a 4-neighbour outside the
/// mask or on the image edge.
MaskMap mask_contour(const MaskMap& mask);

}  // namespace calseg
