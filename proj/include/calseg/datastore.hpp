#pragma once

// In-memory data model for recordings and per-pixel maps, plus the CSF4
// container format and PNG export.
//
// CSF4 layout (little-endian):
//   [0,4)       magic "CSF4"
//   [4,8)       u32 header length L
//   [8,8+L)     UTF-8 JSON header: {"dtype":"f32le","shape":[...],...}
//   [8+L, end)  product(shape) f32 values, row-major

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace calseg {

using Json = nlohmann::ordered_json;

/// One recording block: T frames of H x W intensities, row-major [t][h][w].
class Block {
 public:
  Block(std::uint64_t block_id, std::size_t n_frames, std::size_t height, std::size_t width,
        std::vector<float> frames, double frame_rate_hz = 0.5);

  std::uint64_t block_id() const { return block_id_; }
  std::size_t n_frames() const { return n_frames_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return height_ * width_; }
  double frame_rate_hz() const { return frame_rate_hz_; }

  float at(std::size_t t, std::size_t h, std::size_t w) const {
    return frames_[(t * height_ + h) * width_ + w];
  }
  std::span<const float> frame(std::size_t t) const {
    return {frames_.data() + t * pixels(), pixels()};
  }
  std::span<const float> data() const { return frames_; }

  bool operator==(const Block&) const = default;

 private:
  std::uint64_t block_id_;
  std::size_t n_frames_, height_, width_;
  std::vector<float> frames_;
  double frame_rate_hz_;
};

/// Ordered collection of blocks sharing one field of view.
class Recording {
 public:
  explicit Recording(std::vector<Block> blocks);
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  std::vector<Block> blocks_;
};

/// Dense H x W float map (variance, probability, uncertainty, ...).
class ImageMap {
 public:
  ImageMap() = default;
  ImageMap(std::size_t height, std::size_t width, float fill = 0.0f);
  ImageMap(std::size_t height, std::size_t width, std::vector<float> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  float& operator()(std::size_t h, std::size_t w) { return values_[h * width_ + w]; }
  float operator()(std::size_t h, std::size_t w) const { return values_[h * width_ + w]; }
  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  bool operator==(const ImageMap&) const = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<float> values_;
};

/// Binary H x W mask; foreground = 1.
class MaskMap {
 public:
  MaskMap() = default;
  MaskMap(std::size_t height, std::size_t width, std::uint8_t fill = 0);
  MaskMap(std::size_t height, std::size_t width, std::vector<std::uint8_t> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  std::uint8_t& operator()(std::size_t h, std::size_t w) { return values_[h * width_ + w]; }
  std::uint8_t operator()(std::size_t h, std::size_t w) const { return values_[h * width_ + w]; }
  std::span<std::uint8_t> values() { return values_; }
  std::span<const std::uint8_t> values() const { return values_; }
  std::size_t count() const;

  bool operator==(const MaskMap&) const = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<std::uint8_t> values_;
};

/// Dense C x H x W float array.
class Array3 {
 public:
  Array3() = default;
  Array3(std::size_t channels, std::size_t height, std::size_t width, float fill = 0.0f);
  Array3(std::size_t channels, std::size_t height, std::size_t width, std::vector<float> values);

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  float& operator()(std::size_t c, std::size_t h, std::size_t w) {
    return values_[(c * height_ + h) * width_ + w];
  }
  float operator()(std::size_t c, std::size_t h, std::size_t w) const {
    return values_[(c * height_ + h) * width_ + w];
  }
  std::span<float> channel(std::size_t c) {
    return {values_.data() + c * height_ * width_, height_ * width_};
  }
  std::span<const float> channel(std::size_t c) const {
    return {values_.data() + c * height_ * width_, height_ * width_};
  }
  std::span<const float> values() const { return values_; }

  bool operator==(const Array3&) const = default;

 private:
  std::size_t channels_ = 0, height_ = 0, width_ = 0;
  std::vector<float> values_;
};

inline constexpr std::size_t kFeatureChannels = 13;

/// Network input: channel 0 is the normalized variance map, 1..12 the
/// normalized neighbor correlation maps.
struct FeatureStack {
  std::uint64_t block_id = 0;
  Array3 channels;

  bool operator==(const FeatureStack&) const = default;
};

// ---- CSF4 container ------------------------------------------------------

struct Container {
  Json header;
  std::vector<std::size_t> shape;
  std::vector<float> payload;
};

/// Writes `header` (which must already contain "dtype" and "shape") and the
/// payload. Throws IoError on failure, ShapeError if payload and shape disagree.
void write_container(const std::filesystem::path& path, const Json& header,
                     std::span<const float> payload);
/// Validates magic, header, dtype and payload length; does not check values.
Container read_container(const std::filesystem::path& path);
/// Raw bytes of the encoded container (what write_container puts on disk).
std::vector<std::uint8_t> encode_container(const Json& header, std::span<const float> payload);

/// Writes raw bytes, replacing any existing file. Throws IoError.
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

void save_block(const Block& block, const std::filesystem::path& path);
Block load_block(const std::filesystem::path& path);

/// `kind` is recorded in the header ("map", "probability", "uncertainty", ...).
void save_map(const ImageMap& map, std::uint64_t block_id, const std::filesystem::path& path,
              const std::string& kind = "map");
ImageMap load_map(const std::filesystem::path& path, std::uint64_t* block_id = nullptr);

void save_mask(const MaskMap& mask, std::uint64_t block_id, const std::filesystem::path& path);
MaskMap load_mask(const std::filesystem::path& path, std::uint64_t* block_id = nullptr);

void save_feature_stack(const FeatureStack& stack, const std::filesystem::path& path);
FeatureStack load_feature_stack(const std::filesystem::path& path);

// ---- PNG -----------------------------------------------------------------

/// Pixel value for `v` under the linear window [lo, hi]:
/// round-half-up(65535 * clamp((v - lo) / (hi - lo), 0, 1)).
std::uint16_t window_to_u16(double v, double lo, double hi);

/// 16-bit grayscale PNG. Requires hi > lo (ConfigError otherwise).
void export_map_png(const ImageMap& map, const std::filesystem::path& path, double lo, double hi);

struct PngImage {
  std::size_t width = 0, height = 0, channels = 1, bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels

  std::uint16_t at(std::size_t h, std::size_t w, std::size_t c = 0) const {
    return samples[(h * width + w) * channels + c];
  }
};

/// channels: 1 (gray) or 3 (RGB); bit_depth: 8 or 16.
void write_png(const std::filesystem::path& path, const PngImage& image);
PngImage read_png(const std::filesystem::path& path);

}  // namespace calseg
