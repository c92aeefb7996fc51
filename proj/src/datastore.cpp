#include "calseg/datastore.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include "calseg/errors.hpp"

namespace calseg {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'F', '4'};

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32le(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void check_finite(std::span<const float> values, const std::string& what) {
  for (float v : values)
    if (!std::isfinite(v)) throw DataError(what + ": non-finite value");
}

Json map_header(std::size_t c, std::size_t h, std::size_t w, std::uint64_t block_id, const char* kind) {
  Json header;
  header["dtype"] = "f32le";
  header["shape"] = {c, h, w};
  header["block_id"] = block_id;
  header["kind"] = kind;
  return header;
}

std::uint64_t header_block_id(const Json& header) {
  auto it = header.find("block_id");
  if (it == header.end()) return 0;
  if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<std::int64_t>() >= 0))
    throw FormatError("block_id must be a non-negative integer");
  return it->get<std::uint64_t>();
}

}  // namespace

// ---- types -----------------------------------------------------------------

Block::Block(std::uint64_t block_id, std::size_t n_frames, std::size_t height, std::size_t width,
             std::vector<float> frames, double frame_rate_hz)
    : block_id_(block_id),
      n_frames_(n_frames),
      height_(height),
      width_(width),
      frames_(std::move(frames)),
      frame_rate_hz_(frame_rate_hz) {
  if (n_frames_ < 2 || height_ < 1 || width_ < 1)
    throw ShapeError("block needs T >= 2, H >= 1, W >= 1");
  if (frames_.size() != n_frames_ * height_ * width_)
    throw ShapeError("block data length does not match T*H*W");
  if (!(frame_rate_hz_ > 0.0) || !std::isfinite(frame_rate_hz_))
    throw DataError("frame_rate_hz must be positive");
  check_finite(frames_, "block");
}

Recording::Recording(std::vector<Block> blocks) : blocks_(std::move(blocks)) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].height() != blocks_.front().height() || blocks_[i].width() != blocks_.front().width())
      throw ShapeError("recording blocks must share H and W");
    for (std::size_t j = 0; j < i; ++j)
      if (blocks_[j].block_id() == blocks_[i].block_id())
        throw DataError("duplicate block_id " + std::to_string(blocks_[i].block_id()));
  }
}

ImageMap::ImageMap(std::size_t height, std::size_t width, float fill)
    : height_(height), width_(width), values_(height * width, fill) {}

ImageMap::ImageMap(std::size_t height, std::size_t width, std::vector<float> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height_ * width_) throw ShapeError("map data length does not match H*W");
}

MaskMap::MaskMap(std::size_t height, std::size_t width, std::uint8_t fill)
    : height_(height), width_(width), values_(height * width, fill) {
  if (fill > 1) throw DataError("mask values must be 0 or 1");
}

MaskMap::MaskMap(std::size_t height, std::size_t width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height_ * width_) throw ShapeError("mask data length does not match H*W");
  for (auto v : values_)
    if (v > 1) throw DataError("mask values must be 0 or 1");
}

std::size_t MaskMap::count() const {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

Array3::Array3(std::size_t channels, std::size_t height, std::size_t width, float fill)
    : channels_(channels), height_(height), width_(width), values_(channels * height * width, fill) {}

Array3::Array3(std::size_t channels, std::size_t height, std::size_t width, std::vector<float> values)
    : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != channels_ * height_ * width_)
    throw ShapeError("array data length does not match C*H*W");
}

// ---- container -------------------------------------------------------------

std::vector<std::uint8_t> encode_container(const Json& header, std::span<const float> payload) {
  if (!header.contains("shape") || !header["shape"].is_array())
    throw FormatError("header requires a shape array");
  std::vector<std::size_t> shape = header["shape"].get<std::vector<std::size_t>>();
  if (product(shape) != payload.size()) throw ShapeError("payload length does not match header shape");

  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + 4 * payload.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (float v : payload) put_u32le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

void write_container(const std::filesystem::path& path, const Json& header, std::span<const float> payload) {
  write_file(path, encode_container(header, payload));
}

Container read_container(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic");
  const std::size_t header_len = get_u32le(bytes.data() + 4);
  if (bytes.size() < 8 + header_len) throw FormatError(path.string() + ": truncated header");

  Container c;
  try {
    c.header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON header: " + e.what());
  }
  if (!c.header.is_object() || c.header.value("dtype", "") != "f32le")
    throw FormatError(path.string() + ": header must declare dtype f32le");
  const auto& shape = c.header["shape"];
  if (!shape.is_array() || shape.empty()) throw FormatError(path.string() + ": header shape missing");
  for (const auto& d : shape) {
    if (!d.is_number_integer() || d.get<std::int64_t>() < 1)
      throw FormatError(path.string() + ": shape entries must be positive integers");
    c.shape.push_back(d.get<std::size_t>());
  }

  const std::size_t n = product(c.shape);
  const std::size_t payload_bytes = bytes.size() - 8 - header_len;
  if (payload_bytes != n * 4)
    throw FormatError(path.string() + ": payload is " + std::to_string(payload_bytes) + " bytes, expected " +
                      std::to_string(n * 4));
  c.payload.resize(n);
  const std::uint8_t* p = bytes.data() + 8 + header_len;
  for (std::size_t i = 0; i < n; ++i) c.payload[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  return c;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  write_file(path, bytes);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) { return read_file(path); }

void save_block(const Block& block, const std::filesystem::path& path) {
  Json header;
  header["dtype"] = "f32le";
  header["shape"] = {block.n_frames(), block.height(), block.width()};
  header["block_id"] = block.block_id();
  header["frame_rate_hz"] = block.frame_rate_hz();
  header["kind"] = "block";
  write_container(path, header, block.data());
}

Block load_block(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.shape.size() != 3) throw FormatError(path.string() + ": block shape must be [T,H,W]");
  if (c.shape[0] < 2) throw FormatError(path.string() + ": block needs T >= 2");
  check_finite(c.payload, path.string());
  const auto rate = c.header.find("frame_rate_hz");
  if (rate == c.header.end() || !rate->is_number()) throw FormatError(path.string() + ": frame_rate_hz missing");
  return Block(header_block_id(c.header), c.shape[0], c.shape[1], c.shape[2], std::move(c.payload),
               rate->get<double>());
}

void save_map(const ImageMap& map, std::uint64_t block_id, const std::filesystem::path& path,
              const std::string& kind) {
  write_container(path, map_header(1, map.height(), map.width(), block_id, kind.c_str()), map.values());
}

ImageMap load_map(const std::filesystem::path& path, std::uint64_t* block_id) {
  Container c = read_container(path);
  if (c.shape.size() != 3 || c.shape[0] != 1) throw FormatError(path.string() + ": map shape must be [1,H,W]");
  check_finite(c.payload, path.string());
  if (block_id) *block_id = header_block_id(c.header);
  return ImageMap(c.shape[1], c.shape[2], std::move(c.payload));
}

void save_mask(const MaskMap& mask, std::uint64_t block_id, const std::filesystem::path& path) {
  std::vector<float> values(mask.values().begin(), mask.values().end());
  write_container(path, map_header(1, mask.height(), mask.width(), block_id, "mask"), values);
}

MaskMap load_mask(const std::filesystem::path& path, std::uint64_t* block_id) {
  Container c = read_container(path);
  if (c.shape.size() != 3 || c.shape[0] != 1) throw FormatError(path.string() + ": mask shape must be [1,H,W]");
  std::vector<std::uint8_t> values(c.payload.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (c.payload[i] == 0.0f)
      values[i] = 0;
    else if (c.payload[i] == 1.0f)
      values[i] = 1;
    else
      throw DataError(path.string() + ": mask values must be 0.0 or 1.0");
  }
  if (block_id) *block_id = header_block_id(c.header);
  return MaskMap(c.shape[1], c.shape[2], std::move(values));
}

void save_feature_stack(const FeatureStack& stack, const std::filesystem::path& path) {
  const auto& a = stack.channels;
  write_container(path, map_header(a.channels(), a.height(), a.width(), stack.block_id, "features"), a.values());
}

FeatureStack load_feature_stack(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.shape.size() != 3 || c.shape[0] != kFeatureChannels)
    throw FormatError(path.string() + ": feature stack shape must be [13,H,W]");
  check_finite(c.payload, path.string());
  FeatureStack s;
  s.block_id = header_block_id(c.header);
  s.channels = Array3(c.shape[0], c.shape[1], c.shape[2], std::move(c.payload));
  return s;
}

// ---- PNG -------------------------------------------------------------------

std::uint16_t window_to_u16(double v, double lo, double hi) {
  const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint16_t>(std::floor(65535.0 * u + 0.5));
}

void export_map_png(const ImageMap& map, const std::filesystem::path& path, double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("export_map_png requires hi > lo");
  PngImage img;
  img.width = map.width();
  img.height = map.height();
  img.channels = 1;
  img.bit_depth = 16;
  img.samples.reserve(map.size());
  for (float v : map.values()) img.samples.push_back(window_to_u16(v, lo, hi));
  write_png(path, img);
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  (void)png;
  throw IoError(std::string("png: ") + msg);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const std::filesystem::path& path, const PngImage& image) {
  if (image.channels != 1 && image.channels != 3) throw ConfigError("png: channels must be 1 or 3");
  if (image.bit_depth != 8 && image.bit_depth != 16) throw ConfigError("png: bit depth must be 8 or 16");
  if (image.samples.size() != image.width * image.height * image.channels)
    throw ShapeError("png: sample count mismatch");

  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               static_cast<int>(image.bit_depth), image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const std::size_t bytes_per_sample = image.bit_depth / 8;
  std::vector<png_byte> row(image.width * image.channels * bytes_per_sample);
  for (std::size_t h = 0; h < image.height; ++h) {
    for (std::size_t i = 0; i < image.width * image.channels; ++i) {
      const std::uint16_t s = image.samples[h * image.width * image.channels + i];
      if (bytes_per_sample == 2) {
        row[2 * i] = static_cast<png_byte>(s >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<png_byte>(s & 0xff);
      } else {
        row[i] = static_cast<png_byte>(s);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

PngImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, file.get());
  png_read_info(png, info);
  PngImage img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_GRAY)
    img.channels = 1;
  else if (color == PNG_COLOR_TYPE_RGB)
    img.channels = 3;
  else
    throw FormatError(path.string() + ": unsupported PNG color type");
  if (img.bit_depth != 8 && img.bit_depth != 16) throw FormatError(path.string() + ": unsupported bit depth");

  const std::size_t bytes_per_sample = img.bit_depth / 8;
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  img.samples.resize(img.width * img.height * img.channels);
  for (std::size_t h = 0; h < img.height; ++h) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t i = 0; i < img.width * img.channels; ++i) {
      img.samples[h * img.width * img.channels + i] =
          bytes_per_sample == 2 ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
    }
  }
  png_read_end(png, nullptr);
  return img;
}

}  // namespace calseg
