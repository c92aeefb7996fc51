#pragma once

// Bayesian U-Net: deterministic encoder (conv + batch norm + leaky ReLU
// pairs, stride-2 downsampling in blocks 2-5), decoder blocks of a
// deterministic 2x2 stride-2 transposed convolution followed by a flipout
// convolution over the skip-concatenated features, and a 1x1 sigmoid head.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calseg/autodiff.hpp"
#include "calseg/datastore.hpp"
#include "calseg/rng.hpp"

namespace calseg {

struct NetConfig {
  std::size_t in_channels = kFeatureChannels;
  std::array<std::size_t, 5> encoder_widths{8, 16, 32, 64, 128};
  double leaky_alpha = 0.01;
  double prior_std = 1.0;

  static NetConfig full_scale() {
    NetConfig c;
    c.encoder_widths = {64, 128, 256, 512, 1024};
    return c;
  }
  /// Decoder widths are the first four encoder widths, reversed.
  std::array<std::size_t, 4> decoder_widths() const {
    return {encoder_widths[3], encoder_widths[2], encoder_widths[1], encoder_widths[0]};
  }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

Json to_json(const NetConfig& config);
NetConfig net_config_from_json(const Json& j);

template <typename T>
struct ConvLayer {
  ad::BasicVar<T> kernel;
  ad::BasicVar<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct BatchNormLayer {
  ad::BasicVar<T> gamma;
  ad::BasicVar<T> beta;
  ad::BatchNormStats<T> stats;
};

/// Variational convolution with a diagonal Gaussian posterior per weight:
/// w ~ N(mu, softplus(rho)^2).
template <typename T>
struct FlipoutConv2D {
  ad::BasicVar<T> mu_kernel;
  ad::BasicVar<T> rho_kernel;
  ad::BasicVar<T> mu_bias;
  ad::BasicVar<T> rho_bias;
  double prior_std = 1.0;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

template <typename T>
struct EncoderBlock {
  ConvLayer<T> conv1;
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv2;
  BatchNormLayer<T> bn2;
};

template <typename T>
struct DecoderBlock {
  ConvLayer<T> up;  // transposed, kernel Cin x Cout x 2 x 2, stride 2
  FlipoutConv2D<T> conv;
  BatchNormLayer<T> bn;
};

template <typename T>
struct NamedVar {
  std::string name;
  ad::BasicVar<T> var;
};

template <typename Tensor>
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

template <typename T>
class BasicBUNet {
 public:
  explicit BasicBUNet(const NetConfig& config);
  BasicBUNet(BasicBUNet&&) noexcept = default;
  BasicBUNet& operator=(BasicBUNet&&) noexcept = default;
  // Parameters are shared handles; use clone() for an independent copy.
  BasicBUNet(const BasicBUNet&) = delete;
  BasicBUNet& operator=(const BasicBUNet&) = delete;

  BasicBUNet clone() const;

  const NetConfig& config() const { return config_; }

  /// Trainable parameters in a fixed order (the checkpoint order).
  std::vector<NamedVar<T>> parameters() const;
  /// Batch-norm running statistics, after the parameters in checkpoints.
  std::vector<NamedBuffer<ad::BasicTensor<T>>> buffers();
  std::vector<NamedBuffer<const ad::BasicTensor<T>>> buffers() const;
  std::vector<FlipoutConv2D<T>*> flipout_layers();
  std::vector<const FlipoutConv2D<T>*> flipout_layers() const;

  std::array<EncoderBlock<T>, 5> encoder;
  std::array<DecoderBlock<T>, 4> decoder;
  ConvLayer<T> head;

 private:
  NetConfig config_;
};

using BUNet = BasicBUNet<float>;

/// Number of trainable scalars implied by `config` (no allocation).
std::size_t parameter_count(const NetConfig& config);

template <typename T>
BasicBUNet<T> init_params(const NetConfig& config, std::uint64_t seed);

/// Flipout convolution. With `rng == nullptr` the layer runs at its
/// posterior means; otherwise it draws one shared kernel perturbation plus
/// per-example input/output sign flips from `rng`.
template <typename T>
ad::BasicVar<T> flipout_conv2d(ad::BasicTape<T>& tape, const FlipoutConv2D<T>& layer, const ad::BasicVar<T>& input,
                               Rng* rng);

/// Mean-weight pass. Input N x 13 x H x W with H, W divisible by 16.
template <typename T>
ad::BasicVar<T> forward_deterministic(ad::BasicTape<T>& tape, BasicBUNet<T>& net, const ad::BasicVar<T>& input,
                                      ad::Mode mode);

/// One stochastic pass; deterministic given the state of `rng`.
template <typename T>
ad::BasicVar<T> forward_flipout(ad::BasicTape<T>& tape, BasicBUNet<T>& net, const ad::BasicVar<T>& input,
                                ad::Mode mode, Rng& rng);

/// Closed-form KL(q || N(0, prior_std^2)) summed over all flipout weights and
/// biases, as a differentiable scalar.
template <typename T>
ad::BasicVar<T> kl_weights(ad::BasicTape<T>& tape, const BasicBUNet<T>& net);

/// KL of a single diagonal Gaussian posterior block against N(0, prior_std^2).
template <typename T>
ad::BasicVar<T> kl_gaussian(ad::BasicTape<T>& tape, const ad::BasicVar<T>& mu, const ad::BasicVar<T>& rho,
                            double prior_std);

double softplus(double rho);
/// Inverse of softplus for sigma > 0.
double softplus_inverse(double sigma);

/// Stacks feature stacks into an N x 13 x H x W input tensor.
ad::Tensor to_input_tensor(const std::vector<const FeatureStack*>& stacks);

void save_checkpoint(const BUNet& net, const std::filesystem::path& path, const Json& metadata = Json::object());
/// Encoded checkpoint bytes, identical to the file save_checkpoint writes.
std::vector<std::uint8_t> encode_checkpoint(const BUNet& net, const Json& metadata = Json::object());
BUNet load_checkpoint(const std::filesystem::path& path, Json* metadata = nullptr);

}  // namespace calseg
