#include "calseg/bunet.hpp"

#include <cmath>
#include <random>

#include "calseg/errors.hpp"

namespace calseg {

using ad::BasicTape;
using ad::BasicTensor;
using ad::BasicVar;
using ad::Mode;
using ad::Shape;

void NetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("net.in_channels must be positive");
  for (auto w : encoder_widths)
    if (w < 1) throw ConfigError("net.encoder_widths must be positive");
  if (!(leaky_alpha >= 0) || !std::isfinite(leaky_alpha)) throw ConfigError("net.leaky_alpha must be >= 0");
  if (!(prior_std > 0) || !std::isfinite(prior_std)) throw ConfigError("net.prior_std must be positive");
}

Json to_json(const NetConfig& c) {
  Json j;
  j["in_channels"] = c.in_channels;
  j["encoder_widths"] = c.encoder_widths;
  j["leaky_alpha"] = c.leaky_alpha;
  j["prior_std"] = c.prior_std;
  return j;
}

NetConfig net_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("net config must be a JSON object");
  NetConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "in_channels") {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 1) throw ConfigError("net.in_channels must be positive");
      c.in_channels = v.get<std::size_t>();
    } else if (key == "encoder_widths") {
      if (!v.is_array() || v.size() != 5) throw ConfigError("net.encoder_widths must list exactly 5 widths");
      for (std::size_t i = 0; i < 5; ++i) {
        if (!v[i].is_number_integer() || v[i].get<std::int64_t>() < 1)
          throw ConfigError("net.encoder_widths must be positive integers");
        c.encoder_widths[i] = v[i].get<std::size_t>();
      }
    } else if (key == "leaky_alpha") {
      if (!v.is_number()) throw ConfigError("net.leaky_alpha must be a number");
      c.leaky_alpha = v.get<double>();
    } else if (key == "prior_std") {
      if (!v.is_number()) throw ConfigError("net.prior_std must be a number");
      c.prior_std = v.get<double>();
    } else {
      throw ConfigError("net: unknown field '" + key + "'");
    }
  }
  c.validate();
  return c;
}

double softplus(double rho) { return rho > 0 ? rho + std::log1p(std::exp(-rho)) : std::log1p(std::exp(rho)); }

double softplus_inverse(double sigma) {
  // log(expm1(sigma)), rearranged for large sigma.
  return sigma > 20 ? sigma + std::log(-std::expm1(-sigma)) : std::log(std::expm1(sigma));
}

// ---- construction ------------------------------------------------------------

namespace {

template <typename T>
BasicVar<T> param(Shape shape, T fill = T(0)) {
  return BasicVar<T>(BasicTensor<T>(std::move(shape), fill), true);
}

template <typename T>
ConvLayer<T> make_conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad) {
  return {param<T>({cout, cin, k, k}), param<T>({cout}), stride, pad};
}

template <typename T>
BatchNormLayer<T> make_bn(std::size_t c) {
  return {param<T>({c}, T(1)), param<T>({c}), ad::BatchNormStats<T>(c)};
}

template <typename T>
BasicVar<T> deep_copy(const BasicVar<T>& v) {
  return BasicVar<T>(v.value(), v.requires_grad());
}

template <typename T>
ConvLayer<T> copy_layer(const ConvLayer<T>& l) {
  return {deep_copy(l.kernel), deep_copy(l.bias), l.stride, l.padding};
}

template <typename T>
BatchNormLayer<T> copy_layer(const BatchNormLayer<T>& l) {
  return {deep_copy(l.gamma), deep_copy(l.beta), l.stats};
}

template <typename T>
FlipoutConv2D<T> copy_layer(const FlipoutConv2D<T>& l) {
  return {deep_copy(l.mu_kernel), deep_copy(l.rho_kernel), deep_copy(l.mu_bias), deep_copy(l.rho_bias),
          l.prior_std,           l.stride,                 l.padding};
}

}  // namespace

template <typename T>
BasicBUNet<T>::BasicBUNet(const NetConfig& config) : config_(config) {
  config_.validate();
  const auto& w = config_.encoder_widths;
  std::size_t cin = config_.in_channels;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t first_stride = i == 0 ? 1 : 2;
    encoder[i] = {make_conv<T>(cin, w[i], 3, first_stride, 1), make_bn<T>(w[i]), make_conv<T>(w[i], w[i], 3, 1, 1),
                  make_bn<T>(w[i])};
    cin = w[i];
  }
  const auto dw = config_.decoder_widths();
  for (std::size_t j = 0; j < 4; ++j) {
    const std::size_t out = dw[j];
    DecoderBlock<T>& d = decoder[j];
    d.up = {param<T>({cin, out, 2, 2}), param<T>({out}), 2, 0};
    d.conv = {param<T>({out, 2 * out, 3, 3}), param<T>({out, 2 * out, 3, 3}), param<T>({out}), param<T>({out}),
              config_.prior_std, 1, 1};
    d.bn = make_bn<T>(out);
    cin = out;
  }
  head = make_conv<T>(cin, 1, 1, 1, 0);
}

template <typename T>
BasicBUNet<T> BasicBUNet<T>::clone() const {
  BasicBUNet<T> out(config_);
  for (std::size_t i = 0; i < 5; ++i) {
    out.encoder[i] = {copy_layer(encoder[i].conv1), copy_layer(encoder[i].bn1), copy_layer(encoder[i].conv2),
                      copy_layer(encoder[i].bn2)};
  }
  for (std::size_t j = 0; j < 4; ++j)
    out.decoder[j] = {copy_layer(decoder[j].up), copy_layer(decoder[j].conv), copy_layer(decoder[j].bn)};
  out.head = copy_layer(head);
  return out;
}

template <typename T>
std::vector<NamedVar<T>> BasicBUNet<T>::parameters() const {
  std::vector<NamedVar<T>> out;
  auto conv = [&](const std::string& p, const ConvLayer<T>& l) {
    out.push_back({p + ".kernel", l.kernel});
    out.push_back({p + ".bias", l.bias});
  };
  auto bn = [&](const std::string& p, const BatchNormLayer<T>& l) {
    out.push_back({p + ".gamma", l.gamma});
    out.push_back({p + ".beta", l.beta});
  };
  for (std::size_t i = 0; i < 5; ++i) {
    const std::string p = "enc" + std::to_string(i);
    conv(p + ".conv1", encoder[i].conv1);
    bn(p + ".bn1", encoder[i].bn1);
    conv(p + ".conv2", encoder[i].conv2);
    bn(p + ".bn2", encoder[i].bn2);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    const std::string p = "dec" + std::to_string(j);
    conv(p + ".up", decoder[j].up);
    const auto& f = decoder[j].conv;
    out.push_back({p + ".conv.mu_kernel", f.mu_kernel});
    out.push_back({p + ".conv.rho_kernel", f.rho_kernel});
    out.push_back({p + ".conv.mu_bias", f.mu_bias});
    out.push_back({p + ".conv.rho_bias", f.rho_bias});
    bn(p + ".bn", decoder[j].bn);
  }
  conv("head", head);
  return out;
}

template <typename T>
std::vector<NamedBuffer<BasicTensor<T>>> BasicBUNet<T>::buffers() {
  std::vector<NamedBuffer<BasicTensor<T>>> out;
  auto bn = [&](const std::string& p, BatchNormLayer<T>& l) {
    out.push_back({p + ".running_mean", &l.stats.mean});
    out.push_back({p + ".running_var", &l.stats.var});
  };
  for (std::size_t i = 0; i < 5; ++i) {
    bn("enc" + std::to_string(i) + ".bn1", encoder[i].bn1);
    bn("enc" + std::to_string(i) + ".bn2", encoder[i].bn2);
  }
  for (std::size_t j = 0; j < 4; ++j) bn("dec" + std::to_string(j) + ".bn", decoder[j].bn);
  return out;
}

template <typename T>
std::vector<NamedBuffer<const BasicTensor<T>>> BasicBUNet<T>::buffers() const {
  std::vector<NamedBuffer<const BasicTensor<T>>> out;
  for (const auto& b : const_cast<BasicBUNet<T>*>(this)->buffers()) out.push_back({b.name, b.tensor});
  return out;
}

template <typename T>
std::vector<FlipoutConv2D<T>*> BasicBUNet<T>::flipout_layers() {
  std::vector<FlipoutConv2D<T>*> out;
  for (auto& d : decoder) out.push_back(&d.conv);
  return out;
}

template <typename T>
std::vector<const FlipoutConv2D<T>*> BasicBUNet<T>::flipout_layers() const {
  std::vector<const FlipoutConv2D<T>*> out;
  for (const auto& d : decoder) out.push_back(&d.conv);
  return out;
}

std::size_t parameter_count(const NetConfig& config) {
  std::size_t total = 0;
  auto conv = [&](std::size_t a, std::size_t b, std::size_t k) { total += a * b * k * k + b; };
  std::size_t cin = config.in_channels;
  for (auto w : config.encoder_widths) {
    conv(cin, w, 3);
    conv(w, w, 3);
    total += 4 * w;
    cin = w;
  }
  for (auto d : config.decoder_widths()) {
    conv(cin, d, 2);
    total += 2 * (2 * d * d * 9 + d);
    total += 2 * d;
    cin = d;
  }
  conv(cin, 1, 1);
  return total;
}

template <typename T>
BasicBUNet<T> init_params(const NetConfig& config, std::uint64_t seed) {
  BasicBUNet<T> net(config);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto he = [&](BasicVar<T>& kernel, std::size_t fan_in) {
    const double std = std::sqrt(2.0 / double(fan_in));
    for (auto& v : kernel.mutable_value().data()) v = static_cast<T>(std * normal(rng));
    return std;
  };
  for (auto& e : net.encoder) {
    for (auto* c : {&e.conv1, &e.conv2}) {
      const auto& s = c->kernel.shape();
      he(c->kernel, s[1] * s[2] * s[3]);
    }
  }
  for (auto& d : net.decoder) {
    // Stride equals kernel size, so each output pixel sees Cin inputs.
    he(d.up.kernel, d.up.kernel.shape()[0]);
    const auto& s = d.conv.mu_kernel.shape();
    const double std = he(d.conv.mu_kernel, s[1] * s[2] * s[3]);
    // Posterior starts narrow: sigma ~ 1% of the typical weight magnitude.
    const auto rho = static_cast<T>(softplus_inverse(0.01 * std));
    d.conv.rho_kernel.mutable_value().fill(rho);
    d.conv.rho_bias.mutable_value().fill(rho);
  }
  he(net.head.kernel, net.head.kernel.shape()[1]);
  return net;
}

// ---- forward -----------------------------------------------------------------

template <typename T>
BasicVar<T> flipout_conv2d(BasicTape<T>& tape, const FlipoutConv2D<T>& layer, const BasicVar<T>& input, Rng* rng) {
  if (!rng) return ad::conv2d(tape, input, layer.mu_kernel, layer.mu_bias, layer.stride, layer.padding);
  if (input.value().rank() != 4) throw ShapeError("flipout_conv2d: input must be rank 4");

  const std::size_t N = input.shape()[0], Cin = input.shape()[1], Cout = layer.mu_kernel.shape()[0];
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  BasicTensor<T> eps_kernel(layer.mu_kernel.shape());
  for (auto& v : eps_kernel.data()) v = static_cast<T>(normal(*rng));
  BasicTensor<T> eps_bias(layer.mu_bias.shape());
  for (auto& v : eps_bias.data()) v = static_cast<T>(normal(*rng));
  BasicTensor<T> sign_in(Shape{N, Cin}), sign_out(Shape{N, Cout});
  for (auto& v : sign_in.data()) v = coin(*rng) ? T(1) : T(-1);
  for (auto& v : sign_out.data()) v = coin(*rng) ? T(1) : T(-1);

  const BasicVar<T> sigma_kernel = ad::softplus(tape, layer.rho_kernel);
  const BasicVar<T> delta_kernel = ad::mul(tape, sigma_kernel, BasicVar<T>(std::move(eps_kernel)));
  const BasicVar<T> sigma_bias = ad::softplus(tape, layer.rho_bias);
  const BasicVar<T> bias = ad::add(tape, layer.mu_bias, ad::mul(tape, sigma_bias, BasicVar<T>(std::move(eps_bias))));

  const BasicVar<T> mean_out = ad::conv2d(tape, input, layer.mu_kernel, bias, layer.stride, layer.padding);
  const BasicVar<T> flipped = ad::scale_channels(tape, input, sign_in);
  const BasicVar<T> perturb =
      ad::conv2d(tape, flipped, delta_kernel, BasicVar<T>(), layer.stride, layer.padding);
  return ad::add(tape, mean_out, ad::scale_channels(tape, perturb, sign_out));
}

namespace {

template <typename T>
BasicVar<T> conv_bn_act(BasicTape<T>& tape, const ConvLayer<T>& conv, BatchNormLayer<T>& bn, const BasicVar<T>& x,
                        Mode mode, double alpha) {
  auto y = ad::conv2d(tape, x, conv.kernel, conv.bias, conv.stride, conv.padding);
  y = ad::batch_norm2d(tape, y, bn.gamma, bn.beta, bn.stats, mode);
  return ad::leaky_relu(tape, y, alpha);
}

template <typename T>
BasicVar<T> forward_impl(BasicTape<T>& tape, BasicBUNet<T>& net, const BasicVar<T>& input, Mode mode, Rng* rng) {
  const auto& s = input.shape();
  if (s.size() != 4 || s[1] != net.config().in_channels)
    throw ShapeError("network input must be N x " + std::to_string(net.config().in_channels) + " x H x W, got " +
                     ad::shape_str(s));
  if (s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 || s[3] == 0)
    throw ShapeError("network input H and W must be positive multiples of 16, got " + ad::shape_str(s));
  const double alpha = net.config().leaky_alpha;

  std::array<BasicVar<T>, 5> skips;
  BasicVar<T> x = input;
  for (std::size_t i = 0; i < 5; ++i) {
    auto& e = net.encoder[i];
    x = conv_bn_act(tape, e.conv1, e.bn1, x, mode, alpha);
    x = conv_bn_act(tape, e.conv2, e.bn2, x, mode, alpha);
    skips[i] = x;
  }
  for (std::size_t j = 0; j < 4; ++j) {
    auto& d = net.decoder[j];
    x = ad::conv_transpose2d(tape, x, d.up.kernel, d.up.bias, d.up.stride, d.up.padding);
    x = ad::concat_channels(tape, x, skips[3 - j]);
    x = flipout_conv2d(tape, d.conv, x, rng);
    x = ad::batch_norm2d(tape, x, d.bn.gamma, d.bn.beta, d.bn.stats, mode);
    x = ad::leaky_relu(tape, x, alpha);
  }
  x = ad::conv2d(tape, x, net.head.kernel, net.head.bias, 1, 0);
  return ad::sigmoid(tape, x);
}

}  // namespace

template <typename T>
BasicVar<T> forward_deterministic(BasicTape<T>& tape, BasicBUNet<T>& net, const BasicVar<T>& input, Mode mode) {
  return forward_impl(tape, net, input, mode, nullptr);
}

template <typename T>
BasicVar<T> forward_flipout(BasicTape<T>& tape, BasicBUNet<T>& net, const BasicVar<T>& input, Mode mode, Rng& rng) {
  return forward_impl(tape, net, input, mode, &rng);
}

// ---- KL ----------------------------------------------------------------------

template <typename T>
BasicVar<T> kl_gaussian(BasicTape<T>& tape, const BasicVar<T>& mu, const BasicVar<T>& rho, double prior_std) {
  if (mu.shape() != rho.shape()) throw ShapeError("kl_gaussian: mu/rho shape mismatch");
  const double prior_var = prior_std * prior_std;
  double total = 0;
  for (std::size_t i = 0; i < mu.value().numel(); ++i) {
    const double m = mu.value()[i], sigma = softplus(double(rho.value()[i]));
    total += std::log(prior_std / sigma) + (sigma * sigma + m * m) / (2 * prior_var) - 0.5;
  }
  const bool grad = ad::needs_grad(tape, {&mu, &rho});
  BasicVar<T> out(BasicTensor<T>(Shape{1}, std::vector<T>{static_cast<T>(total)}), grad);
  if (grad) {
    auto mn = mu.node(), rn = rho.node(), yn = out.node();
    tape.record([=] {
      const double d = yn->grad_buffer()[0];
      const std::size_t n = mn->value.numel();
      if (mn->requires_grad) {
        auto g = mn->grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<T>(d * double(mn->value[i]) / prior_var);
      }
      if (rn->requires_grad) {
        auto g = rn->grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) {
          const double r = rn->value[i], sigma = softplus(r);
          const double dsigma = r >= 0 ? 1.0 / (1.0 + std::exp(-r)) : std::exp(r) / (1.0 + std::exp(r));
          g[i] += static_cast<T>(d * (sigma / prior_var - 1.0 / sigma) * dsigma);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> kl_weights(BasicTape<T>& tape, const BasicBUNet<T>& net) {
  BasicVar<T> total;
  for (const auto* layer : net.flipout_layers()) {
    for (auto term : {kl_gaussian(tape, layer->mu_kernel, layer->rho_kernel, layer->prior_std),
                      kl_gaussian(tape, layer->mu_bias, layer->rho_bias, layer->prior_std)}) {
      total = total.defined() ? ad::add(tape, total, term) : term;
    }
  }
  return total;
}

// ---- I/O ---------------------------------------------------------------------

ad::Tensor to_input_tensor(const std::vector<const FeatureStack*>& stacks) {
  if (stacks.empty()) throw ShapeError("to_input_tensor: no stacks");
  const auto& first = stacks.front()->channels;
  const std::size_t C = first.channels(), H = first.height(), W = first.width();
  ad::Tensor out(Shape{stacks.size(), C, H, W});
  for (std::size_t n = 0; n < stacks.size(); ++n) {
    const auto& a = stacks[n]->channels;
    if (a.channels() != C || a.height() != H || a.width() != W)
      throw ShapeError("to_input_tensor: feature stacks differ in shape");
    std::copy(a.values().begin(), a.values().end(), out.data().begin() + std::ptrdiff_t(n * C * H * W));
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const BUNet& net, const Json& metadata) {
  Json tensors = Json::array();
  std::vector<float> payload;
  for (const auto& p : net.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.var.shape()}});
    payload.insert(payload.end(), p.var.value().data().begin(), p.var.value().data().end());
  }
  for (const auto& b : net.buffers()) {
    tensors.push_back({{"name", b.name}, {"shape", b.tensor->shape()}});
    payload.insert(payload.end(), b.tensor->data().begin(), b.tensor->data().end());
  }
  Json header;
  header["dtype"] = "f32le";
  header["shape"] = {payload.size()};
  header["kind"] = "bunet_checkpoint";
  header["net"] = to_json(net.config());
  header["tensors"] = std::move(tensors);
  header["metadata"] = metadata;
  return encode_container(header, payload);
}

void save_checkpoint(const BUNet& net, const std::filesystem::path& path, const Json& metadata) {
  write_bytes(path, encode_checkpoint(net, metadata));
}

BUNet load_checkpoint(const std::filesystem::path& path, Json* metadata) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "bunet_checkpoint") throw FormatError(path.string() + ": not a checkpoint");
  BUNet net(net_config_from_json(c.header.at("net")));
  const Json& tensors = c.header.at("tensors");

  std::size_t offset = 0, index = 0;
  auto take = [&](const std::string& name, ad::Tensor& t) {
    if (index >= tensors.size() || tensors[index].value("name", "") != name ||
        tensors[index].at("shape").get<Shape>() != t.shape())
      throw FormatError(path.string() + ": checkpoint layout mismatch at " + name);
    if (offset + t.numel() > c.payload.size()) throw FormatError(path.string() + ": checkpoint payload too short");
    std::copy_n(c.payload.begin() + std::ptrdiff_t(offset), t.numel(), t.data().begin());
    offset += t.numel();
    ++index;
  };
  for (auto& p : net.parameters()) take(p.name, p.var.mutable_value());
  for (auto& b : net.buffers()) take(b.name, *b.tensor);
  if (index != tensors.size() || offset != c.payload.size())
    throw FormatError(path.string() + ": checkpoint has extra tensors");
  for (float v : c.payload)
    if (!std::isfinite(v)) throw DataError(path.string() + ": non-finite parameter");
  if (metadata) *metadata = c.header.value("metadata", Json::object());
  return net;
}

#define CALSEG_INSTANTIATE(T)                                                                                     \
  template class BasicBUNet<T>;                                                                                   \
  template BasicBUNet<T> init_params<T>(const NetConfig&, std::uint64_t);                                         \
  template BasicVar<T> flipout_conv2d(BasicTape<T>&, const FlipoutConv2D<T>&, const BasicVar<T>&, Rng*);          \
  template BasicVar<T> forward_deterministic(BasicTape<T>&, BasicBUNet<T>&, const BasicVar<T>&, Mode);            \
  template BasicVar<T> forward_flipout(BasicTape<T>&, BasicBUNet<T>&, const BasicVar<T>&, Mode, Rng&);            \
  template BasicVar<T> kl_weights(BasicTape<T>&, const BasicBUNet<T>&);                                           \
  template BasicVar<T> kl_gaussian(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&, double);

CALSEG_INSTANTIATE(float)
CALSEG_INSTANTIATE(double)

#undef CALSEG_INSTANTIATE

}  // namespace calseg
