#include "calseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "calseg/errors.hpp"

namespace calseg {

using ad::BasicTape;
using ad::BasicTensor;
using ad::BasicVar;
using ad::Shape;

void Hyperparams::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be positive");
  if (kl_scale && (!(*kl_scale >= 0) || !std::isfinite(*kl_scale)))
    throw ConfigError("train.kl_scale must be non-negative");
  if (!(clamp_epsilon > 0 && clamp_epsilon < 0.5)) throw ConfigError("train.clamp_epsilon must be in (0, 0.5)");
  if (!(train_fraction >= 0 && train_fraction <= 1)) throw ConfigError("train.train_fraction must be in [0, 1]");
}

Json to_json(const Hyperparams& hp) {
  Json j;
  j["epochs"] = hp.epochs;
  j["batch_size"] = hp.batch_size;
  j["learning_rate"] = hp.learning_rate;
  j["kl_scale"] = hp.kl_scale ? Json(*hp.kl_scale) : Json(nullptr);
  j["clamp_epsilon"] = hp.clamp_epsilon;
  j["seed"] = hp.seed;
  j["train_fraction"] = hp.train_fraction;
  return j;
}

Hyperparams hyperparams_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  Hyperparams hp;
  auto count = [](const Json& v, const char* key) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError(std::string("train.") + key + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  };
  auto real = [](const Json& v, const char* key) {
    if (!v.is_number()) throw ConfigError(std::string("train.") + key + " must be a number");
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "epochs") hp.epochs = count(v, "epochs");
    else if (key == "batch_size") hp.batch_size = count(v, "batch_size");
    else if (key == "learning_rate") hp.learning_rate = real(v, "learning_rate");
    else if (key == "kl_scale") hp.kl_scale = v.is_null() ? std::nullopt : std::optional<double>(real(v, "kl_scale"));
    else if (key == "clamp_epsilon") hp.clamp_epsilon = real(v, "clamp_epsilon");
    else if (key == "seed") hp.seed = count(v, "seed");
    else if (key == "train_fraction") hp.train_fraction = real(v, "train_fraction");
    else throw ConfigError("train: unknown field '" + key + "'");
  }
  hp.validate();
  return hp;
}

// ---- losses ------------------------------------------------------------------

namespace {

template <typename T>
void check_pair(const BasicTensor<T>& y_true, const BasicVar<T>& y_pred, const char* op) {
  if (!y_pred.defined() || y_true.shape() != y_pred.shape())
    throw ShapeError(std::string(op) + ": label shape " + ad::shape_str(y_true.shape()) + " vs prediction " +
                     (y_pred.defined() ? ad::shape_str(y_pred.shape()) : "[]"));
}

template <typename T>
BasicVar<T> scalar_output(double value, bool grad) {
  return BasicVar<T>(BasicTensor<T>(Shape{1}, std::vector<T>{static_cast<T>(value)}), grad);
}

}  // namespace

template <typename T>
BasicVar<T> loss_ce(BasicTape<T>& tape, const BasicTensor<T>& y_true, const BasicVar<T>& y_pred, double eps) {
  check_pair(y_true, y_pred, "loss_ce");
  double total = 0;
  for (std::size_t i = 0; i < y_true.numel(); ++i) {
    const double y = y_true[i], p = std::clamp(double(y_pred.value()[i]), eps, 1 - eps);
    total -= y * std::log(p) + (1 - y) * std::log(1 - p);
  }
  const bool grad = ad::needs_grad(tape, {&y_pred});
  auto out = scalar_output<T>(total, grad);
  if (grad) {
    auto pn = y_pred.node(), yn = out.node();
    auto labels = std::make_shared<BasicTensor<T>>(y_true);
    tape.record([=] {
      const double d = yn->grad_buffer()[0];
      auto g = pn->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = pn->value[i], y = (*labels)[i];
        if (p < eps || p > 1 - eps) continue;
        g[i] += static_cast<T>(d * (-y / p + (1 - y) / (1 - p)));
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> loss_dice(BasicTape<T>& tape, const BasicTensor<T>& y_true, const BasicVar<T>& y_pred) {
  check_pair(y_true, y_pred, "loss_dice");
  double inter = 0, denom = 0;
  for (std::size_t i = 0; i < y_true.numel(); ++i) {
    const double y = y_true[i], p = y_pred.value()[i];
    inter += y * p;
    denom += y * y + p * p;
  }
  const double value = denom > 0 ? 1 - 2 * inter / denom : 0.0;
  const bool grad = ad::needs_grad(tape, {&y_pred});
  auto out = scalar_output<T>(value, grad);
  if (grad && denom > 0) {
    auto pn = y_pred.node(), yn = out.node();
    auto labels = std::make_shared<BasicTensor<T>>(y_true);
    tape.record([=] {
      const double d = yn->grad_buffer()[0];
      auto g = pn->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = pn->value[i], y = (*labels)[i];
        g[i] += static_cast<T>(d * -2 * (y * denom - 2 * p * inter) / (denom * denom));
      }
    });
  }
  return out;
}

template <typename T>
BasicVar<T> loss_kld(BasicTape<T>& tape, const BasicTensor<T>& y_true, const BasicVar<T>& y_pred, double eps) {
  check_pair(y_true, y_pred, "loss_kld");
  double total = 0;
  for (std::size_t i = 0; i < y_true.numel(); ++i) {
    const double y = y_true[i];
    if (y == 0) continue;
    const double p = std::clamp(double(y_pred.value()[i]), eps, 1 - eps);
    total += y * std::log(y / p);
  }
  const bool grad = ad::needs_grad(tape, {&y_pred});
  auto out = scalar_output<T>(total, grad);
  if (grad) {
    auto pn = y_pred.node(), yn = out.node();
    auto labels = std::make_shared<BasicTensor<T>>(y_true);
    tape.record([=] {
      const double d = yn->grad_buffer()[0];
      auto g = pn->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = pn->value[i], y = (*labels)[i];
        if (y == 0 || p < eps || p > 1 - eps) continue;
        g[i] += static_cast<T>(d * -y / p);
      }
    });
  }
  return out;
}

template <typename T>
LossTerms<T> total_loss(BasicTape<T>& tape, const BasicTensor<T>& y_true, const BasicVar<T>& y_pred,
                        const BasicBUNet<T>& net, double kl_scale, double eps) {
  LossTerms<T> t;
  t.ce = loss_ce(tape, y_true, y_pred, eps);
  t.dice = loss_dice(tape, y_true, y_pred);
  t.kld = loss_kld(tape, y_true, y_pred, eps);
  t.weight_kl = kl_weights(tape, net);
  auto data = ad::scale(tape, ad::add(tape, ad::add(tape, t.ce, t.dice), t.kld), 1.0 / 3.0);
  t.total = kl_scale == 0 ? data : ad::add(tape, data, ad::scale(tape, t.weight_kl, kl_scale));
  return t;
}

ad::Tensor to_label_tensor(const std::vector<const MaskMap*>& masks) {
  if (masks.empty()) throw ShapeError("to_label_tensor: no masks");
  const std::size_t H = masks.front()->height(), W = masks.front()->width();
  ad::Tensor out(Shape{masks.size(), 1, H, W});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n]->height() != H || masks[n]->width() != W) throw ShapeError("to_label_tensor: masks differ in shape");
    for (std::size_t p = 0; p < H * W; ++p) out[n * H * W + p] = masks[n]->values()[p];
  }
  return out;
}

// ---- data --------------------------------------------------------------------

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

}  // namespace

SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0 && fraction <= 1)) throw ConfigError("split fraction must be in [0, 1]");
  Rng rng = make_rng(seed);
  const auto order = permutation(n, rng);
  const auto n_train = std::min(n, static_cast<std::size_t>(std::ceil(fraction * double(n) - 1e-9)));
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  s.test.assign(order.begin() + std::ptrdiff_t(n_train), order.end());
  return s;
}

// ---- optimization --------------------------------------------------------------

Adam::Adam(std::vector<ad::Var> params, double learning_rate, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value().numel(), 0.0);
    v_.emplace_back(p.value().numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1 - std::pow(beta1_, double(t_)), c2 = 1 - std::pow(beta2_, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].mutable_value().data();
    const auto grads = params_[k].grad().data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = beta1_ * m[i] + (1 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
      values[i] = static_cast<float>(values[i] - lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
    }
  }
}

std::string history_jsonl(const TrainHistory& history) {
  std::ostringstream os;
  for (std::size_t e = 0; e < history.epochs.size(); ++e) {
    const auto& s = history.epochs[e];
    Json j;
    j["epoch"] = e + 1;
    j["total"] = s.total;
    j["ce"] = s.ce;
    j["dice"] = s.dice;
    j["kld"] = s.kld;
    j["weight_kl"] = s.weight_kl;
    os << j.dump() << '\n';
  }
  return os.str();
}

TrainResult train(const BUNet& initial, const std::vector<Sample>& dataset, const Hyperparams& hp,
                  const EpochCallback& on_epoch) {
  hp.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  const auto& first = dataset.front().features.channels;
  for (const auto& s : dataset) {
    if (s.features.channels.height() != first.height() || s.features.channels.width() != first.width() ||
        s.label.height() != first.height() || s.label.width() != first.width())
      throw ShapeError("train: all samples must share H and W");
  }

  TrainResult result{initial.clone(), {}};
  BUNet& net = result.net;
  std::vector<ad::Var> params;
  for (const auto& p : net.parameters()) params.push_back(p.var);
  Adam adam(params, hp.learning_rate);

  const std::size_t n_batches = (dataset.size() + hp.batch_size - 1) / hp.batch_size;
  const double kl_scale = hp.kl_scale.value_or(1.0 / double(n_batches));
  Rng sample_rng = make_rng(split_seed(hp.seed, 0x5a17'f11bULL));

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng order_rng = make_rng(split_seed(hp.seed, epoch));
    const auto order = permutation(dataset.size(), order_rng);
    EpochStats stats;
    for (std::size_t b = 0; b < n_batches; ++b) {
      std::vector<const FeatureStack*> xs;
      std::vector<const MaskMap*> ys;
      for (std::size_t i = b * hp.batch_size; i < std::min(dataset.size(), (b + 1) * hp.batch_size); ++i) {
        xs.push_back(&dataset[order[i]].features);
        ys.push_back(&dataset[order[i]].label);
      }
      ad::Tape tape;
      adam.zero_grad();
      const ad::Var x(to_input_tensor(xs));
      const ad::Var pred = forward_flipout(tape, net, x, ad::Mode::kTrain, sample_rng);
      const auto terms = total_loss(tape, to_label_tensor(ys), pred, net, kl_scale, hp.clamp_epsilon);
      const double total = terms.total.value()[0];
      if (!std::isfinite(total)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1));
      tape.backward(terms.total);
      adam.step();

      stats.total += total;
      stats.ce += terms.ce.value()[0];
      stats.dice += terms.dice.value()[0];
      stats.kld += terms.kld.value()[0];
      stats.weight_kl += terms.weight_kl.value()[0];
    }
    for (double* v : {&stats.total, &stats.ce, &stats.dice, &stats.kld, &stats.weight_kl}) *v /= double(n_batches);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.epochs.push_back(stats);
    if (on_epoch) on_epoch(epoch, stats);
  }
  result.history.optimizer_steps = adam.steps();
  return result;
}

#define CALSEG_INSTANTIATE(T)                                                                                    \
  template BasicVar<T> loss_ce(BasicTape<T>&, const BasicTensor<T>&, const BasicVar<T>&, double);                \
  template BasicVar<T> loss_dice(BasicTape<T>&, const BasicTensor<T>&, const BasicVar<T>&);                      \
  template BasicVar<T> loss_kld(BasicTape<T>&, const BasicTensor<T>&, const BasicVar<T>&, double);               \
  template LossTerms<T> total_loss(BasicTape<T>&, const BasicTensor<T>&, const BasicVar<T>&, const BasicBUNet<T>&, \
                                   double, double);

CALSEG_INSTANTIATE(float)
CALSEG_INSTANTIATE(double)

#undef CALSEG_INSTANTIATE

}  // namespace calseg
