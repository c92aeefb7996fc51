#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "calseg/autodiff.hpp"
#include "calseg/bunet.hpp"
#include "calseg/datastore.hpp"
#include "calseg/rng.hpp"

namespace calseg {

struct Hyperparams {
  std::size_t epochs = 60;
  std::size_t batch_size = 2;
  double learning_rate = 0.0005;
  /// Weight on the posterior KL term; unset means 1 / batches per epoch.
  std::optional<double> kl_scale;
  double clamp_epsilon = 1e-7;
  std::uint64_t seed = 0;
  /// Share of blocks used for training; the rest form the test set.
  double train_fraction = 0.8;

  void validate() const;
};

Json to_json(const Hyperparams& hp);
Hyperparams hyperparams_from_json(const Json& j);

// ---- losses ------------------------------------------------------------------
// y_true is a constant tensor of labels shaped like y_pred (N x 1 x H x W).
// All three data terms are sums over every pixel of the batch.

/// -sum[y ln p + (1 - y) ln(1 - p)], p clamped to [eps, 1 - eps].
template <typename T>
ad::BasicVar<T> loss_ce(ad::BasicTape<T>& tape, const ad::BasicTensor<T>& y_true, const ad::BasicVar<T>& y_pred,
                        double eps = 1e-7);

/// 1 - 2 sum(y p) / (sum y^2 + sum p^2); 0 when both are all zero.
template <typename T>
ad::BasicVar<T> loss_dice(ad::BasicTape<T>& tape, const ad::BasicTensor<T>& y_true, const ad::BasicVar<T>& y_pred);

/// sum y ln(y / p) with 0 ln 0 = 0, p clamped to [eps, 1 - eps].
template <typename T>
ad::BasicVar<T> loss_kld(ad::BasicTape<T>& tape, const ad::BasicTensor<T>& y_true, const ad::BasicVar<T>& y_pred,
                         double eps = 1e-7);

template <typename T>
struct LossTerms {
  ad::BasicVar<T> total;
  ad::BasicVar<T> ce;
  ad::BasicVar<T> dice;
  ad::BasicVar<T> kld;
  ad::BasicVar<T> weight_kl;  // unscaled
};

/// (ce + dice + kld) / 3 + kl_scale * kl_weights(net).
template <typename T>
LossTerms<T> total_loss(ad::BasicTape<T>& tape, const ad::BasicTensor<T>& y_true, const ad::BasicVar<T>& y_pred,
                        const BasicBUNet<T>& net, double kl_scale, double eps = 1e-7);

/// Stacks masks into an N x 1 x H x W label tensor.
ad::Tensor to_label_tensor(const std::vector<const MaskMap*>& masks);

// ---- data --------------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle of 0..n-1; the first ceil(fraction * n) go to train.
SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed);

template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items, double fraction,
                                                              std::uint64_t seed) {
  const SplitIndices s = split_indices(items.size(), fraction, seed);
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (auto i : s.train) out.first.push_back(items[i]);
  for (auto i : s.test) out.second.push_back(items[i]);
  return out;
}

struct Sample {
  FeatureStack features;
  MaskMap label;
};

// ---- optimization --------------------------------------------------------------

class Adam {
 public:
  Adam(std::vector<ad::Var> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);
  void zero_grad();
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<ad::Var> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct EpochStats {
  double total = 0;
  double ce = 0;
  double dice = 0;
  double kld = 0;
  double weight_kl = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t optimizer_steps = 0;
};

/// One JSON object per line, one line per epoch. Wall-clock time is left out
/// so identical runs produce identical bytes.
std::string history_jsonl(const TrainHistory& history);

struct TrainResult {
  BUNet net;
  TrainHistory history;
};

using EpochCallback = std::function<void(std::size_t epoch, const EpochStats&)>;

/// Adam on one flipout sample per step, batches drawn in a seeded shuffle per
/// epoch. A pure function of (initial net, dataset order, hp).
/// Throws ConfigError for an empty dataset, NumericError on a non-finite loss.
TrainResult train(const BUNet& initial, const std::vector<Sample>& dataset, const Hyperparams& hp,
                  const EpochCallback& on_epoch = {});

}  // namespace calseg
