#pragma once

// Minimal reverse-mode automatic differentiation over dense N x C x H x W
// tensors: exactly the primitives the segmentation network needs.
//
// Every op takes the tape it records onto. An op records a backward step only
// when the tape is recording and at least one operand requires gradients.
// Tape::backward replays the steps in exact reverse order; gradients of leaf
// variables accumulate across calls until zero_grad().
//
// Templated on the storage scalar: float for training and inference, double
// for finite-difference gradient checks. Reductions accumulate in double.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace calseg::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  void fill(T v);
  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;

  /// Gradient buffer, allocated as zeros on first use.
  BasicTensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = BasicTensor<T>(value.shape());
    return grad;
  }
};

/// Shared handle to a value (and its gradient) in the graph.
template <typename T>
class BasicVar {
 public:
  BasicVar() = default;
  explicit BasicVar(BasicTensor<T> value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const BasicTensor<T>& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading; never use while a
  /// tape that references this variable is pending.
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Zero-filled when no gradient has been accumulated yet.
  const BasicTensor<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad();

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class BasicTape {
 public:
  explicit BasicTape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return steps_.size(); }
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  /// Seeds d(loss)/d(loss) = 1, runs every step in reverse, then clears.
  /// Throws ShapeError unless loss holds exactly one element.
  void backward(const BasicVar<T>& loss);
  void clear() { steps_.clear(); }

 private:
  bool recording_;
  std::vector<std::function<void()>> steps_;
};

/// Per-channel running statistics for batch normalization (not trained).
template <typename T>
struct BatchNormStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;
  explicit BatchNormStats(std::size_t channels = 0)
      : mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

enum class Mode { kTrain, kEval };

// ---- primitives ------------------------------------------------------------

/// Cross-correlation. input N x Cin x H x W, kernel Cout x Cin x kH x kW,
/// bias Cout (may be undefined). Output spatial size is
/// floor((H + 2 * padding - kH) / stride) + 1.
template <typename T>
BasicVar<T> conv2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& kernel,
                   const BasicVar<T>& bias, std::size_t stride, std::size_t padding);

/// Adjoint of conv2d with respect to its input. input N x Ci x H x W, kernel
/// Ci x Co x kH x kW (same layout conv2d uses to map Co -> Ci), bias Co.
/// Output spatial size is (H - 1) * stride - 2 * padding + kH.
template <typename T>
BasicVar<T> conv_transpose2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& kernel,
                             const BasicVar<T>& bias, std::size_t stride, std::size_t padding);

/// Train mode normalizes with biased batch statistics and updates `stats`
/// (running variance uses the unbiased estimate); eval mode uses `stats`.
template <typename T>
BasicVar<T> batch_norm2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& gamma,
                         const BasicVar<T>& beta, BatchNormStats<T>& stats, Mode mode, double momentum = 0.1,
                         double epsilon = 1e-5);

/// Subgradient at 0 is alpha.
template <typename T>
BasicVar<T> leaky_relu(BasicTape<T>& tape, const BasicVar<T>& input, double alpha = 0.01);

template <typename T>
BasicVar<T> sigmoid(BasicTape<T>& tape, const BasicVar<T>& input);

/// ln(1 + e^v), evaluated without overflow.
template <typename T>
BasicVar<T> softplus(BasicTape<T>& tape, const BasicVar<T>& input);

template <typename T>
BasicVar<T> concat_channels(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b);

/// Multiplies channel c of example n by factors[n][c]. `factors` is N x C
/// and treated as a constant.
template <typename T>
BasicVar<T> scale_channels(BasicTape<T>& tape, const BasicVar<T>& input, const BasicTensor<T>& factors);

template <typename T>
BasicVar<T> add(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b);

template <typename T>
BasicVar<T> mul(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b);

template <typename T>
BasicVar<T> scale(BasicTape<T>& tape, const BasicVar<T>& a, double factor);

template <typename T>
BasicVar<T> add_scalar(BasicTape<T>& tape, const BasicVar<T>& a, double value);

/// Shape {1}.
template <typename T>
BasicVar<T> sum(BasicTape<T>& tape, const BasicVar<T>& a);

template <typename T>
BasicVar<T> mean(BasicTape<T>& tape, const BasicVar<T>& a);

using Tensor = BasicTensor<float>;
using Var = BasicVar<float>;
using Tape = BasicTape<float>;

// ---- helpers for writing custom ops ---------------------------------------

/// True when `tape` should record a step for an op over `inputs`.
template <typename T>
bool needs_grad(const BasicTape<T>& tape, std::initializer_list<const BasicVar<T>*> inputs) {
  if (!tape.recording()) return false;
  for (const auto* v : inputs)
    if (v && v->requires_grad()) return true;
  return false;
}

}  // namespace calseg::ad
