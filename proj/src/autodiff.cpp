#include "calseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "calseg/errors.hpp"

namespace calseg::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
BasicVar<T>::BasicVar(BasicTensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
void BasicVar<T>::zero_grad() {
  if (node_) node_->grad_buffer().fill(T(0));
}

template <typename T>
void BasicTape<T>::backward(const BasicVar<T>& loss) {
  if (!loss.defined() || loss.value().numel() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "[]"));
  if (loss.requires_grad()) loss.node()->grad_buffer()[0] += T(1);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
BasicVar<T> make_output(BasicTensor<T> value, bool requires_grad) {
  return BasicVar<T>(std::move(value), requires_grad);
}

template <typename T>
void require_rank4(const BasicVar<T>& v, const char* what) {
  if (!v.defined() || v.value().rank() != 4) throw ShapeError(std::string(what) + " must be rank 4 (N x C x H x W)");
}

template <typename T>
void accumulate(Node<T>& node, const std::vector<double>& delta) {
  auto g = node.grad_buffer().data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(delta[i]);
}

// C[M x P] += A[M x K] * B[K x P]
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, double* C) {
  std::size_t m = 0;
  for (; m + 4 <= M; m += 4) {
    double* c0 = C + m * P;
    double* c1 = c0 + P;
    double* c2 = c1 + P;
    double* c3 = c2 + P;
    for (std::size_t k = 0; k < K; ++k) {
      const double a0 = A[m * K + k], a1 = A[(m + 1) * K + k], a2 = A[(m + 2) * K + k], a3 = A[(m + 3) * K + k];
      const T* b = B + k * P;
      for (std::size_t p = 0; p < P; ++p) {
        const double bv = b[p];
        c0[p] += a0 * bv;
        c1[p] += a1 * bv;
        c2[p] += a2 * bv;
        c3[p] += a3 * bv;
      }
    }
  }
  for (; m < M; ++m) {
    double* c = C + m * P;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[m * K + k];
      const T* b = B + k * P;
      for (std::size_t p = 0; p < P; ++p) c[p] += a * double(b[p]);
    }
  }
}

// C[M x P] += A^T * B with A stored K x M.
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, double* C) {
  std::size_t m = 0;
  for (; m + 4 <= M; m += 4) {
    double* c0 = C + m * P;
    double* c1 = c0 + P;
    double* c2 = c1 + P;
    double* c3 = c2 + P;
    for (std::size_t k = 0; k < K; ++k) {
      const T* a = A + k * M + m;
      const double a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
      const T* b = B + k * P;
      for (std::size_t p = 0; p < P; ++p) {
        const double bv = b[p];
        c0[p] += a0 * bv;
        c1[p] += a1 * bv;
        c2[p] += a2 * bv;
        c3[p] += a3 * bv;
      }
    }
  }
  for (; m < M; ++m) {
    double* c = C + m * P;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[k * M + m];
      const T* b = B + k * P;
      for (std::size_t p = 0; p < P; ++p) c[p] += a * double(b[p]);
    }
  }
}

template <typename T>
double dot(const T* a, const T* b, std::size_t n) {
  double s[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) s[j] += double(a[i + j]) * double(b[i + j]);
  for (; i < n; ++i) s[0] += double(a[i]) * double(b[i]);
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// C[M x N] += A[M x P] * B[N x P]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t P, const T* A, const T* B, double* C) {
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t n = 0; n < N; ++n) C[m * N + n] += dot(A + m * P, B + n * P, P);
}

struct ConvGeom {
  std::size_t C, H, W, kh, kw, stride, pad, Ho, Wo;
};

// col[(c * kh + i) * kw + j][oh * Wo + ow] = x[c][oh * s + i - pad][ow * s + j - pad] (0 outside)
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = long(oh * g.stride + i) - long(g.pad);
          T* row = dst + oh * g.Wo;
          if (ih < 0 || ih >= long(g.H)) {
            std::fill(row, row + g.Wo, T(0));
            continue;
          }
          const T* src = x + (c * g.H + std::size_t(ih)) * g.W;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = long(ow * g.stride + j) - long(g.pad);
            row[ow] = (iw < 0 || iw >= long(g.W)) ? T(0) : src[iw];
          }
        }
      }
}

// Scatter-add adjoint of im2col.
void col2im(const double* col, const ConvGeom& g, double* x) {
  const std::size_t P = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = long(oh * g.stride + i) - long(g.pad);
          if (ih < 0 || ih >= long(g.H)) continue;
          double* dst = x + (c * g.H + std::size_t(ih)) * g.W;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = long(ow * g.stride + j) - long(g.pad);
            if (iw >= 0 && iw < long(g.W)) dst[iw] += src[oh * g.Wo + ow];
          }
        }
      }
}

template <typename T>
void check_bias(const BasicVar<T>& bias, std::size_t channels, const char* op) {
  if (bias.defined() && (bias.value().rank() != 1 || bias.value().dim(0) != channels))
    throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(channels) + "]");
}

}  // namespace

// ---- conv2d ----------------------------------------------------------------

template <typename T>
BasicVar<T> conv2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& kernel, const BasicVar<T>& bias,
                   std::size_t stride, std::size_t padding) {
  require_rank4(input, "conv2d input");
  require_rank4(kernel, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  const std::size_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const std::size_t Cout = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != Cin)
    throw ShapeError("conv2d: kernel " + shape_str(ks) + " incompatible with input " + shape_str(xs));
  if (H + 2 * padding < kh || W + 2 * padding < kw) throw ShapeError("conv2d: kernel larger than padded input");
  check_bias(bias, Cout, "conv2d");

  const ConvGeom g{Cin, H, W, kh, kw, stride, padding, (H + 2 * padding - kh) / stride + 1,
                   (W + 2 * padding - kw) / stride + 1};
  const std::size_t P = g.Ho * g.Wo, CKK = Cin * kh * kw;
  const bool grad = needs_grad(tape, {&input, &kernel, &bias});

  auto cols = std::make_shared<std::vector<T>>(N * CKK * P);
  BasicTensor<T> out(Shape{N, Cout, g.Ho, g.Wo});
  std::vector<double> acc(Cout * P);
  const T* K = kernel.value().data().data();
  for (std::size_t n = 0; n < N; ++n) {
    T* col = cols->data() + n * CKK * P;
    im2col(input.value().data().data() + n * Cin * H * W, g, col);
    for (std::size_t co = 0; co < Cout; ++co)
      std::fill_n(acc.begin() + co * P, P, bias.defined() ? double(bias.value()[co]) : 0.0);
    gemm_nn(Cout, CKK, P, K, col, acc.data());
    T* dst = out.data().data() + n * Cout * P;
    for (std::size_t i = 0; i < Cout * P; ++i) dst[i] = static_cast<T>(acc[i]);
  }

  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> xn = input.node(), kn = kernel.node(), bn = bias.defined() ? bias.node() : nullptr,
               yn = result.node();
    tape.record([=] {
      const T* dY = yn->grad_buffer().data().data();
      const T* Kd = kn->value.data().data();
      std::vector<double> dK(kn->requires_grad ? Cout * CKK : 0, 0.0);
      std::vector<double> db(bn && bn->requires_grad ? Cout : 0, 0.0);
      std::vector<double> dX(xn->requires_grad ? N * Cin * H * W : 0, 0.0);
      std::vector<double> dcol(xn->requires_grad ? CKK * P : 0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* dy = dY + n * Cout * P;
        const T* col = cols->data() + n * CKK * P;
        for (std::size_t co = 0; co < db.size(); ++co)
          for (std::size_t p = 0; p < P; ++p) db[co] += dy[co * P + p];
        if (!dK.empty()) gemm_nt(Cout, CKK, P, dy, col, dK.data());
        if (!dX.empty()) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          gemm_tn(CKK, Cout, P, Kd, dy, dcol.data());
          col2im(dcol.data(), g, dX.data() + n * Cin * H * W);
        }
      }
      if (!dK.empty()) accumulate(*kn, dK);
      if (!db.empty()) accumulate(*bn, db);
      if (!dX.empty()) accumulate(*xn, dX);
    });
  }
  return result;
}

// ---- conv_transpose2d --------------------------------------------------------

template <typename T>
BasicVar<T> conv_transpose2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& kernel,
                             const BasicVar<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank4(input, "conv_transpose2d input");
  require_rank4(kernel, "conv_transpose2d kernel");
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be positive");
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ks[1], kh = ks[2], kw = ks[3];
  if (ks[0] != Ci)
    throw ShapeError("conv_transpose2d: kernel " + shape_str(ks) + " incompatible with input " + shape_str(xs));
  const long Ho = long(H - 1) * long(stride) - 2 * long(padding) + long(kh);
  const long Wo = long(W - 1) * long(stride) - 2 * long(padding) + long(kw);
  if (Ho < 1 || Wo < 1) throw ShapeError("conv_transpose2d: non-positive output size");
  check_bias(bias, Co, "conv_transpose2d");

  // Geometry of the conv2d this op is the adjoint of (its input is our output).
  const ConvGeom g{Co, std::size_t(Ho), std::size_t(Wo), kh, kw, stride, padding, H, W};
  const std::size_t P = H * W, OP = g.H * g.W, CKK = Co * kh * kw;
  const bool grad = needs_grad(tape, {&input, &kernel, &bias});

  BasicTensor<T> out(Shape{N, Co, g.H, g.W});
  std::vector<double> col(CKK * P), acc(Co * OP);
  const T* K = kernel.value().data().data();
  for (std::size_t n = 0; n < N; ++n) {
    std::fill(col.begin(), col.end(), 0.0);
    gemm_tn(CKK, Ci, P, K, input.value().data().data() + n * Ci * P, col.data());
    for (std::size_t co = 0; co < Co; ++co)
      std::fill_n(acc.begin() + co * OP, OP, bias.defined() ? double(bias.value()[co]) : 0.0);
    col2im(col.data(), g, acc.data());
    T* dst = out.data().data() + n * Co * OP;
    for (std::size_t i = 0; i < Co * OP; ++i) dst[i] = static_cast<T>(acc[i]);
  }

  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> xn = input.node(), kn = kernel.node(), bn = bias.defined() ? bias.node() : nullptr,
               yn = result.node();
    tape.record([=] {
      const T* dY = yn->grad_buffer().data().data();
      const T* Kd = kn->value.data().data();
      const T* X = xn->value.data().data();
      std::vector<double> dK(kn->requires_grad ? Ci * CKK : 0, 0.0);
      std::vector<double> db(bn && bn->requires_grad ? Co : 0, 0.0);
      std::vector<double> dX(xn->requires_grad ? N * Ci * P : 0, 0.0);
      std::vector<T> gcol(CKK * P);
      for (std::size_t n = 0; n < N; ++n) {
        const T* dy = dY + n * Co * OP;
        for (std::size_t co = 0; co < db.size(); ++co)
          for (std::size_t p = 0; p < OP; ++p) db[co] += dy[co * OP + p];
        if (dK.empty() && dX.empty()) continue;
        im2col(dy, g, gcol.data());
        if (!dX.empty()) gemm_nn(Ci, CKK, P, Kd, gcol.data(), dX.data() + n * Ci * P);
        if (!dK.empty()) gemm_nt(Ci, CKK, P, X + n * Ci * P, gcol.data(), dK.data());
      }
      if (!dK.empty()) accumulate(*kn, dK);
      if (!db.empty()) accumulate(*bn, db);
      if (!dX.empty()) accumulate(*xn, dX);
    });
  }
  return result;
}

// ---- batch_norm2d ------------------------------------------------------------

template <typename T>
BasicVar<T> batch_norm2d(BasicTape<T>& tape, const BasicVar<T>& input, const BasicVar<T>& gamma,
                         const BasicVar<T>& beta, BatchNormStats<T>& stats, Mode mode, double momentum,
                         double epsilon) {
  require_rank4(input, "batch_norm2d input");
  const auto& xs = input.shape();
  const std::size_t N = xs[0], C = xs[1], P = xs[2] * xs[3], M = N * P;
  for (const auto* v : {&gamma, &beta})
    if (!v->defined() || v->value().rank() != 1 || v->value().dim(0) != C)
      throw ShapeError("batch_norm2d: gamma/beta must have shape [" + std::to_string(C) + "]");
  if (stats.mean.numel() != C || stats.var.numel() != C) throw ShapeError("batch_norm2d: running stats size");
  if (mode == Mode::kTrain && M < 2) throw ShapeError("batch_norm2d: train mode needs more than one value per channel");

  const bool grad = needs_grad(tape, {&input, &gamma, &beta});
  const T* X = input.value().data().data();
  auto xhat = std::make_shared<std::vector<double>>(N * C * P);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  BasicTensor<T> out(xs);
  T* Y = out.data().data();

  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == Mode::kTrain) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) s += X[(n * C + c) * P + p];
      mu = s / double(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
          const double d = X[(n * C + c) * P + p] - mu;
          ss += d * d;
        }
      var = ss / double(M);
      stats.mean[c] = static_cast<T>((1 - momentum) * stats.mean[c] + momentum * mu);
      stats.var[c] = static_cast<T>((1 - momentum) * stats.var[c] + momentum * ss / double(M - 1));
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[c] = is;
    const double g = gamma.value()[c], b = beta.value()[c];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = (n * C + c) * P + p;
        const double xh = (X[i] - mu) * is;
        (*xhat)[i] = xh;
        Y[i] = static_cast<T>(g * xh + b);
      }
  }

  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> xn = input.node(), gn = gamma.node(), bn = beta.node(), yn = result.node();
    tape.record([=] {
      const T* dY = yn->grad_buffer().data().data();
      std::vector<double> dg(C, 0.0), db(C, 0.0), dX(xn->requires_grad ? N * C * P : 0, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        double sdy = 0, sdyx = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (n * C + c) * P + p;
            sdy += dY[i];
            sdyx += dY[i] * (*xhat)[i];
          }
        dg[c] = sdyx;
        db[c] = sdy;
        if (dX.empty()) continue;
        const double g = gn->value[c], is = (*inv_std)[c];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (n * C + c) * P + p;
            if (mode == Mode::kTrain)
              dX[i] = g * is * (dY[i] - sdy / double(M) - (*xhat)[i] * sdyx / double(M));
            else
              dX[i] = g * is * dY[i];
          }
      }
      if (gn->requires_grad) accumulate(*gn, dg);
      if (bn->requires_grad) accumulate(*bn, db);
      if (!dX.empty()) accumulate(*xn, dX);
    });
  }
  return result;
}

// ---- elementwise -------------------------------------------------------------

namespace {

// y = f(x) elementwise with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
BasicVar<T> unary(BasicTape<T>& tape, const BasicVar<T>& input, F f, DF df) {
  const bool grad = needs_grad(tape, {&input});
  BasicTensor<T> out(input.shape());
  const auto x = input.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(f(double(x[i])));
  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> xn = input.node(), yn = result.node();
    tape.record([=] {
      const auto dy = yn->grad_buffer().data();
      const auto xv = xn->value.data();
      const auto yv = yn->value.data();
      auto dx = xn->grad_buffer().data();
      for (std::size_t i = 0; i < dx.size(); ++i)
        dx[i] += static_cast<T>(double(dy[i]) * df(double(xv[i]), double(yv[i])));
    });
  }
  return result;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double stable_softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

template <typename T>
void require_same_shape(const BasicVar<T>& a, const BasicVar<T>& b, const char* op) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + (a.defined() ? shape_str(a.shape()) : "[]") + " vs " +
                     (b.defined() ? shape_str(b.shape()) : "[]"));
}

}  // namespace

template <typename T>
BasicVar<T> leaky_relu(BasicTape<T>& tape, const BasicVar<T>& input, double alpha) {
  return unary(
      tape, input, [alpha](double v) { return v >= 0 ? v : alpha * v; },
      [alpha](double v, double) { return v > 0 ? 1.0 : alpha; });
}

template <typename T>
BasicVar<T> sigmoid(BasicTape<T>& tape, const BasicVar<T>& input) {
  return unary(tape, input, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

template <typename T>
BasicVar<T> softplus(BasicTape<T>& tape, const BasicVar<T>& input) {
  return unary(tape, input, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

template <typename T>
BasicVar<T> scale(BasicTape<T>& tape, const BasicVar<T>& a, double factor) {
  return unary(
      tape, a, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

template <typename T>
BasicVar<T> add_scalar(BasicTape<T>& tape, const BasicVar<T>& a, double value) {
  return unary(
      tape, a, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

template <typename T>
BasicVar<T> add(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same_shape(a, b, "add");
  const bool grad = needs_grad(tape, {&a, &b});
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> an = a.node(), bn = b.node(), yn = result.node();
    tape.record([=] {
      const auto dy = yn->grad_buffer().data();
      for (const auto& n : {an, bn}) {
        if (!n->requires_grad) continue;
        auto g = n->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return result;
}

template <typename T>
BasicVar<T> mul(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same_shape(a, b, "mul");
  const bool grad = needs_grad(tape, {&a, &b});
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> an = a.node(), bn = b.node(), yn = result.node();
    tape.record([=] {
      const auto dy = yn->grad_buffer().data();
      if (an->requires_grad) {
        auto g = an->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * an->value[i];
      }
    });
  }
  return result;
}

template <typename T>
BasicVar<T> scale_channels(BasicTape<T>& tape, const BasicVar<T>& input, const BasicTensor<T>& factors) {
  require_rank4(input, "scale_channels input");
  const auto& xs = input.shape();
  const std::size_t N = xs[0], C = xs[1], P = xs[2] * xs[3];
  if (factors.shape() != Shape{N, C}) throw ShapeError("scale_channels: factors must be N x C");
  const bool grad = needs_grad(tape, {&input});
  BasicTensor<T> out(xs);
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t p = 0; p < P; ++p) out[nc * P + p] = input.value()[nc * P + p] * factors[nc];
  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> xn = input.node(), yn = result.node();
    tape.record([=] {
      const auto dy = yn->grad_buffer().data();
      auto g = xn->grad_buffer().data();
      for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t p = 0; p < P; ++p) g[nc * P + p] += dy[nc * P + p] * factors[nc];
    });
  }
  return result;
}

template <typename T>
BasicVar<T> concat_channels(BasicTape<T>& tape, const BasicVar<T>& a, const BasicVar<T>& b) {
  require_rank4(a, "concat_channels a");
  require_rank4(b, "concat_channels b");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    throw ShapeError("concat_channels: " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t N = as[0], Ca = as[1], Cb = bs[1], P = as[2] * as[3];
  const bool grad = needs_grad(tape, {&a, &b});
  BasicTensor<T> out(Shape{N, Ca + Cb, as[2], as[3]});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data().data() + n * Ca * P, Ca * P, out.data().data() + n * (Ca + Cb) * P);
    std::copy_n(b.value().data().data() + n * Cb * P, Cb * P, out.data().data() + (n * (Ca + Cb) + Ca) * P);
  }
  auto result = make_output(std::move(out), grad);
  if (grad) {
    NodePtr<T> an = a.node(), bn = b.node(), yn = result.node();
    tape.record([=] {
      const T* dy = yn->grad_buffer().data().data();
      for (std::size_t n = 0; n < N; ++n) {
        if (an->requires_grad) {
          T* g = an->grad_buffer().data().data() + n * Ca * P;
          const T* src = dy + n * (Ca + Cb) * P;
          for (std::size_t i = 0; i < Ca * P; ++i) g[i] += src[i];
        }
        if (bn->requires_grad) {
          T* g = bn->grad_buffer().data().data() + n * Cb * P;
          const T* src = dy + (n * (Ca + Cb) + Ca) * P;
          for (std::size_t i = 0; i < Cb * P; ++i) g[i] += src[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
BasicVar<T> sum(BasicTape<T>& tape, const BasicVar<T>& a) {
  const bool grad = needs_grad(tape, {&a});
  double s = 0;
  for (T v : a.value().data()) s += v;
  auto result = make_output(BasicTensor<T>(Shape{1}, std::vector<T>{static_cast<T>(s)}), grad);
  if (grad) {
    NodePtr<T> an = a.node(), yn = result.node();
    tape.record([=] {
      const T d = yn->grad_buffer()[0];
      for (auto& g : an->grad_buffer().data()) g += d;
    });
  }
  return result;
}

template <typename T>
BasicVar<T> mean(BasicTape<T>& tape, const BasicVar<T>& a) {
  if (a.value().numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(tape, sum(tape, a), 1.0 / double(a.value().numel()));
}

#define CALSEG_INSTANTIATE(T)                                                                                   \
  template class BasicTensor<T>;                                                                                \
  template class BasicVar<T>;                                                                                   \
  template class BasicTape<T>;                                                                                  \
  template BasicVar<T> conv2d(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&,        \
                              std::size_t, std::size_t);                                                        \
  template BasicVar<T> conv_transpose2d(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&,                  \
                                        const BasicVar<T>&, std::size_t, std::size_t);                          \
  template BasicVar<T> batch_norm2d(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&,  \
                                    BatchNormStats<T>&, Mode, double, double);                                  \
  template BasicVar<T> leaky_relu(BasicTape<T>&, const BasicVar<T>&, double);                                   \
  template BasicVar<T> sigmoid(BasicTape<T>&, const BasicVar<T>&);                                              \
  template BasicVar<T> softplus(BasicTape<T>&, const BasicVar<T>&);                                             \
  template BasicVar<T> concat_channels(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&);                  \
  template BasicVar<T> scale_channels(BasicTape<T>&, const BasicVar<T>&, const BasicTensor<T>&);                \
  template BasicVar<T> add(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&);                              \
  template BasicVar<T> mul(BasicTape<T>&, const BasicVar<T>&, const BasicVar<T>&);                              \
  template BasicVar<T> scale(BasicTape<T>&, const BasicVar<T>&, double);                                        \
  template BasicVar<T> add_scalar(BasicTape<T>&, const BasicVar<T>&, double);                                   \
  template BasicVar<T> sum(BasicTape<T>&, const BasicVar<T>&);                                                  \
  template BasicVar<T> mean(BasicTape<T>&, const BasicVar<T>&);

CALSEG_INSTANTIATE(float)
CALSEG_INSTANTIATE(double)

#undef CALSEG_INSTANTIATE

}  // namespace calseg::ad
