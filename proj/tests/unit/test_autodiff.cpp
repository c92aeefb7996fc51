#include <doctest.h>

#include <cmath>
#include <random>

#include "calseg/autodiff.hpp"
#include "calseg/errors.hpp"
#include "gradcheck.hpp"

using namespace calseg;
using namespace calseg::ad;
using gradcheck::DTape;
using gradcheck::DTensor;
using gradcheck::DVar;
using gradcheck::random_tensor;

namespace {

Var leaf(Shape s, std::vector<float> v, bool grad = false) { return Var(Tensor(std::move(s), std::move(v)), grad); }

std::vector<float> values(const Var& v) { return {v.value().data().begin(), v.value().data().end()}; }

}  // namespace

TEST_CASE("conv2d: identity kernel and hand-computed window sums") {
  Tape tape;
  const Var x = leaf({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(values(conv2d(tape, x, leaf({1, 1, 1, 1}, {1}), Var(), 1, 0)) == values(x));
  const Var y = conv2d(tape, x, leaf({1, 1, 2, 2}, {1, 0, 0, 1}), leaf({1}, {0}), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(values(y) == std::vector<float>{6, 8, 12, 14});
}

TEST_CASE("conv2d: output size, bias and shape errors") {
  Tape tape;
  const Var x(Tensor({2, 3, 8, 8}, 1.0f));
  const Var k(Tensor({4, 3, 3, 3}, 0.0f));
  CHECK(conv2d(tape, x, k, Var(), 2, 1).shape() == Shape{2, 4, 4, 4});
  CHECK(conv2d(tape, x, k, Var(), 1, 1).shape() == Shape{2, 4, 8, 8});
  const Var y = conv2d(tape, x, k, leaf({4}, {1, 2, 3, 4}), 1, 0);
  CHECK(y.value()[0] == 1.0f);
  CHECK(y.value()[y.value().numel() - 1] == 4.0f);
  CHECK_THROWS_AS(conv2d(tape, x, Var(Tensor({4, 2, 3, 3})), Var(), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, k, Var(Tensor({3})), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, Var(Tensor({4, 3, 11, 11})), Var(), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, k, Var(), 0, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, Var(Tensor({3, 8, 8})), k, Var(), 1, 1), ShapeError);
}

TEST_CASE("conv2d is linear in input and kernel") {
  std::mt19937_64 rng(3);
  Tape tape;
  auto rnd = [&](Shape s) {
    Tensor t(s);
    std::normal_distribution<float> n;
    for (auto& v : t.data()) v = n(rng);
    return Var(t);
  };
  const Var x = rnd({2, 3, 7, 7}), y = rnd({2, 3, 7, 7}), k = rnd({4, 3, 3, 3}), k2 = rnd({4, 3, 3, 3});
  const double a = 0.7, b = -1.3;
  const Var lhs = conv2d(tape, add(tape, scale(tape, x, a), scale(tape, y, b)), k, Var(), 2, 1);
  const Var rhs = add(tape, scale(tape, conv2d(tape, x, k, Var(), 2, 1), a), scale(tape, conv2d(tape, y, k, Var(), 2, 1), b));
  for (std::size_t i = 0; i < lhs.value().numel(); ++i) CHECK(std::abs(lhs.value()[i] - rhs.value()[i]) < 1e-5);
  const Var lk = conv2d(tape, x, add(tape, scale(tape, k, a), scale(tape, k2, b)), Var(), 1, 1);
  const Var rk = add(tape, scale(tape, conv2d(tape, x, k, Var(), 1, 1), a), scale(tape, conv2d(tape, x, k2, Var(), 1, 1), b));
  for (std::size_t i = 0; i < lk.value().numel(); ++i) CHECK(std::abs(lk.value()[i] - rk.value()[i]) < 1e-5);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(11);
  const std::size_t strides[] = {1, 2, 1, 2, 1}, pads[] = {1, 1, 0, 0, 2}, ks[] = {3, 3, 2, 1, 3};
  for (int c = 0; c < 5; ++c) {
    const std::size_t s = strides[c], p = pads[c], k = ks[c];
    const auto r = gradcheck::check(
        [&](DTape& t, const std::vector<DVar>& v) { return conv2d(t, v[0], v[1], v[2], s, p); },
        {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, k, k}, rng), random_tensor({3}, rng)}, 100 + c);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("conv_transpose2d: hand-computed scatter") {
  Tape tape;
  const Var y = conv_transpose2d(tape, leaf({1, 1, 1, 1}, {2}), leaf({1, 1, 2, 2}, {1, 2, 3, 4}), Var(), 2, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(values(y) == std::vector<float>{2, 4, 6, 8});
  const Var z = conv_transpose2d(tape, Var(Tensor({2, 8, 4, 4})), Var(Tensor({8, 3, 2, 2})), Var(), 2, 0);
  CHECK(z.shape() == Shape{2, 3, 8, 8});
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  std::mt19937_64 rng(17);
  for (int c = 0; c < 5; ++c) {
    const std::size_t stride = 1 + c % 2, pad = c % 3 == 0 ? 1 : 0, k = 2 + c % 2;
    // Sized so the stride tiles the padded input exactly; otherwise the last
    // rows never reach the output and the transpose cannot restore them.
    const std::size_t S = (8 + 2 * pad - k) % stride == 0 ? 8 : 9;
    const DTensor x = random_tensor({2, 3, S, S}, rng), K = random_tensor({4, 3, k, k}, rng);
    DTape tape;
    const DVar cx = conv2d(tape, DVar(x), DVar(K), DVar(), stride, pad);
    const DTensor y = random_tensor(cx.shape(), rng);
    // conv2d maps 3 -> 4 channels with K (4 x 3 x k x k); the transpose uses the
    // same array read as Ci=4 x Co=3.
    const DVar ty = conv_transpose2d(tape, DVar(y), DVar(K), DVar(), stride, pad);
    REQUIRE(ty.shape() == x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx.value()[i] * y[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty.value()[i];
    CHECK(std::abs(lhs - rhs) <= 1e-9 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  std::mt19937_64 rng(19);
  for (int c = 0; c < 5; ++c) {
    const std::size_t pad = c % 2;
    const auto r = gradcheck::check(
        [&](DTape& t, const std::vector<DVar>& v) { return conv_transpose2d(t, v[0], v[1], v[2], 2, pad); },
        {random_tensor({2, 3, 3, 4}, rng), random_tensor({3, 2, 2 + pad, 2 + pad}, rng), random_tensor({2}, rng)},
        200 + c);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("batch norm: train statistics, gamma zero, eval mode, running stats") {
  std::mt19937_64 rng(23);
  Tape tape;
  Tensor xt({4, 2, 3, 3});
  std::normal_distribution<float> n(3.0f, 2.0f);
  for (auto& v : xt.data()) v = n(rng);
  const Var x(xt);
  BatchNormStats<float> stats(2);
  const Var y = batch_norm2d(tape, x, Var(Tensor({2}, 1.0f)), Var(Tensor({2}, 0.0f)), stats, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0, xm = 0, xv = 0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t p = 0; p < 9; ++p) m += y.value()[(i * 2 + c) * 9 + p], xm += xt[(i * 2 + c) * 9 + p];
    m /= 36;
    xm /= 36;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t p = 0; p < 9; ++p) {
        v += std::pow(y.value()[(i * 2 + c) * 9 + p] - m, 2);
        xv += std::pow(xt[(i * 2 + c) * 9 + p] - xm, 2);
      }
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v / 36 - 1.0) < 1e-4);
    CHECK(stats.mean[c] == doctest::Approx(0.1 * xm).epsilon(1e-5));
    CHECK(stats.var[c] == doctest::Approx(0.9 + 0.1 * xv / 35).epsilon(1e-5));
  }

  const Var z = batch_norm2d(tape, x, Var(Tensor({2}, 0.0f)), leaf({2}, {0.5f, -2.0f}), stats, Mode::kTrain);
  for (std::size_t i = 0; i < z.value().numel(); ++i) CHECK(z.value()[i] == ((i / 9) % 2 ? -2.0f : 0.5f));

  BatchNormStats<float> fixed(2);
  fixed.mean = Tensor({2}, std::vector<float>{1.0f, -1.0f});
  fixed.var = Tensor({2}, std::vector<float>{4.0f, 0.25f});
  const Var e = batch_norm2d(tape, x, Var(Tensor({2}, 1.0f)), Var(Tensor({2}, 0.0f)), fixed, Mode::kEval);
  CHECK(e.value()[0] == doctest::Approx((xt[0] - 1.0) / std::sqrt(4.0 + 1e-5)));
  CHECK(e.value()[9] == doctest::Approx((xt[9] + 1.0) / std::sqrt(0.25 + 1e-5)));
  CHECK(fixed.mean[0] == 1.0f);  // eval mode leaves statistics alone

  CHECK_THROWS_AS(batch_norm2d(tape, x, Var(Tensor({3}, 1.0f)), Var(Tensor({3})), stats, Mode::kTrain), ShapeError);
}

TEST_CASE("batch norm gradients match finite differences") {
  std::mt19937_64 rng(29);
  for (int c = 0; c < 5; ++c) {
    auto stats = std::make_shared<BatchNormStats<double>>(3);
    const auto r = gradcheck::check(
        [&](DTape& t, const std::vector<DVar>& v) { return batch_norm2d(t, v[0], v[1], v[2], *stats, Mode::kTrain); },
        {random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}, 300 + c, 1e-3, 1e-4);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("leaky relu") {
  Tape tape;
  const Var x = leaf({3}, {-1, 0, 2}, true);
  const Var y = leaky_relu(tape, x, 0.01);
  CHECK(values(y) == std::vector<float>{-0.01f, 0.0f, 2.0f});
  tape.backward(sum(tape, y));
  CHECK(values(Var(x.grad())) == std::vector<float>{0.01f, 0.01f, 1.0f});
  const Var pos = leaf({4}, {0, 1, 2, 3});
  CHECK(values(leaky_relu(tape, leaky_relu(tape, pos))) == values(pos));

  std::mt19937_64 rng(31);
  for (int c = 0; c < 5; ++c) {
    const auto r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return leaky_relu(t, v[0], 0.01); },
                                    {random_tensor({2, 2, 3, 3}, rng, 1.0, 0.01)}, 400 + c);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("sigmoid and softplus") {
  Tape tape;
  const Var y = sigmoid(tape, leaf({3}, {0, 1000, -1000}));
  CHECK(y.value()[0] == 0.5f);
  CHECK(y.value()[1] == 1.0f);
  CHECK(y.value()[2] == 0.0f);
  const Var s = softplus(tape, leaf({3}, {0, 1000, -1000}));
  CHECK(s.value()[0] == doctest::Approx(std::log(2.0)));
  CHECK(s.value()[1] == 1000.0f);
  CHECK(s.value()[2] >= 0.0f);
  CHECK(std::isfinite(s.value()[2]));

  std::mt19937_64 rng(37);
  for (int c = 0; c < 5; ++c) {
    auto r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return sigmoid(t, v[0]); },
                              {random_tensor({2, 1, 4, 4}, rng, 3.0)}, 500 + c);
    CHECK(r.max_rel < 1e-3);
    r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return softplus(t, v[0]); },
                         {random_tensor({2, 1, 4, 4}, rng, 3.0)}, 600 + c);
    CHECK(r.max_rel < 1e-3);
  }

  // analytic sigmoid derivative
  DTape t;
  DVar v(DTensor({1}, std::vector<double>{0.3}), true);
  t.backward(sum(t, sigmoid(t, v)));
  const double sg = 1 / (1 + std::exp(-0.3));
  CHECK(v.grad()[0] == doctest::Approx(sg * (1 - sg)).epsilon(1e-12));
}

TEST_CASE("concat channels") {
  Tape tape;
  const Var a(Tensor({2, 3, 2, 2}, 1.0f)), b(Tensor({2, 1, 2, 2}, 2.0f));
  CHECK(concat_channels(tape, a, b).shape() == Shape{2, 4, 2, 2});
  const Var empty(Tensor({2, 0, 2, 2}));
  CHECK(concat_channels(tape, a, empty).value() == a.value());
  CHECK_THROWS_AS(concat_channels(tape, a, Var(Tensor({1, 1, 2, 2}))), ShapeError);

  std::mt19937_64 rng(41);
  for (int c = 0; c < 5; ++c) {
    const auto r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return concat_channels(t, v[0], v[1]); },
                                    {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}, 700 + c);
    CHECK(r.max_rel < 1e-9);  // linear, so only rounding in the difference quotient
  }
}

TEST_CASE("elementwise ops and reductions") {
  Tape tape;
  const Var ones(Tensor({2, 3, 4}, 1.0f), true);
  CHECK(sum(tape, ones).value()[0] == 24.0f);
  const Var m = mean(tape, ones);
  CHECK(m.value()[0] == 1.0f);
  tape.backward(m);
  for (float g : ones.grad().data()) CHECK(g == doctest::Approx(1.0 / 24));
  CHECK_THROWS_AS(add(tape, ones, Var(Tensor({3}))), ShapeError);
  CHECK(add_scalar(tape, ones, 2.5).value()[5] == 3.5f);
  CHECK(scale(tape, ones, -2).value()[5] == -2.0f);

  std::mt19937_64 rng(43);
  for (int c = 0; c < 5; ++c) {
    auto r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return mul(t, v[0], v[1]); },
                              {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}, 800 + c);
    CHECK(r.max_rel < 1e-3);
    r = gradcheck::check(
        [](DTape& t, const std::vector<DVar>& v) { return add_scalar(t, scale(t, add(t, v[0], v[1]), 1.7), 3); },
        {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}, 900 + c);
    CHECK(r.max_rel < 1e-3);
    r = gradcheck::check([](DTape& t, const std::vector<DVar>& v) { return mean(t, mul(t, v[0], v[0])); },
                         {random_tensor({3, 4}, rng)}, 950 + c);
    CHECK(r.max_rel < 1e-3);
  }

  DTensor f({2, 2}, std::vector<double>{2, -1, 0.5, 3});
  const auto r = gradcheck::check([&](DTape& t, const std::vector<DVar>& v) { return scale_channels(t, v[0], f); },
                                  {random_tensor({2, 2, 3, 3}, rng)}, 999);
  CHECK(r.max_rel < 1e-3);
}

TEST_CASE("backward") {
  Tape tape;
  const Var x = leaf({3}, {1, 2, 3}, true);
  tape.backward(sum(tape, x));
  CHECK(values(Var(x.grad())) == std::vector<float>{1, 1, 1});

  Var y = leaf({3}, {1, 2, 3}, true);
  tape.backward(sum(tape, mul(tape, y, y)));
  CHECK(values(Var(y.grad())) == std::vector<float>{2, 4, 6});
  // gradients accumulate until zeroed
  tape.backward(sum(tape, mul(tape, y, y)));
  CHECK(values(Var(y.grad())) == std::vector<float>{4, 8, 12});
  y.zero_grad();
  CHECK(values(Var(y.grad())) == std::vector<float>{0, 0, 0});

  CHECK_THROWS_AS(tape.backward(mul(tape, y, y)), ShapeError);

  Tape off(false);
  const Var z = mul(off, y, y);
  CHECK(off.size() == 0);
  CHECK_FALSE(z.requires_grad());
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(47);
  const DTensor x = random_tensor({2, 3, 6, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    DTape t;
    DVar xv(x, true), kv(k, true);
    BatchNormStats<double> st(4);
    DVar y = batch_norm2d(t, leaky_relu(t, conv2d(t, xv, kv, DVar(), 2, 1)), DVar(DTensor({4}, 1.0)),
                          DVar(DTensor({4}, 0.0)), st, Mode::kTrain);
    t.backward(sum(t, mul(t, y, y)));
    return std::make_pair(xv.grad(), kv.grad());
  };
  CHECK(run() == run());
}
