#include <doctest.h>

#include "fds/nn/adam.hpp"
#include "fds/nn/layers.hpp"
#include "gradcheck.hpp"

using namespace fds;
using nn::Mat;

namespace {

Mat<double> random_mat(int r, int c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// 0.5 * sum((y - target)^2) with d/dy = y - target.
double half_sq(const Mat<double>& y, const Mat<double>& target) { return 0.5 * (y - target).squaredNorm(); }

}  // namespace

TEST_CASE("linear gradients match finite differences") {
  Rng rng(1);
  nn::Linear<double> lin(3, 4, rng, "lin");
  const auto x = random_mat(5, 3, rng), target = random_mat(5, 4, rng);
  nn::ParamRefs<double> p;
  lin.collect(p);
  const auto r = testing::check_gradients(p, [&](bool bp) {
    const auto y = lin.forward(x);
    if (bp) lin.backward(y - target);
    return half_sq(y, target);
  });
  CHECK(r.parameters == 16);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(2);
  nn::ConvGeometry g{2, 5, 5, 3, 3, 2, 1};
  nn::Conv2d<double> conv(g, rng, "conv");
  const auto x = random_mat(2, g.in_size(), rng), target = random_mat(2, g.out_size(), rng);
  nn::ParamRefs<double> p;
  conv.collect(p);
  const auto r = testing::check_gradients(p, [&](bool bp) {
    const auto y = conv.forward(x);
    if (bp) conv.backward(y - target);
    return half_sq(y, target);
  });
  CHECK(r.parameters == 57);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv2d input gradient matches finite differences") {
  Rng rng(3);
  nn::ConvGeometry g{1, 4, 4, 2, 3, 1, 1};
  nn::Conv2d<double> conv(g, rng, "conv");
  nn::Param<double> x("x", random_mat(1, g.in_size(), rng));
  const auto target = random_mat(1, g.out_size(), rng);
  const auto r = testing::check_gradients({&x}, [&](bool bp) {
    const auto y = conv.forward(x.value);
    if (bp) x.grad += conv.backward(y - target);
    return half_sq(y, target);
  });
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv2d of a single 1x1 kernel is a scaled copy") {
  Rng rng(4);
  nn::ConvGeometry g{1, 3, 3, 1, 1, 1, 0};
  nn::Conv2d<float> conv(g, rng, "c");
  conv.weight.value(0, 0) = 2.0f;
  conv.bias.value(0, 0) = 0.5f;
  Mat<float> x(1, 9);
  for (int i = 0; i < 9; ++i) x(0, i) = static_cast<float>(i);
  const auto y = conv.infer(x);
  for (int i = 0; i < 9; ++i) CHECK(y(0, i) == doctest::Approx(2.0 * i + 0.5));
}

TEST_CASE("infer agrees with forward and is row independent") {
  Rng rng(5);
  nn::Linear<float> lin(7, 5, rng, "lin");
  nn::ConvGeometry g{1, 6, 6, 2, 3, 2, 1};
  nn::Conv2d<float> conv(g, rng, "conv");
  Mat<float> x = random_mat(9, 7, rng).cast<float>(), xi = random_mat(9, 36, rng).cast<float>();
  CHECK((lin.infer(x) - lin.forward(x)).cwiseAbs().maxCoeff() < 1e-5f);
  CHECK((conv.infer(xi) - conv.forward(xi)).cwiseAbs().maxCoeff() < 1e-5f);

  const Mat<float> full = lin.infer(x), cfull = conv.infer(xi);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Mat<float> one = lin.infer(x.row(r)), cone = conv.infer(xi.row(r));
    CHECK(one == full.row(r));
    CHECK(cone == cfull.row(r));
  }
}

TEST_CASE("activations") {
  CHECK(nn::silu(0.0) == 0.0);
  CHECK(nn::silu(10.0) == doctest::Approx(10.0 / (1.0 + std::exp(-10.0))));
  for (double v : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double h = 1e-6;
    CHECK(nn::silu_grad(v) == doctest::Approx((nn::silu(v + h) - nn::silu(v - h)) / (2 * h)).epsilon(1e-6));
  }
  Mat<double> m(1, 3);
  m << -1.0, 0.0, 2.0;
  CHECK(nn::relu(m)(0, 0) == 0.0);
  CHECK(nn::relu(m)(0, 2) == 2.0);
}

TEST_CASE("parameter flatten and assign round trip") {
  Rng rng(6);
  nn::Linear<float> a(3, 2, rng, "a");
  nn::ParamRefs<float> p;
  a.collect(p);
  auto w = nn::flatten_values(p);
  CHECK(w.size() == nn::parameter_count(p));
  for (auto& v : w) v += 1.0f;
  nn::assign_values(p, w);
  CHECK(nn::flatten_values(p) == w);
  w.pop_back();
  CHECK_THROWS(nn::assign_values(p, w));
}

TEST_CASE("adam minimizes a quadratic") {
  nn::Param<double> x("x", Mat<double>::Constant(1, 3, 5.0));
  nn::Adam<double> opt({&x}, {.lr = 0.05});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    x.grad = 2.0 * (x.value.array() - 1.0).matrix();
    opt.step();
  }
  CHECK(opt.steps_taken() == 2000);
  for (int i = 0; i < 3; ++i) CHECK(x.value(0, i) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("adam first step moves each coordinate by lr") {
  nn::Param<double> x("x", Mat<double>::Zero(1, 2));
  nn::Adam<double> opt({&x}, {.lr = 0.1});
  x.grad << 3.0, -0.001;
  opt.step();
  CHECK(x.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(x.value(0, 1) == doctest::Approx(0.1).epsilon(1e-3));
}

TEST_CASE("adam gradient clipping bounds the global norm") {
  nn::Param<double> a("a", Mat<double>::Zero(1, 1)), b("b", Mat<double>::Zero(1, 1));
  nn::Adam<double> clipped({&a}, {.lr = 1.0, .grad_clip = 1.0});
  a.grad(0, 0) = 100.0;
  clipped.step();
  nn::Adam<double> plain({&b}, {.lr = 1.0});
  b.grad(0, 0) = 1.0;
  plain.step();
  CHECK(a.value(0, 0) == doctest::Approx(b.value(0, 0)));
}
