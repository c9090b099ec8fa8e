#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "snf/layers.hpp"

using namespace snf;

namespace {

ConvLayer conv_with(const Tensor& w, const Tensor& r, ImageShape in) {
  ConvLayer layer;
  layer.kernel = w;
  layer.inverse_kernel = r;
  layer.bind(in);
  return layer;
}

Tensor dirac(std::size_t c, std::size_t k) {
  Tensor t({c, c, k, k});
  for (std::size_t i = 0; i < c; ++i) t(i, i, k / 2, k / 2) = 1.0;
  return t;
}

// Kernel whose taps hold distinct labels 1..K so matrix entries identify the tap.
Tensor labelled_kernel(const Shape& s) {
  Tensor k(s);
  for (std::size_t i = 0; i < k.size(); ++i) k.data()[i] = static_cast<double>(i + 1);
  return k;
}

Tensor brute_force_multiple(const Shape& ks, ImageShape in) {
  const Tensor labels = labelled_kernel(ks);
  const Tensor t = oracle::probe_conv_matrix(labels, in.channels, in.height, in.width);
  Tensor m(ks);
  for (double v : t.data())
    if (v != 0.0) m.data()[static_cast<std::size_t>(v) - 1] += 1.0;
  return m;
}

double sigma(double a, double x) { return a * x + (1 - a) * std::log1p(std::exp(x)); }

}  // namespace

// ---------------------------------------------------------------- FC

TEST_CASE("fc initialization keeps R a near-exact inverse close to the identity") {
  for (std::size_t d : {2u, 16u, 64u}) {
    Rng rng(7);
    const FcLayer layer = FcLayer::initialized(d, rng, 0.01);
    const Tensor rw = oracle::naive_matmul(layer.inverse_weight, layer.weight);
    CHECK(oracle::frob(rw - oracle::identity(d)) / std::sqrt(double(d)) <= 1e-6);
    CHECK(oracle::frob(layer.weight - oracle::identity(d)) / std::sqrt(double(d)) < 0.05);
    CHECK(layer.inverse_weight == oracle::naive_transpose(layer.weight));
  }
}

TEST_CASE("fc forward examples") {
  const FcLayer id{oracle::identity(2), oracle::identity(2)};
  CHECK(fc_forward(id, Tensor::vector({3, -1})) == Tensor::vector({3, -1}));
  const FcLayer swap{Tensor::from_rows({{0, 1}, {1, 0}}), oracle::identity(2)};
  CHECK(fc_forward(swap, Tensor::vector({3, -1})) == Tensor::vector({-1, 3}));

  const Tensor w = oracle::gaussian({5, 5}, 1);
  const Tensor x = oracle::gaussian({8, 5}, 2);
  const FcLayer layer{w, oracle::identity(5)};
  // Batches hold one example per row: z = x W^T.
  const Tensor expect = oracle::naive_matmul(x, oracle::naive_transpose(w));
  CHECK(oracle::max_abs_diff(fc_forward(layer, x), expect) < 1e-12);
  CHECK_THROWS_AS(fc_forward(layer, Tensor::vector({1, 2, 3})), ShapeError);
}

TEST_CASE("fc learned and exact inverses") {
  const Tensor w = oracle::well_conditioned(6, 3);
  const Tensor r = oracle::gauss_jordan_inverse(w);
  const FcLayer layer{w, r};
  const Tensor x = oracle::gaussian({4, 6}, 4);
  const Tensor z = fc_forward(layer, x);
  CHECK(oracle::max_abs_diff(fc_inverse_learned(layer, z), x) < 1e-9);
  CHECK(oracle::max_abs_diff(fc_inverse_exact(layer, z), x) < 1e-9);

  const FcLayer diag{Tensor::from_rows({{2, 0}, {0, 4}}), oracle::identity(2)};
  CHECK(oracle::max_abs_diff(fc_inverse_exact(diag, Tensor::vector({2, 4})), Tensor::vector({1, 1})) < 1e-15);
  CHECK(fc_inverse_learned(diag, Tensor::vector({2, 4})) == Tensor::vector({2, 4}));

  const FcLayer singular{Tensor::from_rows({{1, 2}, {2, 4}}), oracle::identity(2)};
  CHECK_THROWS_AS(fc_inverse_exact(singular, Tensor::vector({1, 1})), SingularMatrix);
}

// ---------------------------------------------------------------- convolution kernels

TEST_CASE("flip kernel examples") {
  Tensor k({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) k.data()[i] = double(i + 1);
  const Tensor f = flip_kernel(k);
  for (std::size_t i = 0; i < 9; ++i) CHECK(f.data()[i] == double(9 - i));

  Tensor one({1, 1, 1, 1}, 5.0);
  CHECK(flip_kernel(one) == one);

  const Tensor rect = oracle::gaussian({2, 3, 3, 5}, 9);
  const Tensor fr = flip_kernel(rect);
  CHECK(fr.shape() == Shape{3, 2, 3, 5});
  CHECK(fr(1, 0, 0, 4) == rect(0, 1, 2, 0));
  CHECK(flip_kernel(fr) == rect);
  CHECK_THROWS_AS(flip_kernel(Tensor({3, 3})), ShapeError);
}

TEST_CASE("the flipped kernel's matrix is the transpose") {
  for (std::size_t c : {1u, 2u, 3u}) {
    const Tensor k = oracle::gaussian({c, c, 3, 3}, 10 + c);
    const Tensor t = oracle::probe_conv_matrix(k, c, 4, 5);
    const Tensor tf = oracle::probe_conv_matrix(flip_kernel(k), c, 4, 5);
    CHECK(oracle::max_abs_diff(tf, oracle::naive_transpose(t)) < 1e-15);
  }
}

TEST_CASE("tap multiplicity examples") {
  const ImageShape s5{1, 5, 5};
  const Tensor m1 = compute_multiple_m(s5, s5, {1, 1, 1, 1}, {0, 0});
  CHECK(m1.data()[0] == 25.0);

  const Tensor m = compute_multiple_m(s5, s5, {1, 1, 3, 3}, {1, 1});
  CHECK(m(0, 0, 1, 1) == 25.0);
  CHECK(m(0, 0, 0, 1) == 20.0);
  CHECK(m(0, 0, 1, 0) == 20.0);
  CHECK(m(0, 0, 0, 0) == 16.0);
  CHECK(m(0, 0, 2, 2) == 16.0);

  const ImageShape s3{1, 3, 3};
  const Tensor m3 = compute_multiple_m(s3, s3, {1, 1, 3, 3}, {1, 1});
  CHECK(m3(0, 0, 1, 1) == 9.0);
  CHECK(m3(0, 0, 1, 2) == 6.0);
  CHECK(m3(0, 0, 2, 0) == 4.0);

  CHECK_THROWS_AS(compute_multiple_m(ImageShape{1, 4, 4}, s5, {1, 1, 3, 3}, {1, 1}), ShapeError);
}

TEST_CASE("tap multiplicity matches a brute-force count over the matrix") {
  struct Case {
    Shape kernel;
    ImageShape in;
  };
  for (const Case& c : {Case{{1, 1, 3, 3}, {1, 4, 6}}, Case{{2, 2, 3, 3}, {2, 5, 4}}, Case{{2, 2, 5, 5}, {2, 3, 3}},
                        Case{{1, 1, 5, 3}, {1, 6, 5}}}) {
    const Tensor m = compute_multiple_m(c.in, c.in, c.kernel, same_padding(c.kernel[2], c.kernel[3]));
    CHECK(m == brute_force_multiple(c.kernel, c.in));
    CHECK(*std::min_element(m.data().begin(), m.data().end()) > 0.0);
  }
}

TEST_CASE("conv layer binding recomputes multiples on geometry change") {
  ConvLayer layer = conv_with(dirac(1, 3), dirac(1, 5), {1, 5, 5});
  CHECK(layer.multiple(0, 0, 0, 0) == 16.0);
  CHECK(layer.inverse_multiple(0, 0, 2, 2) == 25.0);
  layer.bind({1, 3, 3});
  CHECK(layer.multiple(0, 0, 0, 0) == 4.0);
  CHECK(layer.inverse_multiple(0, 0, 0, 0) == 1.0);

  ConvLayer bad;
  bad.kernel = dirac(2, 3);
  bad.inverse_kernel = dirac(2, 1);
  CHECK_THROWS_AS(bad.bind({2, 4, 4}), ShapeError);
  bad.inverse_kernel = dirac(2, 3);
  CHECK_THROWS_AS(bad.bind({3, 4, 4}), ShapeError);
}

TEST_CASE("conv initialization pairs the kernel with its flip") {
  Rng rng(3);
  const ConvLayer layer = ConvLayer::initialized({2, 6, 6}, 3, 5, rng, 0.01);
  CHECK(layer.kernel.shape() == Shape{2, 2, 3, 3});
  CHECK(layer.inverse_kernel.shape() == Shape{2, 2, 5, 5});
  const Tensor f = flip_kernel(layer.kernel);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = 0; b < 5; ++b) {
          const bool inner = a >= 1 && a <= 3 && b >= 1 && b <= 3;
          CHECK(layer.inverse_kernel(o, i, a, b) == (inner ? f(o, i, a - 1, b - 1) : 0.0));
        }
  CHECK(std::abs(layer.kernel(0, 0, 1, 1) - 1.0) < 0.05);
}

TEST_CASE("conv forward and learned inverse") {
  const ImageShape s{2, 4, 5};
  const ConvLayer id = conv_with(dirac(2, 3), dirac(2, 3), s);
  const Tensor x = oracle::gaussian(s.as_shape(), 21);
  CHECK(conv_forward(id, x) == x);

  // 1x1 kernels mix channels per pixel.
  const Tensor mix = Tensor({2, 2, 1, 1}, std::vector<double>{1, 2, 3, 4});
  const ConvLayer pw = conv_with(mix, mix, s);
  const Tensor y = conv_forward(pw, x);
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 5; ++w) {
      const std::size_t p0 = h * 5 + w, p1 = 20 + p0;
      CHECK(y.data()[p0] == doctest::Approx(x.data()[p0] + 2 * x.data()[p1]));
      CHECK(y.data()[p1] == doctest::Approx(3 * x.data()[p0] + 4 * x.data()[p1]));
    }

  const Tensor k = oracle::gaussian({2, 2, 3, 3}, 22);
  const Tensor r = oracle::gaussian({2, 2, 5, 5}, 23);
  const ConvLayer layer = conv_with(k, r, s);
  const Tensor batch = oracle::gaussian({3, s.size()}, 24);
  const Tensor tk = oracle::probe_conv_matrix(k, 2, 4, 5);
  const Tensor tr = oracle::probe_conv_matrix(r, 2, 4, 5);
  CHECK(oracle::max_abs_diff(conv_forward(layer, batch),
                             oracle::naive_matmul(batch, oracle::naive_transpose(tk))) < 1e-12);
  CHECK(oracle::max_abs_diff(conv_inverse_learned(layer, batch),
                             oracle::naive_matmul(batch, oracle::naive_transpose(tr))) < 1e-12);
  CHECK_THROWS_AS(conv_forward(layer, Tensor({3, 7})), ShapeError);
}

TEST_CASE("conv exact inverse") {
  const ImageShape s{2, 4, 4};
  const ConvLayer id = conv_with(dirac(2, 3), dirac(2, 3), s);
  const Tensor x = oracle::gaussian(s.as_shape(), 31);
  CHECK(oracle::max_abs_diff(conv_inverse_exact(id, x), x) < 1e-15);

  const Tensor mix = Tensor({2, 2, 1, 1}, std::vector<double>{2, 1, 1, 3});
  const ConvLayer pw = conv_with(mix, mix, s);
  const Tensor z = conv_forward(pw, x);
  CHECK(oracle::max_abs_diff(conv_inverse_exact(pw, z), x) < 1e-12);

  Tensor k = dirac(2, 3) + oracle::gaussian({2, 2, 3, 3}, 32, 0.05);
  const ConvLayer layer = conv_with(k, dirac(2, 3), s);
  const Tensor batch = oracle::gaussian({5, s.size()}, 33);
  CHECK(oracle::max_abs_diff(conv_inverse_exact(layer, conv_forward(layer, batch)), batch) < 1e-8);

  const ConvLayer zero = conv_with(Tensor({2, 2, 3, 3}), dirac(2, 3), s);
  CHECK_THROWS_AS(conv_inverse_exact(zero, x), SingularMatrix);

  const ConvLayer big = conv_with(dirac(1, 3), dirac(1, 3), {1, 80, 80});
  CHECK_THROWS_AS(conv_inverse_exact(big, Tensor({1, 80, 80})), SizeGuardExceeded);
}

TEST_CASE("conv exact inverse reuses its factorization until the kernel changes") {
  const ImageShape s{1, 4, 4};
  ConvLayer layer = conv_with(dirac(1, 3) + oracle::gaussian({1, 1, 3, 3}, 41, 0.05), dirac(1, 3), s);
  const auto a = conv_forward_lu(layer);
  CHECK(conv_forward_lu(layer) == a);
  layer.kernel(0, 0, 0, 0) += 0.01;
  CHECK(conv_forward_lu(layer) != a);
}

// ---------------------------------------------------------------- smooth leaky ReLU

TEST_CASE("slrelu examples") {
  const SmoothLeakyRelu act{0.3};
  const SlreluOutput out = slrelu_forward(act, Tensor::vector({0.0}));
  CHECK(out.y.data()[0] == doctest::Approx(0.485203).epsilon(1e-6));
  CHECK(out.logdet == doctest::Approx(-0.430783).epsilon(1e-6));

  const Tensor x = oracle::gaussian({10}, 51, 3.0);
  const SlreluOutput lin = slrelu_forward(SmoothLeakyRelu{1.0}, x);
  CHECK(oracle::max_abs_diff(lin.y, x) < 1e-15);
  CHECK(lin.logdet == 0.0);

  CHECK(slrelu_value(0.3, 1000.0) == doctest::Approx(1000.0));
  CHECK(std::abs(slrelu_value(0.3, -1000.0) - (-300.0)) < 1e-9);
  CHECK(std::isfinite(slrelu_derivative(0.3, -1000.0)));
}

TEST_CASE("slrelu values and derivatives agree with the direct formula") {
  const Tensor x = oracle::gaussian({200}, 52, 4.0);
  for (double a : {0.1, 0.3, 0.7}) {
    for (double v : x.data()) {
      CHECK(slrelu_value(a, v) == doctest::Approx(sigma(a, v)).epsilon(1e-12));
      const double h = 1e-5;
      const double fd = (sigma(a, v + h) - sigma(a, v - h)) / (2 * h);
      CHECK(slrelu_derivative(a, v) == doctest::Approx(fd).epsilon(1e-7));
      CHECK(slrelu_derivative(a, v) >= a);
      const double lfd =
          (std::log(slrelu_derivative(a, v + h)) - std::log(slrelu_derivative(a, v - h))) / (2 * h);
      CHECK(slrelu_log_derivative_grad(a, v) == doctest::Approx(lfd).epsilon(1e-6));
    }
  }
}

TEST_CASE("slrelu log-determinant sums per-element log-slopes") {
  const SmoothLeakyRelu act{0.3};
  const Tensor x = oracle::gaussian({4, 6}, 53, 2.0);
  const Tensor rows = slrelu_row_logdets(act, x);
  double total = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double h = 1e-6, v = x(n, j);
      s += std::log((sigma(0.3, v + h) - sigma(0.3, v - h)) / (2 * h));
    }
    CHECK(rows.data()[n] == doctest::Approx(s).epsilon(1e-7));
    total += s;
  }
  CHECK(slrelu_forward(act, x).logdet == doctest::Approx(total).epsilon(1e-7));
}

TEST_CASE("slrelu inverse round trip") {
  const SmoothLeakyRelu act{0.3};
  CHECK(std::abs(slrelu_invert_value(0.3, sigma(0.3, 0.0))) < 1e-12);
  const Tensor x = oracle::gaussian({3, 100}, 54, 10.0);
  const Tensor y = slrelu_forward(act, x).y;
  CHECK(oracle::max_abs_diff(slrelu_inverse(act, y), x) < 1e-9);
  const Tensor lin = oracle::gaussian({20}, 55);
  CHECK(oracle::max_abs_diff(slrelu_inverse(SmoothLeakyRelu{1.0}, lin), lin) < 1e-12);
  for (double v : {-1e6, -50.0, 1e-12, 50.0, 1e6}) {
    const double xi = slrelu_invert_value(0.3, v);
    CHECK(std::abs(slrelu_value(0.3, xi) - v) <= 1e-10 * std::max(1.0, std::abs(v)));
  }
  CHECK_THROWS_AS(slrelu_invert_value(0.3, std::nan("")), NoConvergence);
}

// ---------------------------------------------------------------- squeeze

TEST_CASE("squeeze example and shape") {
  const Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor y = squeeze_forward(x, 2);
  CHECK(y.shape() == Shape{4, 1, 1});
  std::vector<double> got(y.data().begin(), y.data().end());
  std::sort(got.begin(), got.end());
  CHECK(got == std::vector<double>{1, 2, 3, 4});
  CHECK(squeeze_shape({3, 8, 6}, 2) == ImageShape{12, 4, 3});
  CHECK_THROWS_AS(squeeze_forward(Tensor({1, 3, 4}), 2), ShapeError);
}

TEST_CASE("squeeze is a permutation and round-trips") {
  const Tensor x = oracle::gaussian({3, 4, 6}, 61);
  const Tensor y = squeeze_forward(x, 2);
  CHECK(squeeze_inverse(y, 2) == x);
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  // Each output channel holds one spatial phase of one input channel.
  const Tensor y3 = squeeze_forward(oracle::gaussian({2, 6, 6}, 62), 3);
  CHECK(y3.shape() == Shape{18, 2, 2});

  const ImageShape in{3, 4, 6};
  const Tensor batch = oracle::gaussian({5, in.size()}, 63);
  const Tensor sb = squeeze_forward(batch, in, 2);
  CHECK(sb.shape() == batch.shape());
  CHECK(squeeze_inverse(sb, in, 2) == batch);
  for (std::size_t n = 0; n < 5; ++n) {
    const Tensor one = squeeze_forward(Tensor(in.as_shape(), std::vector<double>(batch.row(n).begin(),
                                                                                   batch.row(n).end())),
                                       2);
    CHECK(std::equal(one.data().begin(), one.data().end(), sb.row(n).begin()));
  }
}
