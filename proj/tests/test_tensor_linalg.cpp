#include "doctest.h"
#include "oracles.hpp"
#include "snf/conv.hpp"
#include "snf/linalg.hpp"
#include "snf/random.hpp"

using namespace snf;

TEST_CASE("tensor shape and element access") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == shape_size(t.shape()));
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
  const Tensor r = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}).reshaped({3, 2});
  CHECK(r(2, 1) == 6.0);
  CHECK_THROWS_AS(r.reshaped({4, 2}), ShapeError);
  CHECK(shape_string({2, 3}) == "[2,3]");
}

TEST_CASE("tensor arithmetic and finiteness") {
  Tensor a = Tensor::vector({1, 2, 3});
  Tensor b = Tensor::vector({4, 5, 6});
  CHECK((a + b) == Tensor::vector({5, 7, 9}));
  CHECK((b - a) == Tensor::vector({3, 3, 3}));
  CHECK((2.0 * a) == Tensor::vector({2, 4, 6}));
  CHECK(dot(a.data(), b.data()) == doctest::Approx(32.0));
  CHECK_THROWS_AS(a += Tensor::vector({1, 2}), ShapeError);
  CHECK(a.all_finite());
  a[1] = std::nan("");
  CHECK_FALSE(a.all_finite());
}

TEST_CASE("matmul examples") {
  const Tensor A = oracle::gaussian({3, 3}, 1);
  CHECK(matmul(Tensor::identity(3), A) == A);
  CHECK(matmul(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{0}, {1}})) == Tensor::from_rows({{2}, {4}}));
  const Tensor a = oracle::gaussian({7, 5}, 2), b = oracle::gaussian({5, 3}, 3);
  CHECK(oracle::max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)) < 1e-12);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("transposed products agree with the naive oracle") {
  const Tensor a = oracle::gaussian({9, 4}, 4), b = oracle::gaussian({6, 4}, 5), c = oracle::gaussian({9, 7}, 6);
  CHECK(oracle::max_abs_diff(matmul_nt(a, b), oracle::naive_matmul(a, oracle::naive_transpose(b))) < 1e-12);
  CHECK(oracle::max_abs_diff(matmul_tn(a, c), oracle::naive_matmul(oracle::naive_transpose(a), c)) < 1e-12);
  const auto y = matvec(a, std::vector<double>{1, 0, 0, 0});
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == a(i, 0));
}

TEST_CASE("blocked products match the naive oracle beyond one tile") {
  const Tensor a = oracle::gaussian({130, 300}, 7), b = oracle::gaussian({300, 270}, 8);
  const Tensor c = matmul(a, b);
  CHECK(oracle::max_abs_diff(c, oracle::naive_matmul(a, b)) < 1e-10);
  const Tensor bt = oracle::naive_transpose(b);
  CHECK(oracle::max_abs_diff(matmul_nt(a, bt), c) < 1e-10);
}

TEST_CASE("matrix products are bit-identical for any thread count") {
  const Tensor a = oracle::gaussian({256, 256}, 9), b = oracle::gaussian({256, 256}, 10);
  set_thread_count(1);
  const Tensor c1 = matmul(a, b), n1 = matmul_nt(a, b), t1 = matmul_tn(a, b);
  set_thread_count(4);
  CHECK(thread_count() == 4);
  const Tensor c4 = matmul(a, b), n4 = matmul_nt(a, b), t4 = matmul_tn(a, b);
  set_thread_count(1);
  CHECK(c1 == c4);
  CHECK(n1 == n4);
  CHECK(t1 == t4);
}

TEST_CASE("lu_factor examples") {
  const LuFactorization f = lu_factor(Tensor::identity(3));
  CHECK(f.lower() == Tensor::identity(3));
  CHECK(f.upper() == Tensor::identity(3));
  CHECK(f.sign == 1);
  const LuFactorization d = lu_factor(Tensor::from_rows({{2, 0}, {0, 3}}));
  CHECK(d.upper() == Tensor::from_rows({{2, 0}, {0, 3}}));

  const Tensor A = oracle::gaussian({6, 6}, 11);
  const LuFactorization g = lu_factor(A);
  const Tensor PA = oracle::naive_matmul(g.permutation(), A);
  CHECK(oracle::rel_err(oracle::naive_matmul(g.lower(), g.upper()), PA) < 1e-10);
  CHECK((g.sign == 1 || g.sign == -1));
}

TEST_CASE("lu_factor reports singular and non-square input") {
  CHECK_THROWS_AS(lu_factor(Tensor::from_rows({{1, 2}, {2, 4}})), SingularMatrix);
  CHECK_THROWS_AS(lu_factor(Tensor({3, 3})), SingularMatrix);
  CHECK_THROWS_AS(lu_factor(Tensor({2, 3})), ShapeError);
}

TEST_CASE("logabsdet examples") {
  const LogAbsDet i = logabsdet(lu_factor(Tensor::identity(4)));
  CHECK(i.sign == 1);
  CHECK(i.logabs == 0.0);
  const LogAbsDet d = logabsdet(lu_factor(Tensor::from_rows({{2, 0}, {0, 3}})));
  CHECK(d.sign == 1);
  CHECK(d.logabs == doctest::Approx(1.791759469228055).epsilon(1e-14));
  const LogAbsDet p = logabsdet(lu_factor(Tensor::from_rows({{0, 1}, {1, 0}})));
  CHECK(p.sign == -1);
  CHECK(p.logabs == doctest::Approx(0.0));
  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    const Tensor A = oracle::gaussian({5, 5}, seed);
    const double det = oracle::cofactor_det(A);
    const LogAbsDet r = logabsdet(lu_factor(A));
    CHECK(r.sign == (det > 0 ? 1 : -1));
    CHECK(std::abs(r.sign * std::exp(r.logabs) - det) / std::abs(det) < 1e-9);
  }
}

TEST_CASE("solve examples and residual") {
  const Tensor b = Tensor::vector({3, -1, 2});
  CHECK(solve(lu_factor(Tensor::identity(3)), b) == b);
  const Tensor x = solve(lu_factor(Tensor::from_rows({{2, 0}, {0, 4}})), Tensor::vector({2, 4}));
  CHECK(x[0] == doctest::Approx(1.0));
  CHECK(x[1] == doctest::Approx(1.0));
  const Tensor A = oracle::well_conditioned(8, 30);
  const Tensor B = oracle::gaussian({8, 3}, 31);
  const Tensor X = solve(lu_factor(A), B);
  CHECK(oracle::frob(oracle::naive_matmul(A, X) - B) / oracle::frob(B) <= 1e-8);
  CHECK_THROWS_AS(solve(lu_factor(A), Tensor::vector({1, 2})), ShapeError);
}

TEST_CASE("inverse examples") {
  CHECK(inverse(lu_factor(Tensor::identity(3))) == Tensor::identity(3));
  const Tensor inv = inverse(lu_factor(Tensor::from_rows({{2, 0}, {0, 4}})));
  CHECK(inv == Tensor::from_rows({{0.5, 0}, {0, 0.25}}));
  const Tensor A = oracle::gaussian({6, 6}, 32);
  const Tensor Ai = inverse(lu_factor(A));
  CHECK(oracle::max_abs_diff(oracle::naive_matmul(A, Ai), oracle::identity(6)) < 1e-9);
  CHECK(oracle::rel_err(Ai, oracle::gauss_jordan_inverse(A)) < 1e-9);
}

TEST_CASE("log-determinants of a matrix and its inverse cancel") {
  for (std::uint64_t seed = 40; seed < 45; ++seed) {
    const Tensor A = oracle::well_conditioned(7, seed);
    const double s = logabsdet(lu_factor(A)).logabs + logabsdet(lu_factor(inverse(lu_factor(A)))).logabs;
    CHECK(std::abs(s) < 1e-8);
  }
}

TEST_CASE("lu factorization counter increments per call") {
  const std::uint64_t before = lu_factorization_count();
  lu_factor(Tensor::identity(2));
  lu_factor(Tensor::identity(3));
  CHECK(lu_factorization_count() - before == 2);
}

TEST_CASE("conv2d examples") {
  Tensor dirac({2, 2, 3, 3});
  dirac(0, 0, 1, 1) = 1.0;
  dirac(1, 1, 1, 1) = 1.0;
  const Tensor x = oracle::gaussian({2, 4, 5}, 50);
  CHECK(conv2d(x, dirac) == x);

  const Tensor two = Tensor({1, 1, 1, 1}, 2.0);
  const Tensor y = oracle::gaussian({1, 3, 3}, 51);
  CHECK(conv2d(y, two) == 2.0 * y);

  const Tensor k = oracle::gaussian({2, 2, 3, 3}, 52);
  const Tensor in = oracle::gaussian({2, 4, 4}, 53);
  const Tensor M = build_conv_matrix(k, ImageShape{2, 4, 4}, Padding{1, 1});
  const Tensor z = conv2d(in, k);
  const auto Mx = matvec(M, in.data());
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(Mx[i]).epsilon(1e-12));
  CHECK(oracle::max_abs_diff(z, oracle::naive_same_conv(in, k)) < 1e-12);
}

TEST_CASE("conv2d rejects even kernels and mismatched channels") {
  CHECK_THROWS_AS(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 2, 2})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor({2, 4, 4}), Tensor({1, 1, 3, 3})), ShapeError);
  CHECK_THROWS_AS(same_padding(4, 3), ShapeError);
}

TEST_CASE("explicit padding gives the valid-convolution output size") {
  const Tensor k = oracle::gaussian({1, 1, 3, 3}, 54);
  const Tensor x = oracle::gaussian({1, 5, 6}, 55);
  const Tensor z = conv2d(x, k, Padding{0, 0});
  CHECK(z.shape() == Shape{1, 3, 4});
  CHECK(oracle::max_abs_diff(z, oracle::naive_conv(x, k, 0, 0)) < 1e-12);
  CHECK(conv_output_shape(ImageShape{1, 5, 6}, k.shape(), Padding{0, 0}) == ImageShape{1, 3, 4});
}

TEST_CASE("build_conv_matrix examples") {
  Tensor dirac({1, 1, 3, 3});
  dirac(0, 0, 1, 1) = 1.0;
  CHECK(build_conv_matrix(dirac, ImageShape{1, 4, 4}, Padding{1, 1}) == Tensor::identity(16));

  const Tensor k = oracle::gaussian({1, 1, 3, 3}, 56);
  const Tensor M = build_conv_matrix(k, ImageShape{1, 3, 3}, Padding{1, 1});
  CHECK(M.shape() == Shape{9, 9});
  CHECK(oracle::max_abs_diff(M, oracle::probe_conv_matrix(k, 1, 3, 3)) < 1e-15);

  const Tensor k2 = oracle::gaussian({3, 3, 3, 3}, 57);
  const Tensor M2 = build_conv_matrix(k2, ImageShape{3, 4, 3}, Padding{1, 1});
  CHECK(oracle::max_abs_diff(M2, oracle::probe_conv_matrix(k2, 3, 4, 3)) < 1e-15);
}

TEST_CASE("build_conv_matrix enforces the size guard") {
  const Tensor k({1, 1, 1, 1}, 1.0);
  CHECK_THROWS_AS(build_conv_matrix(k, ImageShape{1, 65, 64}, Padding{0, 0}), SizeGuardExceeded);
  CHECK_NOTHROW(build_conv_matrix(k, ImageShape{1, 4, 4}, Padding{0, 0}, 16));
  CHECK_THROWS_AS(build_conv_matrix(k, ImageShape{1, 4, 5}, Padding{0, 0}, 16), SizeGuardExceeded);
}

TEST_CASE("conv2d equals the matrix product for many inputs") {
  const Tensor k = oracle::gaussian({2, 2, 3, 3}, 58);
  const ImageShape s{2, 5, 4};
  const Tensor M = build_conv_matrix(k, s, Padding{1, 1});
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = oracle::gaussian({2, 5, 4}, 1000 + seed);
    const Tensor z = conv2d(x, k);
    const auto Mx = matvec(M, x.data());
    for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(z[i] - Mx[i]));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("kernel_grad matches the correlation oracle") {
  const Tensor x = oracle::gaussian({2, 4, 4}, 60);
  const Tensor delta = oracle::gaussian({2, 4, 4}, 61);
  const Tensor g = kernel_grad(delta, x, Shape{2, 2, 3, 3}, Padding{1, 1});
  // d/dk of <delta, conv(x, k)> by linearity: perturb each tap by one.
  Tensor k({2, 2, 3, 3});
  for (std::size_t t = 0; t < k.size(); ++t) {
    Tensor e({2, 2, 3, 3});
    e[t] = 1.0;
    const Tensor z = oracle::naive_same_conv(x, e);
    CHECK(g[t] == doctest::Approx(dot(z.data(), delta.data())).epsilon(1e-12));
  }
}

TEST_CASE("rng is deterministic and reproducible from its state") {
  Rng a(7), b(7);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  const std::string s = a.state();
  const double u1 = a.uniform(), n1 = a.normal();
  Rng c(0);
  c.set_state(s);
  CHECK(c.uniform() == u1);
  CHECK(c.normal() == n1);
  Rng d(3);
  const auto p = d.permutation(50);
  std::vector<std::size_t> sorted(p);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("rng draws have the documented moments") {
  Rng r(11);
  const std::size_t n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  bool in_range = true;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = r.uniform();
    in_range = in_range && u >= 0.0 && u < 1.0;
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(in_range);
  CHECK(std::abs(su / n - 0.5) < 4 * std::sqrt(1.0 / 12.0 / n));
  CHECK(std::abs(sn / n) < 4 / std::sqrt(double(n)));
  CHECK(std::abs(sn2 / n - 1.0) < 4 * std::sqrt(2.0 / n));
  for (int i = 0; i < 1000; ++i) CHECK(r.index(7) < 7);
}
