#include "snf/linalg.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <utility>
#include <vector>

namespace snf {
namespace {

std::atomic<std::uint64_t> g_lu_count{0};

constexpr std::size_t kTileRows = 64;
constexpr std::size_t kTileCols = 256;
constexpr std::size_t kTileDepth = 128;
constexpr std::size_t kParallelWork = 1u << 20;  // multiply-adds below which threads are not worth starting

std::atomic<std::size_t> g_threads{1};

// Runs fn(begin, end) over contiguous row ranges. Rows are independent, so the
// result does not depend on the thread count.
template <class Fn>
void for_row_ranges(std::size_t rows, std::size_t work, Fn&& fn) {
  const std::size_t t = std::min(g_threads.load(), rows);
  if (t <= 1 || work < kParallelWork) {
    fn(std::size_t{0}, rows);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (rows + t - 1) / t;
  for (std::size_t r0 = chunk; r0 < rows; r0 += chunk) pool.emplace_back(fn, r0, std::min(rows, r0 + chunk));
  fn(std::size_t{0}, std::min(rows, chunk));
  for (auto& th : pool) th.join();
}

void require_square(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor c({m, n});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  // Tiled for cache reuse of b. Each c[i][j] still accumulates p = 0, 1, ...
  // in order, so results are identical to the untiled loop.
  for_row_ranges(m, m * k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t j0 = 0; j0 < n; j0 += kTileCols) {
      const std::size_t j1 = std::min(n, j0 + kTileCols);
      for (std::size_t p0 = 0; p0 < k; p0 += kTileDepth) {
        const std::size_t p1 = std::min(k, p0 + kTileDepth);
        for (std::size_t i = r0; i < r1; ++i) {
          double* crow = cd + i * n;
          for (std::size_t p = p0; p < p1; ++p) {
            const double aip = ad[i * k + p];
            const double* brow = bd + p * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += aip * brow[j];
          }
        }
      }
    }
  });
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn: inner dimensions " + shape_string(a.shape()) + "^T x " +
                     shape_string(b.shape()));
  }
  Tensor c({m, n});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  // Tiled over c; per-element accumulation order over p is unchanged.
  for_row_ranges(m, m * k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i0 = r0; i0 < r1; i0 += kTileRows) {
      const std::size_t i1 = std::min(r1, i0 + kTileRows);
      for (std::size_t j0 = 0; j0 < n; j0 += kTileCols) {
        const std::size_t j1 = std::min(n, j0 + kTileCols);
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bd + p * n;
          for (std::size_t i = i0; i < i1; ++i) {
            const double api = ad[p * m + i];
            double* crow = cd + i * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += api * brow[j];
          }
        }
      }
    }
  });
  return c;
}

std::vector<double> matvec(const Tensor& a, std::span<const double> x) {
  const std::size_t m = a.rows(), n = a.cols();
  if (x.size() != n) throw ShapeError("matvec: length mismatch");
  std::vector<double> y(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    auto r = a.row(i);
    for (std::size_t j = 0; j < n; ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

Tensor LuFactorization::lower() const {
  const std::size_t n = dim();
  Tensor l = Tensor::identity(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) l(i, j) = lu(i, j);
  return l;
}

Tensor LuFactorization::upper() const {
  const std::size_t n = dim();
  Tensor u({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) u(i, j) = lu(i, j);
  return u;
}

Tensor LuFactorization::permutation() const {
  const std::size_t n = dim();
  Tensor p({n, n});
  for (std::size_t i = 0; i < n; ++i) p(i, pivots[i]) = 1.0;
  return p;
}

LuFactorization lu_factor(const Tensor& a) {
  require_square(a, "lu_factor");
  g_lu_count.fetch_add(1, std::memory_order_relaxed);

  const std::size_t n = a.rows();
  LuFactorization f{a, {}, 1};
  f.pivots.resize(n);
  for (std::size_t i = 0; i < n; ++i) f.pivots[i] = i;
  double* d = f.lu.data().data();

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    double best = std::abs(d[k * n + k]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double v = std::abs(d[i * n + k]);
      if (v > best) {
        best = v;
        p = i;
      }
    }
    if (!(best >= kSingularPivot)) {
      throw SingularMatrix("lu_factor: pivot " + std::to_string(k) + " has magnitude below 1e-300");
    }
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(d[k * n + j], d[p * n + j]);
      std::swap(f.pivots[k], f.pivots[p]);
      f.sign = -f.sign;
    }
    const double pivot = d[k * n + k];
    const double* krow = d + k * n;
    for (std::size_t i = k + 1; i < n; ++i) {
      double* irow = d + i * n;
      const double l = irow[k] / pivot;
      irow[k] = l;
      if (l == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) irow[j] -= l * krow[j];
    }
  }
  return f;
}

LogAbsDet logabsdet(const LuFactorization& f) {
  LogAbsDet r{f.sign, 0.0};
  const std::size_t n = f.dim();
  for (std::size_t i = 0; i < n; ++i) {
    const double u = f.lu(i, i);
    if (u < 0) r.sign = -r.sign;
    r.logabs += std::log(std::abs(u));
  }
  return r;
}

Tensor solve(const LuFactorization& f, const Tensor& b) {
  const std::size_t n = f.dim();
  const bool is_vector = b.rank() == 1;
  const std::size_t rhs = is_vector ? 1 : b.cols();
  if ((is_vector ? b.size() : b.rows()) != n) {
    throw ShapeError("solve: right-hand side " + shape_string(b.shape()) + " does not match dimension " +
                     std::to_string(n));
  }

  // X = P B, then forward and back substitution on whole rows.
  Tensor x({n, rhs});
  const double* bd = b.data().data();
  double* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = bd + f.pivots[i] * rhs;
    std::copy(src, src + rhs, xd + i * rhs);
  }
  const double* lu = f.lu.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* xi = xd + i * rhs;
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lu[i * n + k];
      if (l == 0.0) continue;
      const double* xk = xd + k * rhs;
      for (std::size_t j = 0; j < rhs; ++j) xi[j] -= l * xk[j];
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double* xi = xd + ii * rhs;
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double u = lu[ii * n + k];
      if (u == 0.0) continue;
      const double* xk = xd + k * rhs;
      for (std::size_t j = 0; j < rhs; ++j) xi[j] -= u * xk[j];
    }
    const double diag = lu[ii * n + ii];
    if (!(std::abs(diag) >= kSingularPivot)) throw SingularMatrix("solve: zero pivot");
    for (std::size_t j = 0; j < rhs; ++j) xi[j] /= diag;
  }
  if (is_vector) return x.reshaped({n});
  return x;
}

Tensor inverse(const LuFactorization& f) { return solve(f, Tensor::identity(f.dim())); }

std::uint64_t lu_factorization_count() noexcept { return g_lu_count.load(std::memory_order_relaxed); }

void set_thread_count(std::size_t n) { g_threads.store(std::max<std::size_t>(n, 1)); }
std::size_t thread_count() noexcept { return g_threads.load(); }

}  // namespace snf
