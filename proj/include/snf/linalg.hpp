#pragma once

#include <cstdint>
#include <vector>

#include "snf/tensor.hpp"

namespace snf {

// Matrix products. All three use a fixed i-k-j loop order so results are
// reproducible bit-for-bit for identical inputs.

/// a (m x k) * b (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// a (m x k) * b^T, with b given as (n x k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b, with a given as (k x m) and b as (k x n).
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// y = A x for a square or rectangular matrix and a flat vector.
std::vector<double> matvec(const Tensor& a, std::span<const double> x);

/// Pivot magnitudes below this are treated as exactly singular.
inline constexpr double kSingularPivot = 1e-300;

/// Packed result of P*A = L*U with unit-diagonal L stored below the diagonal.
struct LuFactorization {
  Tensor lu;
  std::vector<std::size_t> pivots;  ///< row i of P*A is row pivots[i] of A
  int sign = 1;                     ///< determinant sign of P

  std::size_t dim() const { return pivots.size(); }
  Tensor lower() const;
  Tensor upper() const;
  Tensor permutation() const;
};

struct LogAbsDet {
  int sign = 1;
  double logabs = 0.0;
};

/// Throws SingularMatrix when a pivot magnitude falls below kSingularPivot.
LuFactorization lu_factor(const Tensor& a);
LogAbsDet logabsdet(const LuFactorization& f);
/// Solves A X = B for a matrix B (D x n) or a flat vector B (D).
Tensor solve(const LuFactorization& f, const Tensor& b);
Tensor inverse(const LuFactorization& f);

/// Process-wide count of lu_factor calls. Used to verify amortized inference.
std::uint64_t lu_factorization_count() noexcept;

/// Worker threads used by the matrix products (default 1). Rows are split
/// between threads, so results are identical for every thread count.
void set_thread_count(std::size_t n);
std::size_t thread_count() noexcept;

}  // namespace snf
