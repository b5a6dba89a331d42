#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace icl::linalg {

using Vector = std::vector<double>;

/// Dense row-major matrix of 64-bit floats. The whole analysis side of the
/// project runs in double precision; this is the one matrix type that crosses
/// module boundaries.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  Vector row(std::size_t i) const;
  Vector col(std::size_t j) const;
  void set_row(std::size_t i, const Vector& v);

  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Vector matvec(const Matrix& a, const Vector& x);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

double dot(const Vector& a, const Vector& b);
double norm2(const Vector& a);
double frobenius_norm(const Matrix& a);
double trace(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

struct QrResult {
  Matrix q;  // orthonormal columns, rows x cols
  Matrix r;  // upper triangular, cols x cols
};

struct SvdResult {
  Matrix u;      // left singular vectors, columns orthonormal
  Vector sigma;  // non-negative, non-increasing; min(rows, cols) entries
  Matrix v;      // right singular vectors, columns orthonormal
};

/// Thin QR of a rows >= cols matrix. Rank deficiency is allowed (zero
/// diagonal entries in r); non-finite input is rejected.
QrResult qr(const Matrix& a);

/// Thin SVD with singular values sorted descending.
SvdResult svd(const Matrix& a);

/// Moore-Penrose pseudoinverse via SVD. Singular values <= tol are dropped;
/// tol < 0 selects the default max(rows, cols) * sigma_max * machine-epsilon.
Matrix pinv(const Matrix& a, double tol = -1.0);

/// Minimum-norm least-squares solution of a x = b (the pinv(a) * b route
/// without forming the pseudoinverse explicitly).
Vector lstsq_min_norm(const Matrix& a, const Vector& b);

/// Solve a x = b for symmetric positive definite a.
Vector solve_spd(const Matrix& a, const Vector& b);

/// Lower Cholesky factor of a symmetric positive definite matrix.
Matrix cholesky_lower(const Matrix& a);

/// Quantile of the chi-square distribution with two degrees of freedom:
/// -2 ln(1 - p), exact for df = 2. Requires 0 < p < 1.
double chi2_quantile_df2(double p);

/// rows x cols matrix of i.i.d. standard normals drawn from icl::Rng(seed).
/// Same seed gives the same bits.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed);

double mean(const Vector& v);
double stddev_population(const Vector& v);
double stddev_sample(const Vector& v);

struct PearsonResult {
  double r = 0.0;
  double p_value = 1.0;  // two-sided, Student-t with n-2 dof
  std::size_t n = 0;
};

/// Pearson correlation with a two-sided p-value. Throws if fewer than 3
/// pairs or if either side has zero variance.
PearsonResult pearson_correlation(const Vector& x, const Vector& y);

/// Regularized incomplete beta function I_x(a, b), continued-fraction
/// evaluation. Building block for the Student-t tail probability.
double incomplete_beta(double a, double b, double x);

}  // namespace icl::linalg
