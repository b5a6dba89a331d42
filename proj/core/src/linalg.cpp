#include "icl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "eigen_support.hpp"
#include "icl/rng.hpp"

namespace icl::linalg {

namespace {

void require_finite(const Matrix& a, const char* op) {
  if (!a.all_finite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite input entry");
  }
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Vector Matrix::row(std::size_t i) const {
  return Vector(data_.begin() + static_cast<std::ptrdiff_t>(i * cols_),
                data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols_));
}

Vector Matrix::col(std::size_t j) const {
  Vector v(rows_);
  for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
  return v;
}

void Matrix::set_row(std::size_t i, const Vector& v) {
  if (v.size() != cols_) throw std::invalid_argument("set_row: size mismatch");
  std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
  Matrix out(a.rows(), b.cols());
  as_eigen(out) = as_eigen(a) * as_eigen(b);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  as_eigen(out) = as_eigen(a).transpose();
  return out;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw std::invalid_argument("matvec: shape mismatch");
  Vector out(a.rows());
  EVecMap(out.data(), static_cast<Eigen::Index>(out.size())) = as_eigen(a) * as_eigen(x);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: shape mismatch");
  Matrix out(a.rows(), a.cols());
  as_eigen(out) = as_eigen(a) + as_eigen(b);
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("subtract: shape mismatch");
  Matrix out(a.rows(), a.cols());
  as_eigen(out) = as_eigen(a) - as_eigen(b);
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out(a.rows(), a.cols());
  as_eigen(out) = as_eigen(a) * s;
  return out;
}

double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  return as_eigen(a).dot(as_eigen(b));
}

double norm2(const Vector& a) { return as_eigen(a).norm(); }

double frobenius_norm(const Matrix& a) { return as_eigen(a).norm(); }

double trace(const Matrix& a) { return as_eigen(a).trace(); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  if (a.size() == 0) return 0.0;
  return (as_eigen(a) - as_eigen(b)).cwiseAbs().maxCoeff();
}

QrResult qr(const Matrix& a) {
  require_finite(a, "qr");
  if (a.rows() < a.cols()) throw std::invalid_argument("qr: requires rows >= cols");
  const auto ae = as_eigen(a);
  Eigen::HouseholderQR<EMatrix> fac(ae);
  const Eigen::Index n = static_cast<Eigen::Index>(a.cols());
  EMatrix thin_q = fac.householderQ() * EMatrix::Identity(ae.rows(), n);
  EMatrix r = fac.matrixQR().topRows(n).template triangularView<Eigen::Upper>();
  return QrResult{from_eigen(thin_q), from_eigen(r)};
}

SvdResult svd(const Matrix& a) {
  require_finite(a, "svd");
  const auto ae = as_eigen(a);
  // BDCSVD falls back to Jacobi internally for small problems; either path
  // is deterministic.
  Eigen::BDCSVD<EMatrix> fac(ae, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  out.u = from_eigen(fac.matrixU());
  out.v = from_eigen(fac.matrixV());
  out.sigma = vector_from_eigen(fac.singularValues());
  return out;
}

namespace {

double default_pinv_tol(const Matrix& a, const Vector& sigma) {
  const double smax = sigma.empty() ? 0.0 : sigma.front();
  return static_cast<double>(std::max(a.rows(), a.cols())) * smax *
         std::numeric_limits<double>::epsilon();
}

}  // namespace

Matrix pinv(const Matrix& a, double tol) {
  require_finite(a, "pinv");
  if (a.rows() == 0 || a.cols() == 0) return Matrix(a.cols(), a.rows());
  const SvdResult s = svd(a);
  if (tol < 0.0) tol = default_pinv_tol(a, s.sigma);
  Matrix out(a.cols(), a.rows());
  auto oe = as_eigen(out);
  oe.setZero();
  const auto ue = as_eigen(s.u);
  const auto ve = as_eigen(s.v);
  for (std::size_t i = 0; i < s.sigma.size(); ++i) {
    if (s.sigma[i] > tol) {
      oe += (1.0 / s.sigma[i]) * ve.col(static_cast<Eigen::Index>(i)) *
            ue.col(static_cast<Eigen::Index>(i)).transpose();
    }
  }
  return out;
}

Vector lstsq_min_norm(const Matrix& a, const Vector& b) {
  if (a.rows() != b.size()) throw std::invalid_argument("lstsq_min_norm: shape mismatch");
  if (a.rows() == 0) return Vector(a.cols(), 0.0);
  const SvdResult s = svd(a);
  const double tol = default_pinv_tol(a, s.sigma);
  const auto ue = as_eigen(s.u);
  const auto ve = as_eigen(s.v);
  const auto be = as_eigen(b);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(a.cols()));
  for (std::size_t i = 0; i < s.sigma.size(); ++i) {
    if (s.sigma[i] > tol) {
      const auto idx = static_cast<Eigen::Index>(i);
      x += (ue.col(idx).dot(be) / s.sigma[i]) * ve.col(idx);
    }
  }
  return vector_from_eigen(x);
}

Vector solve_spd(const Matrix& a, const Vector& b) {
  if (a.rows() != a.cols() || a.rows() != b.size())
    throw std::invalid_argument("solve_spd: shape mismatch");
  Eigen::LDLT<EMatrix> fac(as_eigen(a));
  if (fac.info() != Eigen::Success)
    throw std::runtime_error("solve_spd: factorization failed");
  return vector_from_eigen(fac.solve(as_eigen(b)).eval());
}

Matrix cholesky_lower(const Matrix& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky_lower: not square");
  Eigen::LLT<EMatrix> fac(as_eigen(a));
  if (fac.info() != Eigen::Success)
    throw std::runtime_error("cholesky_lower: matrix not positive definite");
  return from_eigen(EMatrix(fac.matrixL()));
}

double chi2_quantile_df2(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("chi2_quantile_df2: p must lie in (0, 1)");
  return -2.0 * std::log1p(-p);
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0)
    throw std::invalid_argument("gaussian_matrix: empty shape");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) m.data()[i] = rng.normal();
  return m;
}

double mean(const Vector& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty vector");
  return as_eigen(v).mean();
}

double stddev_population(const Vector& v) {
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

double stddev_sample(const Vector& v) {
  if (v.size() < 2) throw std::invalid_argument("stddev_sample: need >= 2 values");
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

namespace {

// Continued fraction for the incomplete beta function (Lentz's method).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3.0e-16;
  constexpr double kFpMin = 1.0e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("incomplete_beta: a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return bt * beta_cf(a, b, x) / a;
  }
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

PearsonResult pearson_correlation(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: size mismatch");
  if (x.size() < 3) throw std::invalid_argument("pearson: need at least 3 pairs");
  const std::size_t n = x.size();
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::invalid_argument("pearson: zero variance, correlation undefined");
  double r = sxy / std::sqrt(sxx * syy);
  r = std::clamp(r, -1.0, 1.0);

  PearsonResult out;
  out.r = r;
  out.n = n;
  const double df = static_cast<double>(n - 2);
  if (std::fabs(r) >= 1.0) {
    out.p_value = 0.0;
  } else {
    const double t2 = df * r * r / (1.0 - r * r);
    out.p_value = incomplete_beta(df / 2.0, 0.5, df / (df + t2));
  }
  return out;
}

}  // namespace icl::linalg
