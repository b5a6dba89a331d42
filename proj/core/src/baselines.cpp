#include "icl/baselines.hpp"

#include <cmath>
#include <stdexcept>

#include "eigen_support.hpp"
#include "icl/rng.hpp"

namespace icl::baselines {

namespace {

using linalg::EConstMap;
using linalg::EMatrix;

// Context view: first i rows of xs and ys.
struct Context {
  EMatrix x;          // i x d
  Eigen::VectorXd y;  // i
};

Context context_upto(const promptgen::Prompt& prompt, std::size_t i) {
  const auto xs = linalg::as_eigen(prompt.xs);
  Context ctx;
  ctx.x = xs.topRows(static_cast<Eigen::Index>(i));
  ctx.y = Eigen::VectorXd(static_cast<Eigen::Index>(i));
  for (std::size_t j = 0; j < i; ++j) ctx.y(static_cast<Eigen::Index>(j)) = prompt.ys[j];
  return ctx;
}

}  // namespace

PredictionTrace trace_from_predictions(std::vector<double> predictions,
                                       const promptgen::Prompt& prompt,
                                       std::string model_id) {
  const std::size_t n = prompt.k() + 1;
  if (predictions.size() != n)
    throw std::invalid_argument("trace_from_predictions: length mismatch");
  PredictionTrace trace;
  trace.model_id = std::move(model_id);
  trace.predictions = std::move(predictions);
  trace.squared_errors.resize(n);
  const auto we = linalg::as_eigen(prompt.w);
  const auto xs = linalg::as_eigen(prompt.xs);
  for (std::size_t i = 0; i < n; ++i) {
    const double target = we.dot(xs.row(static_cast<Eigen::Index>(i)));
    const double e = trace.predictions[i] - target;
    trace.squared_errors[i] = e * e;
  }
  return trace;
}

PredictionTrace ols_trace(const promptgen::Prompt& prompt) {
  const std::size_t n = prompt.k() + 1;
  std::vector<double> preds(n, 0.0);
  const auto xs = linalg::as_eigen(prompt.xs);
  for (std::size_t i = 1; i < n; ++i) {
    const Context ctx = context_upto(prompt, i);
    const linalg::Matrix xm = linalg::from_eigen(ctx.x);
    const linalg::Vector beta =
        linalg::lstsq_min_norm(xm, linalg::vector_from_eigen(ctx.y));
    preds[i] = linalg::as_eigen(beta).dot(xs.row(static_cast<Eigen::Index>(i)));
  }
  return trace_from_predictions(std::move(preds), prompt, "ols");
}

PredictionTrace ols_projected_inputs_trace(const promptgen::Prompt& prompt,
                                           const linalg::Matrix& p_a) {
  if (p_a.rows() != prompt.d() || p_a.cols() != prompt.d())
    throw std::invalid_argument("ols_projected_inputs_trace: projection shape mismatch");
  promptgen::Prompt projected = prompt;
  linalg::as_eigen(projected.xs) =
      linalg::as_eigen(prompt.xs) * linalg::as_eigen(p_a).transpose();
  PredictionTrace trace = ols_trace(projected);
  // Score against the original prompt: predictions act on projected inputs,
  // errors are measured on the unprojected targets.
  trace = trace_from_predictions(std::move(trace.predictions), prompt, "ols-proj-inputs");
  return trace;
}

PredictionTrace ridge_trace(const promptgen::Prompt& prompt, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("ridge_trace: lambda must be >= 0");
  const std::size_t n = prompt.k() + 1;
  const std::size_t d = prompt.d();
  std::vector<double> preds(n, 0.0);
  const auto xs = linalg::as_eigen(prompt.xs);
  for (std::size_t i = 1; i < n; ++i) {
    const Context ctx = context_upto(prompt, i);
    Eigen::VectorXd beta;
    if (lambda == 0.0) {
      // pinv(X^T X) X^T y equals pinv(X) y, so the lambda -> 0 limit is the
      // min-norm OLS solution on every rank profile.
      const linalg::Matrix xm = linalg::from_eigen(ctx.x);
      const linalg::Vector b =
          linalg::lstsq_min_norm(xm, linalg::vector_from_eigen(ctx.y));
      beta = linalg::as_eigen(b);
    } else {
      const EMatrix gram = ctx.x.transpose() * ctx.x +
                           lambda * EMatrix::Identity(static_cast<Eigen::Index>(d),
                                                      static_cast<Eigen::Index>(d));
      beta = Eigen::LDLT<EMatrix>(gram).solve(ctx.x.transpose() * ctx.y);
    }
    preds[i] = beta.dot(xs.row(static_cast<Eigen::Index>(i)));
  }
  return trace_from_predictions(std::move(preds), prompt, "ridge");
}

PredictionTrace bayes_trace(const promptgen::Prompt& prompt, double tau, double sigma,
                            int m, std::uint64_t seed) {
  if (!(tau > 0.0) || !(sigma > 0.0) || m < 1)
    throw std::invalid_argument("bayes_trace: need tau > 0, sigma > 0, m >= 1");
  const std::size_t n = prompt.k() + 1;
  const std::size_t d = prompt.d();
  std::vector<double> preds(n, 0.0);
  const auto xs = linalg::as_eigen(prompt.xs);
  Rng rng(seed);
  const auto di = static_cast<Eigen::Index>(d);

  for (std::size_t i = 1; i < n; ++i) {
    const Context ctx = context_upto(prompt, i);
    const EMatrix precision = ctx.x.transpose() * ctx.x / (sigma * sigma) +
                              EMatrix::Identity(di, di) / (tau * tau);
    const Eigen::LLT<EMatrix> llt_prec(precision);
    const Eigen::VectorXd mu =
        llt_prec.solve(ctx.x.transpose() * ctx.y / (sigma * sigma));
    // Posterior covariance is precision^-1; draw via its Cholesky factor.
    const EMatrix cov = llt_prec.solve(EMatrix::Identity(di, di));
    const Eigen::LLT<EMatrix> llt_cov((cov + cov.transpose()) / 2.0);
    if (llt_cov.info() != Eigen::Success)
      throw std::runtime_error("bayes_trace: posterior covariance not PD");
    const EMatrix l = llt_cov.matrixL();

    const auto xq = xs.row(static_cast<Eigen::Index>(i));
    double acc = 0.0;
    for (int s = 0; s < m; ++s) {
      Eigen::VectorXd z(di);
      for (Eigen::Index j = 0; j < di; ++j) z(j) = rng.normal();
      const Eigen::VectorXd beta = mu + l * z;
      acc += xq.dot(beta);
    }
    preds[i] = acc / m;
  }
  return trace_from_predictions(std::move(preds), prompt, "bayes");
}

PredictionTrace kernel_ridge_trace(const promptgen::Prompt& prompt, double lambda,
                                   double kernel_sigma) {
  if (!(lambda > 0.0)) throw std::invalid_argument("kernel_ridge_trace: lambda must be > 0");
  const std::size_t n = prompt.k() + 1;
  if (kernel_sigma <= 0.0) kernel_sigma = std::sqrt(static_cast<double>(prompt.d()));
  const double inv_two_sigma2 = 1.0 / (2.0 * kernel_sigma * kernel_sigma);
  std::vector<double> preds(n, 0.0);
  const auto xs = linalg::as_eigen(prompt.xs);

  for (std::size_t i = 1; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    EMatrix gram(ii, ii);
    for (Eigen::Index a = 0; a < ii; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) {
        const double d2 = (xs.row(a) - xs.row(b)).squaredNorm();
        const double kv = std::exp(-d2 * inv_two_sigma2);
        gram(a, b) = kv;
        gram(b, a) = kv;
      }
    }
    gram.diagonal().array() += lambda;
    Eigen::VectorXd y(ii);
    for (Eigen::Index a = 0; a < ii; ++a) y(a) = prompt.ys[static_cast<std::size_t>(a)];
    const Eigen::VectorXd alpha = Eigen::LDLT<EMatrix>(gram).solve(y);

    Eigen::VectorXd kq(ii);
    for (Eigen::Index a = 0; a < ii; ++a) {
      kq(a) = std::exp(-(xs.row(a) - xs.row(ii)).squaredNorm() * inv_two_sigma2);
    }
    preds[i] = kq.dot(alpha);
  }
  return trace_from_predictions(std::move(preds), prompt, "kernel-ridge");
}

PredictionTrace gd_trace(const promptgen::Prompt& prompt, double eta, int iters,
                         std::uint64_t seed) {
  if (!(eta > 0.0) || iters < 0)
    throw std::invalid_argument("gd_trace: need eta > 0, iters >= 0");
  const std::size_t n = prompt.k() + 1;
  const std::size_t d = prompt.d();
  std::vector<double> preds(n, 0.0);
  bool diverged = false;
  const auto xs = linalg::as_eigen(prompt.xs);
  constexpr double kDivergenceNorm = 1e8;

  for (std::size_t i = 1; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    Eigen::VectorXd beta(static_cast<Eigen::Index>(d));
    for (Eigen::Index j = 0; j < beta.size(); ++j) beta(j) = rng.normal();
    const Context ctx = context_upto(prompt, i);
    for (int t = 0; t < iters; ++t) {
      const Eigen::VectorXd grad = 2.0 * ctx.x.transpose() * (ctx.x * beta - ctx.y);
      beta -= eta * grad;
      if (!beta.allFinite() || beta.norm() > kDivergenceNorm) {
        diverged = true;
        break;
      }
    }
    preds[i] = beta.allFinite() ? beta.dot(xs.row(static_cast<Eigen::Index>(i)))
                                : std::numeric_limits<double>::quiet_NaN();
  }
  PredictionTrace trace = trace_from_predictions(std::move(preds), prompt, "gd");
  trace.diverged = diverged;
  return trace;
}

std::vector<double> mean_squared_error(const std::vector<PredictionTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("mean_squared_error: empty batch");
  const std::size_t n = traces.front().squared_errors.size();
  std::vector<double> out(n, 0.0);
  for (const auto& t : traces) {
    if (t.squared_errors.size() != n)
      throw std::invalid_argument("mean_squared_error: trace length mismatch");
    for (std::size_t i = 0; i < n; ++i) out[i] += t.squared_errors[i];
  }
  for (double& v : out) v /= static_cast<double>(traces.size());
  return out;
}

}  // namespace icl::baselines
