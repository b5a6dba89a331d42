#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icl/linalg.hpp"
#include "icl/promptgen.hpp"

namespace icl::baselines {

/// Per-position predictions for one model on one prompt. squared_errors are
/// measured against the noiseless target w^T x_i, not the (possibly noisy)
/// label shown in context.
struct PredictionTrace {
  std::vector<double> predictions;     // length k+1
  std::vector<double> squared_errors;  // length k+1
  std::string model_id;
  bool diverged = false;  // set by gd_trace when an iterate runs away
};

struct BaselineConfig {
  double ridge_lambda = 0.01;
  double bayes_tau = 1.0;
  double bayes_sigma = 1.0;
  int bayes_samples = 64;
  double kernel_lambda = 0.01;
  double kernel_sigma = 0.0;  // <= 0 selects sqrt(d)
  double gd_eta = 0.01;
  int gd_iters = 1000;
};

/// Builds a trace from externally computed predictions (the transformer goes
/// through this same path so every model is scored identically).
PredictionTrace trace_from_predictions(std::vector<double> predictions,
                                       const promptgen::Prompt& prompt,
                                       std::string model_id);

/// Autoregressive OLS: the prediction for position i+1 uses the min-norm
/// pseudoinverse fit of the first i pairs; position 1 predicts 0.
PredictionTrace ols_trace(const promptgen::Prompt& prompt);

/// OLS after replacing every input (context and query) with p_a * x; labels
/// are left untouched.
PredictionTrace ols_projected_inputs_trace(const promptgen::Prompt& prompt,
                                           const linalg::Matrix& p_a);

/// Autoregressive ridge. lambda = 0 degenerates to the OLS pseudoinverse
/// solution on every rank profile.
PredictionTrace ridge_trace(const promptgen::Prompt& prompt, double lambda);

/// Bayesian linear regression with prior N(0, tau^2 I) and Gaussian
/// likelihood of variance sigma^2; each prediction averages m posterior
/// draws.
PredictionTrace bayes_trace(const promptgen::Prompt& prompt, double tau, double sigma,
                            int m, std::uint64_t seed);

/// Kernel ridge regression with the Gaussian (RBF) kernel.
PredictionTrace kernel_ridge_trace(const promptgen::Prompt& prompt, double lambda,
                                   double kernel_sigma);

/// Full-batch gradient descent on ||X beta - y||^2, re-initialized and re-run
/// per position. Divergence flags the trace instead of throwing.
PredictionTrace gd_trace(const promptgen::Prompt& prompt, double eta, int iters,
                         std::uint64_t seed);

/// Per-index mean of squared errors across a non-empty batch of equal-length
/// traces.
std::vector<double> mean_squared_error(const std::vector<PredictionTrace>& traces);

}  // namespace icl::baselines
