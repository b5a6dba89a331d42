#include "icl/promptgen.hpp"

#include <cmath>
#include <stdexcept>

#include "eigen_support.hpp"
#include "icl/rng.hpp"

namespace icl::promptgen {

namespace {

// Substream ids for per-prompt seed splitting.
constexpr std::uint64_t kTaskStream = 0;
constexpr std::uint64_t kInputStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

linalg::EMatrix draw_gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
  linalg::EMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
  return m;
}

Eigen::VectorXd draw_gaussian_vec(Rng& rng, std::size_t n) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  return v;
}

}  // namespace

SubspacePair make_subspace_pair(std::size_t d, std::size_t q, std::uint64_t seed) {
  if (q < 1 || q >= d)
    throw std::invalid_argument("make_subspace_pair: need 1 <= q < d");

  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed + attempt, 0));
    linalg::Matrix v(d, q);
    {
      auto ve = linalg::as_eigen(v);
      ve = draw_gaussian(rng, d, q);
    }
    const linalg::QrResult fac = linalg::qr(v);
    // Degenerate draw: a vanishing diagonal entry of r means the Gaussian
    // matrix was (numerically) rank-deficient. Resample.
    bool degenerate = false;
    for (std::size_t i = 0; i < q; ++i) {
      if (std::fabs(fac.r(i, i)) < 1e-12) degenerate = true;
    }
    if (degenerate) continue;

    SubspacePair pair;
    pair.dim_ambient = d;
    pair.dim_sub = q;
    pair.p_a = linalg::Matrix(d, d);
    pair.p_b = linalg::Matrix(d, d);
    const auto qe = linalg::as_eigen(fac.q);
    linalg::as_eigen(pair.p_a) = qe * qe.transpose();
    linalg::as_eigen(pair.p_b) =
        linalg::EMatrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)) -
        linalg::as_eigen(pair.p_a);
    return pair;
  }
}

PromptDistribution full_space_distribution(std::size_t d, std::size_t k) {
  PromptDistribution dist;
  dist.d = d;
  dist.k = k;
  dist.p_w = Matrix::identity(d);
  dist.p_x = Matrix::identity(d);
  dist.tag = "full";
  return dist;
}

PromptDistribution input_restricted_distribution(const SubspacePair& pair, std::size_t k,
                                                 bool orthogonal) {
  PromptDistribution dist;
  dist.d = pair.dim_ambient;
  dist.k = k;
  dist.p_w = Matrix::identity(pair.dim_ambient);
  dist.p_x = orthogonal ? pair.p_b : pair.p_a;
  dist.tag = orthogonal ? "input-orthogonal" : "input-restricted";
  return dist;
}

PromptDistribution weight_restricted_distribution(const SubspacePair& pair, std::size_t k,
                                                  bool orthogonal) {
  PromptDistribution dist;
  dist.d = pair.dim_ambient;
  dist.k = k;
  dist.p_w = orthogonal ? pair.p_b : pair.p_a;
  dist.p_x = Matrix::identity(pair.dim_ambient);
  dist.tag = orthogonal ? "weight-orthogonal" : "weight-restricted";
  return dist;
}

Prompt sample_curriculum_prompt(const PromptDistribution& dist, std::size_t d_start,
                                std::size_t k_start, std::uint64_t seed) {
  if (dist.d == 0 || dist.k == 0) throw std::invalid_argument("sample_prompt: empty distribution");
  if (d_start >= dist.d) throw std::invalid_argument("sample_prompt: d_start must be < d");
  if (k_start < 1 || k_start > dist.k)
    throw std::invalid_argument("sample_prompt: k_start must lie in [1, k]");
  if (!(dist.scale > 0.0)) throw std::invalid_argument("sample_prompt: scale must be > 0");
  if (dist.noise_sigma < 0.0) throw std::invalid_argument("sample_prompt: negative noise");

  Rng task_rng(derive_seed(seed, kTaskStream));
  Rng input_rng(derive_seed(seed, kInputStream));
  Rng noise_rng(derive_seed(seed, kNoiseStream));

  const std::size_t d = dist.d;
  const std::size_t n_pairs = k_start + 1;

  Prompt prompt;
  prompt.w.resize(d);
  {
    const Eigen::VectorXd w_g = draw_gaussian_vec(task_rng, d);
    linalg::EVecMap(prompt.w.data(), static_cast<Eigen::Index>(d)) =
        linalg::as_eigen(dist.p_w) * w_g;
  }

  prompt.xs = Matrix(n_pairs, d);
  prompt.ys.resize(n_pairs);
  auto xs = linalg::as_eigen(prompt.xs);
  const auto we = linalg::as_eigen(prompt.w);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const Eigen::VectorXd x_g = draw_gaussian_vec(input_rng, d);
    Eigen::VectorXd x = dist.scale * (linalg::as_eigen(dist.p_x) * x_g);
    for (std::size_t j = d - d_start; j < d; ++j) x(static_cast<Eigen::Index>(j)) = 0.0;
    xs.row(static_cast<Eigen::Index>(i)) = x.transpose();
    double y = we.dot(x);
    if (dist.noise_sigma > 0.0) y += dist.noise_sigma * noise_rng.normal();
    prompt.ys[i] = y;
  }

  prompt.meta.distribution = dist.tag;
  prompt.meta.seed = seed;
  return prompt;
}

Prompt sample_prompt(const PromptDistribution& dist, std::uint64_t seed) {
  return sample_curriculum_prompt(dist, 0, dist.k, seed);
}

namespace {

Prompt blend_prompt_impl(const SubspacePair& pair, std::size_t k, double t,
                         std::uint64_t seed, bool blend_inputs) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("blend: t must lie in [0, 1]");
  const std::size_t d = pair.dim_ambient;

  Rng task_rng(derive_seed(seed, kTaskStream));
  Rng input_rng(derive_seed(seed, kInputStream));

  const auto pa = linalg::as_eigen(pair.p_a);
  const auto pb = linalg::as_eigen(pair.p_b);

  Prompt prompt;
  prompt.w.resize(d);
  {
    const Eigen::VectorXd w_g = draw_gaussian_vec(task_rng, d);
    auto we = linalg::EVecMap(prompt.w.data(), static_cast<Eigen::Index>(d));
    if (blend_inputs) {
      we = w_g;  // full-space task
    } else {
      we = t * (pa * w_g) + (1.0 - t) * (pb * w_g);
    }
  }

  prompt.xs = Matrix(k + 1, d);
  prompt.ys.resize(k + 1);
  auto xs = linalg::as_eigen(prompt.xs);
  const auto we = linalg::as_eigen(prompt.w);
  for (std::size_t i = 0; i <= k; ++i) {
    const Eigen::VectorXd x_g = draw_gaussian_vec(input_rng, d);
    Eigen::VectorXd x;
    if (blend_inputs) {
      x = t * (pa * x_g) + (1.0 - t) * (pb * x_g);
    } else {
      x = x_g;
    }
    xs.row(static_cast<Eigen::Index>(i)) = x.transpose();
    prompt.ys[i] = we.dot(x);
  }

  prompt.meta.distribution =
      (blend_inputs ? "blend-input(t=" : "blend-weight(t=") + std::to_string(t) + ")";
  prompt.meta.seed = seed;
  return prompt;
}

}  // namespace

Prompt blend_input_prompt(const SubspacePair& pair, std::size_t k, double t,
                          std::uint64_t seed) {
  return blend_prompt_impl(pair, k, t, seed, /*blend_inputs=*/true);
}

Prompt blend_weight_prompt(const SubspacePair& pair, std::size_t k, double t,
                           std::uint64_t seed) {
  return blend_prompt_impl(pair, k, t, seed, /*blend_inputs=*/false);
}

TokenSequence tokenize(const Prompt& prompt) {
  const std::size_t k = prompt.k();
  const std::size_t d = prompt.d();
  TokenSequence seq;
  seq.tokens = Matrix(2 * k + 1, d);
  seq.x_positions.reserve(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    const std::size_t pos = 2 * i;
    seq.x_positions.push_back(pos);
    for (std::size_t j = 0; j < d; ++j) seq.tokens(pos, j) = prompt.xs(i, j);
    if (i < k) {
      seq.tokens(pos + 1, 0) = prompt.ys[i];  // rest of the row stays zero
    }
  }
  return seq;
}

TokenSequence curriculum_mask(const TokenSequence& seq, std::size_t d_start,
                              std::size_t k_start) {
  const std::size_t d = seq.tokens.cols();
  const std::size_t k = seq.x_positions.size() - 1;
  if (d_start >= d) throw std::invalid_argument("curriculum_mask: d_start must be < d");
  if (k_start < 1 || k_start > k)
    throw std::invalid_argument("curriculum_mask: k_start must lie in [1, k]");

  TokenSequence out;
  const std::size_t n_tokens = 2 * k_start + 1;
  out.tokens = Matrix(n_tokens, d);
  for (std::size_t p = 0; p < n_tokens; ++p)
    for (std::size_t j = 0; j < d; ++j) out.tokens(p, j) = seq.tokens(p, j);
  for (std::size_t i = 0; i <= k_start; ++i) {
    out.x_positions.push_back(2 * i);
    for (std::size_t j = d - d_start; j < d; ++j) out.tokens(2 * i, j) = 0.0;
  }
  return out;
}

}  // namespace icl::promptgen
