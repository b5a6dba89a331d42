#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icl/linalg.hpp"

namespace icl::promptgen {

using linalg::Matrix;
using linalg::Vector;

/// Pair of complementary orthogonal projections of rank q and d - q.
struct SubspacePair {
  std::size_t dim_ambient = 0;  // d
  std::size_t dim_sub = 0;      // q = rank(p_a)
  Matrix p_a;                   // d x d, symmetric idempotent
  Matrix p_b;                   // I - p_a
};

/// Builds the pair from a seeded d x q Gaussian matrix: QR-factorize, keep the
/// first q columns of Q, and form p_a as their outer product. A (probability
/// zero) rank-deficient draw is retried with the seed incremented.
SubspacePair make_subspace_pair(std::size_t d, std::size_t q, std::uint64_t seed);

/// A prompt distribution D(p_w, p_x) plus label-noise sigma and input scale.
struct PromptDistribution {
  std::size_t d = 0;
  std::size_t k = 0;
  Matrix p_w;                // d x d, identity when the task is unrestricted
  Matrix p_x;                // d x d, identity when inputs are unrestricted
  double noise_sigma = 0.0;  // label noise std dev
  double scale = 1.0;        // inputs are scale * p_x * x_g
  std::string tag;           // descriptor recorded in PromptMeta and CSV output
};

PromptDistribution full_space_distribution(std::size_t d, std::size_t k);
PromptDistribution input_restricted_distribution(const SubspacePair& pair, std::size_t k,
                                                 bool orthogonal = false);
PromptDistribution weight_restricted_distribution(const SubspacePair& pair, std::size_t k,
                                                  bool orthogonal = false);

struct PromptMeta {
  std::string distribution;
  std::uint64_t seed = 0;
};

/// k labeled pairs plus a query. The query's ground-truth label is stored in
/// ys.back() for evaluation; models never see it.
struct Prompt {
  Matrix xs;  // (k+1) x d
  Vector ys;  // k+1
  Vector w;   // d, the generating task vector
  PromptMeta meta;

  std::size_t k() const { return xs.rows() == 0 ? 0 : xs.rows() - 1; }
  std::size_t d() const { return xs.cols(); }
};

/// Draws a prompt. The seed is split into fixed substreams (task, inputs,
/// noise) so the same seed reuses the very same x_g draws across distribution
/// variants that differ only in projections, scale, or noise.
Prompt sample_prompt(const PromptDistribution& dist, std::uint64_t seed);

/// Curriculum variant: only k_start context pairs plus query are generated,
/// the trailing d_start coordinates of every input are zeroed, and labels are
/// computed from the masked inputs.
Prompt sample_curriculum_prompt(const PromptDistribution& dist, std::size_t d_start,
                                std::size_t k_start, std::uint64_t seed);

/// Inputs are the convex blend t * (p_a x_g) + (1 - t) * (p_b x_g) of one
/// shared x_g draw per position; the task vector is full-space Gaussian.
/// t = 1 reproduces the training-subspace distribution, t = 0 the orthogonal
/// one, bit-for-bit against sample_prompt with the same seed.
Prompt blend_input_prompt(const SubspacePair& pair, std::size_t k, double t,
                          std::uint64_t seed);

/// Weight-space analogue: the task is t * (p_a w_g) + (1 - t) * (p_b w_g) and
/// inputs are full-space Gaussian.
Prompt blend_weight_prompt(const SubspacePair& pair, std::size_t k, double t,
                           std::uint64_t seed);

/// (2k+1) x d token matrix: x_i at even positions, [y_i, 0, ..., 0] after
/// each context input, query input last with no label token.
struct TokenSequence {
  Matrix tokens;
  std::vector<std::size_t> x_positions;  // 0, 2, ..., 2k
};

TokenSequence tokenize(const Prompt& prompt);

/// Zeroes the trailing d_start coordinates of every x-token and truncates the
/// sequence to k_start context pairs plus query (the x-token at index
/// 2 * k_start becomes the query).
TokenSequence curriculum_mask(const TokenSequence& tokens, std::size_t d_start,
                              std::size_t k_start);

}  // namespace icl::promptgen
