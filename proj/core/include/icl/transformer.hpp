#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icl/linalg.hpp"
#include "icl/promptgen.hpp"

namespace icl::transformer {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int hidden = 64;        // residual width m
  int token_dim = 8;      // d
  int max_positions = 33; // >= 2k+1
  std::uint64_t seed = 0; // initialization seed
};

/// 12 layers, 8 heads, hidden 256 at d = 20, k = 40.
ModelConfig paper_model_config();
/// 4 layers, 4 heads, hidden 64 at d = 8, k = 16.
ModelConfig desk_model_config();

/// Progressive unmasking schedule: every `period` steps d_start moves by
/// d_step (toward 0) and k_start by k_step (toward k).
struct CurriculumConfig {
  int d_start_init = 0;
  int k_start_init = 0;  // 0 disables the curriculum (full d and k from step 0)
  long period = 2000;
  int d_step = -1;
  int k_step = 2;
};

/// Schedule state at a step: d_start = max(0, init + d_step * floor(step /
/// period)) and k_start = min(k, init + k_step * floor(step / period)).
std::pair<int, int> curriculum_state(long step, const CurriculumConfig& cur, int d, int k);

struct TrainConfig {
  long steps = 50000;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  CurriculumConfig curriculum;
  double clip_norm = 1.0;         // global-norm clip; 0 disables
  bool include_query_loss = true; // include the query position in the objective
  std::uint64_t data_seed = 1;
  long checkpoint_every = 0;      // 0 writes only the final checkpoint
};

TrainConfig paper_train_config();
TrainConfig desk_train_config();

/// Minimal dense 2-D parameter block; vectors are stored as 1 x n.
template <class S>
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<S> v;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, S(0)) {}
  std::size_t size() const { return v.size(); }
  S* data() { return v.data(); }
  const S* data() const { return v.data(); }
};

/// All model parameters, in the fixed order used by checkpoints, the
/// optimizer, and the gradient check.
template <class S>
struct ParamsT {
  ModelConfig config;

  Tensor<S> embed_w;    // d x m
  Tensor<S> embed_b;    // 1 x m
  Tensor<S> pos_embed;  // max_positions x m

  struct Layer {
    Tensor<S> ln1_g, ln1_b;          // 1 x m
    Tensor<S> attn_qkv_w;            // m x 3m
    Tensor<S> attn_qkv_b;            // 1 x 3m
    Tensor<S> attn_proj_w;           // m x m
    Tensor<S> attn_proj_b;           // 1 x m
    Tensor<S> ln2_g, ln2_b;          // 1 x m
    Tensor<S> mlp_fc_w;              // m x 4m
    Tensor<S> mlp_fc_b;              // 1 x 4m
    Tensor<S> mlp_proj_w;            // 4m x m
    Tensor<S> mlp_proj_b;            // 1 x m
  };
  std::vector<Layer> layers;

  Tensor<S> lnf_g, lnf_b;  // 1 x m
  Tensor<S> readout_w;     // m x 1
  Tensor<S> readout_b;     // 1 x 1

  template <class F>
  void for_each_tensor(F&& f) {
    f("embed.w", embed_w);
    f("embed.b", embed_b);
    f("pos", pos_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& lay = layers[l];
      f(p + "ln1.g", lay.ln1_g);
      f(p + "ln1.b", lay.ln1_b);
      f(p + "attn.qkv.w", lay.attn_qkv_w);
      f(p + "attn.qkv.b", lay.attn_qkv_b);
      f(p + "attn.proj.w", lay.attn_proj_w);
      f(p + "attn.proj.b", lay.attn_proj_b);
      f(p + "ln2.g", lay.ln2_g);
      f(p + "ln2.b", lay.ln2_b);
      f(p + "mlp.fc.w", lay.mlp_fc_w);
      f(p + "mlp.fc.b", lay.mlp_fc_b);
      f(p + "mlp.proj.w", lay.mlp_proj_w);
      f(p + "mlp.proj.b", lay.mlp_proj_b);
    }
    f("lnf.g", lnf_g);
    f("lnf.b", lnf_b);
    f("readout.w", readout_w);
    f("readout.b", readout_b);
  }

  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<ParamsT*>(this)->for_each_tensor(
        [&](const std::string& name, const Tensor<S>& t) { f(name, t); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Tensor<S>& t) { n += t.size(); });
    return n;
  }
};

using Parameters = ParamsT<float>;

/// Allocates all tensors with the shapes implied by the config.
template <class S>
ParamsT<S> zero_params(const ModelConfig& config);

/// GPT-2 style initialization (N(0, 0.02) weights, residual projections
/// scaled by 1/sqrt(2 * layers), zero biases, unit LN gains) from
/// config.seed.
Parameters init_parameters(const ModelConfig& config);

ParamsT<double> to_double(const Parameters& params);

/// Readout direction f (excluding bias) in double precision.
linalg::Vector readout_direction(const Parameters& params);

struct ForwardOutput {
  std::vector<double> predictions;  // one per x-token
  linalg::Matrix residuals;         // (k+1) x m when captured, else empty
};

/// Causal forward pass; predictions are read at x-token positions. With
/// capture set, residuals hold the post-final-normalization vectors
/// immediately before the readout head.
ForwardOutput forward(const Parameters& params, const promptgen::TokenSequence& tokens,
                      bool capture = false);
ForwardOutput forward(const ParamsT<double>& params, const promptgen::TokenSequence& tokens,
                      bool capture = false);

/// Mean over x-token positions of (prediction - label)^2 against the
/// prompt's stored labels (query included unless excluded by flag).
double loss(const ForwardOutput& output, const promptgen::Prompt& prompt,
            bool include_query = true);

/// Loss plus analytic parameter gradients, double precision. Exists for the
/// finite-difference gradient check and shares its implementation with the
/// training path.
double loss_and_gradients(const ParamsT<double>& params,
                          const promptgen::TokenSequence& tokens,
                          const promptgen::Prompt& prompt, bool include_query,
                          ParamsT<double>& grads);

/// Training data source: a base distribution, optionally widened to a
/// uniform mixture over input scales (one scale drawn per batch).
struct TrainDataSpec {
  promptgen::PromptDistribution dist;
  std::vector<double> scale_choices;
};

struct TrainingDiverged : std::runtime_error {
  long step;
  explicit TrainingDiverged(long s)
      : std::runtime_error("training diverged at step " + std::to_string(s)), step(s) {}
};

struct TrainResult {
  Parameters params;
  std::vector<double> step_losses;        // objective per step
  std::vector<double> final_token_losses; // query-position squared error per step
};

/// AdamW training loop with the curriculum schedule. Deterministic given
/// (config.seed, data_seed): per-item prompt seeds derive from (data_seed,
/// step, item) and gradient reduction is order-fixed, so results do not
/// depend on the thread count. Checkpoints carry optimizer state, making
/// resumed runs bit-identical to uninterrupted ones.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const TrainDataSpec& data, const std::string& checkpoint_path,
                  const std::string& resume_path = {});

/// Implicitly learned weight vector: run the model with a fixed context
/// (all k labeled pairs of context_prompt, k > d required) on each query row,
/// then solve queries * beta = predictions by pseudoinverse.
linalg::Vector implicit_weight(const Parameters& params,
                               const promptgen::Prompt& context_prompt,
                               const linalg::Matrix& queries);

// ---- checkpoint format ----
// uint64 LE header length, JSON header {schema_version, config, step,
// data_seed, arrays: [{name, rows, cols}], adam_steps?}, then raw float32 LE
// payload, arrays in header order.

struct AdamState {
  Parameters m;
  Parameters v;
  long t = 0;
};

struct Checkpoint {
  Parameters params;
  long step = 0;
  std::uint64_t data_seed = 0;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::string& path, const Parameters& params, long step,
                     std::uint64_t data_seed, const AdamState* adam = nullptr);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace icl::transformer
