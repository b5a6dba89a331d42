#include "icl/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#ifdef ICL_HAVE_OPENMP
#include <omp.h>
#endif

#include "eigen_support.hpp"
#include "icl/rng.hpp"

namespace icl::transformer {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr int kChunkItems = 8;  // fixed batch chunking, independent of threads

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
Eigen::Map<RowMat<S>> emap(Tensor<S>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)};
}

template <class S>
Eigen::Map<const RowMat<S>> emap(const Tensor<S>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols)};
}

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  const S pdf = S(0.3989422804014327) * std::exp(S(-0.5) * x * x);
  return cdf + x * pdf;
}

void validate_config(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.hidden < 1 || c.token_dim < 1 || c.max_positions < 1)
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  if (c.hidden % c.heads != 0)
    throw std::invalid_argument("ModelConfig: hidden must be divisible by heads");
}

// ---------------------------------------------------------------------------
// Stacked forward/backward over a chunk of n_items sequences of T tokens.
// Rows of every activation matrix are item-major: row i*T + t is token t of
// item i.
// ---------------------------------------------------------------------------

template <class S>
struct LayerCache {
  RowMat<S> ln1_xhat, attn_in, qkv, ctx, ln2_xhat, mlp_in, fc_pre, fc_act;
  ColVec<S> ln1_rstd, ln2_rstd;
  RowMat<S> probs;  // (n_items * heads * T) x T
};

template <class S>
struct Workspace {
  std::vector<LayerCache<S>> layers;
  RowMat<S> h, lnf_xhat, hf;
  ColVec<S> lnf_rstd;
  ColVec<S> preds;  // one per row; only x positions are consumed
  // backward scratch
  RowMat<S> dh, dmid, dqkv, dctx, dfc, dact;
  RowMat<S> att_a, att_b;  // T x T scratch
};

template <class S>
void layernorm_forward(const RowMat<S>& x, const Tensor<S>& g, const Tensor<S>& b,
                       RowMat<S>& xhat, ColVec<S>& rstd, RowMat<S>& out) {
  const Eigen::Index rows = x.rows(), m = x.cols();
  xhat.resize(rows, m);
  out.resize(rows, m);
  rstd.resize(rows);
  const auto ge = emap(g), be = emap(b);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S rs = S(1) / std::sqrt(var + S(kLnEps));
    rstd(r) = rs;
    xhat.row(r) = (x.row(r).array() - mu) * rs;
    out.row(r) = xhat.row(r).cwiseProduct(ge.row(0)) + be.row(0);
  }
}

// dx is accumulated into dh_accum; parameter grads into dg/db.
template <class S>
void layernorm_backward(const RowMat<S>& dy, const RowMat<S>& xhat, const ColVec<S>& rstd,
                        const Tensor<S>& g, RowMat<S>& dh_accum, Tensor<S>& dg,
                        Tensor<S>& db) {
  const Eigen::Index rows = dy.rows(), m = dy.cols();
  auto dge = emap(dg), dbe = emap(db);
  const auto ge = emap(g);
  dge.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbe.row(0) += dy.colwise().sum();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto dxhat = (dy.row(r).array() * ge.row(0).array()).eval();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat.row(r).array()).mean();
    dh_accum.row(r) +=
        (rstd(r) * (dxhat - m1 - xhat.row(r).array() * m2)).matrix();
  }
}

template <class S>
void forward_stacked(const ParamsT<S>& p, const RowMat<S>& input, int n_items, int T,
                     Workspace<S>& ws) {
  const auto& c = p.config;
  const Eigen::Index m = c.hidden;
  const Eigen::Index rows = input.rows();
  const int heads = c.heads;
  const Eigen::Index hd = m / heads;
  const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

  ws.layers.resize(static_cast<std::size_t>(c.layers));
  ws.h.resize(rows, m);
  ws.h.noalias() = input * emap(p.embed_w);
  ws.h.rowwise() += emap(p.embed_b).row(0);
  const auto pos = emap(p.pos_embed);
  for (int i = 0; i < n_items; ++i) {
    ws.h.middleRows(static_cast<Eigen::Index>(i) * T, T) += pos.topRows(T);
  }

  for (int l = 0; l < c.layers; ++l) {
    auto& lc = ws.layers[static_cast<std::size_t>(l)];
    const auto& lp = p.layers[static_cast<std::size_t>(l)];

    layernorm_forward(ws.h, lp.ln1_g, lp.ln1_b, lc.ln1_xhat, lc.ln1_rstd, lc.attn_in);

    lc.qkv.resize(rows, 3 * m);
    lc.qkv.noalias() = lc.attn_in * emap(lp.attn_qkv_w);
    lc.qkv.rowwise() += emap(lp.attn_qkv_b).row(0);

    lc.ctx.resize(rows, m);
    lc.probs.resize(static_cast<Eigen::Index>(n_items) * heads * T, T);
    ws.att_a.resize(T, T);
    for (int i = 0; i < n_items; ++i) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(i) * T;
      for (int hh = 0; hh < heads; ++hh) {
        const auto q = lc.qkv.block(r0, hd * hh, T, hd);
        const auto k = lc.qkv.block(r0, m + hd * hh, T, hd);
        const auto v = lc.qkv.block(r0, 2 * m + hd * hh, T, hd);
        ws.att_a.noalias() = q * k.transpose();
        ws.att_a *= att_scale;
        for (Eigen::Index r = 0; r + 1 < T; ++r) {
          ws.att_a.row(r).tail(T - 1 - r).setConstant(-std::numeric_limits<S>::infinity());
        }
        auto prob = lc.probs.middleRows((static_cast<Eigen::Index>(i) * heads + hh) * T, T);
        for (Eigen::Index r = 0; r < T; ++r) {
          const S mx = ws.att_a.row(r).maxCoeff();
          prob.row(r) = (ws.att_a.row(r).array() - mx).exp();
          prob.row(r) /= prob.row(r).sum();
        }
        lc.ctx.block(r0, hd * hh, T, hd).noalias() = prob * v;
      }
    }

    ws.h.noalias() += lc.ctx * emap(lp.attn_proj_w);
    ws.h.rowwise() += emap(lp.attn_proj_b).row(0);

    layernorm_forward(ws.h, lp.ln2_g, lp.ln2_b, lc.ln2_xhat, lc.ln2_rstd, lc.mlp_in);

    lc.fc_pre.resize(rows, 4 * m);
    lc.fc_pre.noalias() = lc.mlp_in * emap(lp.mlp_fc_w);
    lc.fc_pre.rowwise() += emap(lp.mlp_fc_b).row(0);
    lc.fc_act = lc.fc_pre.unaryExpr([](S x) { return gelu(x); });

    ws.h.noalias() += lc.fc_act * emap(lp.mlp_proj_w);
    ws.h.rowwise() += emap(lp.mlp_proj_b).row(0);
  }

  layernorm_forward(ws.h, p.lnf_g, p.lnf_b, ws.lnf_xhat, ws.lnf_rstd, ws.hf);
  ws.preds.resize(rows);
  ws.preds.noalias() = ws.hf * emap(p.readout_w);
  ws.preds.array() += p.readout_b.v[0];
}

// dpreds: one slot per row (zero at non-scored positions). Parameter
// gradients are accumulated into `g`.
template <class S>
void backward_stacked(const ParamsT<S>& p, const RowMat<S>& input, int n_items, int T,
                      Workspace<S>& ws, const ColVec<S>& dpreds, ParamsT<S>& g) {
  const auto& c = p.config;
  const Eigen::Index m = c.hidden;
  const Eigen::Index rows = input.rows();
  const int heads = c.heads;
  const Eigen::Index hd = m / heads;
  const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

  emap(g.readout_w).noalias() += ws.hf.transpose() * dpreds;
  g.readout_b.v[0] += dpreds.sum();

  ws.dmid.resize(rows, m);
  ws.dmid.noalias() = dpreds * emap(p.readout_w).transpose();

  ws.dh.resize(rows, m);
  ws.dh.setZero();
  layernorm_backward(ws.dmid, ws.lnf_xhat, ws.lnf_rstd, p.lnf_g, ws.dh, g.lnf_g, g.lnf_b);

  for (int l = c.layers - 1; l >= 0; --l) {
    auto& lc = ws.layers[static_cast<std::size_t>(l)];
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    auto& lg = g.layers[static_cast<std::size_t>(l)];

    // MLP branch: h += proj(gelu(fc(ln2(h))))
    emap(lg.mlp_proj_w).noalias() += lc.fc_act.transpose() * ws.dh;
    emap(lg.mlp_proj_b).row(0) += ws.dh.colwise().sum();
    ws.dact.resize(rows, 4 * m);
    ws.dact.noalias() = ws.dh * emap(lp.mlp_proj_w).transpose();
    ws.dfc = ws.dact.cwiseProduct(lc.fc_pre.unaryExpr([](S x) { return gelu_grad(x); }));
    emap(lg.mlp_fc_w).noalias() += lc.mlp_in.transpose() * ws.dfc;
    emap(lg.mlp_fc_b).row(0) += ws.dfc.colwise().sum();
    ws.dmid.noalias() = ws.dfc * emap(lp.mlp_fc_w).transpose();
    layernorm_backward(ws.dmid, lc.ln2_xhat, lc.ln2_rstd, lp.ln2_g, ws.dh, lg.ln2_g,
                       lg.ln2_b);

    // Attention branch: h += proj(attn(ln1(h)))
    emap(lg.attn_proj_w).noalias() += lc.ctx.transpose() * ws.dh;
    emap(lg.attn_proj_b).row(0) += ws.dh.colwise().sum();
    ws.dctx.resize(rows, m);
    ws.dctx.noalias() = ws.dh * emap(lp.attn_proj_w).transpose();

    ws.dqkv.resize(rows, 3 * m);
    ws.att_a.resize(T, T);
    ws.att_b.resize(T, T);
    for (int i = 0; i < n_items; ++i) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(i) * T;
      for (int hh = 0; hh < heads; ++hh) {
        const auto q = lc.qkv.block(r0, hd * hh, T, hd);
        const auto k = lc.qkv.block(r0, m + hd * hh, T, hd);
        const auto v = lc.qkv.block(r0, 2 * m + hd * hh, T, hd);
        const auto prob =
            lc.probs.middleRows((static_cast<Eigen::Index>(i) * heads + hh) * T, T);
        const auto dctx_blk = ws.dctx.block(r0, hd * hh, T, hd);

        ws.att_a.noalias() = dctx_blk * v.transpose();  // dP
        ws.dqkv.block(r0, 2 * m + hd * hh, T, hd).noalias() =
            prob.transpose() * dctx_blk;  // dV
        // softmax backward: dS = P * (dP - rowsum(dP .* P))
        for (Eigen::Index r = 0; r < T; ++r) {
          const S dot = ws.att_a.row(r).cwiseProduct(prob.row(r)).sum();
          ws.att_b.row(r) =
              prob.row(r).cwiseProduct(ws.att_a.row(r).array().operator-(dot).matrix());
        }
        ws.att_b *= att_scale;
        ws.dqkv.block(r0, hd * hh, T, hd).noalias() = ws.att_b * k;              // dQ
        ws.dqkv.block(r0, m + hd * hh, T, hd).noalias() = ws.att_b.transpose() * q;  // dK
      }
    }

    emap(lg.attn_qkv_w).noalias() += lc.attn_in.transpose() * ws.dqkv;
    emap(lg.attn_qkv_b).row(0) += ws.dqkv.colwise().sum();
    ws.dmid.noalias() = ws.dqkv * emap(lp.attn_qkv_w).transpose();
    layernorm_backward(ws.dmid, lc.ln1_xhat, lc.ln1_rstd, lp.ln1_g, ws.dh, lg.ln1_g,
                       lg.ln1_b);
  }

  emap(g.embed_w).noalias() += input.transpose() * ws.dh;
  emap(g.embed_b).row(0) += ws.dh.colwise().sum();
  auto gpos = emap(g.pos_embed);
  for (int i = 0; i < n_items; ++i) {
    gpos.topRows(T) += ws.dh.middleRows(static_cast<Eigen::Index>(i) * T, T);
  }
}

template <class S>
RowMat<S> stack_tokens(const promptgen::TokenSequence& tokens) {
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.tokens.rows());
  const Eigen::Index d = static_cast<Eigen::Index>(tokens.tokens.cols());
  RowMat<S> input(T, d);
  for (Eigen::Index r = 0; r < T; ++r)
    for (Eigen::Index j = 0; j < d; ++j)
      input(r, j) = static_cast<S>(tokens.tokens(static_cast<std::size_t>(r),
                                                 static_cast<std::size_t>(j)));
  return input;
}

template <class S>
ForwardOutput forward_impl(const ParamsT<S>& params, const promptgen::TokenSequence& tokens,
                           bool capture) {
  validate_config(params.config);
  const std::size_t T = tokens.tokens.rows();
  if (static_cast<int>(T) > params.config.max_positions)
    throw std::invalid_argument("forward: sequence exceeds max_positions");
  if (tokens.tokens.cols() != static_cast<std::size_t>(params.config.token_dim))
    throw std::invalid_argument("forward: token dimension mismatch");
  if (!tokens.tokens.all_finite())
    throw std::invalid_argument("forward: non-finite token");

  const RowMat<S> input = stack_tokens<S>(tokens);
  Workspace<S> ws;
  forward_stacked(params, input, 1, static_cast<int>(T), ws);

  ForwardOutput out;
  out.predictions.reserve(tokens.x_positions.size());
  for (std::size_t pos : tokens.x_positions) {
    out.predictions.push_back(static_cast<double>(ws.preds(static_cast<Eigen::Index>(pos))));
  }
  if (capture) {
    const std::size_t m = static_cast<std::size_t>(params.config.hidden);
    out.residuals = linalg::Matrix(tokens.x_positions.size(), m);
    for (std::size_t r = 0; r < tokens.x_positions.size(); ++r) {
      const auto row = ws.hf.row(static_cast<Eigen::Index>(tokens.x_positions[r]));
      for (std::size_t j = 0; j < m; ++j)
        out.residuals(r, j) = static_cast<double>(row(static_cast<Eigen::Index>(j)));
    }
  }
  return out;
}

template <class S>
void fill_normal(Tensor<S>& t, double std_dev, Rng& rng) {
  for (auto& x : t.v) x = static_cast<S>(std_dev * rng.normal());
}

template <class S, class T2>
void convert_params(const ParamsT<S>& src, ParamsT<T2>& dst) {
  dst = zero_params<T2>(src.config);
  std::vector<const Tensor<S>*> from;
  src.for_each_tensor([&](const std::string&, const Tensor<S>& t) { from.push_back(&t); });
  std::size_t idx = 0;
  dst.for_each_tensor([&](const std::string&, Tensor<T2>& t) {
    const Tensor<S>& s = *from[idx++];
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] = static_cast<T2>(s.v[i]);
  });
}

}  // namespace

template <class S>
ParamsT<S> zero_params(const ModelConfig& config) {
  validate_config(config);
  const std::size_t m = static_cast<std::size_t>(config.hidden);
  const std::size_t d = static_cast<std::size_t>(config.token_dim);
  ParamsT<S> p;
  p.config = config;
  p.embed_w = Tensor<S>(d, m);
  p.embed_b = Tensor<S>(1, m);
  p.pos_embed = Tensor<S>(static_cast<std::size_t>(config.max_positions), m);
  p.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& l : p.layers) {
    l.ln1_g = Tensor<S>(1, m);
    l.ln1_b = Tensor<S>(1, m);
    l.attn_qkv_w = Tensor<S>(m, 3 * m);
    l.attn_qkv_b = Tensor<S>(1, 3 * m);
    l.attn_proj_w = Tensor<S>(m, m);
    l.attn_proj_b = Tensor<S>(1, m);
    l.ln2_g = Tensor<S>(1, m);
    l.ln2_b = Tensor<S>(1, m);
    l.mlp_fc_w = Tensor<S>(m, 4 * m);
    l.mlp_fc_b = Tensor<S>(1, 4 * m);
    l.mlp_proj_w = Tensor<S>(4 * m, m);
    l.mlp_proj_b = Tensor<S>(1, m);
  }
  p.lnf_g = Tensor<S>(1, m);
  p.lnf_b = Tensor<S>(1, m);
  p.readout_w = Tensor<S>(m, 1);
  p.readout_b = Tensor<S>(1, 1);
  return p;
}

template ParamsT<float> zero_params<float>(const ModelConfig&);
template ParamsT<double> zero_params<double>(const ModelConfig&);

ModelConfig paper_model_config() {
  ModelConfig c;
  c.layers = 12;
  c.heads = 8;
  c.hidden = 256;
  c.token_dim = 20;
  c.max_positions = 81;
  return c;
}

ModelConfig desk_model_config() {
  ModelConfig c;
  c.layers = 4;
  c.heads = 4;
  c.hidden = 64;
  c.token_dim = 8;
  c.max_positions = 33;
  return c;
}

TrainConfig paper_train_config() {
  TrainConfig t;
  t.steps = 500000;
  t.curriculum = CurriculumConfig{15, 11, 2000, -1, 2};
  return t;
}

TrainConfig desk_train_config() {
  TrainConfig t;
  t.steps = 50000;
  t.curriculum = CurriculumConfig{6, 5, 2000, -1, 2};
  return t;
}

std::pair<int, int> curriculum_state(long step, const CurriculumConfig& cur, int d, int k) {
  if (step < 0) throw std::invalid_argument("curriculum_state: negative step");
  if (cur.k_start_init <= 0) return {0, k};
  if (cur.period < 1) throw std::invalid_argument("curriculum_state: period must be >= 1");
  const long n = step / cur.period;
  long d_start = cur.d_start_init + static_cast<long>(cur.d_step) * n;
  d_start = std::clamp(d_start, 0L, static_cast<long>(d - 1));
  long k_start = cur.k_start_init + static_cast<long>(cur.k_step) * n;
  k_start = std::clamp(k_start, 1L, static_cast<long>(k));
  return {static_cast<int>(d_start), static_cast<int>(k_start)};
}

Parameters init_parameters(const ModelConfig& config) {
  Parameters p = zero_params<float>(config);
  Rng rng(config.seed);
  const double base_std = 0.02;
  const double proj_std = base_std / std::sqrt(2.0 * config.layers);
  fill_normal(p.embed_w, base_std, rng);
  fill_normal(p.pos_embed, base_std, rng);
  for (auto& l : p.layers) {
    std::fill(l.ln1_g.v.begin(), l.ln1_g.v.end(), 1.0f);
    fill_normal(l.attn_qkv_w, base_std, rng);
    fill_normal(l.attn_proj_w, proj_std, rng);
    std::fill(l.ln2_g.v.begin(), l.ln2_g.v.end(), 1.0f);
    fill_normal(l.mlp_fc_w, base_std, rng);
    fill_normal(l.mlp_proj_w, proj_std, rng);
  }
  std::fill(p.lnf_g.v.begin(), p.lnf_g.v.end(), 1.0f);
  fill_normal(p.readout_w, base_std, rng);
  return p;
}

ParamsT<double> to_double(const Parameters& params) {
  ParamsT<double> out;
  convert_params(params, out);
  return out;
}

linalg::Vector readout_direction(const Parameters& params) {
  linalg::Vector f(params.readout_w.v.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = params.readout_w.v[i];
  return f;
}

ForwardOutput forward(const Parameters& params, const promptgen::TokenSequence& tokens,
                      bool capture) {
  return forward_impl(params, tokens, capture);
}

ForwardOutput forward(const ParamsT<double>& params, const promptgen::TokenSequence& tokens,
                      bool capture) {
  return forward_impl(params, tokens, capture);
}

double loss(const ForwardOutput& output, const promptgen::Prompt& prompt,
            bool include_query) {
  const std::size_t n = prompt.k() + 1;
  if (output.predictions.size() != n)
    throw std::invalid_argument("loss: prediction/prompt length mismatch");
  const std::size_t count = include_query ? n : n - 1;
  if (count == 0) throw std::invalid_argument("loss: nothing to score");
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double e = output.predictions[i] - prompt.ys[i];
    acc += e * e;
  }
  return acc / static_cast<double>(count);
}

double loss_and_gradients(const ParamsT<double>& params,
                          const promptgen::TokenSequence& tokens,
                          const promptgen::Prompt& prompt, bool include_query,
                          ParamsT<double>& grads) {
  validate_config(params.config);
  const int T = static_cast<int>(tokens.tokens.rows());
  const RowMat<double> input = stack_tokens<double>(tokens);
  Workspace<double> ws;
  forward_stacked(params, input, 1, T, ws);

  const std::size_t n = tokens.x_positions.size();
  const std::size_t count = include_query ? n : n - 1;
  ColVec<double> dpreds = ColVec<double>::Zero(T);
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto pos = static_cast<Eigen::Index>(tokens.x_positions[i]);
    const double e = ws.preds(pos) - prompt.ys[i];
    acc += e * e;
    dpreds(pos) = 2.0 * e / static_cast<double>(count);
  }
  grads = zero_params<double>(params.config);
  backward_stacked(params, input, 1, T, ws, dpreds, grads);
  return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct StepBatch {
  RowMat<float> input;               // (B * T) x d
  std::vector<double> targets;       // B * n_x labels, item-major
  int n_items = 0;
  int T = 0;
  int n_x = 0;  // x positions per item (k_start + 1)
};

StepBatch assemble_batch(const std::vector<promptgen::Prompt>& prompts) {
  StepBatch b;
  b.n_items = static_cast<int>(prompts.size());
  const std::size_t k = prompts.front().k();
  const std::size_t d = prompts.front().d();
  b.n_x = static_cast<int>(k + 1);
  b.T = static_cast<int>(2 * k + 1);
  b.input.resize(static_cast<Eigen::Index>(b.n_items) * b.T, static_cast<Eigen::Index>(d));
  b.targets.resize(static_cast<std::size_t>(b.n_items) * (k + 1));
  for (int i = 0; i < b.n_items; ++i) {
    const promptgen::TokenSequence seq = promptgen::tokenize(prompts[static_cast<std::size_t>(i)]);
    for (int t = 0; t < b.T; ++t)
      for (std::size_t j = 0; j < d; ++j)
        b.input(static_cast<Eigen::Index>(i) * b.T + t, static_cast<Eigen::Index>(j)) =
            static_cast<float>(seq.tokens(static_cast<std::size_t>(t), j));
    for (std::size_t x = 0; x <= k; ++x)
      b.targets[static_cast<std::size_t>(i) * (k + 1) + x] =
          prompts[static_cast<std::size_t>(i)].ys[x];
  }
  return b;
}

void accumulate(Parameters& into, const Parameters& from) {
  std::vector<const Tensor<float>*> src;
  from.for_each_tensor([&](const std::string&, const Tensor<float>& t) { src.push_back(&t); });
  std::size_t idx = 0;
  into.for_each_tensor([&](const std::string&, Tensor<float>& t) {
    const auto& s = *src[idx++];
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += s.v[i];
  });
}

void zero_tensors(Parameters& p) {
  p.for_each_tensor([](const std::string&, Tensor<float>& t) {
    std::fill(t.v.begin(), t.v.end(), 0.0f);
  });
}

double global_grad_norm(const Parameters& g) {
  double acc = 0.0;
  g.for_each_tensor([&](const std::string&, const Tensor<float>& t) {
    for (float x : t.v) acc += static_cast<double>(x) * static_cast<double>(x);
  });
  return std::sqrt(acc);
}

void scale_grads(Parameters& g, float s) {
  g.for_each_tensor([&](const std::string&, Tensor<float>& t) {
    for (float& x : t.v) x *= s;
  });
}

void adamw_update(Parameters& p, const Parameters& g, AdamState& st, double lr, double wd) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.t));
  std::vector<Tensor<float>*> ms, vs;
  std::vector<const Tensor<float>*> gs;
  st.m.for_each_tensor([&](const std::string&, Tensor<float>& t) { ms.push_back(&t); });
  st.v.for_each_tensor([&](const std::string&, Tensor<float>& t) { vs.push_back(&t); });
  g.for_each_tensor([&](const std::string&, const Tensor<float>& t) { gs.push_back(&t); });
  std::size_t idx = 0;
  p.for_each_tensor([&](const std::string&, Tensor<float>& t) {
    auto& m = ms[idx]->v;
    auto& v = vs[idx]->v;
    const auto& gr = gs[idx]->v;
    ++idx;
    for (std::size_t i = 0; i < t.v.size(); ++i) {
      const float gi = gr[i];
      m[i] = static_cast<float>(kAdamBeta1) * m[i] + static_cast<float>(1.0 - kAdamBeta1) * gi;
      v[i] = static_cast<float>(kAdamBeta2) * v[i] +
             static_cast<float>(1.0 - kAdamBeta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double upd = lr * (mhat / (std::sqrt(vhat) + kAdamEps));
      if (wd > 0.0) upd += lr * wd * t.v[i];
      t.v[i] = static_cast<float>(t.v[i] - upd);
    }
  });
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const TrainDataSpec& data, const std::string& checkpoint_path,
                  const std::string& resume_path) {
  validate_config(model_config);
  if (train_config.batch_size < 1 || train_config.steps < 0)
    throw std::invalid_argument("train: bad batch size or step count");
  if (data.dist.d != static_cast<std::size_t>(model_config.token_dim))
    throw std::invalid_argument("train: distribution dimension != token_dim");
  if (2 * data.dist.k + 1 > static_cast<std::size_t>(model_config.max_positions))
    throw std::invalid_argument("train: context exceeds max_positions");

  Parameters params;
  AdamState adam;
  long start_step = 0;
  std::uint64_t data_seed = train_config.data_seed;
  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    if (!ck.adam.has_value())
      throw std::runtime_error("train: resume checkpoint has no optimizer state");
    params = std::move(ck.params);
    adam = std::move(*ck.adam);
    start_step = ck.step;
    data_seed = ck.data_seed;
  } else {
    params = init_parameters(model_config);
    adam.m = zero_params<float>(model_config);
    adam.v = zero_params<float>(model_config);
    adam.t = 0;
  }

  const int B = train_config.batch_size;
  const int n_chunks = (B + kChunkItems - 1) / kChunkItems;
  std::vector<Parameters> chunk_grads(static_cast<std::size_t>(n_chunks));
  for (auto& cg : chunk_grads) cg = zero_params<float>(model_config);
  Parameters grads = zero_params<float>(model_config);

  int n_threads = 1;
#ifdef ICL_HAVE_OPENMP
  n_threads = std::min(omp_get_max_threads(), n_chunks);
#endif
  std::vector<Workspace<float>> workspaces(static_cast<std::size_t>(std::max(1, n_threads)));

  TrainResult result;
  result.step_losses.reserve(static_cast<std::size_t>(train_config.steps - start_step));
  result.final_token_losses.reserve(static_cast<std::size_t>(train_config.steps - start_step));

  const int d = model_config.token_dim;
  const int k_full = static_cast<int>(data.dist.k);

  for (long step = start_step; step < train_config.steps; ++step) {
    const auto [d_start, k_start] =
        curriculum_state(step, train_config.curriculum, d, k_full);
    const std::uint64_t step_key = derive_seed(data_seed, static_cast<std::uint64_t>(step));

    promptgen::PromptDistribution dist = data.dist;
    if (!data.scale_choices.empty()) {
      Rng pick(derive_seed(step_key, 0));
      dist.scale = data.scale_choices[pick.below(data.scale_choices.size())];
    }

    std::vector<promptgen::Prompt> prompts(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      prompts[static_cast<std::size_t>(i)] = promptgen::sample_curriculum_prompt(
          dist, static_cast<std::size_t>(d_start), static_cast<std::size_t>(k_start),
          derive_seed(step_key, 1 + static_cast<std::uint64_t>(i)));
    }
    const StepBatch batch = assemble_batch(prompts);
    const int n_scored = train_config.include_query_loss ? batch.n_x : batch.n_x - 1;

    std::vector<double> chunk_loss(static_cast<std::size_t>(n_chunks), 0.0);
    std::vector<double> chunk_final(static_cast<std::size_t>(n_chunks), 0.0);

#ifdef ICL_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(n_threads)
#endif
    for (int ci = 0; ci < n_chunks; ++ci) {
      const int i0 = ci * kChunkItems;
      const int i1 = std::min(B, i0 + kChunkItems);
      const int n_items = i1 - i0;
      int wi = 0;
#ifdef ICL_HAVE_OPENMP
      wi = omp_get_thread_num();
#endif
      Workspace<float>& ws = workspaces[static_cast<std::size_t>(wi)];
      const auto rows0 = static_cast<Eigen::Index>(i0) * batch.T;
      const RowMat<float> input =
          batch.input.middleRows(rows0, static_cast<Eigen::Index>(n_items) * batch.T);
      forward_stacked(params, input, n_items, batch.T, ws);

      ColVec<float> dpreds = ColVec<float>::Zero(input.rows());
      double loss_acc = 0.0;
      double final_acc = 0.0;
      for (int it = 0; it < n_items; ++it) {
        for (int x = 0; x < batch.n_x; ++x) {
          const Eigen::Index pos = static_cast<Eigen::Index>(it) * batch.T + 2 * x;
          const double target =
              batch.targets[static_cast<std::size_t>(i0 + it) * batch.n_x +
                            static_cast<std::size_t>(x)];
          const double e = static_cast<double>(ws.preds(pos)) - target;
          if (x == batch.n_x - 1) final_acc += e * e;
          if (x < n_scored) {
            loss_acc += e * e;
            dpreds(pos) = static_cast<float>(2.0 * e / (n_scored * B));
          }
        }
      }
      zero_tensors(chunk_grads[static_cast<std::size_t>(ci)]);
      backward_stacked(params, input, n_items, batch.T, ws, dpreds,
                       chunk_grads[static_cast<std::size_t>(ci)]);
      chunk_loss[static_cast<std::size_t>(ci)] = loss_acc / n_scored;
      chunk_final[static_cast<std::size_t>(ci)] = final_acc;
    }

    double loss_total = 0.0, final_total = 0.0;
    for (int ci = 0; ci < n_chunks; ++ci) {
      loss_total += chunk_loss[static_cast<std::size_t>(ci)];
      final_total += chunk_final[static_cast<std::size_t>(ci)];
    }
    loss_total /= B;
    final_total /= B;
    if (!std::isfinite(loss_total)) throw TrainingDiverged(step);
    result.step_losses.push_back(loss_total);
    result.final_token_losses.push_back(final_total);

    zero_tensors(grads);
    for (int ci = 0; ci < n_chunks; ++ci)
      accumulate(grads, chunk_grads[static_cast<std::size_t>(ci)]);

    if (train_config.clip_norm > 0.0) {
      const double gn = global_grad_norm(grads);
      if (gn > train_config.clip_norm)
        scale_grads(grads, static_cast<float>(train_config.clip_norm / gn));
    }
    adamw_update(params, grads, adam, train_config.learning_rate,
                 train_config.weight_decay);

    if (!checkpoint_path.empty() && train_config.checkpoint_every > 0 &&
        (step + 1) % train_config.checkpoint_every == 0) {
      save_checkpoint(checkpoint_path, params, step + 1, data_seed, &adam);
    }
  }

  if (!checkpoint_path.empty()) {
    save_checkpoint(checkpoint_path, params, train_config.steps, data_seed, &adam);
  }
  result.params = std::move(params);
  return result;
}

linalg::Vector implicit_weight(const Parameters& params,
                               const promptgen::Prompt& context_prompt,
                               const linalg::Matrix& queries, bool* rank_deficient) {
  const std::size_t k = context_prompt.k();
  const std::size_t d = context_prompt.d();
  if (k <= d)
    throw std::invalid_argument("implicit_weight: context needs more than d examples");
  if (queries.rows() < d || queries.cols() != d)
    throw std::invalid_argument("implicit_weight: need at least d query rows of width d");

  const ParamsT<double> pd = to_double(params);
  promptgen::TokenSequence seq = promptgen::tokenize(context_prompt);
  const std::size_t query_pos = 2 * k;

  linalg::Vector preds(queries.rows());
  for (std::size_t qi = 0; qi < queries.rows(); ++qi) {
    seq.tokens.set_row(query_pos, queries.row(qi));
    const ForwardOutput out = forward(pd, seq, false);
    preds[qi] = out.predictions.back();
  }

  if (rank_deficient != nullptr) {
    const linalg::SvdResult s = linalg::svd(queries);
    const double tol = static_cast<double>(std::max(queries.rows(), queries.cols())) *
                       s.sigma.front() * std::numeric_limits<double>::epsilon();
    std::size_t rank = 0;
    for (double sv : s.sigma)
      if (sv > tol) ++rank;
    *rank_deficient = rank < d;
  }
  return linalg::lstsq_min_norm(queries, preds);
}

}  // namespace icl::transformer
