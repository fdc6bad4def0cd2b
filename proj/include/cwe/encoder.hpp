#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cwe/batch_builder.hpp"
#include "cwe/kernels.hpp"
#include "cwe/rng.hpp"

namespace cwe::model {

struct EncoderConfig {
  std::int32_t vocab_size = 0;
  std::int32_t max_positions = 512;
  std::int32_t hidden_dim = 0;
  std::int32_t num_layers = 0;
  std::int32_t num_heads = 0;
  std::int32_t ff_dim = 0;
  double dropout_rate = 0.0;
  double layer_norm_epsilon = 1e-12;
  // The output projection reuses the token embedding by default; tests use
  // the untied form to isolate the lookup path.
  bool tie_output = true;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

enum class ParamKind { kWeight, kBias, kLayerNorm };

template <class T>
struct TensorRef {
  std::string name;
  std::vector<T>* data;
  std::vector<std::int64_t> dims;
  ParamKind kind;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

template <class T>
struct LayerParams {
  std::vector<T> wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<T> ln1_gamma, ln1_beta;
  std::vector<T> w1, b1;  // [ff, hidden]
  std::vector<T> w2, b2;  // [hidden, ff]
  std::vector<T> ln2_gamma, ln2_beta;
};

template <class T>
struct Parameters {
  EncoderConfig config;
  std::vector<T> token_embedding;     // [vocab, hidden]
  std::vector<T> position_embedding;  // [max_positions, hidden]
  std::vector<T> emb_ln_gamma, emb_ln_beta;
  std::vector<LayerParams<T>> layers;
  std::vector<T> mlm_transform_w, mlm_transform_b;  // [hidden, hidden]
  std::vector<T> mlm_ln_gamma, mlm_ln_beta;
  std::vector<T> output_projection;  // [vocab, hidden]; empty when tied
  std::vector<T> output_bias;        // [vocab]

  // Enumerates every tensor in a fixed order; the checkpoint format, the
  // optimizer state and init all follow this order.
  std::vector<TensorRef<T>> tensors();

  void allocate();  // sizes everything for `config`, zero-filled
};

// Weights from truncated normal(0, 0.02) clipped at +-2 sigma; biases and
// layer-norm shifts 0; layer-norm scales 1.
template <class T>
Parameters<T> init_params(const EncoderConfig& config, std::uint64_t seed);

// View over a rectangular id/mask batch (row-major rows x row_length).
struct BatchView {
  const std::int32_t* input_ids = nullptr;
  const std::int32_t* attention_mask = nullptr;
  std::int32_t rows = 0;
  std::int32_t row_length = 0;

  std::int64_t size() const {
    return static_cast<std::int64_t>(rows) * row_length;
  }
};

BatchView view_of(const batch::MaskedBatch& b);

// Everything the backward pass (and embedding extraction) needs from a
// forward pass.
template <class T>
struct ForwardCache {
  std::int32_t rows = 0;
  std::int32_t row_length = 0;
  // layer_outputs[0] is the embedding-layernorm output; layer_outputs[l] for
  // l >= 1 is the output of transformer layer l. Each is [rows*row_length,
  // hidden].
  std::vector<std::vector<T>> layer_outputs;

  // Internals cached for backward.
  std::vector<T> emb_sum;                 // token+position before LN
  std::vector<T> emb_mu, emb_rstd;        // embedding LN stats
  struct LayerCache {
    std::vector<T> q, k, v;               // projections
    std::vector<T> probs;                 // [rows, heads, L, L]
    std::vector<T> ctx;                   // attention context (pre-Wo)
    std::vector<T> res1;                  // input + attn output (pre-LN1)
    std::vector<T> ln1_mu, ln1_rstd;
    std::vector<T> ff_pre;                // W1 x + b1 (pre-GELU)
    std::vector<T> ff_act;                // GELU(ff_pre)
    std::vector<T> res2;                  // h1 + ffn output (pre-LN2)
    std::vector<T> ln2_mu, ln2_rstd;
    std::vector<T> attn_drop, ffn_drop;   // dropout multipliers (may be empty)
  };
  std::vector<LayerCache> layer_cache;
  std::vector<T> emb_drop;

  const std::vector<T>& final_hidden() const { return layer_outputs.back(); }
};

// Runs the encoder stack. Dropout is applied only when `dropout_rng` is
// non-null and config.dropout_rate > 0 (training mode).
template <class T>
void forward(const Parameters<T>& params, const BatchView& batch,
             ForwardCache<T>& cache, DetRng* dropout_rng = nullptr);

// Mean cross-entropy over labeled positions. Throws std::invalid_argument
// when the batch has no labeled position.
template <class T>
double mlm_loss(const Parameters<T>& params, const batch::MaskedBatch& batch,
                DetRng* dropout_rng = nullptr);

// Loss plus exact analytic gradients for every parameter tensor. `grads`
// must be allocated for the same config; it is overwritten. Throws
// std::runtime_error naming the tensor if a gradient is non-finite.
template <class T>
double mlm_loss_and_grad(const Parameters<T>& params,
                         const batch::MaskedBatch& batch,
                         Parameters<T>& grads, DetRng* dropout_rng = nullptr);

// --- implementation -------------------------------------------------------

template <class T>
void Parameters<T>::allocate() {
  config.validate();
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto h = static_cast<std::size_t>(config.hidden_dim);
  const auto p = static_cast<std::size_t>(config.max_positions);
  const auto f = static_cast<std::size_t>(config.ff_dim);
  token_embedding.assign(v * h, T(0));
  position_embedding.assign(p * h, T(0));
  emb_ln_gamma.assign(h, T(0));
  emb_ln_beta.assign(h, T(0));
  layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& l : layers) {
    l.wq.assign(h * h, T(0));
    l.bq.assign(h, T(0));
    l.wk.assign(h * h, T(0));
    l.bk.assign(h, T(0));
    l.wv.assign(h * h, T(0));
    l.bv.assign(h, T(0));
    l.wo.assign(h * h, T(0));
    l.bo.assign(h, T(0));
    l.ln1_gamma.assign(h, T(0));
    l.ln1_beta.assign(h, T(0));
    l.w1.assign(f * h, T(0));
    l.b1.assign(f, T(0));
    l.w2.assign(h * f, T(0));
    l.b2.assign(h, T(0));
    l.ln2_gamma.assign(h, T(0));
    l.ln2_beta.assign(h, T(0));
  }
  mlm_transform_w.assign(h * h, T(0));
  mlm_transform_b.assign(h, T(0));
  mlm_ln_gamma.assign(h, T(0));
  mlm_ln_beta.assign(h, T(0));
  if (!config.tie_output) output_projection.assign(v * h, T(0));
  output_bias.assign(v, T(0));
}

template <class T>
std::vector<TensorRef<T>> Parameters<T>::tensors() {
  const std::int64_t v = config.vocab_size;
  const std::int64_t h = config.hidden_dim;
  const std::int64_t p = config.max_positions;
  const std::int64_t f = config.ff_dim;
  std::vector<TensorRef<T>> out;
  auto add = [&](const std::string& name, std::vector<T>& data,
                 std::vector<std::int64_t> dims, ParamKind kind) {
    out.push_back

        (TensorRef<T>{name, &data, std::move(dims), kind});
  };
  add("token_embedding", token_embedding, {v, h}, ParamKind::kWeight);
  add("position_embedding", position_embedding, {p, h}, ParamKind::kWeight);
  add("emb_ln_gamma", emb_ln_gamma, {h}, ParamKind::kLayerNorm);
  add("emb_ln_beta", emb_ln_beta, {h}, ParamKind::kLayerNorm);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    auto& l = layers[i];
    add(prefix + "wq", l.wq, {h, h}, ParamKind::kWeight);
    add(prefix + "bq", l.bq, {h}, ParamKind::kBias);
    add(prefix + "wk", l.wk, {h, h}, ParamKind::kWeight);
    add(prefix + "bk", l.bk, {h}, ParamKind::kBias);
    add(prefix + "wv", l.wv, {h, h}, ParamKind::kWeight);
    add(prefix + "bv", l.bv, {h}, ParamKind::kBias);
    add(prefix + "wo", l.wo, {h, h}, ParamKind::kWeight);
    add(prefix + "bo", l.bo, {h}, ParamKind::kBias);
    add(prefix + "ln1_gamma", l.ln1_gamma, {h}, ParamKind::kLayerNorm);
    add(prefix + "ln1_beta", l.ln1_beta, {h}, ParamKind::kLayerNorm);
    add(prefix + "w1", l.w1, {f, h}, ParamKind::kWeight);
    add(prefix + "b1", l.b1, {f}, ParamKind::kBias);
    add(prefix + "w2", l.w2, {h, f}, ParamKind::kWeight);
    add(prefix + "b2", l.b2, {h}, ParamKind::kBias);
    add(prefix + "ln2_gamma", l.ln2_gamma, {h}, ParamKind::kLayerNorm);
    add(prefix + "ln2_beta", l.ln2_beta, {h}, ParamKind::kLayerNorm);
  }
  add("mlm_transform_w", mlm_transform_w, {h, h}, ParamKind::kWeight);
  add("mlm_transform_b", mlm_transform_b, {h}, ParamKind::kBias);
  add("mlm_ln_gamma", mlm_ln_gamma, {h}, ParamKind::kLayerNorm);
  add("mlm_ln_beta", mlm_ln_beta, {h}, ParamKind::kLayerNorm);
  if (!config.tie_output) {
    add("output_projection", output_projection, {v, h}, ParamKind::kWeight);
  }
  add("output_bias", output_bias, {v}, ParamKind::kBias);
  return out;
}

template <class T>
Parameters<T> init_params(const EncoderConfig& config, std::uint64_t seed) {
  Parameters<T> params;
  params.config = config;
  params.allocate();
  DetRng rng(seed);
  for (auto& ref : params.tensors()) {
    switch (ref.kind) {
      case ParamKind::kWeight:
        for (auto& x : *ref.data) {
          x = static_cast<T>(rng.next_trunc_normal(0.02));
        }
        break;
      case ParamKind::kBias:
        break;  // zeros
      case ParamKind::kLayerNorm:
        if (ref.name.find("gamma") != std::string::npos) {
          for (auto& x : *ref.data) x = T(1);
        }
        break;
    }
  }
  return params;
}

namespace detail {

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf =
      std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
  return cdf + x * pdf;
}

// y = x W^T + b, X:[n,in] W:[out,in] y:[n,out]
template <class T>
void linear_forward(const T* x, const T* w, const T* b, T* y, std::size_t n,
                    std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * in;
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      yr[o] = kernels::dot(xr, w + o * in, in) + b[o];
    }
  }
}

template <class T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     std::size_t n, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy + r * out;
    const T* xr = x + r * in;
    T* dxr = dx + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dyr[o];
      if (g == T(0)) continue;
      kernels::axpy(g, w + o * in, dxr, in);
      kernels::axpy(g, xr, dw + o * in, in);
      db[o] += g;
    }
  }
}

// Row-wise layernorm; stores per-row mu/rstd for backward.
template <class T>
void layernorm_forward(const T* x, const T* gamma, const T* beta, T* y,
                       T* mu_out, T* rstd_out, std::size_t n, std::size_t h,
                       double eps) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * h;
    const T mu = kernels::reduce_sum(xr, h) / static_cast<T>(h);
    const T var = kernels::sq_diff_sum(xr, mu, h) / static_cast<T>(h);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    kernels::ln_affine(xr, mu, rstd, gamma, beta, y + r * h, h);
    mu_out[r] = mu;
    rstd_out[r] = rstd;
  }
}

template <class T>
void layernorm_backward(const T* x, const T* gamma, const T* mu,
                        const T* rstd, const T* dy, T* dx, T* dgamma,
                        T* dbeta, std::size_t n, std::size_t h) {
  std::vector<T> dxhat(h);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * h;
    const T* dyr = dy + r * h;
    T* dxr = dx + r * h;
    T m1 = 0;
    T m2 = 0;
    for (std::size_t i = 0; i < h; ++i) {
      const T xhat = (xr[i] - mu[r]) * rstd[r];
      dgamma[i] += dyr[i] * xhat;
      dbeta[i] += dyr[i];
      dxhat[i] = dyr[i] * gamma[i];
      m1 += dxhat[i];
      m2 += dxhat[i] * xhat;
    }
    m1 /= static_cast<T>(h);
    m2 /= static_cast<T>(h);
    for (std::size_t i = 0; i < h; ++i) {
      const T xhat = (xr[i] - mu[r]) * rstd[r];
      dxr[i] += rstd[r] * (dxhat[i] - m1 - xhat * m2);
    }
  }
}

template <class T>
void softmax_row(T* x, std::size_t n) {
  const T m = kernels::reduce_max(x, n);
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - m);
    sum += x[i];
  }
  kernels::scale(x, T(1) / sum, n);
}

}  // namespace detail

template <class T>
void forward(const Parameters<T>& params, const BatchView& batch,
             ForwardCache<T>& cache, DetRng* dropout_rng) {
  const EncoderConfig& cfg = params.config;
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  const auto f = static_cast<std::size_t>(cfg.ff_dim);
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t dh = h / heads;
  const auto rows = static_cast<std::size_t>(batch.rows);
  const auto len = static_cast<std::size_t>(batch.row_length);
  const std::size_t n = rows * len;
  if (batch.row_length > cfg.max_positions) {
    throw std::invalid_argument("row_length exceeds max_positions");
  }

  const bool use_dropout =
      dropout_rng != nullptr && cfg.dropout_rate > 0.0;
  const T keep_scale =
      use_dropout ? T(1.0 / (1.0 - cfg.dropout_rate)) : T(1);
  auto fill_dropout = [&](std::vector<T>& mask, std::size_t count) {
    if (!use_dropout) {
      mask.clear();
      return;
    }
    mask.resize(count);
    for (auto& m : mask) {
      m = dropout_rng->next_double() < cfg.dropout_rate ? T(0) : keep_scale;
    }
  };
  auto apply_dropout = [&](std::vector<T>& x, const std::vector<T>& mask) {
    if (mask.empty()) return;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
  };

  cache.rows = batch.rows;
  cache.row_length = batch.row_length;
  cache.layer_outputs.assign(static_cast<std::size_t>(cfg.num_layers) + 1,
                             std::vector<T>());
  cache.layer_cache.assign(static_cast<std::size_t>(cfg.num_layers),
                           typename ForwardCache<T>::LayerCache{});

  // Embeddings.
  cache.emb_sum.assign(n * h, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t id = batch.input_ids[i];
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::invalid_argument(
          "input id " + std::to_string(id) + " out of range at row " +
          std::to_string(i / len) + " position " + std::to_string(i % len));
    }
    const std::int32_t m = batch.attention_mask[i];
    if (m != 0 && m != 1) {
      throw std::invalid_argument("attention mask values must be 0 or 1");
    }
    const std::size_t pos = i % len;
    T* dst = cache.emb_sum.data() + i * h;
    const T* tok = params.token_embedding.data() +
                   static_cast<std::size_t>(id) * h;
    const T* ps = params.position_embedding.data() + pos * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] = tok[j] + ps[j];
  }
  cache.emb_mu.assign(n, T(0));
  cache.emb_rstd.assign(n, T(0));
  cache.layer_outputs[0].assign(n * h, T(0));
  detail::layernorm_forward(cache.emb_sum.data(), params.emb_ln_gamma.data(),
                            params.emb_ln_beta.data(),
                            cache.layer_outputs[0].data(),
                            cache.emb_mu.data(), cache.emb_rstd.data(), n, h,
                            cfg.layer_norm_epsilon);
  fill_dropout(cache.emb_drop, n * h);
  apply_dropout(cache.layer_outputs[0], cache.emb_drop);

  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.num_layers); ++l) {
    const LayerParams<T>& lp = params.layers[l];
    auto& lc = cache.layer_cache[l];
    const std::vector<T>& x = cache.layer_outputs[l];

    lc.q.assign(n * h, T(0));
    lc.k.assign(n * h, T(0));
    lc.v.assign(n * h, T(0));
    detail::linear_forward(x.data(), lp.wq.data(), lp.bq.data(), lc.q.data(),
                           n, h, h);
    detail::linear_forward(x.data(), lp.wk.data(), lp.bk.data(), lc.k.data(),
                           n, h, h);
    detail::linear_forward(x.data(), lp.wv.data(), lp.bv.data(), lc.v.data(),
                           n, h, h);

    lc.probs.assign(rows * heads * len * len, T(0));
    lc.ctx.assign(n * h, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const std::int32_t* rm = batch.attention_mask + r * len;
      for (std::size_t a = 0; a < heads; ++a) {
        T* prow_base = lc.probs.data() + ((r * heads) + a) * len * len;
        for (std::size_t i = 0; i < len; ++i) {
          const T* qi = lc.q.data() + (r * len + i) * h + a * dh;
          T* scores = prow_base + i * len;
          for (std::size_t j = 0; j < len; ++j) {
            const T* kj = lc.k.data() + (r * len + j) * h + a * dh;
            T s = kernels::dot(qi, kj, dh) * inv_sqrt_dh;
            if (rm[j] == 0) s += T(-1e9);
            scores[j] = s;
          }
          detail::softmax_row(scores, len);
          T* ctx = lc.ctx.data() + (r * len + i) * h + a * dh;
          for (std::size_t j = 0; j < len; ++j) {
            const T p = scores[j];
            if (p == T(0)) continue;
            kernels::axpy(p, lc.v.data() + (r * len + j) * h + a * dh, ctx,
                          dh);
          }
        }
      }
    }

    std::vector<T> attn_out(n * h, T(0));
    detail::linear_forward(lc.ctx.data(), lp.wo.data(), lp.bo.data(),
                           attn_out.data(), n, h, h);
    fill_dropout(lc.attn_drop, n * h);
    apply_dropout(attn_out, lc.attn_drop);

    lc.res1.assign(n * h, T(0));
    for (std::size_t i = 0; i < n * h; ++i) {
      lc.res1[i] = x[i] + attn_out[i];
    }
    std::vector<T> h1(n * h, T(0));
    lc.ln1_mu.assign(n, T(0));
    lc.ln1_rstd.assign(n, T(0));
    detail::layernorm_forward(lc.res1.data(), lp.ln1_gamma.data(),
                              lp.ln1_beta.data(), h1.data(), lc.ln1_mu.data(),
                              lc.ln1_rstd.data(), n, h,
                              cfg.layer_norm_epsilon);

    lc.ff_pre.assign(n * f, T(0));
    detail::linear_forward(h1.data(), lp.w1.data(), lp.b1.data(),
                           lc.ff_pre.data(), n, h, f);
    lc.ff_act.assign(n * f, T(0));
    for (std::size_t i = 0; i < n * f; ++i) {
      lc.ff_act[i] = detail::gelu(lc.ff_pre[i]);
    }
    std::vector<T> ffn_out(n * h, T(0));
    detail::linear_forward(lc.ff_act.data(), lp.w2.data(), lp.b2.data(),
                           ffn_out.data(), n, f, h);
    fill_dropout(lc.ffn_drop, n * h);
    apply_dropout(ffn_out, lc.ffn_drop);

    lc.res2.assign(n * h, T(0));
    for (std::size_t i = 0; i < n * h; ++i) {
      lc.res2[i] = h1[i] + ffn_out[i];
    }
    cache.layer_outputs[l + 1].assign(n * h, T(0));
    lc.ln2_mu.assign(n, T(0));
    lc.ln2_rstd.assign(n, T(0));
    detail::layernorm_forward(lc.res2.data(), lp.ln2_gamma.data(),
                              lp.ln2_beta.data(),
                              cache.layer_outputs[l + 1].data(),
                              lc.ln2_mu.data(), lc.ln2_rstd.data(), n, h,
                              cfg.layer_norm_epsilon);
    // h1 is needed in backward; recomputed there from res1 stats.
  }
}

namespace detail {

// MLM head state shared by the loss and gradient paths.
template <class T>
struct HeadCache {
  std::vector<std::int64_t> positions;  // flat indices with labels
  std::vector<std::int32_t> targets;
  std::vector<T> gathered;   // [m, h] final hidden at labeled positions
  std::vector<T> trans_pre;  // W_t x + b_t
  std::vector<T> trans_act;  // gelu
  std::vector<T> normed;     // layernorm output
  std::vector<T> head_mu, head_rstd;
  std::vector<T> probs;      // softmax over vocab, [m, v]
  double loss = 0.0;
};

template <class T>
void run_head(const Parameters<T>& params, const batch::MaskedBatch& mb,
              const ForwardCache<T>& cache, HeadCache<T>& head) {
  const EncoderConfig& cfg = params.config;
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);

  for (std::int64_t i = 0; i < mb.size(); ++i) {
    if (mb.labels[i] != batch::kIgnoreLabel) {
      head.positions.push_back(i);
      head.targets.push_back(mb.labels[i]);
    }
  }
  if (head.positions.empty()) {
    throw std::invalid_argument(
        "batch has no labeled positions; nothing to score");
  }
  const std::size_t m = head.positions.size();

  head.gathered.assign(m * h, T(0));
  const std::vector<T>& fin = cache.final_hidden();
  for (std::size_t i = 0; i < m; ++i) {
    const T* src = fin.data() + head.positions[i] * h;
    std::copy(src, src + h, head.gathered.begin() + i * h);
  }

  head.trans_pre.assign(m * h, T(0));
  linear_forward(head.gathered.data(), params.mlm_transform_w.data(),
                 params.mlm_transform_b.data(), head.trans_pre.data(), m, h,
                 h);
  head.trans_act.assign(m * h, T(0));
  for (std::size_t i = 0; i < m * h; ++i) {
    head.trans_act[i] = gelu(head.trans_pre[i]);
  }
  head.normed.assign(m * h, T(0));
  head.head_mu.assign(m, T(0));
  head.head_rstd.assign(m, T(0));
  layernorm_forward(head.trans_act.data(), params.mlm_ln_gamma.data(),
                    params.mlm_ln_beta.data(), head.normed.data(),
                    head.head_mu.data(), head.head_rstd.data(), m, h,
                    cfg.layer_norm_epsilon);

  const T* decoder = cfg.tie_output ? params.token_embedding.data()
                                    : params.output_projection.data();
  head.probs.assign(m * v, T(0));
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    T* logits = head.probs.data() + i * v;
    const T* ti = head.normed.data() + i * h;
    for (std::size_t w = 0; w < v; ++w) {
      logits[w] = kernels::dot(ti, decoder + w * h, h) + params.output_bias[w];
    }
    const T mx = kernels::reduce_max(logits, v);
    double sum = 0.0;
    for (std::size_t w = 0; w < v; ++w) {
      sum += static_cast<double>(std::exp(logits[w] - mx));
    }
    const double lse = static_cast<double>(mx) + std::log(sum);
    loss_sum += lse - static_cast<double>(
                          logits[static_cast<std::size_t>(head.targets[i])]);
    // Convert logits to probabilities in place for the backward pass.
    for (std::size_t w = 0; w < v; ++w) {
      logits[w] = static_cast<T>(
          std::exp(static_cast<double>(logits[w]) - lse));
    }
  }
  head.loss = loss_sum / static_cast<double>(m);
}

}  // namespace detail

template <class T>
double mlm_loss(const Parameters<T>& params, const batch::MaskedBatch& batch,
                DetRng* dropout_rng) {
  ForwardCache<T> cache;
  forward(params, view_of(batch), cache, dropout_rng);
  detail::HeadCache<T> head;
  detail::run_head(params, batch, cache, head);
  return head.loss;
}

template <class T>
double mlm_loss_and_grad(const Parameters<T>& params,
                         const batch::MaskedBatch& mb, Parameters<T>& grads,
                         DetRng* dropout_rng) {
  const EncoderConfig& cfg = params.config;
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  const auto f = static_cast<std::size_t>(cfg.ff_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t dh = h / heads;

  ForwardCache<T> cache;
  forward(params, view_of(mb), cache, dropout_rng);
  const auto rows = static_cast<std::size_t>(cache.rows);
  const auto len = static_cast<std::size_t>(cache.row_length);
  const std::size_t n = rows * len;

  detail::HeadCache<T> head;
  detail::run_head(params, mb, cache, head);
  const std::size_t m = head.positions.size();

  grads.config = params.config;
  grads.allocate();

  // Cross-entropy backward: dlogits = (probs - onehot) / m.
  std::vector<T>& dlogits = head.probs;  // reuse in place
  const T inv_m = T(1) / static_cast<T>(m);
  for (std::size_t i = 0; i < m; ++i) {
    T* row = dlogits.data() + i * v;
    kernels::scale(row, inv_m, v);
    row[static_cast<std::size_t>(head.targets[i])] -= inv_m;
  }

  // Decoder (tied or untied) backward.
  const T* decoder = cfg.tie_output ? params.token_embedding.data()
                                    : params.output_projection.data();
  T* ddecoder = cfg.tie_output ? grads.token_embedding.data()
                               : grads.output_projection.data();
  std::vector<T> dnormed(m * h, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* dl = dlogits.data() + i * v;
    const T* ti = head.normed.data() + i * h;
    T* dn = dnormed.data() + i * h;
    for (std::size_t w = 0; w < v; ++w) {
      const T g = dl[w];
      if (g == T(0)) continue;
      kernels::axpy(g, decoder + w * h, dn, h);
      kernels::axpy(g, ti, ddecoder + w * h, h);
      grads.output_bias[w] += g;
    }
  }

  // MLM layernorm + GELU + transform backward.
  std::vector<T> dtrans_act(m * h, T(0));
  detail::layernorm_backward(head.trans_act.data(), params.mlm_ln_gamma.data(),
                             head.head_mu.data(), head.head_rstd.data(),
                             dnormed.data(), dtrans_act.data(),
                             grads.mlm_ln_gamma.data(),
                             grads.mlm_ln_beta.data(), m, h);
  for (std::size_t i = 0; i < m * h; ++i) {
    dtrans_act[i] *= detail::gelu_grad(head.trans_pre[i]);
  }
  std::vector<T> dgathered(m * h, T(0));
  detail::linear_backward(head.gathered.data(), params.mlm_transform_w.data(),
                          dtrans_act.data(), dgathered.data(),
                          grads.mlm_transform_w.data(),
                          grads.mlm_transform_b.data(), m, h, h);

  // Scatter into d(final hidden).
  std::vector<T> dhidden(n * h, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    kernels::axpy(T(1), dgathered.data() + i * h,
                  dhidden.data() + head.positions[i] * h, h);
  }

  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  // Transformer layers, in reverse.
  for (std::size_t li = static_cast<std::size_t>(cfg.num_layers); li-- > 0;) {
    const LayerParams<T>& lp = params.layers[li];
    LayerParams<T>& lg = grads.layers[li];
    auto& lc = cache.layer_cache[li];
    const std::vector<T>& x = cache.layer_outputs[li];

    // Recompute h1 = LN1(res1) from cached stats.
    std::vector<T> h1(n * h, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      kernels::ln_affine(lc.res1.data() + r * h, lc.ln1_mu[r], lc.ln1_rstd[r],
                         lp.ln1_gamma.data(), lp.ln1_beta.data(),
                         h1.data() + r * h, h);
    }

    // LN2 backward: dhidden -> dres2.
    std::vector<T> dres2(n * h, T(0));
    detail::layernorm_backward(lc.res2.data(), lp.ln2_gamma.data(),
                               lc.ln2_mu.data(), lc.ln2_rstd.data(),
                               dhidden.data(), dres2.data(),
                               lg.ln2_gamma.data(), lg.ln2_beta.data(), n, h);

    // res2 = h1 + dropout(ffn_out).
    std::vector<T> dffn_out = dres2;
    if (!lc.ffn_drop.empty()) {
      for (std::size_t i = 0; i < n * h; ++i) dffn_out[i] *= lc.ffn_drop[i];
    }
    std::vector<T> dff_act(n * f, T(0));
    detail::linear_backward(lc.ff_act.data(), lp.w2.data(), dffn_out.data(),
                            dff_act.data(), lg.w2.data(), lg.b2.data(), n, f,
                            h);
    for (std::size_t i = 0; i < n * f; ++i) {
      dff_act[i] *= detail::gelu_grad(lc.ff_pre[i]);
    }
    std::vector<T> dh1(n * h, T(0));
    detail::linear_backward(h1.data(), lp.w1.data(), dff_act.data(),
                            dh1.data(), lg.w1.data(), lg.b1.data(), n, h, f);
    // Residual: dres2 also flows into h1.
    for (std::size_t i = 0; i < n * h; ++i) dh1[i] += dres2[i];

    // LN1 backward: dh1 -> dres1.
    std::vector<T> dres1(n * h, T(0));
    detail::layernorm_backward(lc.res1.data(), lp.ln1_gamma.data(),
                               lc.ln1_mu.data(), lc.ln1_rstd.data(),
                               dh1.data(), dres1.data(), lg.ln1_gamma.data(),
                               lg.ln1_beta.data(), n, h);

    // res1 = x + dropout(attn_out).
    std::vector<T> dattn_out = dres1;
    if (!lc.attn_drop.empty()) {
      for (std::size_t i = 0; i < n * h; ++i) dattn_out[i] *= lc.attn_drop[i];
    }
    std::vector<T> dctx(n * h, T(0));
    detail::linear_backward(lc.ctx.data(), lp.wo.data(), dattn_out.data(),
                            dctx.data(), lg.wo.data(), lg.bo.data(), n, h, h);

    // Attention backward.
    std::vector<T> dq(n * h, T(0));
    std::vector<T> dk(n * h, T(0));
    std::vector<T> dv(n * h, T(0));
    std::vector<T> dprobs(len);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t a = 0; a < heads; ++a) {
        const T* prow_base = lc.probs.data() + ((r * heads) + a) * len * len;
        for (std::size_t i = 0; i < len; ++i) {
          const T* probs = prow_base + i * len;
          const T* dctx_i = dctx.data() + (r * len + i) * h + a * dh;
          // dprobs_j = dctx_i . v_j ; dv_j += p_j * dctx_i
          for (std::size_t j = 0; j < len; ++j) {
            const T* vj = lc.v.data() + (r * len + j) * h + a * dh;
            dprobs[j] = kernels::dot(dctx_i, vj, dh);
            if (probs[j] != T(0)) {
              kernels::axpy(probs[j], dctx_i,
                            dv.data() + (r * len + j) * h + a * dh, dh);
            }
          }
          // Softmax backward.
          T inner = 0;
          for (std::size_t j = 0; j < len; ++j) inner += dprobs[j] * probs[j];
          for (std::size_t j = 0; j < len; ++j) {
            const T ds = probs[j] * (dprobs[j] - inner) * inv_sqrt_dh;
            if (ds == T(0)) continue;
            kernels::axpy(ds, lc.k.data() + (r * len + j) * h + a * dh,
                          dq.data() + (r * len + i) * h + a * dh, dh);
            kernels::axpy(ds, lc.q.data() + (r * len + i) * h + a * dh,
                          dk.data() + (r * len + j) * h + a * dh, dh);
          }
        }
      }
    }

    // Projection backward into dx.
    std::vector<T> dx(n * h, T(0));
    detail::linear_backward(x.data(), lp.wq.data(), dq.data(), dx.data(),
                            lg.wq.data(), lg.bq.data(), n, h, h);
    detail::linear_backward(x.data(), lp.wk.data(), dk.data(), dx.data(),
                            lg.wk.data(), lg.bk.data(), n, h, h);
    detail::linear_backward(x.data(), lp.wv.data(), dv.data(), dx.data(),
                            lg.wv.data(), lg.bv.data(), n, h, h);
    // Residual path from res1.
    for (std::size_t i = 0; i < n * h; ++i) dx[i] += dres1[i];

    dhidden = std::move(dx);
  }

  // Embedding layernorm + lookups.
  if (!cache.emb_drop.empty()) {
    for (std::size_t i = 0; i < n * h; ++i) {
      dhidden[i] *= cache.emb_drop[i];
    }
  }
  std::vector<T> demb(n * h, T(0));
  detail::layernorm_backward(cache.emb_sum.data(), params.emb_ln_gamma.data(),
                             cache.emb_mu.data(), cache.emb_rstd.data(),
                             dhidden.data(), demb.data(),
                             grads.emb_ln_gamma.data(),
                             grads.emb_ln_beta.data(), n, h);
  const batch::MaskedBatch& b = mb;
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = static_cast<std::size_t>(b.input_ids[i]);
    kernels::axpy(T(1), demb.data() + i * h,
                  grads.token_embedding.data() + id * h, h);
    kernels::axpy(T(1), demb.data() + i * h,
                  grads.position_embedding.data() + (i % len) * h, h);
  }

  // Non-finite gradients point at real numerical trouble; name the tensor.
  for (auto& ref : grads.tensors()) {
    for (const T& g : *ref.data) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("non-finite gradient in tensor " + ref.name);
      }
    }
  }
  return head.loss;
}

}  // namespace cwe::model
