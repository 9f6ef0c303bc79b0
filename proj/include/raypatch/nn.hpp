#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "raypatch/ops.hpp"
#include "raypatch/rng.hpp"

namespace raypatch {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using TensorList = std::vector<NamedTensor>;

// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor(std::move(shape), true); }

inline Tensor ones_param(Shape shape) {
  Tensor t = Tensor::full(std::move(shape), 1.0);
  t.set_requires_grad(true);
  return t;
}

// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) : weight(uniform_init({in, out}, in, rng)), bias(zeros_param({out})) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  void parameters(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(ones_param({d})), beta(zeros_param({d})) {}

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void parameters(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

struct Conv2d {
  Tensor weight;  // [c_out, c_in, 3, 3]
  Tensor bias;
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t stride_, Rng& rng)
      : weight(uniform_init({c_out, c_in, 3, 3}, c_in * 9, rng)), bias(zeros_param({c_out})), stride(stride_) {}

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride); }

  void parameters(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t c)
      : gamma(ones_param({c})), beta(zeros_param({c})), running_mean(Tensor::zeros({c})),
        running_var(Tensor::full({c}, 1.0)) {}

  // Training mode updates the running statistics in place.
  Tensor forward(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

struct MhaConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_k = 16;
  std::size_t d_v = 16;

  void validate() const {
    if (d_model == 0 || heads == 0 || d_k == 0 || d_v == 0) throw ConfigError("mha: all dimensions must be >= 1");
  }
};

// softmax(Q K^T / sqrt(d_k)), the per-query weights over keys.
inline Tensor attention_weights(const Tensor& q, const Tensor& k) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw ShapeError("attention: query dim " + shape_str(q.shape()) + " does not match key dim " +
                     shape_str(k.shape()));
  }
  return softmax_rows(scale(matmul_transposed(q, k), 1.0 / std::sqrt(static_cast<double>(q.dim(1)))));
}

inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (v.rank() != 2 || v.dim(0) != k.dim(0)) {
    throw ShapeError("attention: values " + shape_str(v.shape()) + " do not pair with keys " + shape_str(k.shape()));
  }
  Tensor out = matmul(attention_weights(q, k), v);
  auto& c = counters();
  c.attention_calls += 1;
  c.attention_queries += q.dim(0);
  c.attention_keys += k.dim(0);
  c.attention_macs += q.dim(0) * k.dim(0) * (q.dim(1) + v.dim(1));
  return out;
}

struct MultiHeadAttention {
  MhaConfig cfg;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  // cfg is declared first, so it is validated before any projection is built.
  MultiHeadAttention(const MhaConfig& c, Rng& rng)
      : cfg(checked(c)),
        wq(c.d_model, c.heads * c.d_k, rng),
        wk(c.d_model, c.heads * c.d_k, rng),
        wv(c.d_model, c.heads * c.d_v, rng),
        wo(c.heads * c.d_v, c.d_model, rng) {}

  static const MhaConfig& checked(const MhaConfig& c) {
    c.validate();
    return c;
  }

  // Per-head projections, attention, concatenation, projection back to d_model.
  Tensor forward(const Tensor& q_in, const Tensor& kv_in) const {
    if (q_in.rank() != 2 || kv_in.rank() != 2 || q_in.dim(1) != cfg.d_model || kv_in.dim(1) != cfg.d_model) {
      throw ShapeError("mha: inputs " + shape_str(q_in.shape()) + ", " + shape_str(kv_in.shape()) +
                       " do not match d_model " + std::to_string(cfg.d_model));
    }
    const Tensor q = wq.forward(q_in);
    const Tensor k = wk.forward(kv_in);
    const Tensor v = wv.forward(kv_in);
    if (cfg.heads == 1) return wo.forward(scaled_dot_attention(q, k, v));
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      heads.push_back(scaled_dot_attention(slice(q, 1, h * cfg.d_k, cfg.d_k), slice(k, 1, h * cfg.d_k, cfg.d_k),
                                           slice(v, 1, h * cfg.d_v, cfg.d_v)));
    }
    return wo.forward(concat(heads, 1));
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    wq.parameters(prefix + ".wq", out);
    wk.parameters(prefix + ".wk", out);
    wv.parameters(prefix + ".wv", out);
    wo.parameters(prefix + ".wo", out);
  }
};

// MHA -> add -> norm -> FF -> add -> norm (post-norm residual order).
struct AttnBlock {
  MultiHeadAttention mha;
  LayerNorm ln1;
  Linear ff1, ff2;
  LayerNorm ln2;

  AttnBlock() = default;
  AttnBlock(const MhaConfig& cfg, std::size_t ff_hidden, Rng& rng)
      : mha(cfg, rng), ln1(cfg.d_model), ff1(cfg.d_model, ff_hidden, rng), ff2(ff_hidden, cfg.d_model, rng),
        ln2(cfg.d_model) {}

  Tensor forward(const Tensor& x, const Tensor& context) const {
    const Tensor h = ln1.forward(add(x, mha.forward(x, context)));
    return ln2.forward(add(h, ff2.forward(leaky_relu(ff1.forward(h)))));
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    mha.parameters(prefix + ".mha", out);
    ln1.parameters(prefix + ".ln1", out);
    ff1.parameters(prefix + ".ff1", out);
    ff2.parameters(prefix + ".ff2", out);
    ln2.parameters(prefix + ".ln2", out);
  }
};

inline Tensor self_attn_block(const AttnBlock& block, const Tensor& x) { return block.forward(x, x); }

inline Tensor cross_attn_block(const AttnBlock& block, const Tensor& queries, const Tensor& latent) {
  return block.forward(queries, latent);
}

}  // namespace raypatch
