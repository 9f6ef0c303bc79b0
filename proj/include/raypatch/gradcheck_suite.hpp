#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include "raypatch/data_synth.hpp"
#include "raypatch/gradcheck.hpp"
#include "raypatch/model.hpp"

// Finite-difference audit of every differentiable op, every block and the
// end-to-end toy model.
namespace raypatch {

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// sum(y * w) for a fixed random w: a scalar that weights every output element differently.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

// Small model used by the end-to-end checks.
inline ModelConfig gradcheck_model_config(DecoderKind decoder, std::size_t channels) {
  ModelConfig c;
  c.h = c.w = 8;
  c.k = 4;
  c.channels = channels;
  c.features = 8;
  c.encoding.freq_origin = 2;
  c.encoding.freq_direction = 2;
  c.downsamplings = 2;
  c.d_model = 8;
  c.heads = 2;
  c.decoder = decoder;
  return c;
}

namespace suite_detail {

using Check = std::function<double(Rng&, double)>;

// Wraps a unary op check: f(x) = weighted_sum(op(x)).
inline Check unary_check(Shape shape, std::function<Tensor(const Tensor&)> op, double lo = -1.0, double hi = 1.0) {
  return [=](Rng& rng, double step) {
    const Tensor x = random_tensor(shape, rng, lo, hi);
    Tensor probe;
    {
      NoGradScope ng;
      probe = op(x);
    }
    const Tensor w = random_tensor(probe.shape(), rng);
    return grad_check([&](const Tensor& t) { return weighted_sum(op(t), w); }, x, step);
  };
}

inline double params_check(const std::function<Tensor()>& f, const TensorList& params, double step, Rng& rng,
                           std::size_t max_coords) {
  std::vector<Tensor> ps;
  for (const auto& p : params) ps.push_back(p.tensor);
  return grad_check_params(f, ps, step, max_coords, &rng);
}

inline std::vector<std::pair<std::string, Check>> checks() {
  std::vector<std::pair<std::string, Check>> c;
  c.emplace_back("matmul", [](Rng& rng, double step) {
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng);
    return std::max(grad_check([&](const Tensor& t) { return weighted_sum(matmul(t, b), w); }, a, step),
                    grad_check([&](const Tensor& t) { return weighted_sum(matmul(a, t), w); }, b, step));
  });
  c.emplace_back("matmul_transposed", [](Rng& rng, double step) {
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng), w = random_tensor({3, 5}, rng);
    return std::max(grad_check([&](const Tensor& t) { return weighted_sum(matmul_transposed(t, b), w); }, a, step),
                    grad_check([&](const Tensor& t) { return weighted_sum(matmul_transposed(a, t), w); }, b, step));
  });
  c.emplace_back("transpose", unary_check({3, 5}, [](const Tensor& x) { return transpose(x); }));
  c.emplace_back("reshape", unary_check({2, 6}, [](const Tensor& x) { return reshape(x, {3, 2, 2}); }));
  for (const char* name : {"add", "sub", "mul"}) {
    c.emplace_back(name, [op = std::string(name)](Rng& rng, double step) {
      const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), w = random_tensor({2, 3}, rng);
      auto f = [&](const Tensor& x, const Tensor& y) {
        return op == "add" ? add(x, y) : op == "sub" ? sub(x, y) : mul(x, y);
      };
      return std::max(grad_check([&](const Tensor& t) { return weighted_sum(f(t, b), w); }, a, step),
                      grad_check([&](const Tensor& t) { return weighted_sum(f(a, t), w); }, b, step));
    });
  }
  c.emplace_back("scale", unary_check({4, 3}, [](const Tensor& x) { return scale(x, -1.7); }));
  c.emplace_back("leaky_relu", unary_check({4, 5}, [](const Tensor& x) { return leaky_relu(x); }));
  c.emplace_back("exp", unary_check({3, 4}, [](const Tensor& x) { return exp(x); }));
  c.emplace_back("log", unary_check({3, 4}, [](const Tensor& x) { return log(x); }, 0.5, 2.0));
  c.emplace_back("abs", unary_check({3, 4}, [](const Tensor& x) { return abs(x); }));
  c.emplace_back("square", unary_check({3, 4}, [](const Tensor& x) { return square(x); }));
  c.emplace_back("add_bias", [](Rng& rng, double step) {
    const Tensor x = random_tensor({4, 3}, rng), b = random_tensor({3}, rng), w = random_tensor({4, 3}, rng);
    return std::max(grad_check([&](const Tensor& t) { return weighted_sum(add_bias(t, b), w); }, x, step),
                    grad_check([&](const Tensor& t) { return weighted_sum(add_bias(x, t), w); }, b, step));
  });
  c.emplace_back("sum", unary_check({3, 4}, [](const Tensor& x) { return sum(x); }));
  c.emplace_back("mean", unary_check({3, 4}, [](const Tensor& x) { return mean(x); }));
  c.emplace_back("softmax_rows", unary_check({3, 6}, [](const Tensor& x) { return softmax_rows(scale(x, 3.0)); }));
  c.emplace_back("layer_norm", [](Rng& rng, double step) {
    const Tensor x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng, 0.5, 1.5), b = random_tensor({5}, rng);
    const Tensor w = random_tensor({3, 5}, rng);
    return std::max({grad_check([&](const Tensor& t) { return weighted_sum(layer_norm(t, g, b), w); }, x, step),
                     grad_check([&](const Tensor& t) { return weighted_sum(layer_norm(x, t, b), w); }, g, step),
                     grad_check([&](const Tensor& t) { return weighted_sum(layer_norm(x, g, t), w); }, b, step)});
  });
  c.emplace_back("batch_norm", [](Rng& rng, double step) {
    const Tensor x = random_tensor({2, 3, 3, 4}, rng), g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
    const Tensor w = random_tensor({2, 3, 3, 4}, rng);
    Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
    auto bn = [&](const Tensor& xx, const Tensor& gg, const Tensor& bb, bool training) {
      return weighted_sum(batch_norm(xx, gg, bb, rm, rv, training), w);
    };
    return std::max({grad_check([&](const Tensor& t) { return bn(t, g, b, true); }, x, step),
                     grad_check([&](const Tensor& t) { return bn(x, t, b, true); }, g, step),
                     grad_check([&](const Tensor& t) { return bn(x, g, t, true); }, b, step),
                     grad_check([&](const Tensor& t) { return bn(t, g, b, false); }, x, step)});
  });
  c.emplace_back("concat", [](Rng& rng, double step) {
    const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng), w = random_tensor({2, 5}, rng);
    const Tensor w0 = random_tensor({4, 3}, rng), a2 = random_tensor({2, 3}, rng);
    return std::max({grad_check([&](const Tensor& t) { return weighted_sum(concat({t, b}, 1), w); }, a, step),
                     grad_check([&](const Tensor& t) { return weighted_sum(concat({a, t}, 1), w); }, b, step),
                     grad_check([&](const Tensor& t) { return weighted_sum(concat({t, a2}, 0), w0); }, a, step)});
  });
  c.emplace_back("slice", unary_check({4, 6}, [](const Tensor& x) { return slice(x, 1, 2, 3); }));
  c.emplace_back("gather", unary_check({3, 4}, [](const Tensor& x) { return gather(x, {0, 5, 5, 11, 7}); }));
  for (std::size_t stride : {1, 2}) {
    c.emplace_back("conv2d_s" + std::to_string(stride), [stride](Rng& rng, double step) {
      const Tensor x = random_tensor({2, 3, 5, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
      Tensor probe;
      {
        NoGradScope ng;
        probe = conv2d(x, k, b, stride);
      }
      const Tensor w = random_tensor(probe.shape(), rng);
      return std::max({grad_check([&](const Tensor& t) { return weighted_sum(conv2d(t, k, b, stride), w); }, x, step),
                       grad_check([&](const Tensor& t) { return weighted_sum(conv2d(x, t, b, stride), w); }, k, step),
                       grad_check([&](const Tensor& t) { return weighted_sum(conv2d(x, k, t, stride), w); }, b, step)});
    });
  }
  c.emplace_back("upsample_nearest2x", unary_check({2, 3, 4}, [](const Tensor& x) { return upsample_nearest2x(x); }));
  c.emplace_back("upsample_bilinear2x", unary_check({2, 3, 4}, [](const Tensor& x) { return upsample_bilinear2x(x); }));

  // Blocks, checked through their inputs and parameters.
  c.emplace_back("block.linear", [](Rng& rng, double step) {
    Linear lin(5, 3, rng);
    for (double& v : lin.bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
    const Tensor x = random_tensor({4, 5}, rng), w = random_tensor({4, 3}, rng);
    TensorList ps;
    lin.parameters("lin", ps);
    return std::max(grad_check([&](const Tensor& t) { return weighted_sum(lin.forward(t), w); }, x, step),
                    params_check([&] { return weighted_sum(lin.forward(x), w); }, ps, step, rng, 0));
  });
  c.emplace_back("block.conv_bn_leaky", [](Rng& rng, double step) {
    Conv2d conv(3, 4, 2, rng);
    BatchNorm2d bn(4);
    const Tensor x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({2, 4, 3, 3}, rng);
    auto f = [&](const Tensor& t) { return weighted_sum(leaky_relu(bn.forward(conv.forward(t), true)), w); };
    TensorList ps;
    conv.parameters("conv", ps);
    bn.parameters("bn", ps);
    return std::max(grad_check(f, x, step), params_check([&] { return f(x); }, ps, step, rng, 6));
  });
  c.emplace_back("block.mha", [](Rng& rng, double step) {
    const MhaConfig cfg{6, 2, 3, 3};
    MultiHeadAttention mha(cfg, rng);
    const Tensor q = random_tensor({4, 6}, rng), kv = random_tensor({5, 6}, rng), w = random_tensor({4, 6}, rng);
    TensorList ps;
    mha.parameters("mha", ps);
    return std::max({grad_check([&](const Tensor& t) { return weighted_sum(mha.forward(t, kv), w); }, q, step),
                     grad_check([&](const Tensor& t) { return weighted_sum(mha.forward(q, t), w); }, kv, step),
                     params_check([&] { return weighted_sum(mha.forward(q, kv), w); }, ps, step, rng, 6)});
  });
  c.emplace_back("block.self_attn", [](Rng& rng, double step) {
    AttnBlock blk({6, 2, 3, 3}, 12, rng);
    const Tensor x = random_tensor({5, 6}, rng), w = random_tensor({5, 6}, rng);
    TensorList ps;
    blk.parameters("blk", ps);
    return std::max(grad_check([&](const Tensor& t) { return weighted_sum(self_attn_block(blk, t), w); }, x, step),
                    params_check([&] { return weighted_sum(self_attn_block(blk, x), w); }, ps, step, rng, 6));
  });
  c.emplace_back("block.cross_attn", [](Rng& rng, double step) {
    AttnBlock blk({6, 2, 3, 3}, 12, rng);
    const Tensor q = random_tensor({3, 6}, rng), z = random_tensor({7, 6}, rng), w = random_tensor({3, 6}, rng);
    return std::max(
        grad_check([&](const Tensor& t) { return weighted_sum(cross_attn_block(blk, t, z), w); }, q, step),
        grad_check([&](const Tensor& t) { return weighted_sum(cross_attn_block(blk, q, t), w); }, z, step));
  });
  c.emplace_back("block.raypatch_cnn", [](Rng& rng, double step) {
    ModelConfig cfg = gradcheck_model_config(DecoderKind::raypatch, 3);
    RayPatchDecoder dec(cfg, rng);
    const Tensor fmap = random_tensor({cfg.features, cfg.h / cfg.k, cfg.w / cfg.k}, rng);
    const Tensor w = random_tensor({cfg.channels, cfg.h, cfg.w}, rng);
    TensorList ps;
    for (std::size_t j = 0; j < dec.convs.size(); ++j) {
      dec.prelim[j].parameters("prelim", ps);
      dec.convs[j].parameters("up", ps);
      dec.norms[j].parameters("bn", ps);
    }
    dec.final_conv.parameters("final", ps);
    auto f = [&](const Tensor& t) { return weighted_sum(raypatch_cnn(dec, t, true), w); };
    return std::max(grad_check(f, fmap, step), params_check([&] { return f(fmap); }, ps, step, rng, 6));
  });

  // End-to-end: loss_total through encode and decode.
  for (const auto& [name, decoder, channels] :
       {std::tuple{"model.raypatch_rgbd", DecoderKind::raypatch, std::size_t{4}},
        std::tuple{"model.raypatch_rgb", DecoderKind::raypatch, std::size_t{3}},
        std::tuple{"model.pixel_rgbd", DecoderKind::pixel, std::size_t{4}}}) {
    c.emplace_back(name, [decoder = decoder, channels = channels](Rng& rng, double step) {
      const ModelConfig cfg = gradcheck_model_config(decoder, channels);
      Model model(cfg, rng.next());
      const data::SceneSpec spec = data::generate_scene(rng.next());
      const data::ViewSample in = data::render_view(spec, 0.0, cfg.h, cfg.w);
      const data::ViewSample tgt = data::render_view(spec, 120.0, cfg.h, cfg.w);
      const std::vector<InputView> inputs{{in.image, in.K, in.pose, {}}};
      TargetView t{tgt.image, tgt.depth, tgt.mask, tgt.K, tgt.pose, {}};
      auto f = [&] { return target_loss(model.decode(model.encode(inputs, true), model.queries(t.K, t.pose), true), t, 5.0); };
      return params_check(f, model.parameters(), step, rng, 3);
    });
  }
  return c;
}

}  // namespace suite_detail

inline std::vector<std::string> gradcheck_suite_names() {
  std::vector<std::string> names;
  for (const auto& [n, c] : suite_detail::checks()) names.push_back(n);
  return names;
}

// Max relative error per check over seeds [seed, seed + n_seeds).
inline std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, std::size_t n_seeds, double step = 1e-6) {
  const auto checks = suite_detail::checks();
  std::vector<GradCheckEntry> out;
  for (const auto& [name, check] : checks) out.push_back({name, 0.0});
  for (std::size_t s = 0; s < n_seeds; ++s) {
    Rng rng(seed + s);
    for (std::size_t i = 0; i < checks.size(); ++i) {
      Rng local = rng.fork(i);
      out[i].max_error = std::max(out[i].max_error, checks[i].second(local, step));
    }
  }
  return out;
}

}  // namespace raypatch
