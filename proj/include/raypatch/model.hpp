#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raypatch/costmodel.hpp"
#include "raypatch/geometry.hpp"
#include "raypatch/nn.hpp"

namespace raypatch {

enum class DecoderKind { pixel, raypatch };

inline std::string to_string(DecoderKind d) { return d == DecoderKind::pixel ? "pixel" : "raypatch"; }

inline DecoderKind parse_decoder(const std::string& s) {
  if (s == "pixel") return DecoderKind::pixel;
  if (s == "raypatch") return DecoderKind::raypatch;
  throw ConfigError("unknown decoder '" + s + "' (expected pixel or raypatch)");
}

struct ModelConfig {
  std::size_t h = 32;
  std::size_t w = 32;
  std::size_t k = 4;
  std::size_t views = 1;
  std::size_t channels = 3;  // 3 RGB, 4 RGB + log-depth, 1 log-depth
  std::size_t features = 128;
  EncodingConfig encoding;
  std::size_t downsamplings = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t encoder_blocks = 2;
  std::size_t decoder_blocks = 2;
  DecoderKind decoder = DecoderKind::raypatch;

  void validate() const {
    if (h == 0 || w == 0 || views == 0) throw ConfigError("model config: sizes and view count must be positive");
    if (!cost::is_power_of_two(k)) throw ConfigError("model config: patch size " + std::to_string(k) + " is not a power of two");
    if (h % k != 0 || w % k != 0) {
      throw ConfigError("model config: patch size " + std::to_string(k) + " does not divide " + std::to_string(h) + "x" +
                        std::to_string(w));
    }
    if (channels != 1 && channels != 3 && channels != 4) throw ConfigError("model config: channels must be 1, 3 or 4");
    const std::size_t down = std::size_t{1} << downsamplings;
    if (downsamplings > 8 || h % down != 0 || w % down != 0) {
      throw ConfigError("model config: " + std::to_string(downsamplings) + " stride-2 stages do not divide " +
                        std::to_string(h) + "x" + std::to_string(w));
    }
    if (d_model == 0 || heads == 0 || d_model % heads != 0) {
      throw ConfigError("model config: heads must divide d_model");
    }
    if (encoding.freq_origin < 1 || encoding.freq_direction < 1 || !(encoding.scene_radius > 0.0)) {
      throw ConfigError("model config: invalid ray encoding");
    }
    if (decoder == DecoderKind::raypatch && (features == 0 || features % k != 0)) {
      throw ConfigError("model config: feature channels must stay >= 1 after halving log2(k) times");
    }
  }

  std::size_t patch() const { return decoder == DecoderKind::raypatch ? k : 1; }
  std::size_t upsampling_blocks() const {
    std::size_t m = 0;
    while ((std::size_t{1} << m) < patch()) ++m;
    return m;
  }
  std::size_t query_dim() const { return encoding.size(); }
  std::size_t ff_hidden() const { return 2 * d_model; }
  MhaConfig mha() const { return {d_model, heads, d_model / heads, d_model / heads}; }
  std::size_t tokens() const { return views * (h >> downsamplings) * (w >> downsamplings); }
  std::size_t queries() const { return (h / patch()) * (w / patch()); }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"h", c.h},
          {"w", c.w},
          {"k", c.k},
          {"views", c.views},
          {"channels", c.channels},
          {"features", c.features},
          {"freq_origin", c.encoding.freq_origin},
          {"freq_direction", c.encoding.freq_direction},
          {"scene_radius", c.encoding.scene_radius},
          {"include_raw", c.encoding.include_raw},
          {"downsamplings", c.downsamplings},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"encoder_blocks", c.encoder_blocks},
          {"decoder_blocks", c.decoder_blocks},
          {"decoder", to_string(c.decoder)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.h = j.at("h").get<std::size_t>();
    c.w = j.at("w").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.views = j.at("views").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.features = j.at("features").get<std::size_t>();
    c.encoding.freq_origin = j.at("freq_origin").get<int>();
    c.encoding.freq_direction = j.at("freq_direction").get<int>();
    c.encoding.scene_radius = j.at("scene_radius").get<double>();
    c.encoding.include_raw = j.at("include_raw").get<bool>();
    c.downsamplings = j.at("downsamplings").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.encoder_blocks = j.at("encoder_blocks").get<std::size_t>();
    c.decoder_blocks = j.at("decoder_blocks").get<std::size_t>();
    c.decoder = parse_decoder(j.at("decoder").get<std::string>());
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config json: ") + e.what());
  }
}

struct InputView {
  Tensor image;  // [3, h, w]
  CameraIntrinsics K;
  CameraPose pose;
  Tensor rays;  // optional cached ray_feature_map
};

struct SceneLatent {
  Tensor tokens;  // [n_kv, d_model]
};

// ---------------------------------------------------------------------------
// Encoder: per-pixel [RGB | ray encoding] -> s x (conv stride 2, batch norm,
// leaky ReLU) -> tokens of all views -> self-attention blocks.

struct Encoder {
  std::vector<Conv2d> convs;
  std::vector<BatchNorm2d> norms;
  std::vector<AttnBlock> blocks;

  Encoder() = default;
  Encoder(const ModelConfig& cfg, Rng& rng) {
    std::size_t c_in = 3 + cfg.query_dim();
    for (std::size_t i = 0; i < cfg.downsamplings; ++i) {
      convs.emplace_back(c_in, cfg.d_model, 2, rng);
      norms.emplace_back(cfg.d_model);
      c_in = cfg.d_model;
    }
    for (std::size_t i = 0; i < cfg.encoder_blocks; ++i) blocks.emplace_back(cfg.mha(), cfg.ff_hidden(), rng);
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i].parameters(prefix + ".conv" + std::to_string(i), out);
      norms[i].parameters(prefix + ".bn" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].parameters(prefix + ".self" + std::to_string(i), out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    for (std::size_t i = 0; i < norms.size(); ++i) norms[i].buffers(prefix + ".bn" + std::to_string(i), out);
  }
};

inline SceneLatent encode(Encoder& enc, const ModelConfig& cfg, const std::vector<InputView>& views, bool training) {
  if (views.empty()) throw ConfigError("encode: at least one input view is required");
  const std::size_t h = views[0].image.rank() == 3 ? views[0].image.dim(1) : 0;
  const std::size_t w = views[0].image.rank() == 3 ? views[0].image.dim(2) : 0;
  std::vector<Tensor> stacked;
  for (const InputView& v : views) {
    if (v.image.rank() != 3 || v.image.dim(0) != 3 || v.image.dim(1) != h || v.image.dim(2) != w) {
      throw ShapeError("encode: view images must all be [3," + std::to_string(h) + "," + std::to_string(w) + "], got " +
                       shape_str(v.image.shape()));
    }
    if (h != cfg.h || w != cfg.w) {
      throw ShapeError("encode: views are " + std::to_string(h) + "x" + std::to_string(w) + ", model expects " +
                       std::to_string(cfg.h) + "x" + std::to_string(cfg.w));
    }
    const Tensor rays = v.rays.defined() ? v.rays : ray_feature_map(h, w, v.K, v.pose, cfg.encoding);
    stacked.push_back(reshape(concat({v.image, rays}, 0), {1, 3 + cfg.query_dim(), h, w}));
  }
  Tensor x = stacked.size() == 1 ? stacked[0] : concat(stacked, 0);
  for (std::size_t i = 0; i < enc.convs.size(); ++i) {
    x = leaky_relu(enc.norms[i].forward(enc.convs[i].forward(x), training));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), p = x.dim(2) * x.dim(3);
  std::vector<Tensor> per_view;
  for (std::size_t b = 0; b < n; ++b) per_view.push_back(transpose(reshape(slice(x, 0, b, 1), {d, p})));
  Tensor tokens = n == 1 ? per_view[0] : concat(per_view, 0);
  for (const AttnBlock& blk : enc.blocks) tokens = self_attn_block(blk, tokens);
  return {tokens};
}

// ---------------------------------------------------------------------------
// Ray-patch decoder: cross-attention over hw/k^2 patch queries, a feature map
// [f, h/k, w/k], then log2(k) upsampling blocks with preliminary outputs.

struct RayPatchDecoder {
  std::size_t h = 0, w = 0, k = 1, channels = 3, features = 128;
  Linear query_embed;
  std::vector<AttnBlock> blocks;
  Linear feature_head;
  std::vector<Conv2d> prelim;
  std::vector<Conv2d> convs;
  std::vector<BatchNorm2d> norms;
  Conv2d final_conv;

  RayPatchDecoder() = default;
  RayPatchDecoder(const ModelConfig& cfg, Rng& rng)
      : h(cfg.h), w(cfg.w), k(cfg.k), channels(cfg.channels), features(cfg.features),
        query_embed(cfg.query_dim(), cfg.d_model, rng) {
    for (std::size_t i = 0; i < cfg.decoder_blocks; ++i) blocks.emplace_back(cfg.mha(), cfg.ff_hidden(), rng);
    feature_head = Linear(cfg.d_model, cfg.features, rng);
    std::size_t ch = cfg.features;
    for (std::size_t j = 0; j < cfg.upsampling_blocks(); ++j) {
      prelim.emplace_back(ch, cfg.channels, 1, rng);
      convs.emplace_back(ch, ch / 2, 1, rng);
      norms.emplace_back(ch / 2);
      ch /= 2;
    }
    final_conv = Conv2d(ch, cfg.channels, 1, rng);
  }

  std::size_t rows() const { return h / k; }
  std::size_t cols() const { return w / k; }

  void parameters(const std::string& prefix, TensorList& out) const {
    query_embed.parameters(prefix + ".query_embed", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].parameters(prefix + ".cross" + std::to_string(i), out);
    feature_head.parameters(prefix + ".feature_head", out);
    for (std::size_t j = 0; j < convs.size(); ++j) {
      prelim[j].parameters(prefix + ".prelim" + std::to_string(j), out);
      convs[j].parameters(prefix + ".up" + std::to_string(j), out);
      norms[j].parameters(prefix + ".up_bn" + std::to_string(j), out);
    }
    final_conv.parameters(prefix + ".final", out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    for (std::size_t j = 0; j < norms.size(); ++j) norms[j].buffers(prefix + ".up_bn" + std::to_string(j), out);
  }
};

// Attention stage only: [hw/k^2, d_q] -> [hw/k^2, f].
inline Tensor raypatch_features(const RayPatchDecoder& dec, const SceneLatent& z, const Tensor& queries) {
  if (queries.rank() != 2 || queries.dim(0) != dec.rows() * dec.cols() || queries.dim(1) != dec.query_embed.in_features()) {
    throw ShapeError("decode_raypatch: expected queries [" + std::to_string(dec.rows() * dec.cols()) + "," +
                     std::to_string(dec.query_embed.in_features()) + "], got " + shape_str(queries.shape()));
  }
  Tensor x = dec.query_embed.forward(queries);
  for (const AttnBlock& blk : dec.blocks) x = cross_attn_block(blk, x, z.tokens);
  return dec.feature_head.forward(x);
}

// Convolutional stage: [f, h/k, w/k] -> [c, h, w].
inline Tensor raypatch_cnn(RayPatchDecoder& dec, const Tensor& feature_map, bool training) {
  Tensor x = feature_map;
  Tensor prelim;
  for (std::size_t j = 0; j < dec.convs.size(); ++j) {
    const Tensor p = dec.prelim[j].forward(x);
    prelim = upsample_bilinear2x(prelim.defined() ? add(prelim, p) : p);
    x = leaky_relu(dec.norms[j].forward(dec.convs[j].forward(upsample_nearest2x(x)), training));
  }
  const Tensor out = dec.final_conv.forward(x);
  return prelim.defined() ? add(out, prelim) : out;
}

inline Tensor decode_raypatch(RayPatchDecoder& dec, const SceneLatent& z, const Tensor& queries, bool training) {
  const Tensor feats = raypatch_features(dec, z, queries);
  const Tensor fmap = reshape(transpose(feats), {dec.features, dec.rows(), dec.cols()});
  return raypatch_cnn(dec, fmap, training);
}

// Several target views through one CNN pass, so training-mode batch norm
// sees every view in the batch. Returns one [c, h, w] image per view.
inline std::vector<Tensor> decode_raypatch_batch(RayPatchDecoder& dec, const std::vector<const SceneLatent*>& zs,
                                                 const std::vector<Tensor>& queries, bool training) {
  if (zs.size() != queries.size() || zs.empty()) throw ShapeError("decode_raypatch_batch: need one latent per query set");
  std::vector<Tensor> fmaps;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const Tensor feats = raypatch_features(dec, *zs[i], queries[i]);
    fmaps.push_back(reshape(transpose(feats), {1, dec.features, dec.rows(), dec.cols()}));
  }
  const Tensor out = raypatch_cnn(dec, fmaps.size() == 1 ? fmaps[0] : concat(fmaps, 0), training);
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < zs.size(); ++i) images.push_back(reshape(slice(out, 0, i, 1), {dec.channels, dec.h, dec.w}));
  return images;
}

// ---------------------------------------------------------------------------
// Per-pixel baseline: one query per pixel, linear head to c channels.

struct PixelDecoder {
  std::size_t h = 0, w = 0, channels = 3;
  Linear query_embed;
  std::vector<AttnBlock> blocks;
  Linear head;

  PixelDecoder() = default;
  PixelDecoder(const ModelConfig& cfg, Rng& rng)
      : h(cfg.h), w(cfg.w), channels(cfg.channels), query_embed(cfg.query_dim(), cfg.d_model, rng) {
    for (std::size_t i = 0; i < cfg.decoder_blocks; ++i) blocks.emplace_back(cfg.mha(), cfg.ff_hidden(), rng);
    head = Linear(cfg.d_model, cfg.channels, rng);
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    query_embed.parameters(prefix + ".query_embed", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].parameters(prefix + ".cross" + std::to_string(i), out);
    head.parameters(prefix + ".head", out);
  }
};

inline Tensor decode_pixel(const PixelDecoder& dec, const SceneLatent& z, const Tensor& queries) {
  if (queries.rank() != 2 || queries.dim(0) != dec.h * dec.w || queries.dim(1) != dec.query_embed.in_features()) {
    throw ShapeError("decode_pixel: expected queries [" + std::to_string(dec.h * dec.w) + "," +
                     std::to_string(dec.query_embed.in_features()) + "], got " + shape_str(queries.shape()));
  }
  Tensor x = dec.query_embed.forward(queries);
  for (const AttnBlock& blk : dec.blocks) x = cross_attn_block(blk, x, z.tokens);
  return reshape(transpose(dec.head.forward(x)), {dec.channels, dec.h, dec.w});
}

// ---------------------------------------------------------------------------

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    encoder = Encoder(cfg_, rng);
    if (cfg_.decoder == DecoderKind::raypatch) {
      raypatch_decoder = RayPatchDecoder(cfg_, rng);
    } else {
      pixel_decoder = PixelDecoder(cfg_, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  SceneLatent encode(const std::vector<InputView>& views, bool training) {
    return raypatch::encode(encoder, cfg_, views, training);
  }

  Tensor queries(const CameraIntrinsics& K, const CameraPose& pose) const {
    return build_queries({cfg_.h, cfg_.w, cfg_.patch()}, K, pose, cfg_.encoding);
  }

  Tensor decode(const SceneLatent& z, const Tensor& queries, bool training) {
    if (cfg_.decoder == DecoderKind::raypatch) return decode_raypatch(raypatch_decoder, z, queries, training);
    return decode_pixel(pixel_decoder, z, queries);
  }

  // Training-mode batch norm pools statistics over all views passed together.
  std::vector<Tensor> decode_batch(const std::vector<const SceneLatent*>& zs, const std::vector<Tensor>& queries,
                                   bool training) {
    if (cfg_.decoder == DecoderKind::raypatch) return decode_raypatch_batch(raypatch_decoder, zs, queries, training);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < zs.size(); ++i) out.push_back(decode_pixel(pixel_decoder, *zs[i], queries.at(i)));
    return out;
  }

  Tensor render(const SceneLatent& z, const CameraIntrinsics& K, const CameraPose& pose, bool training) {
    return decode(z, queries(K, pose), training);
  }

  TensorList parameters() const {
    TensorList out;
    encoder.parameters("encoder", out);
    if (cfg_.decoder == DecoderKind::raypatch) {
      raypatch_decoder.parameters("decoder", out);
    } else {
      pixel_decoder.parameters("decoder", out);
    }
    return out;
  }

  TensorList buffers() const {
    TensorList out;
    encoder.buffers("encoder", out);
    if (cfg_.decoder == DecoderKind::raypatch) raypatch_decoder.buffers("decoder", out);
    return out;
  }

  // Parameters followed by buffers; the persisted state.
  TensorList state() const {
    TensorList out = parameters();
    const TensorList b = buffers();
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  Encoder encoder;
  RayPatchDecoder raypatch_decoder;
  PixelDecoder pixel_decoder;

 private:
  ModelConfig cfg_;
};

// ---------------------------------------------------------------------------
// Losses

// Mean of squared error over channels and pixels.
inline Tensor loss_rgb(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("loss_rgb: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(square(sub(pred, target)));
}

inline std::vector<std::size_t> mask_indices(const std::vector<std::uint8_t>& mask) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(i);
  return idx;
}

// Mean |log pred - log target| over masked pixels. Unmasked pixels are never read.
inline Tensor loss_depth(const Tensor& pred, const Tensor& target, const std::vector<std::uint8_t>& mask) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("loss_depth: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  if (mask.size() != pred.numel()) {
    throw ShapeError("loss_depth: mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(pred.numel()) + " pixels");
  }
  for (double v : pred.data()) {
    if (!(v > 0.0)) throw NumericError("loss_depth: predicted depth must be positive");
  }
  const std::vector<std::size_t> idx = mask_indices(mask);
  if (idx.empty()) throw NumericError("loss_depth: empty depth mask");
  Tensor log_target({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double t = target.data()[idx[i]];
    if (!(t > 0.0)) throw NumericError("loss_depth: target depth must be positive on the mask");
    log_target.mutable_data()[i] = std::log(t);
  }
  return mean(abs(sub(log(gather(pred, idx)), log_target)));
}

inline Tensor loss_total(const Tensor& l_d, const Tensor& l_rgb, double lambda_rgb = 5.0) {
  return add(l_d, scale(l_rgb, lambda_rgb));
}

inline double loss_total(double l_d, double l_rgb, double lambda_rgb = 5.0) { return l_d + lambda_rgb * l_rgb; }

inline double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

// 10 log10(1 / MSE) for images in [0, 1], clamped to 99 dB.
inline double psnr(const Tensor& pred, const Tensor& target) {
  const double m = mse(pred, target);
  if (m <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when > 0
  double clip_norm = 1.0;
};

struct OptimizerState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_grad_norm(const TensorList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-6);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

inline void adam_update(const TensorList& params, OptimizerState& st, double lr) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.tensor.numel(), 0.0);
      st.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam: optimizer state does not match parameter list");
  st.step += 1;
  const AdamConfig& c = st.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.mutable_data();
    auto& m = st.m[t];
    auto& v = st.v[t];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps) + c.weight_decay * x[i];
      x[i] -= lr * update;
    }
  }
}

// Constant, or linear decay from base to final over total steps.
struct LrSchedule {
  double base = 1e-4;
  double final_lr = 1e-4;
  bool decay = false;
  std::uint64_t total = 1;

  double at(std::uint64_t step) const {
    if (!decay || total <= 1) return base;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
    return base + (final_lr - base) * t;
  }
};

struct TargetView {
  Tensor image;                     // [3, h, w]
  Tensor depth;                     // [1, h, w], may be undefined
  std::vector<std::uint8_t> mask;   // h*w, 1 where depth is valid
  CameraIntrinsics K;
  CameraPose pose;
  Tensor queries;                   // optional cached queries
};

struct TrainExample {
  std::vector<InputView> inputs;
  std::vector<TargetView> targets;
};

struct StepResult {
  double loss = 0.0;
  double psnr = 0.0;
  double grad_norm = 0.0;
};

struct PredictionSplit {
  Tensor rgb;    // [3, h, w] or undefined
  Tensor depth;  // [1, h, w] (exponentiated) or undefined
};

inline PredictionSplit split_prediction(const Tensor& pred) {
  const std::size_t c = pred.dim(0);
  PredictionSplit s;
  if (c == 3) s.rgb = pred;
  if (c == 4) {
    s.rgb = slice(pred, 0, 0, 3);
    s.depth = exp(slice(pred, 0, 3, 1));
  }
  if (c == 1) s.depth = exp(pred);
  return s;
}

// Scalar loss of one decoded target: l_d + lambda * l_rgb, with absent heads
// contributing zero.
inline Tensor target_loss(const Tensor& pred, const TargetView& t, double lambda_rgb) {
  const PredictionSplit s = split_prediction(pred);
  Tensor l_rgb = s.rgb.defined() ? loss_rgb(s.rgb, t.image) : Tensor::zeros({1});
  Tensor l_d = Tensor::zeros({1});
  if (s.depth.defined()) {
    if (!t.depth.defined()) throw ConfigError("train_step: depth head enabled but target has no depth");
    if (std::any_of(t.mask.begin(), t.mask.end(), [](std::uint8_t m) { return m != 0; })) {
      l_d = loss_depth(s.depth, t.depth, t.mask);
    }
  }
  return loss_total(l_d, l_rgb, lambda_rgb);
}

// Forward, backward, clip, Adam. The loss is the mean over all targets in the batch.
inline StepResult train_step(Model& model, const std::vector<TrainExample>& batch, OptimizerState& opt, double lr,
                             double lambda_rgb = 5.0) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const TensorList params = model.parameters();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  // Running statistics move during the forward pass; a failed step must not leave them changed.
  const TensorList bufs = model.buffers();
  std::vector<Tensor> saved;
  saved.reserve(bufs.size());
  for (const auto& b : bufs) saved.push_back(b.tensor.clone());
  auto restore = [&] {
    for (std::size_t i = 0; i < bufs.size(); ++i) {
      Tensor t = bufs[i].tensor;
      std::copy(saved[i].data().begin(), saved[i].data().end(), t.mutable_data().begin());
    }
  };
  StepResult r;
  std::size_t n_targets = 0, n_rgb = 0;
  try {
    Graph g;
    GraphScope scope(g);
    std::vector<SceneLatent> latents;
    latents.reserve(batch.size());
    std::vector<const SceneLatent*> zs;
    std::vector<Tensor> queries;
    std::vector<const TargetView*> targets;
    for (const TrainExample& ex : batch) {
      latents.push_back(model.encode(ex.inputs, true));
      for (const TargetView& t : ex.targets) {
        zs.push_back(&latents.back());
        queries.push_back(t.queries.defined() ? t.queries : model.queries(t.K, t.pose));
        targets.push_back(&t);
      }
    }
    if (targets.empty()) throw ConfigError("train_step: batch has no target views");
    const std::vector<Tensor> preds = model.decode_batch(zs, queries, true);
    std::vector<Tensor> losses;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      losses.push_back(target_loss(preds[i], *targets[i], lambda_rgb));
      const PredictionSplit s = split_prediction(preds[i]);
      if (s.rgb.defined()) {
        r.psnr += psnr(s.rgb, targets[i]->image);
        ++n_rgb;
      }
      ++n_targets;
    }
    const Tensor loss = scale(sum(concat(losses, 0)), 1.0 / static_cast<double>(n_targets));
    r.loss = loss.item();
    if (!std::isfinite(r.loss)) {
      throw NumericError("train_step: non-finite loss at step " + std::to_string(opt.step + 1));
    }
    g.backward(loss);
    r.grad_norm = clip_grad_norm(params, opt.cfg.clip_norm);
  } catch (const NumericError&) {
    restore();
    throw;
  }
  adam_update(params, opt, lr);
  if (n_rgb > 0) r.psnr /= static_cast<double>(n_rgb);
  return r;
}

// ---------------------------------------------------------------------------
// Layer list of one forward pass (encode all views + decode one target view),
// in the same op granularity the instrumented counters see.

inline cost::LayerSpec layer_spec(const ModelConfig& cfg) {
  cfg.validate();
  using namespace cost;
  LayerSpec s;
  const MhaConfig a = cfg.mha();
  std::size_t c_in = 3 + cfg.query_dim(), r = cfg.h, c = cfg.w;
  for (std::size_t i = 0; i < cfg.downsamplings; ++i) {
    r /= 2;
    c /= 2;
    s.convs.push_back({"encoder.conv" + std::to_string(i), cfg.views, c_in, cfg.d_model, r, c, 3});
    c_in = cfg.d_model;
  }
  const std::size_t tokens = cfg.tokens();
  for (std::size_t i = 0; i < cfg.encoder_blocks; ++i) {
    s.append(attention_block_spec("encoder.self" + std::to_string(i), tokens, tokens, cfg.d_model, cfg.d_model,
                                  a.heads, a.d_k, a.d_v, cfg.ff_hidden()));
  }
  const std::size_t n_q = cfg.queries();
  s.linears.push_back({"decoder.query_embed", n_q, cfg.query_dim(), cfg.d_model});
  for (std::size_t i = 0; i < cfg.decoder_blocks; ++i) {
    s.append(attention_block_spec("decoder.cross" + std::to_string(i), n_q, tokens, cfg.d_model, cfg.d_model, a.heads,
                                  a.d_k, a.d_v, cfg.ff_hidden()));
  }
  if (cfg.decoder == DecoderKind::raypatch) {
    s.linears.push_back({"decoder.feature_head", n_q, cfg.d_model, cfg.features});
    s.append(raypatch_cnn_spec(cfg.features, cfg.channels, cfg.h / cfg.k, cfg.w / cfg.k, cfg.k));
  } else {
    s.linears.push_back({"decoder.head", n_q, cfg.d_model, cfg.channels});
  }
  return s;
}

}  // namespace raypatch
