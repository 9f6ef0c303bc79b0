#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "raypatch/errors.hpp"

// Closed-form attention cost and memory for light-field transformers, with
// and without ray-patch querying.
//
// Conventions used by every report:
//   * 1 MAC (multiply-accumulate) = 2 FLOPs.
//   * Scaled dot-product attention over n_q queries and n_kv keys costs
//     heads * n_q * n_kv * (d_k + d_v) MACs (Q K^T plus weights * V), d_v = d_k.
//   * Peak attention memory is one n_q x n_kv logit matrix per head.
namespace raypatch::cost {

enum class Family { srt, osrt, define, rp_srt, rp_osrt, rp_define };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::srt: return "srt";
    case Family::osrt: return "osrt";
    case Family::define: return "define";
    case Family::rp_srt: return "rp-srt";
    case Family::rp_osrt: return "rp-osrt";
    case Family::rp_define: return "rp-define";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  for (Family f : {Family::srt, Family::osrt, Family::define, Family::rp_srt, Family::rp_osrt, Family::rp_define}) {
    if (to_string(f) == s) return f;
  }
  throw ConfigError("unknown family '" + std::string(s) + "' (expected srt, osrt, define, rp-srt, rp-osrt, rp-define)");
}

inline bool is_raypatch(Family f) { return f == Family::rp_srt || f == Family::rp_osrt || f == Family::rp_define; }
inline bool uses_latent_array(Family f) { return f == Family::define || f == Family::rp_define; }

inline Family base_family(Family f) {
  switch (f) {
    case Family::rp_srt: return Family::srt;
    case Family::rp_osrt: return Family::osrt;
    case Family::rp_define: return Family::define;
    default: return f;
  }
}

inline Family raypatch_family(Family f) {
  switch (f) {
    case Family::srt: return Family::rp_srt;
    case Family::osrt: return Family::rp_osrt;
    case Family::define: return Family::rp_define;
    default: return f;
  }
}

inline bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

struct CostConfig {
  Family family = Family::srt;
  std::uint64_t views = 1;
  std::uint64_t h = 120;
  std::uint64_t w = 160;
  std::uint64_t k = 1;
  std::uint64_t d_k = 64;
  std::uint64_t heads = 8;
  std::optional<std::uint64_t> n_l;
  std::uint64_t downsamplings = 3;
  std::uint64_t bytes_per_elem = 4;

  void validate() const {
    if (views == 0 || h == 0 || w == 0 || d_k == 0 || heads == 0 || bytes_per_elem == 0) {
      throw ConfigError("cost config: views, height, width, d_k, heads and precision must be positive");
    }
    if (!is_power_of_two(k)) throw ConfigError("cost config: patch size " + std::to_string(k) + " is not a power of two");
    if (!is_raypatch(family) && k != 1) throw ConfigError("cost config: patch size must be 1 for " + to_string(family));
    if (h % k != 0 || w % k != 0) {
      throw ConfigError("cost config: patch size " + std::to_string(k) + " does not divide " + std::to_string(h) + "x" +
                        std::to_string(w));
    }
    if (uses_latent_array(family) && (!n_l || *n_l == 0)) {
      throw ConfigError("cost config: " + to_string(family) + " requires a latent count n_l");
    }
    if (!uses_latent_array(family) && n_l) throw ConfigError("cost config: n_l only applies to define families");
    if (downsamplings > 16) throw ConfigError("cost config: too many downsamplings");
    if ((h * w) % token_divisor() != 0) {
      throw ConfigError("cost config: " + std::to_string(h) + "x" + std::to_string(w) + " pixels not divisible by 4^" +
                        std::to_string(downsamplings));
    }
  }

  // Each stride-2 stage divides the token count by four.
  std::uint64_t token_divisor() const { return std::uint64_t{1} << (2 * downsamplings); }
  std::uint64_t encoder_tokens() const { return views * h * w / token_divisor(); }
};

struct CostReport {
  CostConfig cfg;
  std::uint64_t n_q_encoder = 0;
  std::uint64_t n_kv_encoder = 0;
  std::uint64_t n_q_decoder = 0;
  std::uint64_t n_kv_decoder = 0;
  double attn_flops_encoder = 0.0;
  double attn_flops_decoder = 0.0;
  double peak_attn_bytes = 0.0;
  std::optional<double> total_model_flops;
};

struct AttentionCost {
  double encoder = 0.0;  // MACs
  double decoder = 0.0;  // MACs
};

// hw for per-pixel families, hw/k^2 for ray-patch families.
inline std::uint64_t decoder_queries(Family family, std::uint64_t h, std::uint64_t w, std::uint64_t k) {
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw ConfigError("decoder_queries: patch size " + std::to_string(k) + " does not divide " + std::to_string(h) +
                      "x" + std::to_string(w));
  }
  if (!is_raypatch(family)) {
    if (k != 1) throw ConfigError("decoder_queries: " + to_string(family) + " queries one ray per pixel (k = 1)");
    return h * w;
  }
  return (h / k) * (w / k);
}

struct TokenCounts {
  std::uint64_t n_q_encoder, n_kv_encoder, n_q_decoder, n_kv_decoder;
};

inline TokenCounts token_counts(const CostConfig& cfg) {
  cfg.validate();
  const std::uint64_t tokens = cfg.encoder_tokens();
  TokenCounts t{};
  t.n_q_encoder = tokens;
  t.n_kv_encoder = uses_latent_array(cfg.family) ? *cfg.n_l : tokens;
  t.n_q_decoder = decoder_queries(cfg.family, cfg.h, cfg.w, cfg.k);
  t.n_kv_decoder = uses_latent_array(cfg.family) ? *cfg.n_l : tokens;
  return t;
}

// Encoder: (N hw/4^s)^2 d_k for self-attention, (N hw/4^s) n_l d_k with a latent array.
// Decoder: (hw/k^2) (N hw/4^s) d_k, or (hw/k^2) n_l d_k with a latent array.
inline AttentionCost attn_complexity(const CostConfig& cfg) {
  const TokenCounts t = token_counts(cfg);
  const double per_pair = static_cast<double>(cfg.heads) * static_cast<double>(2 * cfg.d_k);
  return {static_cast<double>(t.n_q_encoder) * static_cast<double>(t.n_kv_encoder) * per_pair,
          static_cast<double>(t.n_q_decoder) * static_cast<double>(t.n_kv_decoder) * per_pair};
}

inline double peak_attention_bytes(const CostConfig& cfg) {
  const TokenCounts t = token_counts(cfg);
  return static_cast<double>(t.n_q_decoder) * static_cast<double>(t.n_kv_decoder) * static_cast<double>(cfg.heads) *
         static_cast<double>(cfg.bytes_per_elem);
}

inline double gib(double bytes) { return bytes / 1073741824.0; }

inline CostReport compute_report(const CostConfig& cfg) {
  const TokenCounts t = token_counts(cfg);
  const AttentionCost a = attn_complexity(cfg);
  CostReport r;
  r.cfg = cfg;
  r.n_q_encoder = t.n_q_encoder;
  r.n_kv_encoder = t.n_kv_encoder;
  r.n_q_decoder = t.n_q_decoder;
  r.n_kv_decoder = t.n_kv_decoder;
  r.attn_flops_encoder = 2.0 * a.encoder;
  r.attn_flops_decoder = 2.0 * a.decoder;
  r.peak_attn_bytes = peak_attention_bytes(cfg);
  return r;
}

enum class SweepVariable { resolution, patch, views };

inline SweepVariable parse_sweep_variable(std::string_view s) {
  if (s == "resolution") return SweepVariable::resolution;
  if (s == "patch") return SweepVariable::patch;
  if (s == "views") return SweepVariable::views;
  throw ConfigError("unknown sweep variable '" + std::string(s) + "' (expected resolution, patch, views)");
}

// Resolution values are target heights; widths keep the base aspect ratio.
inline std::vector<CostReport> sweep(const CostConfig& base, SweepVariable var, const std::vector<std::uint64_t>& values) {
  std::vector<CostReport> rows;
  for (std::uint64_t v : values) {
    CostConfig c = base;
    switch (var) {
      case SweepVariable::resolution:
        if ((v * base.w) % base.h != 0) {
          throw ConfigError("sweep: height " + std::to_string(v) + " does not keep the " + std::to_string(base.h) + "x" +
                            std::to_string(base.w) + " aspect ratio");
        }
        c.h = v;
        c.w = v * base.w / base.h;
        break;
      case SweepVariable::patch:
        c.k = v;
        break;
      case SweepVariable::views:
        c.views = v;
        break;
    }
    rows.push_back(compute_report(c));
  }
  return rows;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 paired points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += std::log(xs[i]);
    my += std::log(ys[i]);
  }
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = std::log(xs[i]) - mx;
    sxy += dx * (std::log(ys[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_header() {
  return "family,N,h,w,k,heads,d_k,n_l,n_q_dec,n_kv_dec,attn_flops_dec,peak_bytes";
}

// n_l is written as 0 for families without a latent array.
inline std::string csv_row(const CostReport& r) {
  const CostConfig& c = r.cfg;
  std::string s = to_string(c.family);
  for (std::uint64_t v : {c.views, c.h, c.w, c.k, c.heads, c.d_k, c.n_l.value_or(0), r.n_q_decoder, r.n_kv_decoder}) {
    s += ',';
    s += std::to_string(v);
  }
  s += ',' + format_double(r.attn_flops_decoder);
  s += ',' + format_double(r.peak_attn_bytes);
  return s;
}

inline void write_csv(std::ostream& os, const std::vector<CostReport>& rows) {
  os << csv_header() << '\n';
  for (const auto& r : rows) os << csv_row(r) << '\n';
}

inline nlohmann::json to_json(const CostReport& r) {
  const CostConfig& c = r.cfg;
  nlohmann::json j = {{"family", to_string(c.family)},
                      {"N", c.views},
                      {"h", c.h},
                      {"w", c.w},
                      {"k", c.k},
                      {"heads", c.heads},
                      {"d_k", c.d_k},
                      {"n_l", c.n_l.value_or(0)},
                      {"downsamplings", c.downsamplings},
                      {"bytes_per_elem", c.bytes_per_elem},
                      {"n_q_enc", r.n_q_encoder},
                      {"n_kv_enc", r.n_kv_encoder},
                      {"n_q_dec", r.n_q_decoder},
                      {"n_kv_dec", r.n_kv_decoder},
                      {"attn_flops_enc", r.attn_flops_encoder},
                      {"attn_flops_dec", r.attn_flops_decoder},
                      {"peak_bytes", r.peak_attn_bytes},
                      {"peak_gib", gib(r.peak_attn_bytes)}};
  if (r.total_model_flops) j["total_model_flops"] = *r.total_model_flops;
  return j;
}

// ---------------------------------------------------------------------------
// Whole-model arithmetic from an explicit layer list.

struct LinearOp {
  std::string name;
  std::uint64_t rows = 0, in = 0, out = 0;
};

struct AttentionOp {
  std::string name;
  std::uint64_t heads = 0, n_q = 0, n_kv = 0, d_k = 0, d_v = 0;
};

struct ConvOp {
  std::string name;
  std::uint64_t batch = 0, c_in = 0, c_out = 0, h_out = 0, w_out = 0, kernel = 3;
};

// Bilinear: 4 MACs per output element. Nearest: data movement only.
struct UpsampleOp {
  std::string name;
  std::uint64_t channels = 0, h_out = 0, w_out = 0;
  bool bilinear = true;
};

struct LayerSpec {
  std::vector<LinearOp> linears;
  std::vector<AttentionOp> attentions;
  std::vector<ConvOp> convs;
  std::vector<UpsampleOp> upsamples;

  void append(const LayerSpec& o) {
    linears.insert(linears.end(), o.linears.begin(), o.linears.end());
    attentions.insert(attentions.end(), o.attentions.begin(), o.attentions.end());
    convs.insert(convs.end(), o.convs.begin(), o.convs.end());
    upsamples.insert(upsamples.end(), o.upsamples.begin(), o.upsamples.end());
  }
};

inline double model_macs(const LayerSpec& spec) {
  auto incomplete = [](const std::string& name) {
    return ConfigError("layer spec: '" + name + "' has an unset (zero) dimension");
  };
  double macs = 0.0;
  for (const auto& l : spec.linears) {
    if (l.rows == 0 || l.in == 0 || l.out == 0) throw incomplete(l.name);
    macs += static_cast<double>(l.rows) * static_cast<double>(l.in) * static_cast<double>(l.out);
  }
  for (const auto& a : spec.attentions) {
    if (a.heads == 0 || a.n_q == 0 || a.n_kv == 0 || a.d_k == 0 || a.d_v == 0) throw incomplete(a.name);
    macs += static_cast<double>(a.heads) * static_cast<double>(a.n_q) * static_cast<double>(a.n_kv) *
            static_cast<double>(a.d_k + a.d_v);
  }
  for (const auto& c : spec.convs) {
    if (c.batch == 0 || c.c_in == 0 || c.c_out == 0 || c.h_out == 0 || c.w_out == 0 || c.kernel == 0) {
      throw incomplete(c.name);
    }
    macs += static_cast<double>(c.batch) * static_cast<double>(c.c_out) * static_cast<double>(c.h_out) *
            static_cast<double>(c.w_out) * static_cast<double>(c.c_in) * static_cast<double>(c.kernel * c.kernel);
  }
  for (const auto& u : spec.upsamples) {
    if (u.channels == 0 || u.h_out == 0 || u.w_out == 0) throw incomplete(u.name);
    if (u.bilinear) macs += 4.0 * static_cast<double>(u.channels) * static_cast<double>(u.h_out * u.w_out);
  }
  return macs;
}

// GFLOPs, 2 per MAC.
inline double full_model_flops(const LayerSpec& spec) { return 2.0 * model_macs(spec) / 1e9; }

// One attention block (MHA + FF) over n_q query rows attending to n_kv context rows.
inline LayerSpec attention_block_spec(const std::string& name, std::uint64_t n_q, std::uint64_t n_kv,
                                      std::uint64_t d_query, std::uint64_t d_context, std::uint64_t heads,
                                      std::uint64_t d_k, std::uint64_t d_v, std::uint64_t ff_hidden) {
  LayerSpec s;
  s.linears.push_back({name + ".wq", n_q, d_query, heads * d_k});
  s.linears.push_back({name + ".wk", n_kv, d_context, heads * d_k});
  s.linears.push_back({name + ".wv", n_kv, d_context, heads * d_v});
  s.attentions.push_back({name + ".attn", heads, n_q, n_kv, d_k, d_v});
  s.linears.push_back({name + ".wo", n_q, heads * d_v, d_query});
  if (ff_hidden > 0) {
    s.linears.push_back({name + ".ff1", n_q, d_query, ff_hidden});
    s.linears.push_back({name + ".ff2", n_q, ff_hidden, d_query});
  }
  return s;
}

// Upsampling CNN behind ray-patch queries: m = log2(k) blocks, channels halve
// from `features`, a c-channel preliminary output per block that is summed
// and bilinearly upscaled, and a final conv at full resolution.
inline LayerSpec raypatch_cnn_spec(std::uint64_t features, std::uint64_t out_channels, std::uint64_t rows,
                                   std::uint64_t cols, std::uint64_t k) {
  if (!is_power_of_two(k)) throw ConfigError("ray-patch CNN: patch size must be a power of two");
  LayerSpec s;
  std::uint64_t ch = features, r = rows, c = cols;
  for (std::uint64_t j = 0; (std::uint64_t{1} << j) < k; ++j) {
    const std::string name = "cnn.block" + std::to_string(j);
    s.convs.push_back({name + ".prelim", 1, ch, out_channels, r, c, 3});
    s.upsamples.push_back({name + ".prelim_up", out_channels, 2 * r, 2 * c, true});
    s.upsamples.push_back({name + ".up", ch, 2 * r, 2 * c, false});
    s.convs.push_back({name + ".conv", 1, ch, ch / 2, 2 * r, 2 * c, 3});
    ch /= 2;
    r *= 2;
    c *= 2;
  }
  s.convs.push_back({"cnn.final", 1, ch, out_channels, r, c, 3});
  return s;
}

// Full-scale light-field transformer description used to reproduce the
// structure of the published GFLOP columns.
// kernel 0 marks a parameter-free pooling layer.
struct ConvLayer {
  std::uint64_t c_out, kernel, stride;
};

struct LftArchitecture {
  std::string name;
  // Encoder input (0 = same as the decoded resolution).
  std::uint64_t input_h = 0, input_w = 0;
  std::uint64_t input_channels = 3;
  // Conv backbone; the last layer's output is the token grid.
  std::vector<ConvLayer> backbone;
  std::uint64_t backbone_extra_macs_per_view = 0;  // e.g. residual 1x1 projections
  std::uint64_t token_extra_channels = 0;          // ray features concatenated to tokens
  std::uint64_t d_model = 768, heads = 12, d_k = 64, ff_hidden = 1536;
  std::uint64_t encoder_self_blocks = 5;
  // Latent array (PerceiverIO encoders); 0 disables.
  std::uint64_t latents = 0;
  std::uint64_t latent_cross_blocks = 0;
  // Decoder.
  std::uint64_t query_dim = 180;
  std::uint64_t dec_d_model = 768, dec_heads = 12, dec_d_k = 64, dec_ff_hidden = 1536;
  std::uint64_t decoder_blocks = 2;
  std::uint64_t out_channels = 3;
  std::uint64_t cnn_features = 128;
};

inline LayerSpec lft_layer_spec(const LftArchitecture& a, const CostConfig& cfg) {
  cfg.validate();
  LayerSpec s;
  const std::uint64_t ih = a.input_h ? a.input_h : cfg.h;
  const std::uint64_t iw = a.input_w ? a.input_w : cfg.w;
  std::uint64_t ch = a.input_channels, r = ih, c = iw;
  for (std::size_t i = 0; i < a.backbone.size(); ++i) {
    const auto& l = a.backbone[i];
    r = (r - 1) / l.stride + 1;
    c = (c - 1) / l.stride + 1;
    if (l.kernel == 0) continue;  // pooling
    s.convs.push_back({"backbone" + std::to_string(i), cfg.views, ch, l.c_out, r, c, l.kernel});
    ch = l.c_out;
  }
  if (a.backbone_extra_macs_per_view > 0) {
    s.linears.push_back({"backbone.extra", cfg.views, a.backbone_extra_macs_per_view, 1});
  }
  const std::uint64_t tokens = cfg.views * r * c;
  s.linears.push_back({"tokens.proj", tokens, ch + a.token_extra_channels, a.d_model});

  std::uint64_t kv_rows = tokens;
  if (a.latents > 0) {
    for (std::uint64_t b = 0; b < a.latent_cross_blocks; ++b) {
      s.append(attention_block_spec("latent.cross" + std::to_string(b), a.latents, tokens, a.d_model, a.d_model,
                                    a.heads, a.d_k, a.d_k, a.ff_hidden));
    }
    kv_rows = a.latents;
  }
  for (std::uint64_t b = 0; b < a.encoder_self_blocks; ++b) {
    s.append(attention_block_spec("encoder.self" + std::to_string(b), kv_rows, kv_rows, a.d_model, a.d_model, a.heads,
                                  a.d_k, a.d_k, a.ff_hidden));
  }

  const std::uint64_t n_q = decoder_queries(cfg.family, cfg.h, cfg.w, cfg.k);
  s.linears.push_back({"decoder.query_embed", n_q, a.query_dim, a.dec_d_model});
  for (std::uint64_t b = 0; b < a.decoder_blocks; ++b) {
    s.append(attention_block_spec("decoder.cross" + std::to_string(b), n_q, kv_rows, a.dec_d_model, a.d_model,
                                  a.dec_heads, a.dec_d_k, a.dec_d_k, a.dec_ff_hidden));
  }
  if (is_raypatch(cfg.family)) {
    s.linears.push_back({"decoder.feature_head", n_q, a.dec_d_model, a.cnn_features});
    s.append(raypatch_cnn_spec(a.cnn_features, a.out_channels, cfg.h / cfg.k, cfg.w / cfg.k, cfg.k));
  } else {
    s.linears.push_back({"decoder.head", n_q, a.dec_d_model, a.out_channels});
  }
  return s;
}

// SRT-style: three conv blocks (stride 1 then stride 2) over RGB plus a
// 180-channel ray encoding, five self-attention blocks at d = 768, and a
// two-block cross-attention decoder on queries embedded to 768.
inline LftArchitecture srt_architecture() {
  LftArchitecture a;
  a.name = "srt";
  a.input_channels = 3 + 180;
  a.backbone = {{96, 3, 1}, {96, 3, 2}, {192, 3, 1}, {192, 3, 2}, {384, 3, 1}, {384, 3, 2}};
  a.d_model = 768;
  a.heads = 12;
  a.d_k = 64;
  a.ff_hidden = 1536;
  a.encoder_self_blocks = 5;
  a.query_dim = 180;
  a.dec_d_model = 768;
  a.dec_heads = 12;
  a.dec_d_k = 64;
  a.dec_ff_hidden = 1536;
  a.decoder_blocks = 2;
  a.out_channels = 3;
  return a;
}

// DeFiNe-style: ResNet-18 stem through layer2 on 128x192 inputs (1/8 tokens),
// ray encodings concatenated to tokens, a 2048 x 512 latent array with one
// cross-attention and eight self-attention blocks, and a single
// cross-attention decoder block (8 heads of width 32) emitting RGB + depth.
inline LftArchitecture define_architecture() {
  LftArchitecture a;
  a.name = "define";
  a.input_h = 128;
  a.input_w = 192;
  a.input_channels = 3;
  a.backbone = {{64, 7, 2}, {64, 0, 2},  // stem conv, max-pool
                {64, 3, 1}, {64, 3, 1}, {64, 3, 1}, {64, 3, 1},
                {128, 3, 2}, {128, 3, 1}, {128, 3, 1}, {128, 3, 1}};
  a.backbone_extra_macs_per_view = 384 * 64 * 128;  // layer2 1x1 downsample projection
  a.token_extra_channels = 240;
  a.d_model = 512;
  a.heads = 8;
  a.d_k = 64;
  a.ff_hidden = 1024;
  a.latents = 2048;
  a.latent_cross_blocks = 1;
  a.encoder_self_blocks = 8;
  a.query_dim = 240;
  a.dec_d_model = 512;
  a.dec_heads = 8;
  a.dec_d_k = 32;
  a.dec_ff_hidden = 1024;
  a.decoder_blocks = 1;
  a.out_channels = 4;
  return a;
}

}  // namespace raypatch::cost
