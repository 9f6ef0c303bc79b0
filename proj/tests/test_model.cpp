#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "raypatch/data_synth.hpp"
#include "raypatch/gradcheck.hpp"
#include "raypatch/gradcheck_suite.hpp"
#include "raypatch/train.hpp"

using namespace raypatch;

namespace {

ModelConfig tiny(DecoderKind dec, std::size_t h = 16, std::size_t w = 16, std::size_t k = 4, std::size_t c = 3) {
  ModelConfig cfg;
  cfg.h = h;
  cfg.w = w;
  cfg.k = k;
  cfg.channels = c;
  cfg.decoder = dec;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.features = 16;
  cfg.encoding.freq_origin = 3;
  cfg.encoding.freq_direction = 3;
  cfg.encoder_blocks = 1;
  cfg.decoder_blocks = 1;
  return cfg;
}

InputView view_of(const data::ViewSample& v) { return {v.image, v.K, v.pose, {}}; }

data::SceneViews scene(std::uint64_t seed, std::size_t h, std::size_t w) {
  return data::render_scene(data::generate_scene(seed), h, w);
}

}  // namespace

TEST(Encoder, TokenCountLinearInViews) {
  for (std::size_t n : {1, 3}) {
    ModelConfig cfg = tiny(DecoderKind::raypatch);
    cfg.views = n;
    EXPECT_EQ(cfg.tokens(), 16u * n);
    Model m(cfg, 1);
    const auto s = scene(3, 16, 16);
    std::vector<InputView> views;
    for (std::size_t i = 0; i < n; ++i) views.push_back(view_of(s.views[i]));
    EXPECT_EQ(m.encode(views, false).tokens.shape(), (Shape{16 * n, 16}));
  }
}

TEST(Encoder, InputViewOrderIsUnobservable) {
  ModelConfig cfg = tiny(DecoderKind::raypatch);
  cfg.views = 3;
  Model m(cfg, 2);
  const auto s = scene(4, 16, 16);
  std::vector<InputView> fwd{view_of(s.views[0]), view_of(s.views[1]), view_of(s.views[2])};
  std::vector<InputView> rev{fwd[2], fwd[0], fwd[1]};
  NoGradScope ng;
  const Tensor q = m.queries(s.views[0].K, data::rig_pose(60));
  const Tensor a = m.decode(m.encode(fwd, false), q, false);
  const Tensor b = m.decode(m.encode(rev, false), q, false);
  EXPECT_LE(oracle::max_abs_diff(a, b), 1e-9);
}

TEST(Encoder, WrongResolutionIsShapeError) {
  Model m(tiny(DecoderKind::pixel), 1);
  const auto s = scene(1, 8, 8);
  EXPECT_THROW(m.encode({view_of(s.views[0])}, false), ShapeError);
}

TEST(RayPatchDecoder, KOneHasNoUpsamplingBlocks) {
  ModelConfig cfg = tiny(DecoderKind::raypatch, 8, 8, 1);
  EXPECT_EQ(cfg.upsampling_blocks(), 0u);
  Model m(cfg, 3);
  EXPECT_TRUE(m.raypatch_decoder.convs.empty());
  const auto s = scene(1, 8, 8);
  NoGradScope ng;
  EXPECT_EQ(m.render(m.encode({view_of(s.views[0])}, false), s.views[1].K, s.views[1].pose, false).shape(),
            (Shape{3, 8, 8}));
}

TEST(RayPatchDecoder, KEightHasThreeBlocks) {
  ModelConfig cfg = tiny(DecoderKind::raypatch, 16, 16, 8);
  EXPECT_EQ(cfg.upsampling_blocks(), 3u);
  Model m(cfg, 4);
  EXPECT_EQ(m.raypatch_decoder.convs.size(), 3u);
  EXPECT_EQ(m.raypatch_decoder.convs[0].in_channels(), 16u);
  EXPECT_EQ(m.raypatch_decoder.convs[2].out_channels(), 2u);
}

TEST(RayPatchDecoder, ChannelsStartAt128AndHalve) {
  ModelConfig cfg;
  cfg.k = 8;
  Model m(cfg, 5);
  std::size_t ch = 128;
  for (const Conv2d& c : m.raypatch_decoder.convs) {
    EXPECT_EQ(c.in_channels(), ch);
    EXPECT_EQ(c.out_channels(), ch / 2);
    ch /= 2;
  }
}

TEST(RayPatchDecoder, DefaultConfigOutputShapeAndGradCheck) {
  ModelConfig cfg;  // 32x32, k = 4, c = 3
  Model m(cfg, 6);
  const auto s = scene(5, 32, 32);
  const SceneLatent z = m.encode({view_of(s.views[0])}, false);
  const SceneLatent fixed{z.tokens.clone()};
  const Tensor q = m.queries(s.views[1].K, s.views[1].pose);
  {
    NoGradScope ng;
    EXPECT_EQ(m.decode(fixed, q, true).shape(), (Shape{3, 32, 32}));
  }
  // Gradient of the scalar MSE w.r.t. the latent tokens, through attention and CNN.
  const Tensor target = s.views[1].image;
  auto f = [&](const Tensor& tokens) { return loss_rgb(m.decode(SceneLatent{tokens}, q, true), target); };
  Rng rng(1);
  Tensor probe = fixed.tokens.clone();
  EXPECT_LT(grad_check(f, probe), 1e-4);
}

TEST(RayPatchDecoder, OutputShapeForAllValidSizes) {
  NoGradScope ng;
  Rng rng(7);
  for (std::size_t k : {1, 2, 4, 8}) {
    for (int trial = 0; trial < 3; ++trial) {
      const std::size_t h = 8 * (1 + rng.uniform_int(8)), w = 8 * (1 + rng.uniform_int(8));
      ModelConfig cfg = tiny(DecoderKind::raypatch, h, w, k, trial == 2 ? 1 : 4);
      cfg.downsamplings = 3;
      RayPatchDecoder dec(cfg, rng);
      const SceneLatent z{oracle::random({5, cfg.d_model}, rng)};
      const Tensor q = build_queries({h, w, k}, data::rig_intrinsics(h, w), data::rig_pose(10), cfg.encoding);
      EXPECT_EQ(decode_raypatch(dec, z, q, trial == 0).shape(), (Shape{cfg.channels, h, w})) << h << "x" << w << " k" << k;
    }
  }
}

TEST(RayPatchDecoder, InvariantToLatentPermutation) {
  Rng rng(8);
  ModelConfig cfg = tiny(DecoderKind::raypatch);
  RayPatchDecoder dec(cfg, rng);
  const Tensor q = build_queries({16, 16, 4}, data::rig_intrinsics(16, 16), data::rig_pose(0), cfg.encoding);
  NoGradScope ng;
  for (int t = 0; t < 5; ++t) {
    const Tensor z = oracle::random({20, cfg.d_model}, rng);
    const auto perm = oracle::random_permutation(20, rng);
    EXPECT_LE(oracle::max_abs_diff(decode_raypatch(dec, {z}, q, false),
                                   decode_raypatch(dec, {oracle::permute_rows(z, perm)}, q, false)),
              1e-9);
  }
}

TEST(RayPatchDecoder, BatchedDecodeMatchesSingleInEvalMode) {
  Rng rng(9);
  ModelConfig cfg = tiny(DecoderKind::raypatch);
  Model m(cfg, 9);
  const SceneLatent z1{oracle::random({16, 16}, rng)}, z2{oracle::random({16, 16}, rng)};
  const Tensor q1 = m.queries(data::rig_intrinsics(16, 16), data::rig_pose(0));
  const Tensor q2 = m.queries(data::rig_intrinsics(16, 16), data::rig_pose(90));
  NoGradScope ng;
  const auto both = m.decode_batch({&z1, &z2}, {q1, q2}, false);
  EXPECT_LE(oracle::max_abs_diff(both[0], m.decode(z1, q1, false)), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(both[1], m.decode(z2, q2, false)), 1e-12);
}

TEST(PixelDecoder, SinglePixel) {
  Rng rng(10);
  ModelConfig cfg = tiny(DecoderKind::pixel, 8, 8, 1);
  cfg.h = cfg.w = 1;
  PixelDecoder dec;
  dec = PixelDecoder(cfg, rng);
  const Tensor q = build_queries({1, 1, 1}, {1, 1, 0.5, 0.5}, CameraPose{}, cfg.encoding);
  EXPECT_EQ(q.dim(0), 1u);
  EXPECT_EQ(decode_pixel(dec, {oracle::random({3, 16}, rng)}, q).shape(), (Shape{3, 1, 1}));
}

TEST(PixelDecoder, SameRaySetAsRayPatchKOne) {
  const ModelConfig p = tiny(DecoderKind::pixel, 16, 16, 4);
  const ModelConfig r = tiny(DecoderKind::raypatch, 16, 16, 1);
  const Model mp(p, 1), mr(r, 1);
  const auto K = data::rig_intrinsics(16, 16);
  const auto pose = data::rig_pose(123);
  EXPECT_TRUE(oracle::bit_equal(mp.queries(K, pose), mr.queries(K, pose)));
  EXPECT_EQ(p.queries(), 256u);
}

TEST(PixelDecoder, RandomWeightsFiniteOutput) {
  Model m(tiny(DecoderKind::pixel), 11);
  const auto s = scene(11, 16, 16);
  NoGradScope ng;
  const Tensor y = m.render(m.encode({view_of(s.views[0])}, false), s.views[2].K, s.views[2].pose, false);
  EXPECT_EQ(y.shape(), (Shape{3, 16, 16}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Queries, InstrumentedRatioIsKSquared) {
  const auto s = scene(12, 32, 32);
  std::uint64_t pixel_q = 0;
  for (std::size_t k : {1, 2, 4, 8}) {
    ModelConfig cfg = tiny(k == 1 ? DecoderKind::pixel : DecoderKind::raypatch, 32, 32, k);
    Model m(cfg, 12);
    NoGradScope ng;
    const SceneLatent z = m.encode({view_of(s.views[0])}, false);
    const Tensor q = m.queries(s.views[1].K, s.views[1].pose);
    reset_counters();
    m.decode(z, q, false);
    const std::uint64_t per_call = counters().attention_queries / counters().attention_calls;
    if (k == 1) pixel_q = per_call;
    EXPECT_EQ(per_call * k * k, pixel_q) << k;
  }
  EXPECT_EQ(pixel_q, 1024u);
}

TEST(LossRgb, Cases) {
  Rng rng(13);
  const Tensor a = oracle::random({3, 4, 4}, rng), b = oracle::random({3, 4, 4}, rng);
  EXPECT_EQ(loss_rgb(a, a).item(), 0.0);
  Tensor shifted = a.clone();
  for (double& v : shifted.mutable_data()) v += 1.0;
  EXPECT_NEAR(loss_rgb(shifted, a).item(), 1.0, 1e-12);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(a.data()[i] - b.data()[i], 2);
  EXPECT_NEAR(loss_rgb(a, b).item(), s / 48.0, 1e-14);
  EXPECT_THROW(loss_rgb(a, Tensor({3, 4, 5})), ShapeError);
}

TEST(LossDepth, Cases) {
  Rng rng(14);
  const Tensor t = oracle::random({1, 4, 4}, rng, 0.5, 3.0);
  const std::vector<std::uint8_t> all(16, 1);
  EXPECT_EQ(loss_depth(t, t, all).item(), 0.0);
  Tensor scaled = t.clone();
  for (double& v : scaled.mutable_data()) v *= M_E;
  EXPECT_NEAR(loss_depth(scaled, t, all).item(), 1.0, 1e-12);
  EXPECT_THROW(loss_depth(t, t, std::vector<std::uint8_t>(16, 0)), NumericError);
  Tensor bad = t.clone();
  bad.at(3) = 0.0;
  EXPECT_THROW(loss_depth(bad, t, all), NumericError);
}

TEST(LossDepth, HalfMaskedMatchesLoopOracle) {
  Rng rng(15);
  const Tensor p = oracle::random({1, 6, 6}, rng, 0.2, 4.0), t = oracle::random({1, 6, 6}, rng, 0.2, 4.0);
  std::vector<std::uint8_t> mask(36);
  for (std::size_t i = 0; i < 36; ++i) mask[i] = i % 2;
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < 36; ++i)
    if (mask[i]) {
      s += std::abs(std::log(p.data()[i]) - std::log(t.data()[i]));
      ++n;
    }
  EXPECT_NEAR(loss_depth(p, t, mask).item(), s / n, 1e-14);
}

TEST(LossDepth, OutsideMaskHasZeroSensitivity) {
  Rng rng(16);
  Tensor p = oracle::random({1, 5, 5}, rng, 0.2, 4.0);
  Tensor t = oracle::random({1, 5, 5}, rng, 0.2, 4.0);
  std::vector<std::uint8_t> mask(25, 0);
  for (std::size_t i = 0; i < 25; i += 3) mask[i] = 1;
  const double base = loss_depth(p, t, mask).item();
  for (std::size_t i = 0; i < 25; ++i) {
    if (mask[i]) continue;
    Tensor q = p.clone();
    q.at(i) = rng.uniform(0.01, 100.0);
    Tensor u = t.clone();
    u.at(i) = INFINITY;
    EXPECT_EQ(loss_depth(q, u, mask).item(), base);
  }
  p.set_requires_grad(true);
  Graph g;
  {
    GraphScope scope(g);
    g.backward(loss_depth(p, t, mask));
  }
  for (std::size_t i = 0; i < 25; ++i)
    if (!mask[i]) {
      EXPECT_EQ(p.grad()[i], 0.0);
    }
}

TEST(LossTotal, Arithmetic) {
  EXPECT_EQ(loss_total(0.0, 0.0, 5.0), 0.0);
  EXPECT_EQ(loss_total(1.0, 1.0, 5.0), 6.0);
  EXPECT_NEAR(loss_total(0.2, 0.1, 5.0), 0.7, 1e-15);
  EXPECT_NEAR(loss_total(Tensor::scalar(0.2), Tensor::scalar(0.1)).item(), 0.7, 1e-15);
}

TEST(Psnr, Cases) {
  Rng rng(17);
  const Tensor a = oracle::random({3, 4, 4}, rng, 0, 1), b = oracle::random({3, 4, 4}, rng, 0, 1);
  EXPECT_EQ(psnr(a, a), 99.0);
  Tensor c = a.clone();
  for (double& v : c.mutable_data()) v += 0.1;
  EXPECT_NEAR(psnr(c, a), 20.0, 1e-9);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(a.data()[i] - b.data()[i], 2);
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(48.0 / s), 1e-12);
}

TEST(Training, ZeroLearningRateLeavesWeightsBitExact) {
  const ModelConfig cfg = tiny(DecoderKind::raypatch);
  Model m(cfg, 18);
  const data::Dataset d = data::make_dataset(2, 16, 16, 3);
  const auto ex = make_examples(d, cfg);
  TensorList before;
  for (const auto& nt : m.parameters()) before.push_back({nt.name, nt.tensor.clone()});
  OptimizerState opt;
  for (int i = 0; i < 3; ++i) train_step(m, {ex[i % 2]}, opt, 0.0);
  const TensorList after = m.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(oracle::bit_equal(before[i].tensor, after[i].tensor)) << before[i].name;
}

TEST(Training, OverfitSceneLossDecreasesEveryHundredSteps) {
  ModelConfig cfg = tiny(DecoderKind::raypatch);
  cfg.channels = 4;
  Model m(cfg, 19);
  const auto ex = make_examples(data::make_dataset(1, 16, 16, 4), cfg);
  TrainConfig tc;
  tc.steps = 500;
  tc.lr = 1e-3;
  tc.seed = 1;
  tc.log_every = 0;
  OptimizerState opt;
  const TrainResult r = train(m, ex, tc, opt);
  ASSERT_EQ(r.losses.size(), 500u);
  // Window means over consecutive 100-step blocks.
  for (std::size_t start = 0; start + 200 <= r.losses.size(); start += 100) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
      a += r.losses[start + i];
      b += r.losses[start + 100 + i];
    }
    EXPECT_LT(b, a) << "window starting at " << start;
  }
  EXPECT_LT(r.losses.back(), 0.5 * r.losses.front());
}

TEST(Training, SameSeedSameTrajectory) {
  const ModelConfig cfg = tiny(DecoderKind::pixel);
  const auto ex = make_examples(data::make_dataset(3, 16, 16, 5), cfg);
  auto run = [&] {
    Model m(cfg, 20);
    TrainConfig tc;
    tc.steps = 15;
    tc.lr = 1e-3;
    tc.seed = 7;
    tc.scenes_per_step = 2;
    OptimizerState opt;
    const auto r = train(m, ex, tc, opt);
    TensorList st = m.state();
    return std::pair{r.losses, st};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_TRUE(oracle::bit_equal(a.second[i].tensor, b.second[i].tensor));
}

TEST(Training, NanLossAbortsWithDiagnostic) {
  const ModelConfig cfg = tiny(DecoderKind::pixel);
  Model m(cfg, 21);
  auto ex = make_examples(data::make_dataset(1, 16, 16, 6), cfg);
  ex[0].targets[0].image.at(0) = NAN;
  OptimizerState opt;
  EXPECT_THROW(train_step(m, ex, opt, 1e-3), NumericError);
  EXPECT_EQ(opt.step, 0u);
}

// A failed step leaves parameters and running statistics as they were.
TEST(Training, FailedStepRestoresState) {
  const ModelConfig cfg = tiny(DecoderKind::raypatch);
  Model m(cfg, 22);
  auto ex = make_examples(data::make_dataset(1, 16, 16, 6), cfg);
  ex[0].targets[0].image.at(0) = NAN;
  TensorList before;
  for (const auto& t : m.state()) before.push_back({t.name, t.tensor.clone()});
  ASSERT_FALSE(m.buffers().empty());
  OptimizerState opt;
  EXPECT_THROW(train_step(m, ex, opt, 1e-3), NumericError);
  const TensorList after = m.state();
  ASSERT_EQ(after.size(), before.size());
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_TRUE(oracle::bit_equal(after[i].tensor, before[i].tensor)) << after[i].name;
}

TEST(Training, EndToEndGradCheck) {
  for (const auto& e : run_gradcheck_suite(3, 1)) {
    if (e.name.rfind("model.", 0) == 0) {
      EXPECT_LE(e.max_error, 1e-4) << e.name;
    }
  }
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  Tensor p({2}, {0.0, 0.0}, true);
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm({{"p", p}}, 1.0), 5.0);
  EXPECT_NEAR(std::hypot(p.grad()[0], p.grad()[1]), 1.0, 1e-6);
}

TEST(Optimizer, FirstAdamStepMovesByLr) {
  Tensor p({2}, {1.0, -1.0}, true);
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -2.0;
  OptimizerState st;
  adam_update({{"p", p}}, st, 0.01);
  EXPECT_NEAR(p.data()[0], 0.99, 1e-9);
  EXPECT_NEAR(p.data()[1], -0.99, 1e-9);
}

TEST(Optimizer, LinearDecaySchedule) {
  const LrSchedule s{1e-3, 1e-4, true, 11};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-3);
  EXPECT_NEAR(s.at(5), 5.5e-4, 1e-15);
  EXPECT_DOUBLE_EQ(s.at(10), 1e-4);
  EXPECT_DOUBLE_EQ((LrSchedule{1e-3, 1e-4, false, 11}.at(7)), 1e-3);
}

TEST(Config, Validation) {
  ModelConfig c;
  c.k = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.k = 4;
  c.channels = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c.channels = 3;
  c.h = 36;
  c.downsamplings = 3;  // 36 is not a multiple of 8
  EXPECT_THROW(c.validate(), ConfigError);
  c.downsamplings = 2;
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(parse_decoder("voxel"), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  ModelConfig c = tiny(DecoderKind::raypatch, 24, 40, 8, 4);
  c.encoding.include_raw = true;
  c.downsamplings = 3;
  EXPECT_EQ(to_json(model_config_from_json(to_json(c))), to_json(c));
}
