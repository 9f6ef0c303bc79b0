#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "raypatch/data_synth.hpp"
#include "raypatch/model.hpp"

namespace raypatch {

struct TrainConfig {
  std::uint64_t steps = 1000;
  double lr = 1e-4;
  double lr_final = 0.0;
  bool lr_decay = false;
  std::uint64_t seed = 0;
  std::size_t scenes_per_step = 1;
  double lambda_rgb = 5.0;
  AdamConfig adam;
  std::uint64_t log_every = 50;

  LrSchedule schedule() const { return {lr, lr_final, lr_decay, steps}; }
};

// Input-role views become encoder inputs, target-role views become decoded
// targets. Ray features and queries are cached.
inline TrainExample make_example(const data::SceneViews& scene, const ModelConfig& cfg) {
  TrainExample ex;
  for (const data::ViewSample& v : scene.views) {
    if (v.role == data::Role::input) {
      InputView in{v.image, v.K, v.pose, ray_feature_map(cfg.h, cfg.w, v.K, v.pose, cfg.encoding)};
      ex.inputs.push_back(std::move(in));
    } else {
      TargetView t{v.image, v.depth, v.mask, v.K, v.pose,
                   build_queries({cfg.h, cfg.w, cfg.patch()}, v.K, v.pose, cfg.encoding)};
      ex.targets.push_back(std::move(t));
    }
  }
  if (ex.inputs.size() != cfg.views) {
    throw ConfigError("make_example: scene has " + std::to_string(ex.inputs.size()) + " input views, model expects " +
                      std::to_string(cfg.views));
  }
  return ex;
}

inline std::vector<TrainExample> make_examples(const data::Dataset& d, const ModelConfig& cfg) {
  if (d.header.h != cfg.h || d.header.w != cfg.w) {
    throw ConfigError("dataset is " + std::to_string(d.header.h) + "x" + std::to_string(d.header.w) +
                      ", model expects " + std::to_string(cfg.h) + "x" + std::to_string(cfg.w));
  }
  std::vector<TrainExample> out;
  out.reserve(d.scenes.size());
  for (const auto& s : d.scenes) out.push_back(make_example(s, cfg));
  return out;
}

// Window means over the steps since the previous row.
struct LogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double psnr = 0.0;
};

struct TrainResult {
  std::vector<double> losses;  // every step
  std::vector<LogRow> log;
};

// Scenes are drawn with replacement from a stream seeded by cfg.seed.
inline TrainResult train(Model& model, const std::vector<TrainExample>& examples, const TrainConfig& cfg,
                         OptimizerState& opt, const std::function<void(const LogRow&)>& on_log = {}) {
  if (examples.empty()) throw ConfigError("train: no training scenes");
  if (cfg.scenes_per_step == 0) throw ConfigError("train: scenes_per_step must be >= 1");
  opt.cfg = cfg.adam;
  Rng sampler(cfg.seed ^ 0x5EEDF00DULL);
  const LrSchedule lr = cfg.schedule();
  TrainResult r;
  double win_loss = 0.0, win_psnr = 0.0;
  std::uint64_t win = 0;
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    std::vector<TrainExample> batch;
    for (std::size_t b = 0; b < cfg.scenes_per_step; ++b) batch.push_back(examples[sampler.uniform_int(examples.size())]);
    const StepResult s = train_step(model, batch, opt, lr.at(step), cfg.lambda_rgb);
    r.losses.push_back(s.loss);
    win_loss += s.loss;
    win_psnr += s.psnr;
    ++win;
    if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      LogRow row{step + 1, win_loss / static_cast<double>(win), win_psnr / static_cast<double>(win)};
      r.log.push_back(row);
      if (on_log) on_log(row);
      win_loss = win_psnr = 0.0;
      win = 0;
    }
  }
  return r;
}

inline Tensor clamp01(const Tensor& x) {
  Tensor y = x.clone();
  y.set_requires_grad(false);
  for (double& v : y.mutable_data()) v = std::min(1.0, std::max(0.0, v));
  return y;
}

struct EvalResult {
  double psnr = 0.0;  // mean over target views, predictions clamped to [0, 1]
  double mse = 0.0;
  std::size_t views = 0;
};

// Inference mode: running batch-norm statistics, no graph.
inline EvalResult evaluate(Model& model, const std::vector<TrainExample>& examples) {
  NoGradScope no_grad;
  EvalResult r;
  for (const TrainExample& ex : examples) {
    const SceneLatent z = model.encode(ex.inputs, false);
    for (const TargetView& t : ex.targets) {
      const Tensor q = t.queries.defined() ? t.queries : model.queries(t.K, t.pose);
      const PredictionSplit s = split_prediction(model.decode(z, q, false));
      if (!s.rgb.defined()) continue;
      const Tensor rgb = clamp01(s.rgb);
      r.psnr += psnr(rgb, t.image);
      r.mse += mse(rgb, t.image);
      ++r.views;
    }
  }
  if (r.views > 0) {
    r.psnr /= static_cast<double>(r.views);
    r.mse /= static_cast<double>(r.views);
  }
  return r;
}

}  // namespace raypatch
