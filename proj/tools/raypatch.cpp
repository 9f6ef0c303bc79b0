// raypatch: cost reports, gradient checks, dataset synthesis, toy training,
// rendering, relative benchmarks and checkpoint verification.
//
// Exit codes: 0 success, 1 check failure, 2 bad arguments, 3 numeric failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "raypatch/checkpoint.hpp"
#include "raypatch/costmodel.hpp"
#include "raypatch/data_synth.hpp"
#include "raypatch/gradcheck_suite.hpp"
#include "raypatch/image_io.hpp"
#include "raypatch/train.hpp"

namespace {

using namespace raypatch;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kBadArgs = 2;
constexpr int kNumeric = 3;

std::string fmt(double v) { return cost::format_double(v); }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// --seed, else RAYPATCH_SEED, else 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("RAYPATCH_SEED")) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(env, &pos);
      if (pos == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("RAYPATCH_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

void write_text(const std::string& path, const std::string& text) { write_file(path, text); }

// ---------------------------------------------------------------------------

struct CostArgs {
  std::string family;
  std::uint64_t height = 120, width = 160, patch = 1, views = 1, heads = 8, dk = 64, downsamplings = 3;
  std::optional<std::uint64_t> nl;
  std::string precision = "float32";
  std::string sweep;
  std::vector<std::uint64_t> values;
  std::string out, format;
};

std::uint64_t precision_bytes(const std::string& p) {
  if (p == "float16" || p == "fp16" || p == "2") return 2;
  if (p == "float32" || p == "fp32" || p == "4") return 4;
  if (p == "float64" || p == "fp64" || p == "8") return 8;
  throw ConfigError("unknown precision '" + p + "' (expected float16, float32, float64)");
}

int cmd_cost(const CostArgs& a) {
  cost::CostConfig cfg;
  cfg.family = cost::parse_family(a.family);
  cfg.views = a.views;
  cfg.h = a.height;
  cfg.w = a.width;
  cfg.k = a.patch;
  cfg.heads = a.heads;
  cfg.d_k = a.dk;
  cfg.n_l = a.nl;
  cfg.downsamplings = a.downsamplings;
  cfg.bytes_per_elem = precision_bytes(a.precision);
  cfg.validate();

  std::vector<cost::CostReport> rows;
  if (a.sweep.empty()) {
    if (!a.values.empty()) throw ConfigError("--values requires --sweep");
    rows.push_back(cost::compute_report(cfg));
  } else {
    const auto var = cost::parse_sweep_variable(a.sweep);
    std::vector<std::uint64_t> values = a.values;
    if (values.empty()) {
      switch (var) {
        case cost::SweepVariable::resolution: values = {cfg.h, 2 * cfg.h, 4 * cfg.h, 8 * cfg.h}; break;
        case cost::SweepVariable::patch:
          for (std::uint64_t k = 1; k <= 16; k *= 2)
            if (cfg.h % k == 0 && cfg.w % k == 0) values.push_back(k);
          break;
        case cost::SweepVariable::views: values = {1, 2, 3, 4, 5}; break;
      }
    }
    rows = cost::sweep(cfg, var, values);
  }

  std::cout << "# attention cost (1 MAC = 2 FLOPs; peak = one n_q x n_kv logit matrix per head)\n";
  for (const auto& r : rows) {
    std::cout << cost::to_string(r.cfg.family) << " N=" << r.cfg.views << " " << r.cfg.h << "x" << r.cfg.w
              << " k=" << r.cfg.k << " heads=" << r.cfg.heads << " d_k=" << r.cfg.d_k;
    if (r.cfg.n_l) std::cout << " n_l=" << *r.cfg.n_l;
    std::cout << " n_q_dec=" << r.n_q_decoder << " n_kv_dec=" << r.n_kv_decoder
              << " attn_flops_dec=" << fmt(r.attn_flops_decoder) << " peak_bytes=" << fmt(r.peak_attn_bytes)
              << " peak=" << fixed(cost::gib(r.peak_attn_bytes), 3) << " GiB\n";
  }
  if (!a.out.empty()) {
    std::string format = a.format;
    if (format.empty()) format = a.out.size() >= 5 && a.out.substr(a.out.size() - 5) == ".json" ? "json" : "csv";
    std::ostringstream os;
    if (format == "csv") {
      cost::write_csv(os, rows);
    } else if (format == "json") {
      json j = {{"convention", "1 MAC = 2 FLOPs"}, {"rows", json::array()}};
      for (const auto& r : rows) j["rows"].push_back(cost::to_json(r));
      os << j.dump(2) << '\n';
    } else {
      throw ConfigError("unknown --format '" + format + "' (expected csv or json)");
    }
    write_text(a.out, os.str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double step = 1e-6;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.seeds == 0) throw ConfigError("--seeds must be >= 1");
  if (!(a.tolerance >= 0.0)) throw ConfigError("--tolerance must be >= 0");
  const std::uint64_t seed = resolve_seed(a.seed);
  const auto results = run_gradcheck_suite(seed, a.seeds, a.step);
  std::cout << "# gradient check: seeds " << seed << ".." << seed + a.seeds - 1 << ", step " << fmt(a.step)
            << ", tolerance " << fmt(a.tolerance) << "\n";
  std::vector<std::string> offenders;
  for (const auto& e : results) {
    const bool ok = e.max_error <= a.tolerance;
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %.6e %s\n", e.name.c_str(), e.max_error, ok ? "ok" : "FAIL");
    std::cout << line;
    if (!ok) offenders.push_back(e.name);
  }
  if (!offenders.empty()) {
    std::cout << "FAILED:";
    for (const auto& n : offenders) std::cout << ' ' << n;
    std::cout << '\n';
    return kCheckFailed;
  }
  std::cout << "all " << results.size() << " checks within tolerance\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct DatasetArgs {
  std::uint64_t scenes = 200;
  std::size_t height = 32, width = 32;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_dataset(const DatasetArgs& a) {
  if (a.scenes == 0) throw ConfigError("--scenes must be >= 1");
  const std::uint64_t seed = resolve_seed(a.seed);
  const data::Dataset d = data::make_dataset(a.scenes, a.height, a.width, seed);
  data::write_dataset(a.out, d);
  std::cout << "wrote " << a.out << ": " << a.scenes << " scenes x " << data::kViewsPerScene << " views, " << a.height
            << "x" << a.width << ", seed " << seed << ", " << data::dataset_file_size(d.header) << " bytes\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string dataset;
  std::string decoder = "raypatch";
  std::size_t patch = 4;
  std::uint64_t steps = 1000;
  double lr = 1e-4;
  std::optional<double> lr_final;
  bool lr_decay = false;
  std::optional<std::uint64_t> seed;
  std::string out_ckpt;
  std::string log_csv;
  bool depth = false;
  std::size_t scenes_per_step = 1;
  std::size_t d_model = 64, heads = 4, features = 128;
  std::uint64_t log_every = 50;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  bool quiet = false;
};

json train_run_config(const TrainArgs& a, std::uint64_t seed, const ModelConfig& cfg) {
  return {{"command", "train"},
          {"dataset", a.dataset},
          {"decoder", a.decoder},
          {"patch", a.patch},
          {"steps", a.steps},
          {"lr", a.lr},
          {"lr_final", a.lr_final.value_or(a.lr)},
          {"lr_decay", a.lr_decay},
          {"seed", seed},
          {"depth", a.depth},
          {"scenes_per_step", a.scenes_per_step},
          {"log_every", a.log_every},
          {"weight_decay", a.weight_decay},
          {"beta1", a.beta1},
          {"model", to_json(cfg)}};
}

int cmd_train(const TrainArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  const data::Dataset ds = data::read_dataset(a.dataset);
  ModelConfig cfg;
  cfg.h = ds.header.h;
  cfg.w = ds.header.w;
  cfg.decoder = parse_decoder(a.decoder);
  cfg.k = cfg.decoder == DecoderKind::raypatch ? a.patch : 1;
  cfg.channels = a.depth ? 4 : 3;
  cfg.d_model = a.d_model;
  cfg.heads = a.heads;
  cfg.features = a.features;
  cfg.validate();

  TrainConfig tc;
  tc.steps = a.steps;
  tc.lr = a.lr;
  tc.lr_final = a.lr_final.value_or(a.lr);
  tc.lr_decay = a.lr_decay;
  tc.seed = seed;
  tc.scenes_per_step = a.scenes_per_step;
  tc.log_every = a.log_every;
  tc.adam.weight_decay = a.weight_decay;
  tc.adam.beta1 = a.beta1;
  if (!(a.lr >= 0.0)) throw ConfigError("--lr must be >= 0");

  const json run = train_run_config(a, seed, cfg);
  Model model(cfg, seed);
  const auto examples = make_examples(ds, cfg);
  OptimizerState opt;

  std::ostringstream log;
  log << "step,loss,psnr\n";
  auto flush_log = [&] {
    if (!a.log_csv.empty()) write_text(a.log_csv, log.str());
  };
  try {
    train(model, examples, tc, opt, [&](const LogRow& r) {
      log << r.step << ',' << fmt(r.loss) << ',' << fmt(r.psnr) << '\n';
      if (!a.quiet) std::cout << "step " << r.step << " loss " << fixed(r.loss, 6) << " psnr " << fixed(r.psnr, 3) << std::endl;
    });
  } catch (const NumericError& e) {
    flush_log();
    save_checkpoint(a.out_ckpt, make_checkpoint(model, seed, opt.step, run));
    std::cerr << "numeric failure: " << e.what() << "\nlast good checkpoint (step " << opt.step << ") written to "
              << a.out_ckpt << '\n';
    return kNumeric;
  }
  flush_log();
  save_checkpoint(a.out_ckpt, make_checkpoint(model, seed, opt.step, run));
  std::cout << "wrote " << a.out_ckpt << " (" << model.parameter_count() << " parameters, " << opt.step << " steps)\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, dataset, out;
};

int cmd_eval(const EvalArgs& a) {
  const CheckpointData c = load_checkpoint(a.ckpt);
  Model model = model_from_checkpoint(c);
  const data::Dataset ds = data::read_dataset(a.dataset);
  const EvalResult r = evaluate(model, make_examples(ds, model.config()));
  std::cout << "psnr " << fixed(r.psnr, 4) << " dB over " << r.views << " target views (mse " << fmt(r.mse) << ")\n";
  if (!a.out.empty()) {
    const json j = {{"command", "eval"}, {"ckpt", a.ckpt}, {"dataset", a.dataset}, {"psnr", r.psnr},
                    {"mse", r.mse},      {"views", r.views}};
    write_text(a.out, j.dump(2) + "\n");
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string ckpt, dataset;
  std::size_t scene = 0;
  double angle = 0.0;
  std::string out_ppm, out_depth_pgm;
};

int cmd_render(const RenderArgs& a) {
  const CheckpointData c = load_checkpoint(a.ckpt);
  Model model = model_from_checkpoint(c);
  const data::Dataset ds = data::read_dataset(a.dataset);
  if (a.scene >= ds.scenes.size()) {
    throw ConfigError("scene " + std::to_string(a.scene) + " out of range (dataset has " +
                      std::to_string(ds.scenes.size()) + ")");
  }
  const ModelConfig& cfg = model.config();
  if (!a.out_depth_pgm.empty() && cfg.channels == 3) throw ConfigError("model has no depth head (trained without --depth)");
  if (a.out_ppm.empty() && a.out_depth_pgm.empty()) throw ConfigError("nothing to write: give --out-ppm and/or --out-depth-pgm");
  const TrainExample ex = make_example(ds.scenes[a.scene], cfg);
  const CameraIntrinsics K = ds.scenes[a.scene].views[0].K;
  const CameraPose pose = data::rig_pose(a.angle);
  NoGradScope no_grad;
  const SceneLatent z = model.encode(ex.inputs, false);
  const PredictionSplit s = split_prediction(model.render(z, K, pose, false));
  if (!a.out_ppm.empty()) write_file(a.out_ppm, encode_ppm(s.rgb));
  if (!a.out_depth_pgm.empty()) write_file(a.out_depth_pgm, encode_depth_pgm(s.depth));
  for (std::size_t i = 0; i < data::kViewsPerScene; ++i) {
    if (s.rgb.defined() && std::abs(data::kViewAngles[i] - a.angle) < 1e-12) {
      std::cout << "psnr vs stored view " << i << ": " << fixed(psnr(clamp01(s.rgb), ds.scenes[a.scene].views[i].image), 4)
                << " dB\n";
    }
  }
  std::cout << "rendered scene " << a.scene << " at " << fmt(a.angle) << " deg, " << cfg.h << "x" << cfg.w << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::size_t height = 128, width = 128;
  std::vector<std::size_t> patches{2, 4, 8, 16};
  std::size_t repeats = 5;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 1;
};

struct BenchRow {
  std::string decoder;
  std::size_t k = 1;
  double median_ms = 0.0;
  double speedup = 1.0;
  std::size_t queries = 0;
  double checksum = 0.0;
};

int cmd_bench(const BenchArgs& a) {
  if (a.repeats == 0) throw ConfigError("--repeats must be >= 1");
  if (a.threads != 1) throw ConfigError("only --threads 1 is supported");
  const std::uint64_t seed = resolve_seed(a.seed);
  const data::SceneViews scene = data::render_scene(data::generate_scene(seed), a.height, a.width);
  std::vector<std::size_t> ks{1};
  ks.insert(ks.end(), a.patches.begin(), a.patches.end());
  std::vector<BenchRow> rows;
  for (std::size_t k : ks) {
    ModelConfig cfg;
    cfg.h = a.height;
    cfg.w = a.width;
    cfg.decoder = k == 1 ? DecoderKind::pixel : DecoderKind::raypatch;
    cfg.k = k;
    cfg.validate();
    Model model(cfg, seed);
    const TrainExample ex = make_example(scene, cfg);
    NoGradScope no_grad;
    const SceneLatent z = model.encode(ex.inputs, false);
    const Tensor& q = ex.targets[0].queries;
    Tensor out = model.decode(z, q, false);  // warm-up
    std::vector<double> times;
    for (std::size_t r = 0; r < a.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      out = model.decode(z, q, false);
      times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    BenchRow row;
    row.decoder = to_string(cfg.decoder);
    row.k = k;
    row.median_ms = times.size() % 2 ? times[times.size() / 2]
                                     : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    row.queries = q.dim(0);
    for (double v : out.data()) row.checksum += v;
    rows.push_back(row);
  }
  for (auto& r : rows) r.speedup = rows[0].median_ms / r.median_ms;

  std::cout << "# decoder forward wall time at " << a.height << "x" << a.width << ", median of " << a.repeats
            << " runs, 1 thread\n# relative numbers only: absolute times are specific to this machine and not "
               "comparable to published fps\n";
  std::cout << "decoder   k   queries   median_ms   speedup   checksum\n";
  json j = {{"command", "bench"},
            {"height", a.height},
            {"width", a.width},
            {"repeats", a.repeats},
            {"seed", seed},
            {"note", "wall-clock on this machine; relative speedups only, not comparable to published fps"},
            {"rows", json::array()}};
  for (const auto& r : rows) {
    char line[200];
    std::snprintf(line, sizeof line, "%-8s %3zu %9zu %11.3f %9.2f   %.17g\n", r.decoder.c_str(), r.k, r.queries,
                  r.median_ms, r.speedup, r.checksum);
    std::cout << line;
    j["rows"].push_back({{"decoder", r.decoder},
                         {"k", r.k},
                         {"queries", r.queries},
                         {"median_ms", r.median_ms},
                         {"speedup", r.speedup},
                         {"checksum", r.checksum}});
  }
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string ckpt;
};

int cmd_verify_ckpt(const VerifyArgs& a) {
  const std::string original = read_file(a.ckpt);
  std::istringstream is(original, std::ios::binary);
  const CheckpointData c = read_checkpoint(is);
  const Model model = model_from_checkpoint(c);
  CheckpointData again;
  again.meta = c.meta;
  again.tensors = model.state();
  const std::string resaved = checkpoint_bytes(again);
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& stored = c.tensors[i].tensor;
    const auto& live = again.tensors[i].tensor;
    if (c.tensors[i].name != again.tensors[i].name || stored.shape() != live.shape() ||
        !std::equal(stored.data().begin(), stored.data().end(), live.data().begin())) {
      ++mismatched;
    }
  }
  std::cout << a.ckpt << ": " << c.tensors.size() << " tensors, " << model.parameter_count() << " parameters\n";
  if (resaved != original || mismatched != 0) {
    std::cout << "FAIL: re-serialized checkpoint differs (" << mismatched << " tensors mismatched)\n";
    return kCheckFailed;
  }
  std::cout << "ok: load -> save is byte-identical and every weight round-trips bit-exact\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"raypatch: patch-level ray queries for attention-based view synthesis, toy scale"};
  app.require_subcommand(1);

  CostArgs cost_args;
  auto* cost = app.add_subcommand("cost", "analytic attention FLOPs and peak memory");
  cost->add_option("--family", cost_args.family, "srt, osrt, define, rp-srt, rp-osrt, rp-define")->required();
  cost->add_option("--height", cost_args.height, "target height")->capture_default_str();
  cost->add_option("--width", cost_args.width, "target width")->capture_default_str();
  cost->add_option("--patch", cost_args.patch, "ray-patch size k")->capture_default_str();
  cost->add_option("--views", cost_args.views, "input views N")->capture_default_str();
  cost->add_option("--heads", cost_args.heads, "attention heads")->capture_default_str();
  cost->add_option("--dk", cost_args.dk, "per-head key dimension")->capture_default_str();
  cost->add_option("--nl", cost_args.nl, "latent count (define families)");
  cost->add_option("--downsamplings", cost_args.downsamplings, "encoder stride-2 stages")->capture_default_str();
  cost->add_option("--precision", cost_args.precision, "float16, float32, float64")->capture_default_str();
  cost->add_option("--sweep", cost_args.sweep, "resolution, patch or views");
  cost->add_option("--values", cost_args.values, "sweep values (heights, patch sizes or view counts)")->delimiter(',');
  cost->add_option("--out", cost_args.out, "write CSV (or JSON for .json) report");
  cost->add_option("--format", cost_args.format, "csv or json");

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of all ops, blocks and the model");
  gc->add_option("--seed", gc_args.seed, "first seed");
  gc->add_option("--seeds", gc_args.seeds, "number of seeds")->capture_default_str();
  gc->add_option("--tolerance", gc_args.tolerance, "max relative error")->capture_default_str();
  gc->add_option("--step", gc_args.step, "finite-difference step")->capture_default_str();

  DatasetArgs ds_args;
  auto* ds = app.add_subcommand("dataset", "synthesize a procedural multi-view dataset");
  ds->add_option("--scenes", ds_args.scenes, "scene count")->capture_default_str();
  ds->add_option("--height", ds_args.height, "image height")->capture_default_str();
  ds->add_option("--width", ds_args.width, "image width")->capture_default_str();
  ds->add_option("--seed", ds_args.seed, "dataset seed");
  ds->add_option("--out", ds_args.out, "output .rpds file")->required();

  TrainArgs tr_args;
  auto* tr = app.add_subcommand("train", "train the toy model");
  tr->add_option("--dataset", tr_args.dataset, "training dataset")->required();
  tr->add_option("--decoder", tr_args.decoder, "pixel or raypatch")->capture_default_str();
  tr->add_option("--patch", tr_args.patch, "ray-patch size k")->capture_default_str();
  tr->add_option("--steps", tr_args.steps, "optimizer steps")->capture_default_str();
  tr->add_option("--lr", tr_args.lr, "learning rate")->capture_default_str();
  tr->add_option("--lr-final", tr_args.lr_final, "final learning rate with --lr-decay");
  tr->add_flag("--lr-decay", tr_args.lr_decay, "linear learning-rate decay");
  tr->add_option("--seed", tr_args.seed, "initialization and sampling seed");
  tr->add_option("--out-ckpt", tr_args.out_ckpt, "checkpoint to write")->required();
  tr->add_option("--log-csv", tr_args.log_csv, "step,loss,psnr log");
  tr->add_flag("--depth", tr_args.depth, "add a log-depth output channel");
  tr->add_option("--scenes-per-step", tr_args.scenes_per_step, "scenes per batch")->capture_default_str();
  tr->add_option("--d-model", tr_args.d_model, "token width")->capture_default_str();
  tr->add_option("--heads", tr_args.heads, "attention heads")->capture_default_str();
  tr->add_option("--features", tr_args.features, "ray-patch feature channels f")->capture_default_str();
  tr->add_option("--log-every", tr_args.log_every, "steps per log row")->capture_default_str();
  tr->add_option("--weight-decay", tr_args.weight_decay, "decoupled weight decay")->capture_default_str();
  tr->add_option("--beta1", tr_args.beta1, "Adam beta1")->capture_default_str();
  tr->add_flag("--quiet", tr_args.quiet, "no progress output");

  EvalArgs ev_args;
  auto* ev = app.add_subcommand("eval", "mean PSNR over a dataset's target views");
  ev->add_option("--ckpt", ev_args.ckpt, "checkpoint")->required();
  ev->add_option("--dataset", ev_args.dataset, "dataset")->required();
  ev->add_option("--out", ev_args.out, "JSON report");

  RenderArgs rd_args;
  auto* rd = app.add_subcommand("render", "render a scene from a checkpoint");
  rd->add_option("--ckpt", rd_args.ckpt, "checkpoint")->required();
  rd->add_option("--dataset", rd_args.dataset, "dataset")->required();
  rd->add_option("--scene", rd_args.scene, "scene index")->capture_default_str();
  rd->add_option("--angle", rd_args.angle, "camera angle on the rig, degrees")->capture_default_str();
  rd->add_option("--out-ppm", rd_args.out_ppm, "binary PPM output");
  rd->add_option("--out-depth-pgm", rd_args.out_depth_pgm, "16-bit PGM depth output (mm)");

  BenchArgs bn_args;
  auto* bn = app.add_subcommand("bench", "relative decoder speed, pixel vs ray-patch");
  bn->add_option("--height", bn_args.height, "image height")->capture_default_str();
  bn->add_option("--width", bn_args.width, "image width")->capture_default_str();
  bn->add_option("--patch-list", bn_args.patches, "patch sizes")->delimiter(',');
  bn->add_option("--repeats", bn_args.repeats, "timed runs per decoder")->capture_default_str();
  bn->add_option("--seed", bn_args.seed, "weights and scene seed");
  bn->add_option("--threads", bn_args.threads, "worker threads (1 only)")->capture_default_str();
  bn->add_option("--out", bn_args.out, "JSON report");

  VerifyArgs vf_args;
  auto* vf = app.add_subcommand("verify-ckpt", "check checkpoint load/save round trip");
  vf->add_option("--ckpt", vf_args.ckpt, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadArgs;
  }

  try {
    if (cost->parsed()) return cmd_cost(cost_args);
    if (gc->parsed()) return cmd_gradcheck(gc_args);
    if (ds->parsed()) return cmd_dataset(ds_args);
    if (tr->parsed()) return cmd_train(tr_args);
    if (ev->parsed()) return cmd_eval(ev_args);
    if (rd->parsed()) return cmd_render(rd_args);
    if (bn->parsed()) return cmd_bench(bn_args);
    if (vf->parsed()) return cmd_verify_ckpt(vf_args);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadArgs;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadArgs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kBadArgs;
}
