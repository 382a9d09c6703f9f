// Command-line entry point: training, denoising, verification, benchmarking,
// and kernel inspection for the malleable-convolution denoising stack.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "malle/config.hpp"
#include "malle/data.hpp"
#include "malle/malleconv.hpp"
#include "malle/metrics.hpp"
#include "malle/model.hpp"
#include "malle/train.hpp"
#include "malle/verify.hpp"

namespace fs = std::filesystem;
using namespace malle;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int g_threads = 1;  // recorded in reports; ops currently run single-threaded

ModelGraph build_model(const RunConfig& cfg) {
  const std::string arch = cfg.gets("model.arch");
  if (arch == "dncnn")
    return model::build_dncnn(cfg.geti("model.depth"), cfg.geti("model.channels"),
                              cfg.geti("model.malle_mid_k"), cfg.geti("model.in_channels"));
  if (arch == "mallenet")
    return model::build_mallenet(cfg.geti("model.channels"), cfg.geti("model.blocks"),
                                 cfg.geti("model.k"), cfg.geti("model.levels"),
                                 cfg.geti("model.in_channels"));
  throw ConfigError("config: model.arch must be dncnn or mallenet, got '" + arch + "'");
}

train::TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed) {
  train::TrainConfig tc;
  tc.iterations = cfg.geti("train.iterations");
  tc.batch = cfg.geti("train.batch");
  tc.patch = cfg.geti("train.patch");
  tc.lr = float(cfg.getf("train.lr"));
  tc.beta1 = float(cfg.getf("train.beta1"));
  tc.beta2 = float(cfg.getf("train.beta2"));
  tc.eps = float(cfg.getf("train.eps"));
  tc.sigmas = cfg.get_floats("train.sigma");
  tc.blind = cfg.getb("train.blind");
  tc.ckpt_every = cfg.geti("train.ckpt_every");
  tc.eval_every = cfg.geti("train.eval_every");
  tc.clip_norm = float(cfg.getf("train.clip_norm"));
  tc.seed = seed;
  return tc;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::uint64_t seed,
              const std::string& resume) {
  RunConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/effective_config.txt") << cfg.effective();

  ModelGraph m = build_model(cfg);
  Rng init_rng(seed);
  model::init_weights(m, init_rng);
  auto corpus = data::synth_corpus(cfg.geti("data.corpus_images"), cfg.geti("data.corpus_size"),
                                   seed, cfg.geti("model.in_channels"));
  auto val = data::synth_corpus(cfg.geti("data.val_images"), cfg.geti("data.corpus_size"),
                                seed + 777, cfg.geti("model.in_channels"));
  train::TrainConfig tc = train_config(cfg, seed);
  train::TrainResult r = train::train(m, corpus, val, tc, out_dir, resume);
  std::printf("trained %lld iterations; best PSNR %.4f dB; checkpoints in %s\n",
              (long long)r.iterations_run, r.best_psnr, out_dir.c_str());
  return kExitOk;
}

int cmd_denoise(const std::string& model_path, const std::string& in_path,
                const std::string& out_path, double sigma, std::uint64_t seed,
                const std::string& clean_path) {
  ModelGraph m = model::load_model(model_path);
  Image input = data::load_image(in_path);
  Image noisy = input;
  const Image* clean = nullptr;
  Image clean_img;
  if (sigma > 0.0) {
    noisy = data::add_awgn(input, {float(sigma), seed});
    clean = &input;
  }
  if (!clean_path.empty()) {
    clean_img = data::load_image(clean_path);
    clean = &clean_img;
  }
  Tensor out = model::infer(m, noisy.to_tensor());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0f, 1.0f);
  Image den = Image::from_tensor(out);
  data::save_image(den, out_path);
  if (clean) {
    std::printf("noisy PSNR    %.4f dB\n", metrics::psnr(noisy, *clean));
    std::printf("denoised PSNR %.4f dB\n", metrics::psnr(den, *clean));
  }
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

int cmd_verify(const std::string& suite, int cases) {
  bool all_pass = true;
  if (suite == "oracle" || suite == "all") {
    auto r = verify::run_oracle_suite(cases, 7, true);
    std::printf("oracle suite: %d cases, max_abs_diff=%.3g -> %s\n", r.cases, r.max_abs_diff,
                r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (suite == "grad" || suite == "all") {
    auto checks = verify::run_grad_suite(5, true);
    bool pass = true;
    for (const auto& c : checks) pass = pass && c.pass;
    std::printf("grad suite: %zu checks -> %s\n", checks.size(), pass ? "PASS" : "FAIL");
    all_pass = all_pass && pass;
  }
  return all_pass ? kExitOk : kExitNumeric;
}

int cmd_bench(const std::string& config_path, const std::string& out_csv) {
  RunConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  const int h = cfg.geti("bench.h"), w = cfg.geti("bench.w"), c = cfg.geti("bench.c");
  const int reps = cfg.geti("bench.reps");
  metrics::BenchReport report;
  Rng rng(42);

  for (int k : {1, 3}) {
    Tensor x = verify::random_tensor(Shape{1, h, w, c}, rng);
    KernelGrid g = verify::random_grid(std::max(1, h / 8), std::max(1, w / 8), c, k, rng);

    metrics::BenchRow fused;
    fused.name = "slice_fused";
    fused.h = h; fused.w = w; fused.c = c; fused.k = k;
    fused.flops = metrics::CostModel::fused_slice(h, w, c, k);
    fused.peak_aux_elems =
        metrics::measure_peak_aux([&] { (void)malleconv::slice_apply_fused_fwd(x, g); });
    auto ts = metrics::bench_latency([&] { (void)malleconv::slice_apply_fused_fwd(x, g); }, reps);
    fused.median_ms = ts.median_ms;
    fused.p90_ms = ts.p90_ms;
    report.rows.push_back(fused);

    metrics::BenchRow naive;
    naive.name = "slice_naive";
    naive.h = h; naive.w = w; naive.c = c; naive.k = k;
    naive.flops = metrics::CostModel::fused_slice(h, w, c, k);  // same arithmetic, more traffic
    naive.peak_aux_elems =
        metrics::measure_peak_aux([&] { (void)malleconv::slice_apply_naive(x, g); });
    ts = metrics::bench_latency([&] { (void)malleconv::slice_apply_naive(x, g); }, reps);
    naive.median_ms = ts.median_ms;
    naive.p90_ms = ts.p90_ms;
    report.rows.push_back(naive);

    metrics::BenchRow hyper;
    hyper.name = "hypernet_cost_model";
    hyper.h = h; hyper.w = w; hyper.c = c; hyper.k = k;
    hyper.flops = metrics::CostModel::hyper_flops(h, w, c, 16, k);
    hyper.peak_aux_elems = metrics::CostModel::hyper_kernel_map_elems(h, w, c, k);
    report.rows.push_back(hyper);
  }

  // predictor pooling-size ablation on the depth-3 backbone
  for (int pool : {0, 2, 4, 8}) {
    ModelGraph m = model::build_dncnn(3, 16, 1);
    for (auto& l : m.layers)
      if (l.kind == LayerKind::MalleConv) l.pred.pool = pool;
    metrics::BenchRow row;
    row.name = "dncnn3_malle_pool" + std::to_string(pool);
    row.h = h; row.w = w; row.c = 16; row.k = 1;
    row.flops = metrics::count_flops(m, h, w);
    report.rows.push_back(row);
  }

  std::ofstream os(out_csv);
  if (!os) throw IoError("bench: cannot write " + out_csv);
  os << "# MAC = 2 FLOPs; memory in float elements; threads=" << g_threads << "\n";
  report.write_csv(os);
  report.print_table(std::cout);
  std::printf("wrote %s\n", out_csv.c_str());
  return kExitOk;
}

/// Normalizes up to three channels of a feature map into a displayable image.
Image feature_to_image(const Tensor& t, float lo, float hi) {
  const Shape s = t.shape();
  const int c = s.c >= 3 ? 3 : 1;
  Image im = Image::blank(s.h, s.w, c);
  const float range = hi > lo ? hi - lo : 1.0f;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int ch = 0; ch < c; ++ch)
        im.at(y, x, ch) = std::clamp((t.at(0, y, x, ch) - lo) / range, 0.0f, 1.0f);
  return im;
}

int cmd_inspect(const std::string& model_path, const std::string& in_path, int cell_i, int cell_j,
                const std::string& out_path) {
  ModelGraph m = model::load_model(model_path);
  Image input = data::load_image(in_path);
  model::MalleCapture cap = model::capture_first_malle(m, input.to_tensor());
  Tensor swapped = malleconv::kernel_swap_apply(cap.input, cap.grid, cell_i, cell_j);
  std::printf("grid %dx%d, c=%d, k=%d at layer %d; max|fused-swapped|=%.4g\n", cap.grid.grid_h,
              cap.grid.grid_w, cap.grid.c, cap.grid.k, cap.layer,
              max_abs_diff(cap.fused, swapped));

  float lo = INFINITY, hi = -INFINITY;
  for (std::int64_t i = 0; i < cap.fused.size(); ++i) {
    lo = std::min({lo, cap.fused[i], swapped[i]});
    hi = std::max({hi, cap.fused[i], swapped[i]});
  }
  Image left = feature_to_image(cap.fused, lo, hi);
  Image right = feature_to_image(swapped, lo, hi);
  Image side = Image::blank(left.h, left.w * 2 + 4, left.c);
  for (int y = 0; y < left.h; ++y) {
    for (int x = 0; x < left.w; ++x)
      for (int ch = 0; ch < left.c; ++ch) {
        side.at(y, x, ch) = left.at(y, x, ch);
        side.at(y, left.w + 4 + x, ch) = right.at(y, x, ch);
      }
    for (int x = left.w; x < left.w + 4; ++x)
      for (int ch = 0; ch < left.c; ++ch) side.at(y, x, ch) = 1.0f;
  }
  data::save_image(side, out_path);
  std::printf("wrote %s (default | cell %d,%d)\n", out_path.c_str(), cell_i, cell_j);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Malleable convolution denoising toolkit"};
  app.require_subcommand(1);
  if (const char* env = std::getenv("MALLE_THREADS")) g_threads = std::atoi(env);
  app.add_option("--threads", g_threads, "worker threads (default 1, deterministic)");

  std::string config_path, out_dir = "out", resume;
  std::uint64_t seed = 1;
  auto* train_cmd = app.add_subcommand("train", "train a model on the synthetic corpus");
  train_cmd->add_option("config", config_path, "key=value config file");
  train_cmd->add_option("--out", out_dir, "output directory");
  train_cmd->add_option("--seed", seed, "random seed");
  train_cmd->add_option("--resume", resume, "training state file to resume from");

  std::string model_path, in_path, out_path = "out.ppm", clean_path;
  double sigma = 0.0;
  auto* den_cmd = app.add_subcommand("denoise", "denoise a PGM/PPM image");
  den_cmd->add_option("--model", model_path, "model checkpoint")->required();
  den_cmd->add_option("--in", in_path, "input image")->required();
  den_cmd->add_option("--out", out_path, "output image");
  den_cmd->add_option("--sigma", sigma, "synthesize AWGN at this sigma (0-255 scale) first");
  den_cmd->add_option("--seed", seed, "noise seed");
  den_cmd->add_option("--clean", clean_path, "clean reference for PSNR");

  std::string suite = "all";
  int cases = 200;
  auto* verify_cmd = app.add_subcommand("verify", "oracle + gradient verification suites");
  verify_cmd->add_option("--suite", suite, "oracle|grad|all")
      ->check(CLI::IsMember({"oracle", "grad", "all"}));
  verify_cmd->add_option("--cases", cases, "number of randomized oracle cases");

  std::string bench_csv = "bench.csv";
  auto* bench_cmd = app.add_subcommand("bench", "FLOP/memory/latency sweep");
  bench_cmd->add_option("config", config_path, "key=value config file");
  bench_cmd->add_option("--out", bench_csv, "output CSV path");

  int cell_i = 0, cell_j = 0;
  auto* inspect_cmd = app.add_subcommand("inspect", "kernel-swap visualization");
  inspect_cmd->add_option("--model", model_path, "model checkpoint")->required();
  inspect_cmd->add_option("--in", in_path, "input image")->required();
  inspect_cmd->add_option("--cell-i", cell_i, "grid cell row");
  inspect_cmd->add_option("--cell-j", cell_j, "grid cell col");
  inspect_cmd->add_option("--out", out_path, "output image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out_dir, seed, resume);
    if (den_cmd->parsed()) return cmd_denoise(model_path, in_path, out_path, sigma, seed, clean_path);
    if (verify_cmd->parsed()) return cmd_verify(suite, cases);
    if (bench_cmd->parsed()) return cmd_bench(config_path, bench_csv);
    if (inspect_cmd->parsed()) return cmd_inspect(model_path, in_path, cell_i, cell_j, out_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
