// Acceptance gate: one pass/fail line per criterion, nonzero exit on failure.
// Criteria 5 and 6 train small models and dominate the runtime.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "malle/data.hpp"
#include "malle/metrics.hpp"
#include "malle/model.hpp"
#include "malle/train.hpp"
#include "malle/verify.hpp"

using namespace malle;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

double now_s() {
  using clk = std::chrono::steady_clock;
  static const clk::time_point t0 = clk::now();
  return std::chrono::duration<double>(clk::now() - t0).count();
}

void report(int idx, const char* name, bool pass, const std::string& detail, double secs) {
  std::printf("[%d/9] %-24s %s  (%s, %.1fs)\n", idx, name, pass ? "PASS" : "FAIL",
              detail.c_str(), secs);
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::string work_dir(const char* tag) {
  const fs::path p = fs::temp_directory_path() / (std::string("malle_accept_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// --------------------------------------------------------------------------

void criterion1_oracle() {
  const double t0 = now_s();
  const auto r = verify::run_oracle_suite(200, 7);
  const double dt = now_s() - t0;
  const bool pass = r.pass && dt < 60.0;
  report(1, "oracle equivalence", pass,
         fmt("200 cases, max|fused-naive|=%.2e, budget<60s", r.max_abs_diff), dt);
}

void criterion2_grad() {
  const double t0 = now_s();
  const auto checks = verify::run_grad_suite(5);
  const double dt = now_s() - t0;
  bool all = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : checks) {
    all = all && c.pass;
    if (c.max_rel_err > worst) {
      worst = c.max_rel_err;
      worst_name = c.name;
    }
  }
  const bool pass = all && dt < 120.0;
  report(2, "gradient correctness", pass,
         fmt("%zu ops, worst rel err %.2e (%s), budget<120s", checks.size(), worst,
             worst_name.c_str()),
         dt);
}

void criterion3_memory() {
  const double t0 = now_s();
  Rng rng(3);
  bool pass = true;
  std::string detail;
  for (int k : {1, 3}) {
    const int c = 16;
    Tensor x = verify::random_tensor(Shape{1, 256, 256, c}, rng, 0.5f);
    KernelGrid g = verify::random_grid(32, 32, c, k, rng);
    const std::int64_t naive =
        auxmem::measure_peak([&] { (void)malleconv::slice_apply_naive(x, g); });
    const std::int64_t fused =
        auxmem::measure_peak([&] { (void)malleconv::slice_apply_fused_fwd(x, g); });
    Tensor x2 = verify::random_tensor(Shape{1, 512, 512, c}, rng, 0.5f);
    KernelGrid g2 = verify::random_grid(64, 64, c, k, rng);
    const std::int64_t fused2 =
        auxmem::measure_peak([&] { (void)malleconv::slice_apply_fused_fwd(x2, g2); });
    pass = pass && naive >= 32 * fused && fused2 == fused;
    detail += fmt("k=%d naive/fused=%lldx const-in-H=%s ", k, (long long)(naive / fused),
                  fused2 == fused ? "yes" : "NO");
  }
  report(3, "memory footprint", pass, detail + "(need >=32x)", now_s() - t0);
}

void criterion4_pooling() {
  const double t0 = now_s();
  std::vector<std::int64_t> flops;
  for (int pool : {0, 2, 4, 8}) {
    ModelGraph m = model::build_dncnn(3, 16, 1);
    for (auto& l : m.layers)
      if (l.kind == LayerKind::MalleConv) l.pred.pool = pool;
    m.divisor = 2 * std::max(pool, 1);
    flops.push_back(metrics::count_flops(m, 256, 256));
  }
  bool mono = true;
  for (size_t i = 1; i < flops.size(); ++i) mono = mono && flops[i] <= flops[i - 1];
  report(4, "pooling ablation", mono,
         fmt("flops@256^2 pool{0,2,4,8}: %lld>=%lld>=%lld>=%lld", (long long)flops[0],
             (long long)flops[1], (long long)flops[2], (long long)flops[3]),
         now_s() - t0);
}

struct TrainedRun {
  double psnr = 0.0;
  double baseline = 0.0;
  std::string best_ckpt;
};

TrainedRun run_training(ModelGraph& m, std::uint64_t seed, int iterations, int batch, int patch,
                        const std::string& dir) {
  auto corpus = data::synth_corpus(24, 96, seed);
  auto val = data::synth_corpus(4, 96, seed + 777);
  train::TrainConfig cfg;
  cfg.iterations = iterations;
  cfg.batch = batch;
  cfg.patch = patch;
  cfg.sigmas = {25.0f};
  cfg.seed = seed;
  cfg.ckpt_every = iterations / 2;
  cfg.eval_every = std::max(1, iterations / 8);
  Rng init_rng(seed * 31 + 7);
  model::init_weights(m, init_rng);
  const auto res = train::train(m, corpus, val, cfg, dir);
  TrainedRun out;
  out.psnr = res.best_psnr;
  out.baseline = train::noisy_input_psnr(val, 25.0f, cfg.seed + 9999);
  out.best_ckpt = res.best_checkpoint;
  return out;
}

void criterion5_mallenet() {
  const double t0 = now_s();
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelGraph m = model::build_mallenet(16, 2, 1, 4);
    const std::string dir = work_dir(("c5_seed" + std::to_string(seed)).c_str());
    const TrainedRun r = run_training(m, seed, 2000, 4, 64, dir);
    const bool ok = r.psnr >= r.baseline + 3.0;
    pass = pass && ok;
    detail += fmt("s%llu:%.2f/%.2f+3 ", (unsigned long long)seed, r.psnr, r.baseline);
  }
  report(5, "mallenet training", pass, detail + "dB", now_s() - t0);
}

std::string g_c6_malle_ckpt;  // first trained DnCNN+MalleConv, reused by criterion 9

void criterion6_plugin() {
  const double t0 = now_s();
  double delta_sum = 0.0;
  std::string detail;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelGraph plain = model::build_dncnn(3, 16);
    ModelGraph malle = model::build_dncnn(3, 16, 1);
    const std::string dp = work_dir(("c6p_seed" + std::to_string(seed)).c_str());
    const std::string dm = work_dir(("c6m_seed" + std::to_string(seed)).c_str());
    const TrainedRun rp = run_training(plain, seed, 2000, 4, 64, dp);
    const TrainedRun rm = run_training(malle, seed, 2000, 4, 64, dm);
    if (g_c6_malle_ckpt.empty()) g_c6_malle_ckpt = rm.best_ckpt;
    delta_sum += rm.psnr - rp.psnr;
    detail += fmt("s%llu:%+.3f ", (unsigned long long)seed, rm.psnr - rp.psnr);
  }
  const double mean_delta = delta_sum / 3.0;
  report(6, "plug-in ablation", mean_delta >= 0.0,
         detail + fmt("mean %+.3f dB (need >=0)", mean_delta), now_s() - t0);
}

void criterion7_metrics() {
  const double t0 = now_s();
  std::vector<float> a(100, 0.0f), b(100, 1.0f);
  const double p = metrics::psnr(a.data(), b.data(), 100, 255.0);
  const bool psnr_ok = std::abs(p - 48.1308) < 1e-3;

  auto corpus = data::synth_corpus(1, 64, 17);
  const double s = metrics::ssim(corpus[0], corpus[0]);
  const bool ssim_ok = std::abs(s - 1.0) < 1e-6;

  // pre-clamp noise: measure the generator stream itself at sigma=25
  Rng rng(29);
  const double sigma = 25.0;
  double sum = 0.0, sq = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double v = sigma / 255.0 * rng.normal();
    sum += v;
    sq += v * v;
  }
  const double emp = std::sqrt(sq / n - (sum / n) * (sum / n)) * 255.0;
  const bool awgn_ok = std::abs(emp - sigma) / sigma < 0.01;

  report(7, "metric unit values", psnr_ok && ssim_ok && awgn_ok,
         fmt("psnr=%.4f ssim(x,x)=%.7f awgn sigma=%.3f/25", p, s, emp), now_s() - t0);
}

void criterion8_determinism() {
  const double t0 = now_s();
  auto corpus = data::synth_corpus(8, 64, 41);
  auto val = data::synth_corpus(2, 64, 42);
  train::TrainConfig cfg;
  cfg.iterations = 40;
  cfg.batch = 2;
  cfg.patch = 32;
  cfg.seed = 5;
  cfg.ckpt_every = 20;
  cfg.eval_every = 20;
  auto run = [&](const char* tag) {
    ModelGraph m = model::build_dncnn(3, 8, 1);
    Rng rng(55);
    model::init_weights(m, rng);
    const std::string dir = work_dir(tag);
    train::train(m, corpus, val, cfg, dir);
    return dir;
  };
  const std::string d1 = run("c8_a");
  const std::string d2 = run("c8_b");
  const bool csv_ok = read_bytes(d1 + "/loss.csv") == read_bytes(d2 + "/loss.csv");

  // resume from the mid-run snapshot and compare the final checkpoint
  ModelGraph res = model::load_model(d1 + "/ckpt_20.mckp");
  const std::string d3 = work_dir("c8_resume");
  train::train(res, corpus, val, cfg, d3, d1 + "/state_20.mckp");
  const bool resume_ok = read_bytes(d1 + "/last.mckp") == read_bytes(d3 + "/last.mckp") &&
                         read_bytes(d1 + "/state.mckp") == read_bytes(d3 + "/state.mckp");

  report(8, "determinism + resume", csv_ok && resume_ok,
         fmt("csv byte-identical=%s resume bit-exact=%s", csv_ok ? "yes" : "NO",
             resume_ok ? "yes" : "NO"),
         now_s() - t0);
}

void criterion9_kernel_swap() {
  const double t0 = now_s();
  // Prefer the DnCNN+MalleConv trained in criterion 6; if unavailable, fall
  // back to a randomly initialized model with a non-degenerate exit conv so
  // the predicted kernels genuinely vary across the image.
  ModelGraph m;
  std::string source;
  if (!g_c6_malle_ckpt.empty() && fs::exists(g_c6_malle_ckpt)) {
    m = model::load_model(g_c6_malle_ckpt);
    source = "trained";
  } else {
    m = model::build_dncnn(3, 16, 3);
    Rng rng(71);
    model::init_weights(m, rng);
    for (const auto& l : m.layers)
      if (l.kind == LayerKind::MalleConv)
        model::he_fill(m.params.at(l.name + ".pred.exit.w").value, l.pred.width, rng);
    source = "random-exit";
  }

  auto corpus = data::synth_corpus(1, 64, 99);  // heterogeneous content
  Image noisy = data::add_awgn(corpus[0], {25.0f, 4});
  const model::MalleCapture cap = model::capture_first_malle(m, noisy.to_tensor());

  // every cell's swapped output must equal the plain depthwise conv bit-exactly
  bool swap_exact = true;
  for (int i = 0; i < cap.grid.grid_h && swap_exact; ++i)
    for (int j = 0; j < cap.grid.grid_w && swap_exact; ++j) {
      const Tensor swapped = malleconv::kernel_swap_apply(cap.input, cap.grid, i, j);
      auto [w, b] = cap.grid.cell_kernel(i, j);
      Tape t;
      Val ref = ops::depthwise_conv2d(t, t.leaf(cap.input), t.leaf(w), t.leaf(b), cap.grid.k);
      swap_exact = max_abs_diff(swapped, t.value(ref)) == 0.0;
    }

  // and the uniform-kernel output must differ from the spatially varying one
  double best_diff = 0.0;
  for (int i = 0; i < cap.grid.grid_h; ++i)
    for (int j = 0; j < cap.grid.grid_w; ++j) {
      const Tensor swapped = malleconv::kernel_swap_apply(cap.input, cap.grid, i, j);
      best_diff = std::max(best_diff, max_abs_diff(swapped, cap.fused));
    }
  const bool pass = swap_exact && best_diff > 1e-3;
  report(9, "kernel-swap diagnostic", pass,
         fmt("%s model, swap bit-exact=%s, max|swap-fused|=%.2e (need >1e-3)", source.c_str(),
             swap_exact ? "yes" : "NO", best_diff),
         now_s() - t0);
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  criterion1_oracle();
  criterion2_grad();
  criterion3_memory();
  criterion4_pooling();
  criterion5_mallenet();
  criterion6_plugin();
  criterion7_metrics();
  criterion8_determinism();
  criterion9_kernel_swap();
  std::printf("%s: %d/9 criteria passed\n", g_failures == 0 ? "OK" : "FAILED", 9 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
