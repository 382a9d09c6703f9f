#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "malle/metrics.hpp"
#include "malle/verify.hpp"

using namespace malle;

TEST_CASE("psnr reference values") {
  // unit squared error at peak 255: 10*log10(255^2) = 48.1308 dB
  std::vector<float> a(64, 0.0f), b(64, 1.0f);
  CHECK(metrics::psnr(a.data(), b.data(), 64, 255.0) == Catch::Approx(48.13080361).margin(1e-4));
  // identical signals hit the sentinel
  CHECK(metrics::psnr(a.data(), a.data(), 64) == metrics::kPsnrSentinel);
  // halving the error adds ~6.02 dB
  std::vector<float> h(64, 0.5f);
  const double d1 = metrics::psnr(a.data(), b.data(), 64, 1.0);
  const double d2 = metrics::psnr(a.data(), h.data(), 64, 1.0);
  CHECK(d2 - d1 == Catch::Approx(20.0 * std::log10(2.0)).margin(1e-9));

  Image x = Image::blank(4, 4, 1);
  Image y = Image::blank(4, 5, 1);
  CHECK_THROWS_AS(metrics::psnr(x, y), ShapeError);
}

TEST_CASE("ssim basics") {
  auto corpus = data::synth_corpus(1, 48, 77);
  const Image& im = corpus[0];
  CHECK(metrics::ssim(im, im) == Catch::Approx(1.0).margin(1e-6));

  Image n10 = data::add_awgn(im, {10.0f, 4});
  Image n50 = data::add_awgn(im, {50.0f, 4});
  const double s10 = metrics::ssim(im, n10);
  const double s50 = metrics::ssim(im, n50);
  CHECK(s10 < 1.0);
  CHECK(s50 < s10);  // heavier noise, lower structural similarity
  CHECK(s50 > -1.0);

  CHECK_THROWS_AS(metrics::ssim(Image::blank(8, 8, 1), Image::blank(8, 8, 1)), ShapeError);
}

TEST_CASE("ssim and psnr match frozen external reference values") {
  // values computed once with an independent reference implementation
  // (Gaussian-weighted 11x11 window, sigma 1.5, population covariance)
  auto corpus = data::synth_corpus(1, 32, 77, 1);
  const Image a = corpus[0];
  const Image b = data::add_awgn(a, {40.0f, 2});
  CHECK(metrics::ssim(a, b) == Catch::Approx(0.66148573).margin(1e-6));
  CHECK(metrics::psnr(a, b) == Catch::Approx(16.8898775).margin(1e-4));
}

TEST_CASE("cost model: fused/naive kernel-map ratio is 64 at 8x downsampling") {
  using CM = metrics::CostModel;
  for (int k : {1, 3}) {
    const std::int64_t naive = CM::naive_kernel_map_elems(256, 256, 16, k);
    const std::int64_t fused = CM::fused_kernel_map_elems(256, 256, 16, k, 8);
    CHECK(naive == std::int64_t(256) * 256 * (k * k + 1) * 16);
    CHECK(naive / fused == 64);
  }
}

TEST_CASE("cost model: fused slicing beats the per-pixel hypernetwork baseline") {
  using CM = metrics::CostModel;
  for (int k : {1, 3}) {
    const std::int64_t fused =
        CM::predictor(256, 256, 16, 16, k, 4) + CM::fused_slice(256, 256, 16, k);
    const std::int64_t hyper = CM::hyper_flops(256, 256, 16, 16, k);
    INFO("k=" << k << " fused=" << fused << " hyper=" << hyper);
    CHECK(fused < hyper);
    CHECK(CM::hyper_kernel_map_elems(256, 256, 16, k) ==
          CM::naive_kernel_map_elems(256, 256, 16, k));
  }
}

TEST_CASE("count_flops matches the closed form for a plain conv chain") {
  ModelGraph m = model::build_dncnn(3, 16);
  using CM = metrics::CostModel;
  const std::int64_t expect = CM::conv(64, 64, 3, 3, 16) + CM::conv(64, 64, 3, 16, 16) +
                              CM::conv(64, 64, 3, 16, 3) + 2 * 64 * 64 * 16  // relus
                              + std::int64_t(64) * 64 * 3;                   // residual head
  CHECK(metrics::count_flops(m, 64, 64) == expect);
}

TEST_CASE("flops are monotone non-increasing in the predictor pool factor") {
  std::int64_t prev = -1;
  for (int pool : {0, 2, 4, 8}) {
    ModelGraph m = model::build_dncnn(3, 16, 1);
    for (auto& l : m.layers)
      if (l.kind == LayerKind::MalleConv) l.pred.pool = pool;
    m.divisor = 2 * std::max(pool, 1);
    const std::int64_t f = metrics::count_flops(m, 256, 256);
    INFO("pool=" << pool << " flops=" << f);
    if (prev >= 0) CHECK(f <= prev);
    prev = f;
  }
}

TEST_CASE("measured fused aux footprint is constant across image sizes") {
  ModelGraph m = model::build_dncnn(3, 8, 3);
  Rng rng(3);
  model::init_weights(m, rng);
  auto peak_at = [&](int hw) {
    Tensor x = verify::random_tensor(Shape{1, hw, hw, 3}, rng, 0.3f);
    return metrics::measure_peak_aux([&] { (void)model::infer(m, x); });
  };
  const std::int64_t p32 = peak_at(32);
  const std::int64_t p64 = peak_at(64);
  CHECK(p32 > 0);
  CHECK(p64 == p32);
}

TEST_CASE("bench_latency returns ordered, positive statistics") {
  const auto s = metrics::bench_latency([] {
    volatile double x = 0.0;
    for (int i = 0; i < 100000; ++i) x = x + 1.0;
  }, 5);
  CHECK(s.reps == 5);
  CHECK(s.median_ms > 0.0);
  CHECK(s.p90_ms >= s.median_ms);
  CHECK_THROWS_AS(metrics::bench_latency([] {}, 2), ContractError);
}

TEST_CASE("bench report CSV header and blank optional fields") {
  metrics::BenchReport rep;
  metrics::BenchRow r;
  r.name = "probe";
  r.h = 8;
  r.w = 8;
  r.c = 2;
  r.k = 1;
  r.flops = 1000;
  r.peak_aux_elems = 4;
  rep.rows.push_back(r);
  std::ostringstream os;
  rep.write_csv(os, false);
  const std::string csv = os.str();
  CHECK(csv.rfind("name,h,w,c,k,flops,peak_aux_elems,median_ms,p90_ms,psnr,ssim\n", 0) == 0);
  CHECK(csv.find("probe,8,8,2,1,1000,4,,,,") != std::string::npos);
}
