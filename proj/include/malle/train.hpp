#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "malle/data.hpp"
#include "malle/metrics.hpp"
#include "malle/model.hpp"
#include "malle/ops.hpp"

namespace malle::train {

struct TrainConfig {
  int iterations = 2000;
  int batch = 8;
  int patch = 32;  // must be reachable from the corpus image size
  float lr = 1e-3f;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  std::vector<float> sigmas = {25.0f};  // 0-255 scale
  bool blind = false;  // true: fresh sigma per patch from the set; false: sigmas[0]
  std::uint64_t seed = 1;
  int ckpt_every = 500;
  int eval_every = 500;
  float clip_norm = 1.0f;  // global-norm gradient clip; 0 disables

  void validate(const ModelGraph& m) const {
    for (float s : sigmas)
      if (s <= 0.0f || s > 255.0f) throw ContractError("TrainConfig: sigma must be in (0,255]");
    if (sigmas.empty()) throw ContractError("TrainConfig: sigma set is empty");
    if (batch < 1 || patch < 1 || iterations < 0)
      throw ContractError("TrainConfig: bad batch/patch/iterations");
    (void)m;
  }
};

/// lr0 * 0.5 * (1 + cos(pi * t / total)).
inline double cosine_lr(int t, int total, double lr0) {
  if (t < 0 || t > total) throw ContractError("cosine_lr: t outside [0, total]");
  if (total == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * double(t) / double(total)));
}

/// One bias-corrected Adam update over every parameter in the store.
/// `step` is 1-based. Throws on non-finite gradients, naming the parameter.
inline void adam_step(ParamStore& store, double lr, double beta1, double beta2, double eps,
                      std::int64_t step) {
  const double bc1 = 1.0 - std::pow(beta1, double(step));
  const double bc2 = 1.0 - std::pow(beta2, double(step));
  for (int i = 0; i < store.count(); ++i) {
    auto& p = store.at(i);
    if (!p.grad.all_finite())
      throw NumericError("adam_step: non-finite gradient in parameter " + p.name);
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      const double m = beta1 * p.adam_m[j] + (1.0 - beta1) * g;
      const double v = beta2 * p.adam_v[j] + (1.0 - beta2) * g * g;
      p.adam_m[j] = float(m);
      p.adam_v[j] = float(v);
      p.value[j] -= float(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
  }
}

inline double grad_global_norm(const ParamStore& store) {
  double s = 0.0;
  for (int i = 0; i < store.count(); ++i) {
    const auto& g = store.at(i).grad;
    for (std::int64_t j = 0; j < g.size(); ++j) s += double(g[j]) * g[j];
  }
  return std::sqrt(s);
}

inline void clip_grads(ParamStore& store, double max_norm) {
  const double n = grad_global_norm(store);
  if (n <= max_norm || n == 0.0) return;
  const float scale = float(max_norm / n);
  for (int i = 0; i < store.count(); ++i) {
    auto& g = store.at(i).grad;
    for (std::int64_t j = 0; j < g.size(); ++j) g[j] *= scale;
  }
}

struct EvalResult {
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::vector<double> per_image_psnr;
  std::vector<double> per_image_ssim;
};

/// Denoises each image after seeding its noise from (seed + index) so the
/// noisy test set is reproducible, and averages PSNR/SSIM against clean.
inline EvalResult evaluate(const ModelGraph& m, const std::vector<Image>& images, float sigma,
                           std::uint64_t seed) {
  if (images.empty()) throw ContractError("evaluate: empty image set");
  EvalResult r;
  for (size_t i = 0; i < images.size(); ++i) {
    const Image& clean = images[i];
    Image noisy = data::add_awgn(clean, {sigma, seed + i});
    Tensor out = model::infer(m, noisy.to_tensor());
    for (std::int64_t j = 0; j < out.size(); ++j)
      out[j] = std::clamp(out[j], 0.0f, 1.0f);
    Image den = Image::from_tensor(out);
    r.per_image_psnr.push_back(metrics::psnr(den, clean));
    r.per_image_ssim.push_back(metrics::ssim(den, clean));
    r.mean_psnr += r.per_image_psnr.back();
    r.mean_ssim += r.per_image_ssim.back();
  }
  r.mean_psnr /= double(images.size());
  r.mean_ssim /= double(images.size());
  return r;
}

/// Mean PSNR of the noisy inputs themselves (the baseline a denoiser must beat).
inline double noisy_input_psnr(const std::vector<Image>& images, float sigma,
                               std::uint64_t seed) {
  double s = 0.0;
  for (size_t i = 0; i < images.size(); ++i)
    s += metrics::psnr(data::add_awgn(images[i], {sigma, seed + i}), images[i]);
  return s / double(images.size());
}

struct TrainResult {
  double best_psnr = -1.0;
  double final_psnr = -1.0;
  std::int64_t iterations_run = 0;
  std::string last_checkpoint;
  std::string best_checkpoint;
};

namespace detail {

/// Serializes optimizer moments, step counter, and RNG into a ParamStore so
/// training state reuses the one checkpoint format.
inline void save_state(const ModelGraph& m, const Rng& rng, std::int64_t step,
                       const std::string& path) {
  ParamStore st;
  Tensor meta(Shape{1, 1, 1, 4});
  const std::uint64_t s = rng.state();
  std::uint32_t lo = std::uint32_t(s & 0xffffffffull), hi = std::uint32_t(s >> 32);
  std::memcpy(&meta[0], &lo, 4);
  std::memcpy(&meta[1], &hi, 4);
  meta[2] = rng.has_cached_normal() ? rng.cached_normal() : 0.0f;
  meta[3] = rng.has_cached_normal() ? 1.0f : 0.0f;
  st.add("__rng", std::move(meta));
  Tensor stepv(Shape{1, 1, 1, 2});
  std::uint32_t slo = std::uint32_t(std::uint64_t(step) & 0xffffffffull);
  std::uint32_t shi = std::uint32_t(std::uint64_t(step) >> 32);
  std::memcpy(&stepv[0], &slo, 4);
  std::memcpy(&stepv[1], &shi, 4);
  st.add("__step", std::move(stepv));
  for (int i = 0; i < m.params.count(); ++i) {
    const auto& p = m.params.at(i);
    st.add("m." + p.name, p.adam_m);
    st.add("v." + p.name, p.adam_v);
  }
  checkpoint::save(st, path, m.config_blob);
}

inline std::int64_t load_state(ModelGraph& m, Rng& rng, const std::string& path) {
  ParamStore st = checkpoint::load(path);
  const Tensor& meta = st.at("__rng").value;
  std::uint32_t lo, hi;
  std::memcpy(&lo, meta.data(), 4);
  std::memcpy(&hi, meta.data() + 1, 4);
  rng.restore((std::uint64_t(hi) << 32) | lo, meta[3] != 0.0f, meta[2]);
  const Tensor& stepv = st.at("__step").value;
  std::uint32_t slo, shi;
  std::memcpy(&slo, stepv.data(), 4);
  std::memcpy(&shi, stepv.data() + 1, 4);
  for (int i = 0; i < m.params.count(); ++i) {
    auto& p = m.params.at(i);
    p.adam_m = st.at("m." + p.name).value;
    p.adam_v = st.at("v." + p.name).value;
  }
  return std::int64_t((std::uint64_t(shi) << 32) | slo);
}

}  // namespace detail

/// Training loop: random patch + dihedral augmentation + fresh AWGN per
/// sample, MSE loss on the residual output, cosine schedule, Adam. Writes
/// per-iteration loss CSV ("iter,loss,lr,psnr"), periodic checkpoints and
/// training state, and keeps the best-PSNR checkpoint. Deterministic for a
/// fixed config and seed; resume from a state file is bit-exact.
inline TrainResult train(ModelGraph& m, const std::vector<Image>& train_set,
                         const std::vector<Image>& val_set, const TrainConfig& cfg,
                         const std::string& out_dir, const std::string& resume_state = "") {
  cfg.validate(m);
  if (train_set.empty()) throw ContractError("train: empty data source");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string csv_path = out_dir + "/loss.csv";
  Rng rng(cfg.seed);
  std::int64_t start_iter = 0;
  if (!resume_state.empty()) start_iter = detail::load_state(m, rng, resume_state);

  std::ofstream csv(csv_path);
  if (!csv) throw IoError("train: cannot write " + csv_path);
  csv << "iter,loss,lr,psnr\n";
  char buf[64];

  TrainResult result;
  if (start_iter == 0) model::save_model(m, out_dir + "/init.mckp");

  const std::uint64_t eval_seed = cfg.seed + 9999;
  for (std::int64_t it = start_iter + 1; it <= cfg.iterations; ++it) {
    // assemble the batch
    const int c = train_set[0].c;
    Tensor clean(Shape{cfg.batch, cfg.patch, cfg.patch, c});
    Tensor noisy(Shape{cfg.batch, cfg.patch, cfg.patch, c});
    for (int b = 0; b < cfg.batch; ++b) {
      const Image& src = train_set[size_t(rng.uniform_int(int(train_set.size())))];
      Image patch = data::augment(data::random_patch(src, cfg.patch, rng), rng.uniform_int(8));
      const float sigma =
          cfg.blind ? cfg.sigmas[size_t(rng.uniform_int(int(cfg.sigmas.size())))] : cfg.sigmas[0];
      const float s = sigma / 255.0f;
      for (int y = 0; y < cfg.patch; ++y)
        for (int x = 0; x < cfg.patch; ++x)
          for (int ch = 0; ch < c; ++ch) {
            const float v = patch.at(y, x, ch);
            clean.at(b, y, x, ch) = v;
            noisy.at(b, y, x, ch) = std::clamp(v + s * rng.normal(), 0.0f, 1.0f);
          }
    }

    Tape tape;
    ParamBinding bind(tape, m.params);
    Val out = model::forward(m, tape, tape.leaf(std::move(noisy), "input"), bind);
    Val loss = ops::mse(tape, out, tape.leaf(std::move(clean), "target"));
    const float loss_v = tape.value(loss)[0];
    if (!std::isfinite(loss_v)) throw NumericError("train: loss diverged at iter " + std::to_string(it));
    m.params.zero_grads();
    tape.backward(loss);
    bind.pull_grads(tape);
    if (cfg.clip_norm > 0.0f) clip_grads(m.params, cfg.clip_norm);
    const double lr = cosine_lr(int(it - 1), cfg.iterations, cfg.lr);
    adam_step(m.params, lr, cfg.beta1, cfg.beta2, cfg.eps, it);

    std::string psnr_field;
    const bool eval_now = cfg.eval_every > 0 && !val_set.empty() &&
                          (it % cfg.eval_every == 0 || it == cfg.iterations);
    if (eval_now) {
      EvalResult ev = evaluate(m, val_set, cfg.sigmas[0], eval_seed);
      std::snprintf(buf, sizeof buf, "%.4f", ev.mean_psnr);
      psnr_field = buf;
      result.final_psnr = ev.mean_psnr;
      if (ev.mean_psnr > result.best_psnr) {
        result.best_psnr = ev.mean_psnr;
        result.best_checkpoint = out_dir + "/best.mckp";
        model::save_model(m, result.best_checkpoint);
      }
    }
    std::snprintf(buf, sizeof buf, "%.9g", double(loss_v));
    csv << it << "," << buf << ",";
    std::snprintf(buf, sizeof buf, "%.9g", lr);
    csv << buf << "," << psnr_field << "\n";

    if (cfg.ckpt_every > 0 && it % cfg.ckpt_every == 0) {
      model::save_model(m, out_dir + "/last.mckp");
      detail::save_state(m, rng, it, out_dir + "/state.mckp");
      // iteration-tagged snapshots so any cadence point can be resumed from
      model::save_model(m, out_dir + "/ckpt_" + std::to_string(it) + ".mckp");
      detail::save_state(m, rng, it, out_dir + "/state_" + std::to_string(it) + ".mckp");
    }
    result.iterations_run = it;
  }

  model::save_model(m, out_dir + "/last.mckp");
  detail::save_state(m, rng, cfg.iterations, out_dir + "/state.mckp");
  result.last_checkpoint = out_dir + "/last.mckp";
  if (result.best_checkpoint.empty()) result.best_checkpoint = result.last_checkpoint;
  return result;
}

}  // namespace malle::train
