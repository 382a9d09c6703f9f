#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "malle/malleconv.hpp"
#include "malle/ops.hpp"
#include "malle/tape.hpp"

namespace malle::verify {

// ---------------------------------------------------------------------------
// Fused-vs-naive oracle sweep
// ---------------------------------------------------------------------------

struct OracleResult {
  int cases = 0;
  double max_abs_diff = 0.0;
  bool pass = false;
};

inline Tensor random_tensor(Shape s, Rng& rng, float scale = 1.0f) {
  Tensor t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline KernelGrid random_grid(int gh, int gw, int c, int k, Rng& rng) {
  KernelGrid g = KernelGrid::zeros(gh, gw, c, k);
  for (std::int64_t i = 0; i < g.weights.size(); ++i) g.weights[i] = rng.normal();
  for (std::int64_t i = 0; i < g.bias.size(); ++i) g.bias[i] = rng.normal();
  return g;
}

/// Randomized fused-vs-naive equivalence sweep over H,W in [1,33],
/// C in {1,3,8}, k in {1,3,5}, arbitrary grid dims in [1, dim].
inline OracleResult run_oracle_suite(int cases, std::uint64_t seed = 7, bool verbose = false) {
  static const int kChannels[] = {1, 3, 8};
  static const int kKernels[] = {1, 3, 5};
  Rng rng(seed);
  OracleResult r;
  r.cases = cases;
  r.pass = true;
  for (int i = 0; i < cases; ++i) {
    const int h = 1 + rng.uniform_int(33), w = 1 + rng.uniform_int(33);
    const int c = kChannels[rng.uniform_int(3)], k = kKernels[rng.uniform_int(3)];
    const int gh = 1 + rng.uniform_int(h), gw = 1 + rng.uniform_int(w);
    Tensor x = random_tensor(Shape{1, h, w, c}, rng);
    KernelGrid g = random_grid(gh, gw, c, k, rng);
    const Tensor fused = malleconv::slice_apply_fused_fwd(x, g);
    const Tensor naive = malleconv::slice_apply_naive(x, g);
    const double d = max_abs_diff(fused, naive);
    r.max_abs_diff = std::max(r.max_abs_diff, d);
    const bool ok = d < 1e-5;
    r.pass = r.pass && ok;
    if (verbose)
      std::printf("oracle case %3d: h=%2d w=%2d c=%d k=%d grid=%2dx%-2d max_abs_diff=%.3g %s\n",
                  i, h, w, c, k, gh, gw, d, ok ? "ok" : "FAIL");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite
// ---------------------------------------------------------------------------

struct GradCheck {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Checks analytic gradients of `build` (inputs -> any tensor) against
/// central finite differences of loss = sum(output * r) for a fixed random
/// projection r, at eps=1e-3 on the float32 forward pass. The loss value for
/// the differences is the double-precision dot product of the float32 output
/// with r, and the error denominator has a floor of 1, so the check is a
/// 1e-3 relative tolerance for O(1)-and-larger gradients and an absolute
/// 1e-3 tolerance below that -- the tightest the float32 forward supports.
inline GradCheck check_grad(const std::string& name, std::vector<Tensor> inputs,
                            const std::function<Val(Tape&, const std::vector<Val>&)>& build,
                            std::uint64_t seed = 11) {
  constexpr float kEps = 1e-3f;
  constexpr double kTol = 1e-3;
  GradCheck res;
  res.name = name;

  auto run = [&](const std::vector<Tensor>& ins, Tensor* proj, std::vector<Tensor>* grads) {
    Tape t;
    std::vector<Val> vals;
    for (const Tensor& in : ins) vals.push_back(t.leaf(in, "in"));
    Val out = build(t, vals);
    if (proj->size() == 0) {
      Rng prng(seed);
      *proj = random_tensor(t.value(out).shape(), prng);
    }
    const Tensor& ov = t.value(out);
    double lv = 0.0;
    for (std::int64_t i = 0; i < ov.size(); ++i) lv += double(ov[i]) * double((*proj)[i]);
    if (grads) {
      Val loss = ops::reduce_sum(t, ops::mul(t, out, t.leaf(*proj, "proj")));
      t.backward(loss);
      grads->clear();
      for (Val v : vals) grads->push_back(t.grad(v));
    }
    return lv;
  };

  Tensor proj;  // fixed after the first evaluation
  std::vector<Tensor> analytic;
  run(inputs, &proj, &analytic);

  double max_err = 0.0;
  for (size_t which = 0; which < inputs.size(); ++which) {
    for (std::int64_t j = 0; j < inputs[which].size(); ++j) {
      std::vector<Tensor> pert = inputs;
      pert[which][j] += kEps;
      const double lp = run(pert, &proj, nullptr);
      pert[which][j] -= 2 * kEps;
      const double lm = run(pert, &proj, nullptr);
      const double fd = (lp - lm) / (2.0 * double(kEps));
      const double an = analytic[which][j];
      const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0});
      max_err = std::max(max_err, err);
    }
  }
  res.max_rel_err = max_err;
  res.pass = max_err < kTol;
  return res;
}

/// Gradient checks for every differentiable op, including the fused slice
/// w.r.t. input, grid weights, and grid bias, and a composite graph.
inline std::vector<GradCheck> run_grad_suite(std::uint64_t seed = 5, bool verbose = false) {
  Rng rng(seed);
  std::vector<GradCheck> out;
  auto add = [&](GradCheck g) {
    if (verbose)
      std::printf("grad %-28s max_rel_err=%.3g %s\n", g.name.c_str(), g.max_rel_err,
                  g.pass ? "ok" : "FAIL");
    out.push_back(std::move(g));
  };

  const Shape s1{2, 4, 4, 3};
  Tensor a = random_tensor(s1, rng), b = random_tensor(s1, rng);
  add(check_grad("add", {a, b},
                 [](Tape& t, const std::vector<Val>& v) { return ops::add(t, v[0], v[1]); }));
  add(check_grad("sub", {a, b},
                 [](Tape& t, const std::vector<Val>& v) { return ops::sub(t, v[0], v[1]); }));
  add(check_grad("mul", {a, b},
                 [](Tape& t, const std::vector<Val>& v) { return ops::mul(t, v[0], v[1]); }));
  add(check_grad("scale", {a},
                 [](Tape& t, const std::vector<Val>& v) { return ops::scale(t, v[0], 1.7f); }));

  // keep relu inputs away from the kink
  Tensor ar = a;
  for (std::int64_t i = 0; i < ar.size(); ++i)
    if (std::abs(ar[i]) < 0.05f) ar[i] = ar[i] < 0 ? -0.1f : 0.1f;
  add(check_grad("relu", {ar},
                 [](Tape& t, const std::vector<Val>& v) { return ops::relu(t, v[0]); }));

  Tensor bias = random_tensor(Shape{1, 1, 1, 3}, rng);
  add(check_grad("add_bias", {a, bias},
                 [](Tape& t, const std::vector<Val>& v) { return ops::add_bias(t, v[0], v[1]); }));
  Tensor b2 = random_tensor(Shape{2, 4, 4, 2}, rng);
  add(check_grad("concat_channels", {a, b2}, [](Tape& t, const std::vector<Val>& v) {
    return ops::concat_channels(t, v[0], v[1]);
  }));
  add(check_grad("slice_channels", {a}, [](Tape& t, const std::vector<Val>& v) {
    return ops::slice_channels(t, v[0], 1, 3);
  }));
  add(check_grad("reduce_sum", {a},
                 [](Tape& t, const std::vector<Val>& v) { return ops::reduce_sum(t, v[0]); }));
  add(check_grad("reduce_mean", {a},
                 [](Tape& t, const std::vector<Val>& v) { return ops::reduce_mean(t, v[0]); }));
  add(check_grad("mse", {a, b},
                 [](Tape& t, const std::vector<Val>& v) { return ops::mse(t, v[0], v[1]); }));

  ConvSpec cs{3, 3, 4, 1, Padding::SameZero, false};
  Tensor cw = random_tensor(Shape{3, 3, 3, 4}, rng, 0.5f);
  Tensor cb = random_tensor(Shape{1, 1, 1, 4}, rng);
  add(check_grad("conv2d", {a, cw, cb}, [=](Tape& t, const std::vector<Val>& v) {
    return ops::conv2d(t, v[0], v[1], v[2], cs);
  }));
  ConvSpec cv{3, 3, 2, 1, Padding::Valid, false};
  Tensor cvw = random_tensor(Shape{3, 3, 3, 2}, rng, 0.5f);
  Tensor cvb = random_tensor(Shape{1, 1, 1, 2}, rng);
  add(check_grad("conv2d_valid", {a, cvw, cvb}, [=](Tape& t, const std::vector<Val>& v) {
    return ops::conv2d(t, v[0], v[1], v[2], cv);
  }));
  Tensor dw = random_tensor(Shape{1, 3, 3, 3}, rng, 0.5f);
  Tensor db = random_tensor(Shape{1, 1, 1, 3}, rng);
  add(check_grad("depthwise_conv2d", {a, dw, db}, [](Tape& t, const std::vector<Val>& v) {
    return ops::depthwise_conv2d(t, v[0], v[1], v[2], 3);
  }));

  add(check_grad("avg_pool", {a},
                 [](Tape& t, const std::vector<Val>& v) { return ops::avg_pool(t, v[0], 2); }));
  // distinct values so the argmax is stable under the FD perturbation
  Tensor am(s1);
  for (std::int64_t i = 0; i < am.size(); ++i) am[i] = float(i % 17) * 0.1f + 0.01f * float(i);
  add(check_grad("max_pool", {am},
                 [](Tape& t, const std::vector<Val>& v) { return ops::max_pool(t, v[0], 2); }));
  add(check_grad("bilinear_resize", {a}, [](Tape& t, const std::vector<Val>& v) {
    return ops::bilinear_resize(t, v[0], 7, 5);
  }));
  add(check_grad("space_to_channel", {a}, [](Tape& t, const std::vector<Val>& v) {
    return ops::space_to_channel(t, v[0], 2);
  }));
  Tensor c2s_in = random_tensor(Shape{1, 2, 2, 8}, rng);
  add(check_grad("channel_to_space", {c2s_in}, [](Tape& t, const std::vector<Val>& v) {
    return ops::channel_to_space(t, v[0], 2);
  }));
  add(check_grad("pad_reflect", {a}, [](Tape& t, const std::vector<Val>& v) {
    return ops::pad_reflect(t, v[0], 3, 2);
  }));
  add(check_grad("crop", {a},
                 [](Tape& t, const std::vector<Val>& v) { return ops::crop(t, v[0], 3, 2); }));

  // fused slice, k=1 and k=3, w.r.t. input + grid weights + grid bias
  for (int k : {1, 3}) {
    Tensor x = random_tensor(Shape{1, 8, 8, 2}, rng);
    Tensor gw = random_tensor(Shape{1, 2, 2, 2 * k * k}, rng);
    Tensor gb = random_tensor(Shape{1, 2, 2, 2}, rng);
    add(check_grad("slice_apply_fused_k" + std::to_string(k), {x, gw, gb},
                   [=](Tape& t, const std::vector<Val>& v) {
                     return malleconv::slice_apply_fused(t, v[0], v[1], v[2], k);
                   }));
  }

  // composite graph: conv -> relu -> pool. Small weights and a +2 bias keep
  // the relu inputs far from the kink, where the FD perturbation would
  // otherwise flip activation masks.
  Tensor ccw = random_tensor(Shape{3, 3, 3, 4}, rng, 0.05f);
  Tensor ccb = Tensor::full(Shape{1, 1, 1, 4}, 2.0f);
  add(check_grad("composite_conv_relu_pool", {a, ccw, ccb},
                 [=](Tape& t, const std::vector<Val>& v) {
                   Val h = ops::conv2d(t, v[0], v[1], v[2], cs);
                   h = ops::relu(t, h);
                   return ops::avg_pool(t, h, 2);
                 }));
  return out;
}

}  // namespace malle::verify
