#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "malle/malleconv.hpp"
#include "malle/ops.hpp"
#include "malle/params.hpp"
#include "malle/tape.hpp"

namespace malle {

enum class LayerKind {
  Conv,
  Relu,
  InvertedBottleneck,
  MalleConv,
  SpaceToChannel,
  ChannelToSpace,
  BilinearUp,
  Concat,  // concat_channels(prev, outputs[src])
  Add,     // prev + outputs[src]
};

struct LayerSpec {
  LayerKind kind;
  std::string name;  // parameter name prefix
  ConvSpec conv{};                      // Conv
  int channels = 0, expansion = 2;      // InvertedBottleneck
  malleconv::PredictorConfig pred{};    // MalleConv
  int r = 2;                            // shuffles / BilinearUp
  int src = -1;                         // Concat/Add source layer id; -1 = model input
};

/// Declarative layer list plus its parameter store. Built once, immutable
/// afterwards; forward() reflect-pads to `divisor` and crops back.
struct ModelGraph {
  std::vector<LayerSpec> layers;
  ParamStore params;
  int in_channels = 3;
  int divisor = 1;
  bool residual_output = true;  // out = input - net(input)
  std::string config_blob;
};

namespace model {

// ---------------------------------------------------------------------------
// Shape checking
// ---------------------------------------------------------------------------

inline Shape layer_out_shape(const LayerSpec& l, const Shape& in,
                             const std::vector<Shape>& outputs, const Shape& model_in) {
  switch (l.kind) {
    case LayerKind::Conv: {
      if (in.c != l.conv.c_in)
        throw ShapeError(l.name + ": expects " + std::to_string(l.conv.c_in) +
                         " channels, got " + std::to_string(in.c));
      return ops::detail::conv_out_shape(in, l.conv);
    }
    case LayerKind::Relu:
      return in;
    case LayerKind::InvertedBottleneck:
      if (in.c != l.channels)
        throw ShapeError(l.name + ": expects " + std::to_string(l.channels) + " channels");
      return in;
    case LayerKind::MalleConv: {
      if (in.c != l.pred.c)
        throw ShapeError(l.name + ": expects " + std::to_string(l.pred.c) + " channels");
      const int d = l.pred.downsample_factor();
      if (in.h % d != 0 || in.w % d != 0)
        throw ShapeError(l.name + ": input " + in.str() + " not divisible by " +
                         std::to_string(d));
      return in;
    }
    case LayerKind::SpaceToChannel:
      if (in.h % l.r != 0 || in.w % l.r != 0)
        throw ShapeError(l.name + ": dims not divisible by " + std::to_string(l.r));
      return Shape{in.n, in.h / l.r, in.w / l.r, in.c * l.r * l.r};
    case LayerKind::ChannelToSpace:
      if (in.c % (l.r * l.r) != 0)
        throw ShapeError(l.name + ": channels not divisible by r^2");
      return Shape{in.n, in.h * l.r, in.w * l.r, in.c / (l.r * l.r)};
    case LayerKind::BilinearUp:
      return Shape{in.n, in.h * l.r, in.w * l.r, in.c};
    case LayerKind::Concat:
    case LayerKind::Add: {
      const Shape other = l.src < 0 ? model_in : outputs[size_t(l.src)];
      if (other.n != in.n || other.h != in.h || other.w != in.w)
        throw ShapeError(l.name + ": source layer shape " + other.str() +
                         " incompatible with " + in.str());
      if (l.kind == LayerKind::Add) {
        if (other.c != in.c) throw ShapeError(l.name + ": add channel mismatch");
        return in;
      }
      return Shape{in.n, in.h, in.w, in.c + other.c};
    }
  }
  throw ContractError("unreachable layer kind");
}

/// Propagates shapes through the whole (padded-input) graph; throws on any
/// inconsistency, including source ids that do not precede their reference.
inline Shape check_shapes(const ModelGraph& m, Shape padded_in) {
  std::vector<Shape> outs;
  Shape cur = padded_in;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if ((l.kind == LayerKind::Concat || l.kind == LayerKind::Add) && l.src >= int(i))
      throw ShapeError(l.name + ": source layer id " + std::to_string(l.src) +
                       " does not precede layer " + std::to_string(i));
    cur = layer_out_shape(l, cur, outs, padded_in);
    outs.push_back(cur);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline malleconv::PredictorVals predictor_vals(const ParamBinding& bind, const std::string& p) {
  malleconv::PredictorVals v;
  v.entry_w = bind.val(p + ".entry.w");
  v.entry_b = bind.val(p + ".entry.b");
  for (int i = 0; i < 4; ++i) {
    v.res_w[i] = bind.val(p + ".res" + std::to_string(i) + ".w");
    v.res_b[i] = bind.val(p + ".res" + std::to_string(i) + ".b");
  }
  v.exit_w = bind.val(p + ".exit.w");
  v.exit_b = bind.val(p + ".exit.b");
  return v;
}

inline Val layer_forward(const LayerSpec& l, Tape& t, Val in, const std::vector<Val>& outs,
                         Val model_in, const ParamBinding& bind) {
  switch (l.kind) {
    case LayerKind::Conv:
      return ops::conv2d(t, in, bind.val(l.name + ".w"), bind.val(l.name + ".b"), l.conv);
    case LayerKind::Relu:
      return ops::relu(t, in);
    case LayerKind::InvertedBottleneck: {
      const int e = l.channels * l.expansion;
      ConvSpec expand{1, l.channels, e, 1, Padding::SameZero, false};
      ConvSpec project{1, e, l.channels, 1, Padding::SameZero, false};
      Val h = ops::relu(t, ops::conv2d(t, in, bind.val(l.name + ".expand.w"),
                                       bind.val(l.name + ".expand.b"), expand));
      h = ops::relu(t, ops::depthwise_conv2d(t, h, bind.val(l.name + ".dw.w"),
                                             bind.val(l.name + ".dw.b"), 3));
      h = ops::conv2d(t, h, bind.val(l.name + ".project.w"), bind.val(l.name + ".project.b"),
                      project);
      return ops::add(t, in, h);
    }
    case LayerKind::MalleConv: {
      auto pv = predictor_vals(bind, l.name + ".pred");
      auto [gw, gb] = malleconv::predictor_forward(t, in, l.pred, pv);
      return malleconv::slice_apply_fused(t, in, gw, gb, l.pred.k);
    }
    case LayerKind::SpaceToChannel:
      return ops::space_to_channel(t, in, l.r);
    case LayerKind::ChannelToSpace:
      return ops::channel_to_space(t, in, l.r);
    case LayerKind::BilinearUp: {
      const Shape s = t.value(in).shape();
      return ops::bilinear_resize(t, in, s.h * l.r, s.w * l.r);
    }
    case LayerKind::Concat:
      return ops::concat_channels(t, in, l.src < 0 ? model_in : outs[size_t(l.src)]);
    case LayerKind::Add:
      return ops::add(t, in, l.src < 0 ? model_in : outs[size_t(l.src)]);
  }
  throw ContractError("unreachable layer kind");
}

/// Full forward: reflect-pads to the model divisor, runs the layer list,
/// crops back, and applies the residual head (out = input - net(input)).
inline Val forward(const ModelGraph& m, Tape& t, Val input, const ParamBinding& bind) {
  const Shape in = t.value(input).shape();
  if (in.c != m.in_channels)
    throw ShapeError("model forward: input has " + std::to_string(in.c) +
                     " channels, model expects " + std::to_string(m.in_channels));
  const int ph = (m.divisor - in.h % m.divisor) % m.divisor;
  const int pw = (m.divisor - in.w % m.divisor) % m.divisor;
  Val x = (ph || pw) ? ops::pad_reflect(t, input, ph, pw) : input;
  std::vector<Val> outs;
  outs.reserve(m.layers.size());
  Val cur = x;
  for (const LayerSpec& l : m.layers) {
    cur = layer_forward(l, t, cur, outs, x, bind);
    outs.push_back(cur);
  }
  if (ph || pw) cur = ops::crop(t, cur, in.h, in.w);
  if (m.residual_output) cur = ops::sub(t, input, cur);
  return cur;
}

/// Feature map, predicted grid, and fused output captured at the first
/// MalleConv layer of a model, for the kernel-swap diagnostic.
struct MalleCapture {
  int layer = -1;
  Tensor input;  // the feature map the MalleConv operated on
  KernelGrid grid;
  Tensor fused;
};

inline MalleCapture capture_first_malle(const ModelGraph& m, const Tensor& x) {
  Tape t;
  ParamBinding bind(t, const_cast<ModelGraph&>(m).params);
  Val input = t.leaf(x, "input");
  const Shape in = x.shape();
  const int ph = (m.divisor - in.h % m.divisor) % m.divisor;
  const int pw = (m.divisor - in.w % m.divisor) % m.divisor;
  Val padded = (ph || pw) ? ops::pad_reflect(t, input, ph, pw) : input;
  std::vector<Val> outs;
  Val cur = padded;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.kind == LayerKind::MalleConv) {
      auto pv = predictor_vals(bind, l.name + ".pred");
      auto [gw, gb] = malleconv::predictor_forward(t, cur, l.pred, pv);
      MalleCapture cap;
      cap.layer = int(i);
      cap.input = t.value(cur);
      cap.grid = malleconv::grid_from_tensors(t.value(gw), t.value(gb), l.pred.k);
      cap.fused = malleconv::slice_apply_fused_fwd(cap.input, cap.grid);
      return cap;
    }
    cur = layer_forward(l, t, cur, outs, padded, bind);
    outs.push_back(cur);
  }
  throw ContractError("capture_first_malle: model has no MalleConv layer");
}

/// Convenience single-tensor inference.
inline Tensor infer(const ModelGraph& m, const Tensor& x) {
  Tape t;
  ParamBinding bind(t, const_cast<ModelGraph&>(m).params);
  Val out = forward(m, t, t.leaf(x, "input"), bind);
  return t.value(out);
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline std::string layer_prefix(int idx) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "L%02d", idx);
  return buf;
}

inline void register_conv(ModelGraph& m, const LayerSpec& l) {
  m.params.add(l.name + ".w", Tensor(Shape{l.conv.k, l.conv.k, l.conv.c_in, l.conv.c_out}));
  m.params.add(l.name + ".b", Tensor(Shape{1, 1, 1, l.conv.c_out}));
}

inline void register_layer(ModelGraph& m, const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv:
      register_conv(m, l);
      break;
    case LayerKind::InvertedBottleneck: {
      const int e = l.channels * l.expansion;
      m.params.add(l.name + ".expand.w", Tensor(Shape{1, 1, l.channels, e}));
      m.params.add(l.name + ".expand.b", Tensor(Shape{1, 1, 1, e}));
      m.params.add(l.name + ".dw.w", Tensor(Shape{1, 3, 3, e}));
      m.params.add(l.name + ".dw.b", Tensor(Shape{1, 1, 1, e}));
      m.params.add(l.name + ".project.w", Tensor(Shape{1, 1, e, l.channels}));
      m.params.add(l.name + ".project.b", Tensor(Shape{1, 1, 1, l.channels}));
      break;
    }
    case LayerKind::MalleConv: {
      const auto& p = l.pred;
      const std::string pre = l.name + ".pred";
      m.params.add(pre + ".entry.w", Tensor(Shape{3, 3, p.c, p.width}));
      m.params.add(pre + ".entry.b", Tensor(Shape{1, 1, 1, p.width}));
      for (int i = 0; i < 4; ++i) {
        m.params.add(pre + ".res" + std::to_string(i) + ".w",
                     Tensor(Shape{3, 3, p.width, p.width}));
        m.params.add(pre + ".res" + std::to_string(i) + ".b", Tensor(Shape{1, 1, 1, p.width}));
      }
      m.params.add(pre + ".exit.w", Tensor(Shape{1, 1, p.width, p.exit_channels()}));
      m.params.add(pre + ".exit.b", Tensor(Shape{1, 1, 1, p.exit_channels()}));
      break;
    }
    default:
      break;  // parameterless
  }
}

inline void push_layer(ModelGraph& m, LayerSpec l) {
  l.name = layer_prefix(int(m.layers.size())) + (l.name.empty() ? "" : "." + l.name);
  register_layer(m, l);
  m.layers.push_back(std::move(l));
}

inline LayerSpec conv_layer(int k, int c_in, int c_out, const char* tag = "conv") {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.conv = ConvSpec{k, c_in, c_out, 1, Padding::SameZero, false};
  l.name = tag;
  return l;
}

inline LayerSpec malle_layer(int c, int k, int width = 16, int pool = 4) {
  LayerSpec l;
  l.kind = LayerKind::MalleConv;
  l.pred = malleconv::PredictorConfig{c, width, k, pool};
  l.name = "malle";
  return l;
}

/// DnCNN-style chain: conv+relu x (depth-1), final conv back to the input
/// channels, residual (noise-predicting) head. malle_mid_k > 0 replaces the
/// conv at position ceil(depth/2) with a MalleConv of that kernel size.
inline ModelGraph build_dncnn(int depth, int channels, int malle_mid_k = 0, int in_channels = 3) {
  if (depth < 2) throw ShapeError("build_dncnn: depth must be >= 2");
  ModelGraph m;
  m.in_channels = in_channels;
  m.divisor = malle_mid_k > 0 ? 8 : 1;
  const int mid = (depth + 1) / 2;  // 1-based conv index to replace
  for (int d = 1; d <= depth; ++d) {
    const int ci = d == 1 ? in_channels : channels;
    const int co = d == depth ? in_channels : channels;
    if (malle_mid_k > 0 && d == mid)
      push_layer(m, malle_layer(channels, malle_mid_k));
    else
      push_layer(m, conv_layer(3, ci, co));
    if (d < depth) push_layer(m, LayerSpec{LayerKind::Relu, "relu"});
  }
  std::ostringstream os;
  os << "arch=dncnn\ndepth=" << depth << "\nchannels=" << channels
     << "\nmalle_mid_k=" << malle_mid_k << "\nin_channels=" << in_channels << "\n";
  m.config_blob = os.str();
  return m;
}

/// MalleNet pyramid: per level a 2x space-to-channel entry (with a 1x1
/// projection back to `channels`), `blocks` inverted bottlenecks with one
/// MalleConv mid-stack, then bottom-up bilinear upsampling, concatenation
/// with the upper level's input, and a 1x1 fusion conv. Residual head.
inline ModelGraph build_mallenet(int channels, int blocks, int k, int levels = 4,
                                 int in_channels = 3) {
  if (channels < 4) throw ShapeError("build_mallenet: channels must be >= 4");
  if (levels < 1 || blocks < 1) throw ShapeError("build_mallenet: levels and blocks must be >= 1");
  ModelGraph m;
  m.in_channels = in_channels;
  m.divisor = (1 << (levels - 1)) * 8;

  auto body = [&](int level) {
    for (int b = 0; b < blocks; ++b) {
      LayerSpec ib;
      ib.kind = LayerKind::InvertedBottleneck;
      ib.channels = channels;
      ib.expansion = 2;
      ib.name = "ib";
      push_layer(m, ib);
      if (b == (blocks - 1) / 2) push_layer(m, malle_layer(channels, k));
    }
    (void)level;
  };

  // Level inputs f0..f_{levels-1}, chained space-to-channel entries.
  std::vector<int> level_input_id(std::size_t(levels), 0);
  push_layer(m, conv_layer(3, in_channels, channels, "stem"));
  push_layer(m, LayerSpec{LayerKind::Relu, "relu"});
  level_input_id[0] = int(m.layers.size()) - 1;
  for (int l = 1; l < levels; ++l) {
    LayerSpec s2c;
    s2c.kind = LayerKind::SpaceToChannel;
    s2c.r = 2;
    s2c.name = "s2c";
    push_layer(m, s2c);
    push_layer(m, conv_layer(1, channels * 4, channels, "proj"));
    push_layer(m, LayerSpec{LayerKind::Relu, "relu"});
    level_input_id[size_t(l)] = int(m.layers.size()) - 1;
  }

  // Bottom level body, then merge upward.
  body(levels - 1);
  for (int l = levels - 2; l >= 0; --l) {
    LayerSpec up;
    up.kind = LayerKind::BilinearUp;
    up.r = 2;
    up.name = "up";
    push_layer(m, up);
    LayerSpec cat;
    cat.kind = LayerKind::Concat;
    cat.src = level_input_id[size_t(l)];
    cat.name = "cat";
    push_layer(m, cat);
    push_layer(m, conv_layer(1, channels * 2, channels, "fuse"));
    push_layer(m, LayerSpec{LayerKind::Relu, "relu"});
    body(l);
  }
  push_layer(m, conv_layer(3, channels, in_channels, "head"));

  std::ostringstream os;
  os << "arch=mallenet\nchannels=" << channels << "\nblocks=" << blocks << "\nk=" << k
     << "\nlevels=" << levels << "\nin_channels=" << in_channels << "\n";
  m.config_blob = os.str();
  return m;
}

// ---------------------------------------------------------------------------
// Init and serialization
// ---------------------------------------------------------------------------

inline void he_fill(Tensor& w, int fan_in, Rng& rng) {
  const float std = std::sqrt(2.0f / float(fan_in));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal() * std;
}

/// Fan-in scaled Gaussian init; MalleConv exit convs get the identity init
/// (zero weights, delta-kernel bias) so the layer starts as a no-op, and the
/// final conv is zeroed so the residual head starts as the exact identity
/// (out = input - 0) instead of a violent random transient.
inline void init_weights(ModelGraph& m, Rng& rng) {
  for (const LayerSpec& l : m.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        he_fill(m.params.at(l.name + ".w").value, l.conv.k * l.conv.k * l.conv.c_in, rng);
        break;
      case LayerKind::InvertedBottleneck: {
        const int e = l.channels * l.expansion;
        he_fill(m.params.at(l.name + ".expand.w").value, l.channels, rng);
        he_fill(m.params.at(l.name + ".dw.w").value, 9, rng);
        he_fill(m.params.at(l.name + ".project.w").value, e, rng);
        break;
      }
      case LayerKind::MalleConv: {
        const std::string pre = l.name + ".pred";
        he_fill(m.params.at(pre + ".entry.w").value, 9 * l.pred.c, rng);
        for (int i = 0; i < 4; ++i)
          he_fill(m.params.at(pre + ".res" + std::to_string(i) + ".w").value, 9 * l.pred.width,
                  rng);
        auto& ew = m.params.at(pre + ".exit.w").value;
        std::fill(ew.data(), ew.data() + ew.size(), 0.0f);
        m.params.at(pre + ".exit.b").value = malleconv::identity_exit_bias(l.pred);
        break;
      }
      default:
        break;
    }
  }
  if (m.residual_output && !m.layers.empty() && m.layers.back().kind == LayerKind::Conv) {
    auto& hw = m.params.at(m.layers.back().name + ".w").value;
    std::fill(hw.data(), hw.data() + hw.size(), 0.0f);
  }
}

inline std::int64_t param_count(const ModelGraph& m) { return m.params.element_count(); }

inline std::map<std::string, std::string> parse_config_blob(const std::string& blob) {
  std::map<std::string, std::string> kv;
  std::istringstream is(blob);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

/// Rebuilds a graph from the canonical config text stored in a checkpoint.
inline ModelGraph build_from_config(const std::string& blob) {
  auto kv = parse_config_blob(blob);
  auto geti = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("model config: missing key " + key);
    return std::stoi(it->second);
  };
  const auto arch = kv.count("arch") ? kv["arch"] : "";
  if (arch == "dncnn")
    return build_dncnn(geti("depth"), geti("channels"), geti("malle_mid_k"), geti("in_channels"));
  if (arch == "mallenet")
    return build_mallenet(geti("channels"), geti("blocks"), geti("k"), geti("levels"),
                          geti("in_channels"));
  throw IoError("model config: unknown arch '" + arch + "'");
}

inline void save_model(const ModelGraph& m, const std::string& path) {
  checkpoint::save(m.params, path, m.config_blob);
}

/// Loads a checkpoint and rebuilds the exact model it was saved from.
inline ModelGraph load_model(const std::string& path) {
  std::string blob;
  ParamStore store = checkpoint::load(path, &blob);
  ModelGraph m = build_from_config(blob);
  if (store.count() != m.params.count())
    throw IoError("model load: parameter count mismatch for " + path);
  for (int i = 0; i < store.count(); ++i) {
    auto& dst = m.params.at(store.at(i).name);
    if (!(dst.value.shape() == store.at(i).value.shape()))
      throw IoError("model load: shape mismatch for " + store.at(i).name);
    dst.value = store.at(i).value;
  }
  return m;
}

}  // namespace model
}  // namespace malle
