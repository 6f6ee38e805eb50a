#include "psp/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "psp/errors.hpp"
#include "psp/rng.hpp"

namespace psp {

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::residual_add: return "residual_add";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

const char* to_string(ExemptReason r) {
  switch (r) {
    case ExemptReason::none: return "none";
    case ExemptReason::input: return "input";
    case ExemptReason::output: return "output";
    case ExemptReason::transition: return "transition";
    case ExemptReason::shortcut: return "shortcut";
  }
  return "?";
}

const char* to_string(PruneMode m) {
  switch (m) {
    case PruneMode::none: return "none";
    case PruneMode::psp_threshold: return "psp_threshold";
    case PruneMode::psp_fixed_sparsity: return "psp_fixed_sparsity";
    case PruneMode::l1_norm_baseline: return "l1_norm_baseline";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::linear, LayerKind::batchnorm, LayerKind::relu,
                      LayerKind::avgpool, LayerKind::maxpool, LayerKind::residual_add,
                      LayerKind::concat})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

ExemptReason exempt_from_string(const std::string& s) {
  for (ExemptReason r : {ExemptReason::none, ExemptReason::input, ExemptReason::output,
                         ExemptReason::transition, ExemptReason::shortcut})
    if (s == to_string(r)) return r;
  throw std::invalid_argument("unknown exempt reason '" + s + "'");
}

PruneMode prune_mode_from_string(const std::string& s) {
  for (PruneMode m : {PruneMode::none, PruneMode::psp_threshold, PruneMode::psp_fixed_sparsity,
                      PruneMode::l1_norm_baseline})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown prune mode '" + s + "'");
}

int Model::layer_index(const std::string& name) const {
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return static_cast<int>(i);
  return -1;
}

void validate_model(const Model& m) {
  if (m.layers.empty()) throw std::invalid_argument("model has no layers");
  if (m.layers.size() != m.params.size())
    throw std::invalid_argument("layer/param list size mismatch");
  std::vector<int> consumers(m.layers.size(), 0);
  bool reads_input = false;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.inputs.empty()) throw std::invalid_argument("layer '" + l.name + "' has no inputs");
    for (int in : l.inputs) {
      if (in == -1) {
        reads_input = true;
      } else if (in < 0 || in >= static_cast<int>(i)) {
        throw std::invalid_argument("layer '" + l.name + "' input id " + std::to_string(in) +
                                    " is not an earlier layer");
      } else {
        ++consumers[static_cast<size_t>(in)];
      }
    }
  }
  if (!reads_input) throw std::invalid_argument("no layer consumes the model input");
  for (size_t i = 0; i + 1 < m.layers.size(); ++i)
    if (consumers[i] == 0)
      throw std::invalid_argument("layer '" + m.layers[i].name + "' output is unused");
  if (m.layers.back().kind != LayerKind::linear)
    throw std::invalid_argument("model must end in a linear classifier");
}

// ---- builders ----------------------------------------------------------------

namespace {

int push_layer(Model& m, LayerSpec spec) {
  m.layers.push_back(std::move(spec));
  m.params.emplace_back();
  return static_cast<int>(m.layers.size() - 1);
}

int add_conv(Model& m, std::string name, int input, int64_t in_ch, int64_t out_ch, int64_t kernel,
             int64_t stride, int64_t pad, int64_t in_h, int64_t in_w, ExemptReason exempt,
             bool bias = false) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.name = std::move(name);
  l.inputs = {input};
  l.geom = ConvGeometry{out_ch, in_ch, kernel, kernel, stride, pad, in_h, in_w};
  l.geom.validate();
  l.has_bias = bias;
  l.exempt = exempt;
  l.psp_attached = exempt == ExemptReason::none;
  return push_layer(m, std::move(l));
}

int add_bn(Model& m, std::string name, int input, int64_t channels) {
  LayerSpec l;
  l.kind = LayerKind::batchnorm;
  l.name = std::move(name);
  l.inputs = {input};
  l.channels = channels;
  return push_layer(m, std::move(l));
}

int add_relu(Model& m, std::string name, int input) {
  LayerSpec l;
  l.kind = LayerKind::relu;
  l.name = std::move(name);
  l.inputs = {input};
  return push_layer(m, std::move(l));
}

}  // namespace

Model build_resnet_small(int depth, int num_classes, std::vector<int64_t> widths,
                         int64_t in_channels, int64_t in_h, int64_t in_w) {
  if (depth < 8 || (depth - 2) % 6 != 0)
    throw ConfigError("resnet depth must be 6n+2 (8, 14, 20, 26, ...), got " +
                      std::to_string(depth));
  if (widths.size() != 3) throw ConfigError("resnet needs exactly 3 group widths");
  const int blocks_per_group = (depth - 2) / 6;

  Model m;
  m.arch = "resnet_small";
  m.input_channels = in_channels;
  m.input_h = in_h;
  m.input_w = in_w;
  m.num_classes = num_classes;

  int prev = add_conv(m, "stem", -1, in_channels, widths[0], 3, 1, 1, in_h, in_w,
                      ExemptReason::input);
  int64_t ch = widths[0], h = in_h, w = in_w;

  for (int g = 0; g < 3; ++g) {
    for (int b = 0; b < blocks_per_group; ++b) {
      const std::string tag = "g" + std::to_string(g) + "b" + std::to_string(b);
      const bool downsample = g > 0 && b == 0;
      const int64_t stride = downsample ? 2 : 1;
      const int64_t out_ch = widths[static_cast<size_t>(g)];
      const int block_in = prev;

      int id = add_bn(m, tag + ".bn1", block_in, ch);
      id = add_relu(m, tag + ".relu1", id);
      id = add_conv(m, tag + ".conv1", id, ch, out_ch, 3, stride, 1, h, w, ExemptReason::none);
      const int64_t oh = m.layers.back().geom.out_h(), ow = m.layers.back().geom.out_w();
      id = add_bn(m, tag + ".bn2", id, out_ch);
      id = add_relu(m, tag + ".relu2", id);
      id = add_conv(m, tag + ".conv2", id, out_ch, out_ch, 3, 1, 1, oh, ow, ExemptReason::none);
      m.layers.back().join_feeder = true;

      int shortcut = block_in;
      if (downsample || ch != out_ch)
        shortcut = add_conv(m, tag + ".proj", block_in, ch, out_ch, 1, stride, 0, h, w,
                            ExemptReason::shortcut);

      LayerSpec join;
      join.kind = LayerKind::residual_add;
      join.name = tag + ".add";
      join.inputs = {shortcut, id};
      prev = push_layer(m, std::move(join));
      ch = out_ch;
      h = oh;
      w = ow;
    }
  }

  int id = add_bn(m, "final.bn", prev, ch);
  id = add_relu(m, "final.relu", id);
  LayerSpec gap;
  gap.kind = LayerKind::avgpool;
  gap.name = "final.gap";
  gap.inputs = {id};
  gap.pool_window = 0;  // global
  id = push_layer(m, std::move(gap));

  LayerSpec fc;
  fc.kind = LayerKind::linear;
  fc.name = "fc";
  fc.inputs = {id};
  fc.in_features = ch;
  fc.out_features = num_classes;
  fc.has_bias = true;
  fc.exempt = ExemptReason::output;
  push_layer(m, std::move(fc));

  validate_model(m);
  return m;
}

Model build_densenet_small(int depth, int growth, int num_classes, int64_t in_channels,
                           int64_t in_h, int64_t in_w) {
  if (depth < 7 || (depth - 4) % 3 != 0)
    throw ConfigError("densenet depth must be 3n+4 (7, 10, ..., 40), got " + std::to_string(depth));
  if (growth < 1) throw ConfigError("densenet growth must be >= 1");
  const int blocks_per_stage = (depth - 4) / 3;

  Model m;
  m.arch = "densenet_small";
  m.input_channels = in_channels;
  m.input_h = in_h;
  m.input_w = in_w;
  m.num_classes = num_classes;

  int64_t ch = 2 * growth, h = in_h, w = in_w;
  int prev = add_conv(m, "stem", -1, in_channels, ch, 3, 1, 1, h, w, ExemptReason::input, true);

  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < blocks_per_stage; ++b) {
      const std::string tag = "s" + std::to_string(s) + "b" + std::to_string(b);
      int id = add_relu(m, tag + ".relu", prev);
      id = add_conv(m, tag + ".conv", id, ch, growth, 3, 1, 1, h, w, ExemptReason::none);
      m.layers.back().join_feeder = true;
      LayerSpec cat;
      cat.kind = LayerKind::concat;
      cat.name = tag + ".cat";
      cat.inputs = {prev, id};
      prev = push_layer(m, std::move(cat));
      ch += growth;
    }
    if (s < 2) {
      const std::string tag = "t" + std::to_string(s);
      int id = add_relu(m, tag + ".relu", prev);
      id = add_conv(m, tag + ".conv", id, ch, ch, 1, 1, 0, h, w, ExemptReason::transition, true);
      LayerSpec pool;
      pool.kind = LayerKind::avgpool;
      pool.name = tag + ".pool";
      pool.inputs = {id};
      pool.pool_window = 2;
      pool.pool_stride = 2;
      prev = push_layer(m, std::move(pool));
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) throw ConfigError("densenet input too small for 3 stages");
    }
  }

  int id = add_relu(m, "final.relu", prev);
  LayerSpec gap;
  gap.kind = LayerKind::avgpool;
  gap.name = "final.gap";
  gap.inputs = {id};
  gap.pool_window = 0;
  id = push_layer(m, std::move(gap));

  LayerSpec fc;
  fc.kind = LayerKind::linear;
  fc.name = "fc";
  fc.inputs = {id};
  fc.in_features = ch;
  fc.out_features = num_classes;
  fc.has_bias = true;
  fc.exempt = ExemptReason::output;
  push_layer(m, std::move(fc));

  validate_model(m);
  return m;
}

void init_model_params(Model& m, uint64_t seed) {
  Rng rng(derive_seed(seed, "weights"));
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    LayerParams& p = m.params[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const ConvGeometry& g = l.geom;
        p.weight = Tensor({g.out_channels, g.in_channels, g.kernel_h, g.kernel_w});
        const double std = std::sqrt(2.0 / static_cast<double>(g.patch_size()));
        for (int64_t j = 0; j < p.weight.numel(); ++j) p.weight[j] = std * rng.next_gaussian();
        if (l.has_bias) p.bias = Tensor({g.out_channels});
        break;
      }
      case LayerKind::linear: {
        p.weight = Tensor({l.out_features, l.in_features});
        const double std = std::sqrt(2.0 / static_cast<double>(l.in_features));
        for (int64_t j = 0; j < p.weight.numel(); ++j) p.weight[j] = std * rng.next_gaussian();
        if (l.has_bias) p.bias = Tensor({l.out_features});
        break;
      }
      case LayerKind::batchnorm:
        p.gamma = Tensor::full({l.channels}, 1.0);
        p.beta = Tensor({l.channels});
        p.running_mean = Tensor({l.channels});
        p.running_var = Tensor::full({l.channels}, 1.0);
        break;
      default:
        break;
    }
  }
}

// ---- PSP attachment ------------------------------------------------------------

void attach_psp(Model& m, const PruneAttachConfig& cfg) {
  m.structures.clear();
  m.prune_mode = cfg.mode;
  if (cfg.mode == PruneMode::none) {
    // psp_attached means "owns a StructureSet" from here on
    for (LayerSpec& l : m.layers) l.psp_attached = false;
    return;
  }

  const bool wants_layer_gran =
      std::find(cfg.granularities.begin(), cfg.granularities.end(), Granularity::layer) !=
      cfg.granularities.end();
  bool any_join_feeder = false;

  for (size_t i = 0; i < m.layers.size(); ++i) {
    LayerSpec& l = m.layers[i];
    if (l.kind != LayerKind::conv) continue;
    bool attach = l.psp_attached;
    auto ov = cfg.attach_overrides.find(l.name);
    if (ov != cfg.attach_overrides.end()) attach = ov->second;
    l.psp_attached = attach;
    if (!attach) continue;
    if (l.has_bias)
      throw ConfigError("layer '" + l.name + "': structure pruning on biased convs is unsupported");
    if (l.join_feeder) any_join_feeder = true;

    double eps = cfg.epsilon;
    auto eov = cfg.epsilon_overrides.find(l.name);
    if (eov != cfg.epsilon_overrides.end()) eps = eov->second;

    std::vector<StructureSet>& sets = m.structures[static_cast<int>(i)];
    uint64_t set_idx = 0;
    for (Granularity g : cfg.granularities) {
      if (g == Granularity::layer && !l.join_feeder) {
        if (ov != cfg.attach_overrides.end() && ov->second &&
            cfg.granularities.size() == 1)
          throw ConfigError("layer '" + l.name +
                            "': layer granularity needs a conv feeding a residual/concat join");
        continue;  // layer structures only exist on join feeders
      }
      StructureSet s;
      s.granularity = g;
      s.alpha = Tensor(alpha_shape_for(g, l.geom));
      s.epsilon = eps;
      s.regularizer = cfg.regularizer;
      s.grad_rule = cfg.grad_rule;
      if (cfg.mode == PruneMode::l1_norm_baseline) {
        for (int64_t j = 0; j < s.alpha.numel(); ++j) s.alpha[j] = 1.0;
        s.fixed_mask = l1_norm_keep_mask(m.params[i].weight, g, l.geom, cfg.fraction);
      } else {
        init_alpha(s, derive_seed(cfg.seed, "alpha." + l.name, set_idx), cfg.init_std);
        if (cfg.mode == PruneMode::psp_fixed_sparsity) apply_fixed_sparsity(s, cfg.fraction);
      }
      sets.push_back(std::move(s));
      ++set_idx;
    }
    if (sets.empty()) {
      m.structures.erase(static_cast<int>(i));
      l.psp_attached = false;
    }
  }

  if (wants_layer_gran && !any_join_feeder)
    throw ConfigError("layer granularity needs a multi-branch architecture");
}

// ---- forward --------------------------------------------------------------------

namespace {

Tensor broadcast_structure_mask(const std::vector<StructureSet>& sets, const ConvGeometry& g) {
  Tensor mask = Tensor::full({g.out_channels, g.in_channels, g.kernel_h, g.kernel_w}, 1.0);
  for (const StructureSet& s : sets) {
    const SparseView v = sparse_view(s);
    int64_t i = 0;
    for (int64_t k = 0; k < g.out_channels; ++k)
      for (int64_t c = 0; c < g.in_channels; ++c)
        for (int64_t r = 0; r < g.kernel_h; ++r)
          for (int64_t sx = 0; sx < g.kernel_w; ++sx, ++i)
            if (!v.active[static_cast<size_t>(structure_index_of(s.granularity, g, k, c, r, sx))])
              mask[i] = 0.0;
  }
  return mask;
}

}  // namespace

ForwardPass model_forward(Model& m, const Tensor& batch, bool training) {
  if (batch.rank() != 4 || batch.dim(1) != m.input_channels || batch.dim(2) != m.input_h ||
      batch.dim(3) != m.input_w)
    throw std::invalid_argument("batch " + batch.shape_str() + " does not match model input " +
                                Tensor::shape_str({-1, m.input_channels, m.input_h, m.input_w}));

  ForwardPass fp;
  Graph& g = fp.graph;
  const int input_node = g.add_input(batch);
  std::vector<int> out(m.layers.size(), -1);

  auto param_node = [&](const std::string& name, const Tensor& t) {
    const int id = g.add_param(t, name);
    fp.param_nodes.emplace_back(name, id);
    return id;
  };

  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    LayerParams& p = m.params[i];
    auto in_node = [&](size_t slot) {
      const int src = l.inputs[slot];
      return src == -1 ? input_node : out[static_cast<size_t>(src)];
    };

    switch (l.kind) {
      case LayerKind::conv: {
        int x = in_node(0);
        if (!p.input_gather.empty()) x = g.gather_channels(x, p.input_gather);
        int y;
        if (p.packed) {
          if (p.kept_cols.empty()) {
            const int64_t batch_n = g.value(x).dim(0);
            y = g.add_input(Tensor({batch_n, l.geom.out_channels, l.geom.out_h(), l.geom.out_w()}));
          } else {
            const int w2 = param_node(l.name + ".weight", p.weight);
            y = g.conv2d_packed_op(w2, x, l.geom, p.kept_cols);
          }
        } else {
          int w = param_node(l.name + ".weight", p.weight);
          const auto sit = m.structures.find(static_cast<int>(i));
          if (sit != m.structures.end() && m.prune_mode != PruneMode::none) {
            if (m.prune_mode == PruneMode::l1_norm_baseline) {
              w = g.mask_scale(w, broadcast_structure_mask(sit->second, l.geom));
            } else {
              size_t set_idx = 0;
              for (const StructureSet& s : sit->second) {
                const int a = param_node(l.name + ".alpha" + std::to_string(set_idx), s.alpha);
                PspMeta meta{s.granularity, s.epsilon, s.grad_rule, s.fixed_mask};
                w = g.psp_scale(w, a, meta);
                ++set_idx;
              }
            }
          }
          y = g.conv2d(w, x, l.geom);
        }
        if (l.has_bias && !p.bias.empty()) {
          const int b = param_node(l.name + ".bias", p.bias);
          y = g.bias_add_channels(y, b);
        }
        out[i] = y;
        break;
      }
      case LayerKind::linear: {
        const int x = in_node(0);
        const int w = param_node(l.name + ".weight", p.weight);
        const int b = l.has_bias ? param_node(l.name + ".bias", p.bias) : -1;
        out[i] = g.linear(x, w, b);
        break;
      }
      case LayerKind::batchnorm: {
        int x = in_node(0);
        if (!p.input_gather.empty()) x = g.gather_channels(x, p.input_gather);
        const int ga = param_node(l.name + ".gamma", p.gamma);
        const int be = param_node(l.name + ".beta", p.beta);
        out[i] = g.batchnorm(x, ga, be, &p.running_mean, &p.running_var, training);
        break;
      }
      case LayerKind::relu:
        out[i] = g.relu(in_node(0));
        break;
      case LayerKind::avgpool:
        out[i] = l.pool_window == 0 ? g.global_avgpool(in_node(0))
                                    : g.avgpool(in_node(0), l.pool_window, l.pool_stride);
        break;
      case LayerKind::maxpool:
        out[i] = g.maxpool(in_node(0), l.pool_window, l.pool_stride);
        break;
      case LayerKind::residual_add:
        out[i] = g.add(in_node(0), in_node(1));
        break;
      case LayerKind::concat: {
        std::vector<int> xs;
        xs.reserve(l.inputs.size());
        for (size_t s = 0; s < l.inputs.size(); ++s) xs.push_back(in_node(s));
        out[i] = g.concat_channels(xs);
        break;
      }
    }
  }
  fp.logits = out.back();
  return fp;
}

Tensor model_logits(const Model& m, const Tensor& batch) {
  // Eval never writes running stats, so the cast stays observable-const.
  ForwardPass fp = model_forward(const_cast<Model&>(m), batch, /*training=*/false);
  return fp.graph.value(fp.logits);
}

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, bool training,
                         double momentum) {
  Graph g;
  const int xn = g.add_input(x);
  const int gn = g.add_input(gamma);
  const int bn = g.add_input(beta);
  return g.value(g.batchnorm(xn, gn, bn, &running_mean, &running_var, training, momentum));
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Graph g;
  return g.value(g.softmax_cross_entropy(g.add_input(logits), labels))[0];
}

}  // namespace psp
