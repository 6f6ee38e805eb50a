#include "psp/compact.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace psp {

namespace {

int64_t layer_param_count(const LayerParams& p) {
  int64_t n = 0;
  for (const Tensor* t : {&p.weight, &p.bias, &p.gamma, &p.beta})
    if (!t->empty()) n += t->numel();
  return n;
}

int64_t layer_mac_count(const LayerSpec& l, const LayerParams& p) {
  switch (l.kind) {
    case LayerKind::conv: {
      if (l.geom.in_h < 1) throw std::invalid_argument("conv '" + l.name + "' shape unresolved");
      if (p.packed && p.kept_cols.empty()) return 0;
      if (p.weight.empty()) throw std::invalid_argument("conv '" + l.name + "' has no weights");
      return p.weight.numel() * l.geom.out_h() * l.geom.out_w();
    }
    case LayerKind::linear:
      if (p.weight.empty()) throw std::invalid_argument("linear '" + l.name + "' has no weights");
      return p.weight.numel();
    default:
      return 0;
  }
}

// Output channel count of each layer in its own (original) channel space.
std::vector<int64_t> output_channels(const Model& m) {
  std::vector<int64_t> ch(m.layers.size(), 0);
  auto of = [&](int id) { return id == -1 ? m.input_channels : ch[static_cast<size_t>(id)]; };
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    switch (l.kind) {
      case LayerKind::conv: ch[i] = l.geom.out_channels; break;
      case LayerKind::linear: ch[i] = l.out_features; break;
      case LayerKind::batchnorm: ch[i] = l.channels; break;
      case LayerKind::concat: {
        int64_t sum = 0;
        for (int in : l.inputs) sum += of(in);
        ch[i] = sum;
        break;
      }
      default: ch[i] = of(l.inputs[0]); break;
    }
  }
  return ch;
}

struct ConvDecision {
  bool removed = false;
  std::vector<uint8_t> keep_channel;  // over original input channels; empty = all
  std::vector<uint8_t> keep_col;      // over original (c,r,s) patch rows; empty = all
  std::vector<uint8_t> kernel_mask;   // R*S mask (shape granularity)
  std::vector<int64_t> structure_counts{0, 0};  // total, kept over all sets
};

ConvDecision decide_conv(const LayerSpec& l, const std::vector<StructureSet>& sets) {
  ConvDecision d;
  const ConvGeometry& g = l.geom;
  for (const StructureSet& s : sets) {
    const SparseView v = sparse_view(s);
    int64_t kept = 0;
    for (uint8_t a : v.active) kept += a;
    d.structure_counts[0] += s.structure_count();
    d.structure_counts[1] += kept;
    switch (s.granularity) {
      case Granularity::layer:
        if (!v.active[0]) d.removed = true;
        break;
      case Granularity::channel: {
        d.keep_channel.assign(static_cast<size_t>(g.in_channels), 1);
        for (int64_t c = 0; c < g.in_channels; ++c)
          if (!v.active[static_cast<size_t>(c)]) d.keep_channel[static_cast<size_t>(c)] = 0;
        break;
      }
      case Granularity::column: {
        if (d.keep_col.empty()) d.keep_col.assign(static_cast<size_t>(g.patch_size()), 1);
        for (int64_t c = 0; c < g.in_channels; ++c)
          for (int64_t r = 0; r < g.kernel_h; ++r)
            for (int64_t s2 = 0; s2 < g.kernel_w; ++s2) {
              const int64_t sid = structure_index_of(Granularity::column, g, 0, c, r, s2);
              if (!v.active[static_cast<size_t>(sid)])
                d.keep_col[static_cast<size_t>((c * g.kernel_h + r) * g.kernel_w + s2)] = 0;
            }
        break;
      }
      case Granularity::shape: {
        d.kernel_mask.assign(static_cast<size_t>(g.kernel_h * g.kernel_w), 1);
        if (d.keep_col.empty()) d.keep_col.assign(static_cast<size_t>(g.patch_size()), 1);
        for (int64_t r = 0; r < g.kernel_h; ++r)
          for (int64_t s2 = 0; s2 < g.kernel_w; ++s2) {
            const int64_t sid = r * g.kernel_w + s2;
            if (!v.active[static_cast<size_t>(sid)]) {
              d.kernel_mask[static_cast<size_t>(sid)] = 0;
              for (int64_t c = 0; c < g.in_channels; ++c)
                d.keep_col[static_cast<size_t>((c * g.kernel_h + r) * g.kernel_w + s2)] = 0;
            }
          }
        break;
      }
    }
  }
  if (d.removed) d.structure_counts[1] = 0;
  return d;
}

// Folds nu into the weights, chained in set storage order so the arithmetic
// matches the masked forward bit for bit.
Tensor fold_weights(const Tensor& w, const std::vector<StructureSet>& sets,
                    const ConvGeometry& g) {
  Tensor out = w;
  for (const StructureSet& s : sets) {
    const SparseView v = sparse_view(s);
    int64_t i = 0;
    for (int64_t k = 0; k < g.out_channels; ++k)
      for (int64_t c = 0; c < g.in_channels; ++c)
        for (int64_t r = 0; r < g.kernel_h; ++r)
          for (int64_t s2 = 0; s2 < g.kernel_w; ++s2, ++i)
            out[i] *= v.nu[structure_index_of(s.granularity, g, k, c, r, s2)];
  }
  return out;
}

std::vector<std::vector<int>> consumer_lists(const Model& m) {
  std::vector<std::vector<int>> consumers(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i)
    for (int in : m.layers[i].inputs)
      if (in >= 0) consumers[static_cast<size_t>(in)].push_back(static_cast<int>(i));
  return consumers;
}

}  // namespace

FoldResult fold_and_compact(const Model& m) {
  if (m.compacted) throw std::invalid_argument("model is already compacted");
  validate_model(m);

  const std::vector<int64_t> orig_channels = output_channels(m);
  const std::vector<std::vector<int>> consumers = consumer_lists(m);

  // Per-conv keep decisions.
  std::vector<ConvDecision> decisions(m.layers.size());
  for (const auto& [idx, sets] : m.structures)
    decisions[static_cast<size_t>(idx)] = decide_conv(m.layers[static_cast<size_t>(idx)], sets);

  // A fully pruned layer needs every consumer to be a join that can absorb it.
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (!decisions[i].removed) continue;
    if (consumers[i].empty())
      throw std::runtime_error("network disconnected: layer '" + m.layers[i].name +
                               "' is fully pruned with no bypass path");
    for (int c : consumers[i]) {
      const LayerKind k = m.layers[static_cast<size_t>(c)].kind;
      if (k != LayerKind::residual_add && k != LayerKind::concat)
        throw std::runtime_error("network disconnected: layer '" + m.layers[i].name +
                                 "' is fully pruned with no bypass path");
    }
  }

  // Dead-chain marking: a non-join layer all of whose consumers are dead only
  // feeds pruned convs and disappears with them.
  std::vector<uint8_t> dead(m.layers.size(), 0);
  for (size_t i = 0; i < m.layers.size(); ++i) dead[i] = decisions[i].removed ? 1 : 0;
  bool changed = true;
  while (changed) {
    changed = false;
    for (size_t i = 0; i + 1 < m.layers.size(); ++i) {
      const LayerKind k = m.layers[i].kind;
      if (dead[i] || k == LayerKind::residual_add || k == LayerKind::concat) continue;
      bool all_dead = !consumers[i].empty();
      for (int c : consumers[i])
        if (!dead[static_cast<size_t>(c)]) all_dead = false;
      if (all_dead) {
        dead[i] = 1;
        changed = true;
      }
    }
  }

  FoldResult out;
  Model& cm = out.model;
  cm.arch = m.arch;
  cm.input_channels = m.input_channels;
  cm.input_h = m.input_h;
  cm.input_w = m.input_w;
  cm.num_classes = m.num_classes;
  cm.compacted = true;
  cm.prune_mode = PruneMode::none;

  // For each original layer: its id in the compact model (-1 when dropped) and
  // the map original-output-channel -> compact position (-1 when removed).
  std::vector<int> node_of(m.layers.size(), -1);
  std::vector<std::vector<int64_t>> omap(m.layers.size());
  std::vector<int> emitted_by;  // compact layer id -> original layer id

  std::vector<int64_t> input_identity(static_cast<size_t>(m.input_channels));
  for (size_t c = 0; c < input_identity.size(); ++c) input_identity[c] = static_cast<int64_t>(c);

  auto producer_node = [&](int id) { return id == -1 ? -1 : node_of[static_cast<size_t>(id)]; };
  auto producer_map = [&](int id) -> const std::vector<int64_t>& {
    return id == -1 ? input_identity : omap[static_cast<size_t>(id)];
  };

  out.plan.layers.resize(m.layers.size());

  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    const LayerParams& p = m.params[i];
    const ConvDecision& d = decisions[i];
    LayerPlan& plan = out.plan.layers[i];
    plan.name = l.name;
    plan.kind = l.kind;
    plan.params_before = layer_param_count(p);
    plan.macs_before = layer_mac_count(l, p);
    plan.structures_total = d.structure_counts[0];
    plan.structures_kept = d.structure_counts[1];
    plan.kernel_mask = d.kernel_mask;

    if (dead[i]) {
      plan.removed = true;
      omap[i].assign(static_cast<size_t>(orig_channels[i]), -1);
      if (l.kind == LayerKind::conv) cm.removed_layers.push_back(l.name);
      continue;
    }

    switch (l.kind) {
      case LayerKind::conv: {
        const std::vector<int64_t>& in_map = producer_map(l.inputs[0]);
        const ConvGeometry& g = l.geom;
        if (static_cast<int64_t>(in_map.size()) != g.in_channels)
          throw std::logic_error("channel map size mismatch at '" + l.name + "'");

        // Channels this conv consumes: survivors intersected with its own keep set.
        std::vector<int64_t> kept_orig;       // original channel ids, ascending
        std::vector<int64_t> gather_pos;      // positions within the incoming tensor
        int64_t n_survivors = 0;
        bool any_own_drop = false;
        for (int64_t c = 0; c < g.in_channels; ++c) {
          const bool survives = in_map[static_cast<size_t>(c)] >= 0;
          const bool wanted = d.keep_channel.empty() || d.keep_channel[static_cast<size_t>(c)];
          if (survives) ++n_survivors;
          if (survives && !wanted) any_own_drop = true;
          if (survives && wanted) {
            kept_orig.push_back(c);
            gather_pos.push_back(in_map[static_cast<size_t>(c)]);
          }
        }
        plan.kept_channels = kept_orig;

        Tensor folded = p.weight;
        const auto sit = m.structures.find(static_cast<int>(i));
        if (sit != m.structures.end()) folded = fold_weights(p.weight, sit->second, g);

        // Kept patch rows in the compact channel ordering.
        const int64_t rs = g.kernel_h * g.kernel_w;
        std::vector<int64_t> new_cols;
        bool col_holes = false;
        for (size_t cc = 0; cc < kept_orig.size(); ++cc) {
          const int64_t c = kept_orig[cc];
          for (int64_t j = 0; j < rs; ++j) {
            const size_t orig_col = static_cast<size_t>(c * rs + j);
            if (d.keep_col.empty() || d.keep_col[orig_col])
              new_cols.push_back(static_cast<int64_t>(cc) * rs + j);
            else
              col_holes = true;
          }
        }

        LayerSpec nl = l;
        nl.psp_attached = false;
        nl.inputs = {producer_node(l.inputs[0])};
        nl.geom.in_channels = static_cast<int64_t>(kept_orig.size());
        LayerParams np;
        if (!p.bias.empty()) np.bias = p.bias;
        // When only upstream drops happened the incoming tensor already holds
        // exactly the surviving channels in order; a gather is needed only for
        // this conv's own channel drops.
        if (any_own_drop) np.input_gather = gather_pos;

        if (kept_orig.empty()) {
          // Zero-producer conv: keeps shapes legal, emits exact zeros.
          np.packed = true;
          np.kept_cols.clear();
          np.weight = Tensor();
          nl.geom.in_channels = std::max<int64_t>(1, n_survivors);
          np.input_gather.clear();
        } else if (col_holes) {
          np.packed = true;
          np.kept_cols = new_cols;
          Tensor w2({g.out_channels, static_cast<int64_t>(new_cols.size())});
          int64_t out_col = 0;
          for (size_t cc = 0; cc < kept_orig.size(); ++cc) {
            const int64_t c = kept_orig[cc];
            for (int64_t j = 0; j < rs; ++j) {
              const size_t orig_col = static_cast<size_t>(c * rs + j);
              if (!d.keep_col.empty() && !d.keep_col[orig_col]) continue;
              for (int64_t k = 0; k < g.out_channels; ++k)
                w2.at2(k, out_col) = folded[k * g.patch_size() + c * rs + j];
              ++out_col;
            }
          }
          np.weight = std::move(w2);
        } else {
          Tensor w4({g.out_channels, static_cast<int64_t>(kept_orig.size()), g.kernel_h,
                     g.kernel_w});
          for (int64_t k = 0; k < g.out_channels; ++k)
            for (size_t cc = 0; cc < kept_orig.size(); ++cc)
              for (int64_t j = 0; j < rs; ++j)
                w4[(k * static_cast<int64_t>(kept_orig.size()) + static_cast<int64_t>(cc)) * rs + j] =
                    folded[k * g.patch_size() + kept_orig[cc] * rs + j];
          np.weight = std::move(w4);
        }
        plan.kept_cols = np.kept_cols;
        np.kernel_mask = d.kernel_mask;

        cm.layers.push_back(std::move(nl));
        cm.params.push_back(std::move(np));
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i].resize(static_cast<size_t>(g.out_channels));
        for (int64_t k = 0; k < g.out_channels; ++k) omap[i][static_cast<size_t>(k)] = k;
        break;
      }

      case LayerKind::batchnorm: {
        const std::vector<int64_t>& in_map = producer_map(l.inputs[0]);
        std::vector<int64_t> survivors;
        for (int64_t c = 0; c < l.channels; ++c)
          if (in_map[static_cast<size_t>(c)] >= 0) survivors.push_back(c);
        LayerSpec nl = l;
        nl.inputs = {producer_node(l.inputs[0])};
        nl.channels = static_cast<int64_t>(survivors.size());
        LayerParams np;
        np.gamma = Tensor({nl.channels});
        np.beta = Tensor({nl.channels});
        np.running_mean = Tensor({nl.channels});
        np.running_var = Tensor({nl.channels});
        for (size_t j = 0; j < survivors.size(); ++j) {
          np.gamma[static_cast<int64_t>(j)] = p.gamma[survivors[j]];
          np.beta[static_cast<int64_t>(j)] = p.beta[survivors[j]];
          np.running_mean[static_cast<int64_t>(j)] = p.running_mean[survivors[j]];
          np.running_var[static_cast<int64_t>(j)] = p.running_var[survivors[j]];
        }
        cm.layers.push_back(std::move(nl));
        cm.params.push_back(std::move(np));
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i].assign(static_cast<size_t>(l.channels), -1);
        for (size_t j = 0; j < survivors.size(); ++j)
          omap[i][static_cast<size_t>(survivors[j])] = static_cast<int64_t>(j);
        break;
      }

      case LayerKind::linear: {
        const std::vector<int64_t>& in_map = producer_map(l.inputs[0]);
        std::vector<int64_t> survivors;
        for (size_t c = 0; c < in_map.size(); ++c)
          if (in_map[c] >= 0) survivors.push_back(static_cast<int64_t>(c));
        LayerSpec nl = l;
        nl.inputs = {producer_node(l.inputs[0])};
        nl.in_features = static_cast<int64_t>(survivors.size());
        LayerParams np;
        np.weight = Tensor({l.out_features, nl.in_features});
        for (int64_t o = 0; o < l.out_features; ++o)
          for (size_t j = 0; j < survivors.size(); ++j)
            np.weight.at2(o, static_cast<int64_t>(j)) = p.weight.at2(o, survivors[j]);
        if (!p.bias.empty()) np.bias = p.bias;
        cm.layers.push_back(std::move(nl));
        cm.params.push_back(std::move(np));
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i].resize(static_cast<size_t>(l.out_features));
        for (int64_t o = 0; o < l.out_features; ++o) omap[i][static_cast<size_t>(o)] = o;
        break;
      }

      case LayerKind::residual_add: {
        const int a = l.inputs[0], b = l.inputs[1];
        const bool a_gone = producer_node(a) == -1 && a != -1;
        const bool b_gone = producer_node(b) == -1 && b != -1;
        if (a_gone && b_gone)
          throw std::runtime_error("network disconnected: both sides of '" + l.name +
                                   "' are pruned");
        if (a_gone || b_gone) {
          const int keep = a_gone ? b : a;
          node_of[i] = producer_node(keep);
          omap[i] = producer_map(keep);
          break;
        }
        if (producer_map(a) != producer_map(b))
          throw std::logic_error("residual join '" + l.name + "' has mismatched channel survival");
        LayerSpec nl = l;
        nl.inputs = {producer_node(a), producer_node(b)};
        cm.layers.push_back(std::move(nl));
        cm.params.emplace_back();
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i] = producer_map(a);
        break;
      }

      case LayerKind::concat: {
        std::vector<int> live_inputs;
        std::vector<int64_t> map;
        int64_t offset = 0;
        for (int in : l.inputs) {
          const int nid = producer_node(in);
          const std::vector<int64_t>& im = producer_map(in);
          if (nid == -1 && in != -1) {
            map.insert(map.end(), im.size(), -1);
            continue;
          }
          live_inputs.push_back(nid);
          int64_t live = 0;
          for (int64_t pos : im) {
            map.push_back(pos >= 0 ? pos + offset : -1);
            if (pos >= 0) ++live;
          }
          offset += live;
        }
        if (live_inputs.empty())
          throw std::runtime_error("network disconnected: all inputs of '" + l.name +
                                   "' are pruned");
        if (live_inputs.size() == 1) {
          node_of[i] = live_inputs[0];
          omap[i] = std::move(map);
          break;
        }
        LayerSpec nl = l;
        nl.inputs = live_inputs;
        cm.layers.push_back(std::move(nl));
        cm.params.emplace_back();
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i] = std::move(map);
        break;
      }

      case LayerKind::relu:
      case LayerKind::avgpool:
      case LayerKind::maxpool: {
        LayerSpec nl = l;
        nl.inputs = {producer_node(l.inputs[0])};
        cm.layers.push_back(std::move(nl));
        cm.params.emplace_back();
        node_of[i] = static_cast<int>(cm.layers.size() - 1);
        emitted_by.push_back(static_cast<int>(i));
        omap[i] = producer_map(l.inputs[0]);
        break;
      }
    }
  }

  // Pull channel gathers up through single-consumer bn/relu chains; when the
  // chain head is a single-consumer conv the gathered rows come off its output
  // side instead and the gather disappears.
  std::vector<int> new_consumer_count(cm.layers.size(), 0);
  for (const LayerSpec& l : cm.layers)
    for (int in : l.inputs)
      if (in >= 0) ++new_consumer_count[static_cast<size_t>(in)];

  for (size_t i = 0; i < cm.layers.size(); ++i) {
    if (cm.layers[i].kind != LayerKind::conv || cm.params[i].input_gather.empty()) continue;
    const std::vector<int64_t> ids = cm.params[i].input_gather;
    const auto n = static_cast<int64_t>(ids.size());
    int cur = cm.layers[i].inputs[0];
    int attach_at = -1;      // deepest batchnorm that can host the gather
    bool absorbed = false;
    while (cur >= 0 && new_consumer_count[static_cast<size_t>(cur)] == 1) {
      LayerSpec& cl = cm.layers[static_cast<size_t>(cur)];
      if (cl.kind == LayerKind::batchnorm) {
        LayerParams& cp = cm.params[static_cast<size_t>(cur)];
        Tensor gamma({n}), beta({n}), rmean({n}), rvar({n});
        for (int64_t j = 0; j < n; ++j) {
          gamma[j] = cp.gamma[ids[static_cast<size_t>(j)]];
          beta[j] = cp.beta[ids[static_cast<size_t>(j)]];
          rmean[j] = cp.running_mean[ids[static_cast<size_t>(j)]];
          rvar[j] = cp.running_var[ids[static_cast<size_t>(j)]];
        }
        cp.gamma = std::move(gamma);
        cp.beta = std::move(beta);
        cp.running_mean = std::move(rmean);
        cp.running_var = std::move(rvar);
        cl.channels = n;
        attach_at = cur;
        cur = cl.inputs[0];
      } else if (cl.kind == LayerKind::relu) {
        cur = cl.inputs[0];
      } else if (cl.kind == LayerKind::conv && !cm.params[static_cast<size_t>(cur)].packed) {
        // Shrink the producer's output rows; the whole gather vanishes.
        LayerParams& cp = cm.params[static_cast<size_t>(cur)];
        const ConvGeometry& pg = cm.layers[static_cast<size_t>(cur)].geom;
        const int64_t row = pg.in_channels * pg.kernel_h * pg.kernel_w;
        Tensor w({n, pg.in_channels, pg.kernel_h, pg.kernel_w});
        for (int64_t j = 0; j < n; ++j)
          for (int64_t e = 0; e < row; ++e)
            w[j * row + e] = cp.weight[ids[static_cast<size_t>(j)] * row + e];
        cp.weight = std::move(w);
        if (!cp.bias.empty()) {
          Tensor b({n});
          for (int64_t j = 0; j < n; ++j) b[j] = cp.bias[ids[static_cast<size_t>(j)]];
          cp.bias = std::move(b);
        }
        cm.layers[static_cast<size_t>(cur)].geom.out_channels = n;
        absorbed = true;
        break;
      } else {
        break;
      }
    }
    if (absorbed) {
      cm.params[i].input_gather.clear();
    } else if (attach_at >= 0) {
      cm.params[static_cast<size_t>(attach_at)].input_gather = ids;
      cm.params[i].input_gather.clear();
    }
  }

  validate_model(cm);

  // After-the-fact accounting per original layer (post peephole, so sliced
  // batchnorms and shrunk producers are reflected).
  for (size_t i = 0; i < m.layers.size(); ++i) {
    LayerPlan& plan = out.plan.layers[i];
    const int nid = node_of[i];
    if (nid >= 0 && emitted_by[static_cast<size_t>(nid)] == static_cast<int>(i)) {
      plan.params_after = layer_param_count(cm.params[static_cast<size_t>(nid)]);
      plan.macs_after = layer_mac_count(cm.layers[static_cast<size_t>(nid)],
                                        cm.params[static_cast<size_t>(nid)]);
      plan.kept_cols = cm.params[static_cast<size_t>(nid)].kept_cols;
    }
    out.plan.removed_params += plan.params_before - plan.params_after;
    out.plan.removed_macs += plan.macs_before - plan.macs_after;
  }

  return out;
}

int64_t count_params(const Model& m) {
  int64_t n = 0;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if ((m.layers[i].kind == LayerKind::conv || m.layers[i].kind == LayerKind::linear) &&
        m.params[i].weight.empty() && !m.params[i].packed)
      throw std::invalid_argument("layer '" + m.layers[i].name + "' shape unresolved");
    n += layer_param_count(m.params[i]);
  }
  return n;
}

int64_t count_macs(const Model& m) {
  int64_t n = 0;
  for (size_t i = 0; i < m.layers.size(); ++i) n += layer_mac_count(m.layers[i], m.params[i]);
  return n;
}

int64_t count_weighted_layers(const Model& m) {
  int64_t n = 0;
  for (const LayerSpec& l : m.layers)
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) ++n;
  return n;
}

AlphaHistogram alpha_histogram(const Tensor& alpha) {
  AlphaHistogram h;
  double mx = 0.0;
  for (int64_t i = 0; i < alpha.numel(); ++i) mx = std::max(mx, std::fabs(alpha[i]));
  if (mx == 0.0) mx = 1.0;
  h.lo = -mx;
  h.hi = mx;
  const double width = (h.hi - h.lo) / 101.0;
  for (int64_t i = 0; i < alpha.numel(); ++i) {
    auto bin = static_cast<int64_t>((alpha[i] - h.lo) / width);
    bin = std::min<int64_t>(100, std::max<int64_t>(0, bin));
    ++h.bins[static_cast<size_t>(bin)];
  }
  return h;
}

std::vector<StructureReportRow> sparsity_report(const Model& m) {
  std::vector<StructureReportRow> rows;
  for (const auto& [idx, sets] : m.structures) {
    for (const StructureSet& s : sets) {
      StructureReportRow row;
      row.layer = m.layers[static_cast<size_t>(idx)].name;
      row.granularity = s.granularity;
      row.total = s.structure_count();
      row.epsilon = s.epsilon;
      const SparseView v = sparse_view(s);
      for (uint8_t a : v.active) row.active += a;
      row.below_epsilon_fraction =
          1.0 - static_cast<double>(row.active) / static_cast<double>(row.total);
      row.hist = alpha_histogram(s.alpha);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

CompressionReport make_compression_report(const Model& original, const FoldResult& folded) {
  CompressionReport r;
  r.layers = folded.plan.layers;
  r.structures = sparsity_report(original);
  r.params_before = count_params(original);
  r.params_after = count_params(folded.model);
  r.macs_before = count_macs(original);
  r.macs_after = count_macs(folded.model);
  r.layers_before = count_weighted_layers(original);
  r.layers_after = count_weighted_layers(folded.model);
  return r;
}

}  // namespace psp
