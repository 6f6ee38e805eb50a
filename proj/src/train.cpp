#include "psp/train.hpp"

#include <cmath>
#include <unordered_map>

#include "psp/errors.hpp"
#include "psp/rng.hpp"
#include "psp/sgd.hpp"

namespace psp {

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double frac : cfg.milestone_fracs) {
    const int milestone = static_cast<int>(std::floor(frac * static_cast<double>(cfg.epochs)));
    if (epoch >= milestone && milestone > 0) lr /= cfg.milestone_divisor;
  }
  return lr;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(Model& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    LayerParams& p = m.params[i];
    switch (l.kind) {
      case LayerKind::conv: {
        if (!p.weight.empty()) out.emplace_back(l.name + ".weight", &p.weight);
        auto sit = m.structures.find(static_cast<int>(i));
        if (sit != m.structures.end())
          for (size_t s = 0; s < sit->second.size(); ++s)
            out.emplace_back(l.name + ".alpha" + std::to_string(s), &sit->second[s].alpha);
        if (!p.bias.empty()) out.emplace_back(l.name + ".bias", &p.bias);
        break;
      }
      case LayerKind::linear:
        out.emplace_back(l.name + ".weight", &p.weight);
        if (!p.bias.empty()) out.emplace_back(l.name + ".bias", &p.bias);
        break;
      case LayerKind::batchnorm:
        out.emplace_back(l.name + ".gamma", &p.gamma);
        out.emplace_back(l.name + ".beta", &p.beta);
        break;
      default:
        break;
    }
  }
  return out;
}

double model_sparsity(const Model& m) {
  int64_t total = 0, active = 0;
  for (const auto& [idx, sets] : m.structures) {
    (void)idx;
    for (const StructureSet& s : sets) {
      total += s.structure_count();
      const SparseView v = sparse_view(s);
      for (uint8_t a : v.active) active += a;
    }
  }
  return total == 0 ? 0.0 : 1.0 - static_cast<double>(active) / static_cast<double>(total);
}

EvalResult evaluate(const Model& m, const Dataset& val, int64_t batch_size) {
  EvalResult r;
  r.samples = val.size();
  if (r.samples == 0) throw DataError("evaluation on an empty dataset");
  if (val.num_classes != m.num_classes)
    throw DataError("dataset has " + std::to_string(val.num_classes) + " classes, model expects " +
                    std::to_string(m.num_classes));
  const bool top5 = m.num_classes > 5;
  int64_t wrong1 = 0, wrong5 = 0;
  Batcher batcher(val.size(), batch_size, 0, /*shuffle=*/false);
  for (int64_t b = 0; b < batcher.num_batches(); ++b) {
    auto [images, labels] = gather_batch(val, batcher.batch_indices(0, b));
    const Tensor logits = model_logits(m, images);
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const int label = labels[static_cast<size_t>(i)];
      const double own = logits.at2(i, label);
      int64_t better = 0;
      int argmax = 0;
      double best = logits.at2(i, 0);
      for (int c = 0; c < m.num_classes; ++c) {
        const double v = logits.at2(i, c);
        if (v > best) {
          best = v;
          argmax = c;
        }
        if (v > own) ++better;
      }
      if (argmax != label) ++wrong1;
      if (better >= 5) ++wrong5;
    }
  }
  r.top1_error = 100.0 * static_cast<double>(wrong1) / static_cast<double>(r.samples);
  r.top5_error = top5 ? 100.0 * static_cast<double>(wrong5) / static_cast<double>(r.samples) : -1.0;
  return r;
}

namespace {

void rerank_masks(Model& m, double fraction) {
  for (auto& [idx, sets] : m.structures) {
    for (StructureSet& s : sets) {
      if (m.prune_mode == PruneMode::psp_fixed_sparsity) {
        apply_fixed_sparsity(s, fraction);
      } else if (m.prune_mode == PruneMode::l1_norm_baseline) {
        const LayerSpec& l = m.layers[static_cast<size_t>(idx)];
        s.fixed_mask = l1_norm_keep_mask(m.params[static_cast<size_t>(idx)].weight, s.granularity,
                                         l.geom, fraction);
      }
    }
  }
}

}  // namespace

RunLog train(Model& m, const DatasetPair& data, const TrainConfig& cfg,
             const std::string& run_id) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (m.compacted) throw ConfigError("cannot train a compacted model");
  RunLog log;
  log.run_id = run_id;
  if (cfg.epochs == 0) return log;

  // Name -> model tensor for applying updates; alpha names resolve per set.
  std::unordered_map<std::string, Tensor*> target;
  std::unordered_map<std::string, const StructureSet*> alpha_owner;
  for (auto& [name, tensor] : named_parameters(m)) target[name] = tensor;
  for (const auto& [idx, sets] : m.structures)
    for (size_t s = 0; s < sets.size(); ++s)
      alpha_owner[m.layers[static_cast<size_t>(idx)].name + ".alpha" + std::to_string(s)] =
          &sets[s];

  std::unordered_map<std::string, SgdState> states;
  Batcher batcher(data.train.size(), cfg.batch_size, cfg.seed, /*shuffle=*/true);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg, epoch);
    if (m.prune_mode == PruneMode::psp_fixed_sparsity ||
        m.prune_mode == PruneMode::l1_norm_baseline)
      rerank_masks(m, cfg.prune_fraction);

    double loss_sum = 0.0;
    int64_t seen = 0;
    for (int64_t b = 0; b < batcher.num_batches(); ++b) {
      auto [images, labels] = gather_batch(data.train, batcher.batch_indices(epoch, b));
      if (cfg.augment_flip || cfg.augment_crop)
        images = augment_batch(images, cfg.augment_flip, cfg.augment_crop,
                               derive_seed(cfg.seed, "augment", static_cast<uint64_t>(epoch) * 1000003 +
                                                                    static_cast<uint64_t>(b)));
      ForwardPass fp = model_forward(m, images, /*training=*/true);
      const int loss_node = fp.graph.softmax_cross_entropy(fp.logits, labels);
      const double loss = fp.graph.value(loss_node)[0];
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                              std::to_string(b));
      loss_sum += loss * static_cast<double>(labels.size());
      seen += static_cast<int64_t>(labels.size());
      fp.graph.backward(loss_node);

      for (const auto& [name, node] : fp.param_nodes) {
        if (!fp.graph.has_grad(node)) continue;
        Tensor* tensor = target.at(name);
        SgdState& st = states[name];
        st.momentum = cfg.momentum;
        st.learning_rate = lr;
        const auto ait = alpha_owner.find(name);
        if (ait == alpha_owner.end()) {
          st.lambda = cfg.weight_decay;
          sgd_step_weight_decay(*tensor, fp.graph.grad(node), st, name);
        } else if (ait->second->regularizer == RegMode::l1) {
          st.lambda = cfg.struct_lambda;
          sgd_step_l1(*tensor, fp.graph.grad(node), st, name);
        } else {
          st.lambda = cfg.struct_lambda;
          sgd_step_weight_decay(*tensor, fp.graph.grad(node), st, name);
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    const EvalResult ev = evaluate(m, data.val);
    rec.val_top1 = ev.top1_error;
    rec.val_top5 = ev.top5_error;
    rec.sparsity = model_sparsity(m);
    rec.structures = sparsity_report(m);
    log.records.push_back(std::move(rec));
  }
  return log;
}

std::vector<SweepRow> ablation_sweep(const std::function<Model(uint64_t)>& build_model,
                                     PruneAttachConfig prune, TrainConfig tcfg,
                                     const DatasetPair& data, SweepAxis axis,
                                     const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<SweepRow> rows;
  for (double v : values) {
    if (axis == SweepAxis::epsilon)
      prune.epsilon = v;
    else
      tcfg.struct_lambda = v;
    Model m = build_model(tcfg.seed);
    attach_psp(m, prune);
    train(m, data, tcfg, "sweep");
    SweepRow row;
    row.value = v;
    row.epsilon = prune.epsilon;
    row.lambda = tcfg.struct_lambda;
    row.sparsity = model_sparsity(m);
    row.val_top1 = evaluate(m, data.val).top1_error;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace psp
