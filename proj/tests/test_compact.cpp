#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "psp/compact.hpp"
#include "psp/errors.hpp"
#include "test_helpers.hpp"

using namespace psp;
using namespace psp::testing;

namespace {

PruneAttachConfig attach_cfg(std::vector<Granularity> gs, double eps, uint64_t seed) {
  PruneAttachConfig cfg;
  cfg.mode = PruneMode::psp_threshold;
  cfg.granularities = std::move(gs);
  cfg.epsilon = eps;
  cfg.seed = seed;
  return cfg;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Brute-force parameter enumeration straight off the layer shapes.
int64_t param_oracle(const Model& m) {
  int64_t n = 0;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerParams& p = m.params[i];
    n += p.weight.numel() + p.bias.numel() + p.gamma.numel() + p.beta.numel();
  }
  return n;
}

int64_t mac_oracle(const Model& m) {
  int64_t n = 0;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.kind == LayerKind::conv) {
      const int64_t cols =
          m.params[i].packed ? static_cast<int64_t>(m.params[i].kept_cols.size())
                             : l.geom.in_channels * l.geom.kernel_h * l.geom.kernel_w;
      n += l.geom.out_channels * cols * l.geom.out_h() * l.geom.out_w();
    } else if (l.kind == LayerKind::linear) {
      n += l.in_features * l.out_features;
    }
  }
  return n;
}

}  // namespace

TEST_CASE("mac formula spot values") {
  // conv K=2 C=3 R=S=3 producing an 8x8 output
  Model m;
  m.input_channels = 3;
  m.input_h = 8;
  m.input_w = 8;
  LayerSpec conv;
  conv.kind = LayerKind::conv;
  conv.name = "c";
  conv.inputs = {-1};
  conv.geom = ConvGeometry{2, 3, 3, 3, 1, 1, 8, 8};
  m.layers.push_back(conv);
  m.params.emplace_back();
  m.params[0].weight = Tensor({2, 3, 3, 3});
  CHECK(count_macs(m) == 3456);

  SUBCASE("1x1 conv on a 1x1 output is a single mac") {
    m.layers[0].geom = ConvGeometry{1, 1, 1, 1, 1, 0, 1, 1};
    m.params[0].weight = Tensor({1, 1, 1, 1});
    CHECK(count_macs(m) == 1);
  }

  SUBCASE("unresolved shapes rejected") {
    m.params[0].weight = Tensor();
    CHECK_THROWS_AS(count_params(m), std::invalid_argument);
  }
}

TEST_CASE("count_params/count_macs equal enumeration oracles on several architectures") {
  std::vector<Model> models;
  models.push_back(build_resnet_small(8, 10));
  models.push_back(build_resnet_small(14, 10, {4, 8, 16}, 1, 12, 12));
  models.push_back(build_resnet_small(20, 100, {16, 32, 64}, 3, 32, 32));
  models.push_back(build_densenet_small(10, 4, 10, 3, 8, 8));
  models.push_back(build_densenet_small(16, 6, 10, 3, 12, 12));
  models.push_back(build_densenet_small(40, 12, 10, 3, 32, 32));
  for (size_t i = 0; i < models.size(); ++i) {
    CAPTURE(i);
    init_model_params(models[i], 17 + i);
    CHECK(count_params(models[i]) == param_oracle(models[i]));
    CHECK(count_macs(models[i]) == mac_oracle(models[i]));
  }
}

TEST_CASE("fold with nothing below epsilon keeps shapes and scales weights") {
  Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
  init_model_params(m, 3);
  attach_psp(m, attach_cfg({Granularity::column}, 0.0, 3));  // eps 0: thresholding disabled
  const FoldResult fr = fold_and_compact(m);
  CHECK(count_params(fr.model) == count_params(m));
  CHECK(count_macs(fr.model) == count_macs(m));
  CHECK(fr.model.compacted);
  CHECK_THROWS_AS(fold_and_compact(fr.model), std::invalid_argument);

  // Spot-check the alpha folding on the first attached conv.
  const auto& [idx, sets] = *m.structures.begin();
  const LayerSpec& l = m.layers[static_cast<size_t>(idx)];
  const int nid = fr.model.layer_index(l.name);
  REQUIRE(nid >= 0);
  const Tensor& orig = m.params[static_cast<size_t>(idx)].weight;
  const Tensor& fold = fr.model.params[static_cast<size_t>(nid)].weight;
  const ConvGeometry& g = l.geom;
  for (int64_t k = 0; k < g.out_channels; ++k)
    for (int64_t c = 0; c < g.in_channels; ++c)
      for (int64_t r = 0; r < g.kernel_h; ++r)
        for (int64_t s = 0; s < g.kernel_w; ++s)
          CHECK(fold.at4(k, c, r, s) ==
                orig.at4(k, c, r, s) *
                    sets[0].alpha[structure_index_of(Granularity::column, g, k, c, r, s)]);

  // Random inputs still agree (pure folding).
  Rng rng(401);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng);
  CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
}

TEST_CASE("channel pruning removes producer rows, bn entries and consumer slices") {
  Model m = build_resnet_small(8, 10, {8, 16, 32}, 3, 16, 16);
  init_model_params(m, 7);
  attach_psp(m, attach_cfg({Granularity::channel}, 0.1, 7));
  // Everything active except channel 2 of g0b0.conv2's input.
  for (auto& [idx, sets] : m.structures)
    for (StructureSet& s : sets)
      for (int64_t i = 0; i < s.alpha.numel(); ++i) s.alpha[i] = 1.0;
  const int conv2 = m.layer_index("g0b0.conv2");
  m.structures.at(conv2)[0].alpha[2] = 0.0;

  const FoldResult fr = fold_and_compact(m);
  const Model& cm = fr.model;

  const int nconv2 = cm.layer_index("g0b0.conv2");
  const int nconv1 = cm.layer_index("g0b0.conv1");
  const int nbn2 = cm.layer_index("g0b0.bn2");
  REQUIRE(nconv2 >= 0);
  REQUIRE(nconv1 >= 0);
  REQUIRE(nbn2 >= 0);
  CHECK(cm.layers[static_cast<size_t>(nconv2)].geom.in_channels == 7);
  CHECK(cm.layers[static_cast<size_t>(nconv1)].geom.out_channels == 7);   // producer row gone
  CHECK(cm.layers[static_cast<size_t>(nbn2)].channels == 7);              // bn entry gone
  CHECK(cm.params[static_cast<size_t>(nconv2)].input_gather.empty());     // fully absorbed

  const LayerPlan* plan2 = nullptr;
  for (const LayerPlan& p : fr.plan.layers)
    if (p.name == "g0b0.conv2") plan2 = &p;
  REQUIRE(plan2);
  CHECK(plan2->params_before - plan2->params_after == 8 * 3 * 3);  // K*R*S
  CHECK(plan2->kept_channels == std::vector<int64_t>{0, 1, 3, 4, 5, 6, 7});

  Rng rng(403);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor x = random_tensor({2, 3, 16, 16}, rng);
    CHECK(max_abs_diff(model_logits(m, x), model_logits(cm, x)) <= 1e-6);
  }
}

TEST_CASE("compaction equivalence across granularities") {
  Rng rng(409);

  SUBCASE("densenet-style net, all granularities") {
    for (auto gs : std::vector<std::vector<Granularity>>{{Granularity::column},
                                                         {Granularity::channel},
                                                         {Granularity::shape},
                                                         {Granularity::layer},
                                                         {Granularity::layer,
                                                          Granularity::channel}}) {
      CAPTURE(to_string(gs[0]));
      Model m = build_densenet_small(13, 4, 10, 3, 8, 8);
      init_model_params(m, 31);
      attach_psp(m, attach_cfg(gs, 0.1, 31));
      const FoldResult fr = fold_and_compact(m);
      CHECK(count_params(fr.model) <= count_params(m));
      for (int rep = 0; rep < 10; ++rep) {
        const Tensor x = random_tensor({2, 3, 8, 8}, rng);
        CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
      }
    }
  }

  SUBCASE("resnet-style net, all granularities") {
    for (auto gs : std::vector<std::vector<Granularity>>{{Granularity::column},
                                                         {Granularity::channel},
                                                         {Granularity::shape},
                                                         {Granularity::layer},
                                                         {Granularity::layer,
                                                          Granularity::channel}}) {
      CAPTURE(to_string(gs[0]));
      Model m = build_resnet_small(14, 10, {6, 12, 24}, 3, 12, 12);
      init_model_params(m, 37);
      attach_psp(m, attach_cfg(gs, 0.1, 37));
      const FoldResult fr = fold_and_compact(m);
      for (int rep = 0; rep < 10; ++rep) {
        const Tensor x = random_tensor({2, 3, 12, 12}, rng);
        CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
      }
    }
  }

  SUBCASE("fixed-sparsity masks compact the same way") {
    Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
    init_model_params(m, 41);
    PruneAttachConfig cfg = attach_cfg({Granularity::column}, 0.0, 41);
    cfg.mode = PruneMode::psp_fixed_sparsity;
    cfg.fraction = 0.5;
    attach_psp(m, cfg);
    const FoldResult fr = fold_and_compact(m);
    for (int rep = 0; rep < 5; ++rep) {
      const Tensor x = random_tensor({2, 3, 8, 8}, rng);
      CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
    }
  }
}

TEST_CASE("layer pruning removes whole blocks and rewires the concat") {
  Model m = build_densenet_small(13, 4, 10, 3, 8, 8);
  init_model_params(m, 43);
  attach_psp(m, attach_cfg({Granularity::layer}, 0.1, 43));
  // Force exactly two specific blocks out.
  for (auto& [idx, sets] : m.structures) sets[0].alpha[0] = 0.5;
  m.structures.at(m.layer_index("s0b1.conv"))[0].alpha[0] = 0.01;
  m.structures.at(m.layer_index("s2b0.conv"))[0].alpha[0] = -0.05;

  const FoldResult fr = fold_and_compact(m);
  CHECK(fr.model.layer_index("s0b1.conv") == -1);
  CHECK(fr.model.layer_index("s2b0.conv") == -1);
  CHECK(fr.model.removed_layers == std::vector<std::string>{"s0b1.conv", "s2b0.conv"});
  CHECK(count_weighted_layers(fr.model) == count_weighted_layers(m) - 2);

  Rng rng(431);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
  }
}

TEST_CASE("layer pruning collapses residual blocks to identity") {
  Model m = build_resnet_small(8, 10, {6, 12, 24}, 3, 12, 12);
  init_model_params(m, 47);
  attach_psp(m, attach_cfg({Granularity::layer}, 0.1, 47));
  for (auto& [idx, sets] : m.structures) sets[0].alpha[0] = 0.5;
  m.structures.at(m.layer_index("g1b0.conv2"))[0].alpha[0] = 0.02;  // prune this block

  const FoldResult fr = fold_and_compact(m);
  // The whole branch dies with it: conv1, bn1, bn2 of that block are gone.
  CHECK(fr.model.layer_index("g1b0.conv2") == -1);
  CHECK(fr.model.layer_index("g1b0.conv1") == -1);
  CHECK(fr.model.layer_index("g1b0.bn1") == -1);
  CHECK(fr.model.layer_index("g1b0.bn2") == -1);
  CHECK(fr.model.layer_index("g1b0.proj") >= 0);  // the bypass carries the signal

  Rng rng(433);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor x = random_tensor({2, 3, 12, 12}, rng);
    CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
  }
}

TEST_CASE("fully pruned layer without a bypass is a disconnection error") {
  Model m = build_resnet_small(8, 10);
  init_model_params(m, 53);
  // Hand-plant a layer-granularity set on the stem (a chain conv).
  StructureSet s;
  s.granularity = Granularity::layer;
  s.alpha = Tensor({1});  // zero -> pruned
  s.epsilon = 0.1;
  m.structures[m.layer_index("stem")].push_back(s);
  m.prune_mode = PruneMode::psp_threshold;
  try {
    fold_and_compact(m);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("network disconnected") != std::string::npos);
  }
}

TEST_CASE("monotonicity: raising epsilon never keeps more structures") {
  Rng rng(59);
  StructureSet s;
  s.granularity = Granularity::column;
  s.alpha = random_tensor({5, 5, 4}, rng, 0.15);
  int64_t prev = s.alpha.numel() + 1;
  for (double eps : {0.0, 0.05, 0.1, 0.2, 0.4}) {
    s.epsilon = eps;
    const SparseView v = sparse_view(s);
    const int64_t kept = std::accumulate(v.active.begin(), v.active.end(), int64_t{0});
    CHECK(kept <= prev);
    prev = kept;
  }
}

TEST_CASE("accounting consistency: removed + compact == original") {
  for (int variant = 0; variant < 2; ++variant) {
    Model m = variant == 0 ? build_densenet_small(13, 4, 10, 3, 8, 8)
                           : build_resnet_small(14, 10, {6, 12, 24}, 3, 12, 12);
    init_model_params(m, 61 + variant);
    attach_psp(m, attach_cfg({Granularity::layer, Granularity::channel}, 0.1, 61 + variant));
    const FoldResult fr = fold_and_compact(m);
    int64_t removed = 0;
    for (const LayerPlan& p : fr.plan.layers) removed += p.params_before - p.params_after;
    CHECK(count_params(fr.model) + removed == count_params(m));
    CHECK(fr.plan.removed_params == removed);
  }
}

TEST_CASE("sparsity report") {
  SUBCASE("all zeros are 100% below any positive epsilon") {
    Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
    init_model_params(m, 67);
    attach_psp(m, attach_cfg({Granularity::column}, 0.05, 67));
    for (auto& [idx, sets] : m.structures)
      for (StructureSet& s : sets)
        for (int64_t i = 0; i < s.alpha.numel(); ++i) s.alpha[i] = 0.0;
    for (const StructureReportRow& row : sparsity_report(m)) {
      CHECK(row.active == 0);
      CHECK(row.below_epsilon_fraction == 1.0);
    }
  }

  SUBCASE("half +0.5 half -0.5 is 0% below eps 0.1") {
    StructureSet s;
    s.granularity = Granularity::channel;
    s.alpha = Tensor({4}, {0.5, -0.5, 0.5, -0.5});
    s.epsilon = 0.1;
    const SparseView v = sparse_view(s);
    CHECK(std::accumulate(v.active.begin(), v.active.end(), int64_t{0}) == 4);
  }

  SUBCASE("2 of 4 channels below eps reports 50% channel sparsity") {
    Model m = build_resnet_small(8, 10, {4, 8, 16}, 3, 8, 8);
    init_model_params(m, 97);
    attach_psp(m, attach_cfg({Granularity::channel}, 0.1, 97));
    for (auto& [idx, sets] : m.structures)
      for (StructureSet& s : sets)
        for (int64_t i = 0; i < s.alpha.numel(); ++i) s.alpha[i] = 0.5;
    StructureSet& target = m.structures.at(m.layer_index("g0b0.conv2"))[0];
    REQUIRE(target.alpha.numel() == 4);
    target.alpha[1] = 0.05;
    target.alpha[3] = -0.02;
    for (const StructureReportRow& row : sparsity_report(m)) {
      if (row.layer == "g0b0.conv2")
        CHECK(row.below_epsilon_fraction == 0.5);
      else
        CHECK(row.below_epsilon_fraction == 0.0);
    }
  }

  SUBCASE("histogram bins sum to the structure count and respect the range") {
    Rng rng(71);
    const Tensor alpha = random_tensor({123}, rng, 0.1);
    const AlphaHistogram h = alpha_histogram(alpha);
    int64_t total = 0;
    for (int64_t b : h.bins) total += b;
    CHECK(total == 123);
    double mx = 0.0;
    for (int64_t i = 0; i < alpha.numel(); ++i) mx = std::max(mx, std::fabs(alpha[i]));
    CHECK(h.hi == mx);
    CHECK(h.lo == -mx);
  }

  SUBCASE("random alpha fraction matches a direct count") {
    Rng rng(73);
    Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
    init_model_params(m, 73);
    attach_psp(m, attach_cfg({Granularity::shape}, 0.08, 73));
    for (const StructureReportRow& row : sparsity_report(m)) {
      const auto& sets = m.structures.at(m.layer_index(row.layer));
      int64_t below = 0;
      for (int64_t i = 0; i < sets[0].alpha.numel(); ++i)
        if (std::fabs(sets[0].alpha[i]) < 0.08) ++below;
      CHECK(row.below_epsilon_fraction ==
            doctest::Approx(static_cast<double>(below) / static_cast<double>(row.total)));
    }
  }
}

TEST_CASE("l1-norm baseline masks compact equivalently") {
  Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
  init_model_params(m, 79);
  PruneAttachConfig cfg;
  cfg.mode = PruneMode::l1_norm_baseline;
  cfg.granularities = {Granularity::channel};
  cfg.fraction = 0.4;
  cfg.seed = 79;
  attach_psp(m, cfg);
  const FoldResult fr = fold_and_compact(m);
  CHECK(count_params(fr.model) < count_params(m));
  Rng rng(83);
  for (int rep = 0; rep < 5; ++rep) {
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    CHECK(max_abs_diff(model_logits(m, x), model_logits(fr.model, x)) <= 1e-6);
  }
}
