#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "psp/checkpoint.hpp"
#include "psp/compact.hpp"
#include "psp/config.hpp"
#include "psp/errors.hpp"
#include "psp/report.hpp"
#include "psp/train.hpp"
#include "test_helpers.hpp"

using namespace psp;
using namespace psp::testing;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("psp_ckpt_test_" + name)).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Model attached_model(uint64_t seed) {
  Model m = build_densenet_small(10, 4, 10, 3, 8, 8);
  init_model_params(m, seed);
  PruneAttachConfig cfg;
  cfg.mode = PruneMode::psp_threshold;
  cfg.granularities = {Granularity::layer, Granularity::channel};
  cfg.epsilon = 0.1;
  cfg.seed = seed;
  attach_psp(m, cfg);
  return m;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-identical") {
  Model m = attached_model(5);
  const std::string p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(p1, m, "[train]\nseed = 5\n");
  const Checkpoint ck = load_checkpoint(p1);
  CHECK(ck.config_ini == "[train]\nseed = 5\n");
  CHECK(ck.model.arch == m.arch);
  CHECK(ck.model.prune_mode == m.prune_mode);

  // tensors equal bit for bit
  Model loaded = ck.model;
  auto pa = named_parameters(m);
  auto pb = named_parameters(loaded);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    for (int64_t j = 0; j < pa[i].second->numel(); ++j)
      CHECK((*pa[i].second)[j] == (*pb[i].second)[j]);
  }

  // save(load(x)) == x byte for byte
  save_checkpoint(p2, ck.model, ck.config_ini);
  CHECK(file_bytes(p1) == file_bytes(p2));

  SUBCASE("forward of the loaded model matches") {
    Rng rng(703);
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    const Tensor a = model_logits(m, x);
    const Tensor b = model_logits(loaded, x);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("compacted checkpoint carries kept-index tables") {
  Model m = attached_model(7);
  const FoldResult fr = fold_and_compact(m);
  const std::string p = temp_path("compact.ckpt");
  save_checkpoint(p, fr.model, "");
  const Checkpoint ck = load_checkpoint(p);
  CHECK(ck.model.compacted);
  CHECK(ck.header.at("compacted") == true);

  Rng rng(709);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const Tensor a = model_logits(fr.model, x);
  const Tensor b = model_logits(ck.model, x);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  std::remove(p.c_str());
}

TEST_CASE("corrupt checkpoints are data errors") {
  const std::string p = temp_path("bad.ckpt");
  std::ofstream out(p, std::ios::binary);
  out << "NOTACKPT 12\n{}";
  out.close();
  CHECK_THROWS_AS(load_checkpoint(p), DataError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), DataError);
  std::remove(p.c_str());
}

TEST_CASE("run config parsing") {
  SUBCASE("defaults materialize from an empty config") {
    const RunConfig c = parse_run_config_text("");
    CHECK(c.train.weight_decay == 1e-4);
    CHECK(c.train.momentum == 0.9);
    CHECK(c.train.lr == 0.1);
    CHECK(c.train.batch_size == 64);
    CHECK(c.train.milestone_fracs == std::vector<double>{0.5, 0.75});
    CHECK(c.prune.epsilon == 0.1);
    CHECK(c.prune.mode == PruneMode::psp_threshold);
    CHECK(c.prune.grad_rule == GradRule::paper_sum);
  }

  SUBCASE("unknown keys and sections rejected") {
    CHECK_THROWS_AS(parse_run_config_text("[train]\nepoch = 5\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config_text("[quux]\na = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config_text("[train]\nepochs = abc\n"), ConfigError);
  }

  SUBCASE("layer+channel granularity and overrides parse") {
    const RunConfig c = parse_run_config_text(
        "[prune]\n"
        "granularity = layer+channel\n"
        "attach_overrides = stem:on,g0b0.conv1:off\n"
        "epsilon_overrides = g0b0.conv2:0.25\n");
    REQUIRE(c.prune.granularities.size() == 2);
    CHECK(c.prune.granularities[0] == Granularity::layer);
    CHECK(c.prune.attach_overrides.at("stem") == true);
    CHECK(c.prune.attach_overrides.at("g0b0.conv1") == false);
    CHECK(c.prune.epsilon_overrides.at("g0b0.conv2") == 0.25);
  }

  SUBCASE("overlapping sweep axes rejected") {
    CHECK_THROWS_AS(parse_run_config_text("[sweep]\nepsilon_values = 0,0.02\nlambda_values = 1e-8\n"),
                    ConfigError);
    const RunConfig c = parse_run_config_text("[sweep]\nepsilon_values = 0,0.02\n");
    REQUIRE(c.sweep.has_value());
    CHECK(c.sweep->axis == SweepAxis::epsilon);
    CHECK(c.sweep->values == std::vector<double>{0.0, 0.02});
  }

  SUBCASE("echo round trip is stable") {
    const RunConfig c = parse_run_config_text(
        "[train]\nepochs = 3\nseed = 9\n[prune]\nmode = psp_fixed_sparsity\nfraction = 0.25\n");
    const std::string echo = run_config_to_ini(c);
    const RunConfig back = parse_run_config_text(echo);
    CHECK(run_config_to_ini(back) == echo);
    CHECK(back.train.epochs == 3);
    CHECK(back.prune.mode == PruneMode::psp_fixed_sparsity);
    CHECK(back.prune.fraction == 0.25);
  }
}

TEST_CASE("run log jsonl round trip and report csv") {
  DatasetPair data;
  {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.samples = 80;
    spec.channels = 2;
    spec.height = 8;
    spec.width = 8;
    const Dataset all = make_synthetic(spec, 3);
    data.train = all;
    data.val = all;
    apply_mean_subtraction(data);
  }
  Model m = build_resnet_small(8, 4, {4, 8, 16}, 2, 8, 8);
  init_model_params(m, 3);
  PruneAttachConfig pcfg;
  pcfg.seed = 3;
  attach_psp(m, pcfg);
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 32;
  tcfg.seed = 3;
  const RunLog log = train(m, data, tcfg, "runA");

  const std::string jsonl_path = temp_path("runA.jsonl");
  std::ofstream(jsonl_path) << runlog_to_jsonl(log);

  SUBCASE("round trip preserves records") {
    const auto logs = runlogs_from_jsonl_files({jsonl_path});
    REQUIRE(logs.size() == 1);
    CHECK(logs[0].run_id == "runA");
    REQUIRE(logs[0].records.size() == 2);
    CHECK(logs[0].records[1].val_top1 == log.records[1].val_top1);
    CHECK(logs[0].records[1].structures.size() == log.records[1].structures.size());
  }

  SUBCASE("csv has one row per (run, epoch) and histograms sum to counts") {
    const std::string second = temp_path("runB.jsonl");
    RunLog other = log;
    other.run_id = "runB";
    std::ofstream(second) << runlog_to_jsonl(other);
    const std::string out = temp_path("agg.csv");
    const std::string layer = log.records[0].structures[0].layer;
    const auto written = write_report({jsonl_path, second}, out, {layer + ":1"});
    REQUIRE(written.size() >= 2);

    std::ifstream csv(out);
    std::string line;
    int rows = 0;
    while (std::getline(csv, line))
      if (!line.empty()) ++rows;
    CHECK(rows == 1 + 4);  // header + 2 runs x 2 epochs

    int64_t sum = 0, expected = 0;
    for (const StructureReportRow& s : log.records[1].structures)
      if (s.layer == layer) expected = s.total;
    std::ifstream hist(written[1]);
    std::getline(hist, line);  // header
    while (std::getline(hist, line)) {
      const size_t comma = line.rfind(',');
      sum += std::stoll(line.substr(comma + 1));
    }
    CHECK(sum == expected);
    std::remove(second.c_str());
    std::remove(out.c_str());
    for (size_t i = 1; i < written.size(); ++i) std::remove(written[i].c_str());
  }

  SUBCASE("mixed format versions rejected") {
    const std::string bad = temp_path("bad.jsonl");
    std::string text = runlog_to_jsonl(log);
    const size_t pos = text.rfind("\"format_version\":1");
    text.replace(pos, 18, "\"format_version\":2");
    std::ofstream(bad) << text;
    CHECK_THROWS_AS(runlogs_from_jsonl_files({bad}), DataError);
    std::remove(bad.c_str());
  }

  std::remove(jsonl_path.c_str());
}

TEST_CASE("sweep csv shape") {
  std::vector<SweepRow> rows(3);
  rows[0] = {0.0, 0.0, 1e-4, 0.0, 12.5};
  rows[1] = {0.02, 0.02, 1e-4, 0.4, 13.0};
  rows[2] = {0.04, 0.04, 1e-4, 0.6, 14.0};
  const std::string csv = sweep_to_csv(rows);
  CHECK(csv.find("value,epsilon,lambda,sparsity,val_top1") == 0);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 4);
}
