// Command-line surface: train / prune-export / eval / report / sweep.
// Exit codes: 0 ok, 1 config error, 2 data error, 3 divergence.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "psp/checkpoint.hpp"
#include "psp/compact.hpp"
#include "psp/config.hpp"
#include "psp/errors.hpp"
#include "psp/report.hpp"
#include "psp/train.hpp"

namespace fs = std::filesystem;

namespace {

void ensure_parent_dir(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

int cmd_train(const std::string& config_path) {
  const psp::RunConfig cfg = psp::parse_run_config(config_path);
  const psp::DatasetPair data = psp::load_data(cfg.data);
  psp::Model model = psp::build_model_from_config(cfg, data);
  psp::attach_psp(model, cfg.prune);

  psp::TrainConfig tcfg = cfg.train;
  tcfg.prune_fraction = cfg.prune.fraction;
  const psp::RunLog log = psp::train(model, data, tcfg, cfg.output.run_id);

  ensure_parent_dir(cfg.output.checkpoint);
  psp::save_checkpoint(cfg.output.checkpoint, model, psp::run_config_to_ini(cfg));
  ensure_parent_dir(cfg.output.log);
  std::ofstream lout(cfg.output.log);
  if (!lout) throw psp::DataError(cfg.output.log + ": cannot open for writing");
  lout << psp::runlog_to_jsonl(log);

  std::cout << "trained " << cfg.output.run_id << ": epochs=" << cfg.train.epochs;
  if (!log.records.empty()) {
    std::cout << std::fixed << std::setprecision(2) << " val_top1=" << log.records.back().val_top1
              << "% sparsity=" << 100.0 * log.records.back().sparsity << "%";
  }
  std::cout << " checkpoint=" << cfg.output.checkpoint << " log=" << cfg.output.log << "\n";
  return 0;
}

int cmd_prune_export(const std::string& ckpt_path, const std::string& out_path) {
  const psp::Checkpoint ck = psp::load_checkpoint(ckpt_path);
  if (ck.model.compacted)
    throw psp::ConfigError("checkpoint '" + ckpt_path + "' is already compacted");
  const psp::FoldResult folded = psp::fold_and_compact(ck.model);
  const psp::CompressionReport report = psp::make_compression_report(ck.model, folded);

  ensure_parent_dir(out_path);
  psp::save_checkpoint(out_path, folded.model, ck.config_ini);
  {
    std::ofstream j(out_path + ".report.json");
    if (!j) throw psp::DataError(out_path + ".report.json: cannot open for writing");
    j << psp::compression_report_to_json(report).dump(2) << "\n";
  }
  {
    std::ofstream c(out_path + ".report.csv");
    if (!c) throw psp::DataError(out_path + ".report.csv: cannot open for writing");
    c << psp::compression_report_to_csv(report);
  }

  std::cout << "compacted " << ckpt_path << " -> " << out_path << ": params "
            << report.params_before << " -> " << report.params_after << ", macs "
            << report.macs_before << " -> " << report.macs_after << ", layers "
            << report.layers_before << " -> " << report.layers_after << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
  const psp::Checkpoint ck = psp::load_checkpoint(ckpt_path);
  psp::RunConfig dcfg;
  if (!data_path.empty()) {
    dcfg = psp::parse_run_config(data_path);
  } else if (!ck.config_ini.empty()) {
    dcfg = psp::parse_run_config_text(ck.config_ini);
  } else {
    throw psp::ConfigError("no --data given and checkpoint has no embedded config");
  }
  const psp::DatasetPair data = psp::load_data(dcfg.data);
  const psp::EvalResult r = psp::evaluate(ck.model, data.val);
  std::cout << std::fixed << std::setprecision(2);
  std::cout << "top1_error: " << r.top1_error << "%\n";
  if (r.top5_error >= 0.0) std::cout << "top5_error: " << r.top5_error << "%\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& logs, const std::string& out,
               const std::vector<std::string>& hists) {
  ensure_parent_dir(out);
  const std::vector<std::string> written = psp::write_report(logs, out, hists);
  for (const std::string& path : written) std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_path) {
  const psp::RunConfig cfg = psp::parse_run_config(config_path);
  if (!cfg.sweep) throw psp::ConfigError("config has no [sweep] section");
  const psp::DatasetPair data = psp::load_data(cfg.data);
  psp::TrainConfig tcfg = cfg.train;
  tcfg.prune_fraction = cfg.prune.fraction;
  auto build = [&](uint64_t) { return psp::build_model_from_config(cfg, data); };
  const auto rows =
      psp::ablation_sweep(build, cfg.prune, tcfg, data, cfg.sweep->axis, cfg.sweep->values);
  ensure_parent_dir(out_path);
  std::ofstream out(out_path);
  if (!out) throw psp::DataError(out_path + ": cannot open for writing");
  out << psp::sweep_to_csv(rows);
  std::cout << "wrote " << out_path << " (" << rows.size() << " sweep points)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parameterized structured pruning trainer/exporter"};
  app.require_subcommand(1);

  std::string train_config;
  CLI::App* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", train_config, "run config (ini)")->required();

  std::string pe_ckpt, pe_out;
  CLI::App* pe = app.add_subcommand("prune-export", "fold + compact a trained checkpoint");
  pe->add_option("--ckpt", pe_ckpt, "input checkpoint")->required();
  pe->add_option("--out", pe_out, "output compacted checkpoint")->required();

  std::string ev_ckpt, ev_data;
  CLI::App* ev = app.add_subcommand("eval", "top-1/top-5 error of a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset config (defaults to the embedded one)");

  std::vector<std::string> rp_logs, rp_hists;
  std::string rp_out;
  CLI::App* rp = app.add_subcommand("report", "aggregate run logs into csv");
  rp->add_option("logs", rp_logs, "run log files (jsonl)")->required();
  rp->add_option("--out", rp_out, "output csv")->required();
  rp->add_option("--hist", rp_hists, "alpha histogram export, layer:epoch (repeatable)");

  std::string sw_config, sw_out;
  CLI::App* sw = app.add_subcommand("sweep", "sparsity-vs-error ablation sweep");
  sw->add_option("--config", sw_config, "run config with [sweep] section")->required();
  sw->add_option("--out", sw_out, "output csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(train_config);
    if (pe->parsed()) return cmd_prune_export(pe_ckpt, pe_out);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data);
    if (rp->parsed()) return cmd_report(rp_logs, rp_out, rp_hists);
    if (sw->parsed()) return cmd_sweep(sw_config, sw_out);
  } catch (const psp::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const psp::DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 2;
  } catch (const psp::DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
