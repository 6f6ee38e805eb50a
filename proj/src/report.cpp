#include "psp/report.hpp"

#include <fstream>
#include <sstream>

#include "psp/errors.hpp"

namespace psp {

using nlohmann::json;

namespace {

json hist_to_json(const AlphaHistogram& h) {
  json j;
  j["lo"] = h.lo;
  j["hi"] = h.hi;
  j["bins"] = h.bins;
  return j;
}

AlphaHistogram hist_from_json(const json& j) {
  AlphaHistogram h;
  h.lo = j.at("lo");
  h.hi = j.at("hi");
  const auto bins = j.at("bins").get<std::vector<int64_t>>();
  for (size_t i = 0; i < h.bins.size() && i < bins.size(); ++i) h.bins[i] = bins[i];
  return h;
}

json record_to_json(const RunLog& log, const EpochRecord& r) {
  json j;
  j["format_version"] = 1;
  j["run_id"] = log.run_id;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["val_top1"] = r.val_top1;
  j["val_top5"] = r.val_top5;
  j["sparsity"] = r.sparsity;
  json rows = json::array();
  for (const StructureReportRow& s : r.structures) {
    json js;
    js["layer"] = s.layer;
    js["granularity"] = to_string(s.granularity);
    js["total"] = s.total;
    js["active"] = s.active;
    js["below_epsilon_fraction"] = s.below_epsilon_fraction;
    js["epsilon"] = s.epsilon;
    js["hist"] = hist_to_json(s.hist);
    rows.push_back(std::move(js));
  }
  j["structures"] = std::move(rows);
  return j;
}

}  // namespace

std::string runlog_to_jsonl(const RunLog& log) {
  std::string out;
  for (const EpochRecord& r : log.records) {
    out += record_to_json(log, r).dump();
    out += "\n";
  }
  return out;
}

std::vector<RunLog> runlogs_from_jsonl_files(const std::vector<std::string>& paths) {
  std::vector<RunLog> logs;
  int version = -1;
  for (const std::string& path : paths) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    RunLog log;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad json (" + e.what() + ")");
      }
      const int v = j.at("format_version");
      if (version == -1) version = v;
      if (v != version)
        throw DataError(path + ":" + std::to_string(lineno) + ": mixed format versions " +
                        std::to_string(version) + " and " + std::to_string(v));
      log.run_id = j.at("run_id");
      EpochRecord r;
      r.epoch = j.at("epoch");
      r.lr = j.at("lr");
      r.train_loss = j.at("train_loss");
      r.val_top1 = j.at("val_top1");
      r.val_top5 = j.at("val_top5");
      r.sparsity = j.at("sparsity");
      for (const json& js : j.at("structures")) {
        StructureReportRow s;
        s.layer = js.at("layer");
        s.granularity = granularity_from_string(js.at("granularity"));
        s.total = js.at("total");
        s.active = js.at("active");
        s.below_epsilon_fraction = js.at("below_epsilon_fraction");
        s.epsilon = js.at("epsilon");
        s.hist = hist_from_json(js.at("hist"));
        r.structures.push_back(std::move(s));
      }
      log.records.push_back(std::move(r));
    }
    logs.push_back(std::move(log));
  }
  return logs;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "value,epsilon,lambda,sparsity,val_top1\n";
  os.precision(10);
  for (const SweepRow& r : rows)
    os << r.value << "," << r.epsilon << "," << r.lambda << "," << r.sparsity << "," << r.val_top1
       << "\n";
  return os.str();
}

json compression_report_to_json(const CompressionReport& r) {
  json j;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["macs_before"] = r.macs_before;
  j["macs_after"] = r.macs_after;
  j["layers_before"] = r.layers_before;
  j["layers_after"] = r.layers_after;
  json layers = json::array();
  for (const LayerPlan& p : r.layers) {
    json jp;
    jp["name"] = p.name;
    jp["kind"] = to_string(p.kind);
    jp["removed"] = p.removed;
    jp["structures_total"] = p.structures_total;
    jp["structures_kept"] = p.structures_kept;
    jp["params_before"] = p.params_before;
    jp["params_after"] = p.params_after;
    jp["macs_before"] = p.macs_before;
    jp["macs_after"] = p.macs_after;
    if (!p.kept_channels.empty()) jp["kept_channels"] = p.kept_channels;
    if (!p.kept_cols.empty()) jp["kept_cols"] = p.kept_cols;
    if (!p.kernel_mask.empty()) jp["kernel_mask"] = p.kernel_mask;
    layers.push_back(std::move(jp));
  }
  j["layers"] = std::move(layers);
  json structures = json::array();
  for (const StructureReportRow& s : r.structures) {
    json js;
    js["layer"] = s.layer;
    js["granularity"] = to_string(s.granularity);
    js["total"] = s.total;
    js["active"] = s.active;
    js["below_epsilon_fraction"] = s.below_epsilon_fraction;
    js["epsilon"] = s.epsilon;
    js["hist"] = hist_to_json(s.hist);
    structures.push_back(std::move(js));
  }
  j["structures"] = std::move(structures);
  return j;
}

std::string compression_report_to_csv(const CompressionReport& r) {
  std::ostringstream os;
  os << "layer,kind,removed,structures_total,structures_kept,params_before,params_after,"
        "macs_before,macs_after\n";
  for (const LayerPlan& p : r.layers)
    os << p.name << "," << to_string(p.kind) << "," << (p.removed ? 1 : 0) << ","
       << p.structures_total << "," << p.structures_kept << "," << p.params_before << ","
       << p.params_after << "," << p.macs_before << "," << p.macs_after << "\n";
  os << "TOTAL,model,0,,," << r.params_before << "," << r.params_after << "," << r.macs_before
     << "," << r.macs_after << "\n";
  return os.str();
}

std::vector<std::string> write_report(const std::vector<std::string>& log_paths,
                                      const std::string& out_csv,
                                      const std::vector<std::string>& hist_requests) {
  const std::vector<RunLog> logs = runlogs_from_jsonl_files(log_paths);
  std::vector<std::string> written;

  std::ofstream out(out_csv);
  if (!out) throw DataError(out_csv + ": cannot open for writing");
  out << "run_id,epoch,lr,train_loss,val_top1,val_top5,sparsity\n";
  out.precision(10);
  for (const RunLog& log : logs)
    for (const EpochRecord& r : log.records)
      out << log.run_id << "," << r.epoch << "," << r.lr << "," << r.train_loss << ","
          << r.val_top1 << "," << r.val_top5 << "," << r.sparsity << "\n";
  written.push_back(out_csv);

  for (const std::string& req : hist_requests) {
    const size_t colon = req.rfind(':');
    if (colon == std::string::npos)
      throw ConfigError("histogram request '" + req + "' must be layer:epoch");
    const std::string layer = req.substr(0, colon);
    const int epoch = std::stoi(req.substr(colon + 1));
    bool found = false;
    for (const RunLog& log : logs) {
      for (const EpochRecord& r : log.records) {
        if (r.epoch != epoch) continue;
        for (const StructureReportRow& s : r.structures) {
          if (s.layer != layer) continue;
          found = true;
          const std::string path = out_csv + "." + log.run_id + "." + layer + ".e" +
                                   std::to_string(epoch) + "." + to_string(s.granularity) +
                                   ".hist.csv";
          std::ofstream h(path);
          if (!h) throw DataError(path + ": cannot open for writing");
          h << "bin_lo,bin_hi,count\n";
          h.precision(10);
          const double width = (s.hist.hi - s.hist.lo) / 101.0;
          for (size_t b = 0; b < s.hist.bins.size(); ++b)
            h << s.hist.lo + width * static_cast<double>(b) << ","
              << s.hist.lo + width * static_cast<double>(b + 1) << "," << s.hist.bins[b] << "\n";
          written.push_back(path);
        }
      }
    }
    if (!found) throw ConfigError("histogram request '" + req + "' matches no layer/epoch");
  }
  return written;
}

}  // namespace psp
