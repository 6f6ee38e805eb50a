#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "psp/compact.hpp"
#include "psp/train.hpp"

namespace psp {

/// One JSON object per epoch record.
std::string runlog_to_jsonl(const RunLog& log);
std::vector<RunLog> runlogs_from_jsonl_files(const std::vector<std::string>& paths);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);

nlohmann::json compression_report_to_json(const CompressionReport& r);
std::string compression_report_to_csv(const CompressionReport& r);

/// Aggregated CSV over runs/epochs plus optional per-layer/epoch histogram
/// CSV exports ("layer:epoch" requests). Returns the paths written.
std::vector<std::string> write_report(const std::vector<std::string>& log_paths,
                                      const std::string& out_csv,
                                      const std::vector<std::string>& hist_requests);

}  // namespace psp
