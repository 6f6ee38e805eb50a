#pragma once

#include <string>

#include <json.hpp>

#include "psp/layers.hpp"

namespace psp {

/// Checkpoint container: one structured-text (JSON) header describing the
/// topology, pruning state, kept-index tables and block layout, followed by
/// raw little-endian float64 parameter blocks in declared order. Loading then
/// saving is byte-identical.
struct Checkpoint {
  Model model;
  nlohmann::json header;
  std::string config_ini;  // embedded canonical run config ("" if absent)
};

void save_checkpoint(const std::string& path, const Model& m, const std::string& config_ini);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace psp
