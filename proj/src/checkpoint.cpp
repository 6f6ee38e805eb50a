#include "psp/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "psp/errors.hpp"

namespace psp {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "PSPCKPT1";
constexpr int kFormatVersion = 1;

void append_le64(std::string& out, const double* src, int64_t count) {
  for (int64_t i = 0; i < count; ++i) {
    uint64_t bits;
    std::memcpy(&bits, &src[i], 8);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

void read_le64(const std::string& in, size_t offset, double* dst, int64_t count) {
  for (int64_t i = 0; i < count; ++i) {
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<uint64_t>(static_cast<unsigned char>(in[offset + 8 * static_cast<size_t>(i) + static_cast<size_t>(b)]))
              << (8 * b);
    std::memcpy(&dst[i], &bits, 8);
  }
}

json geom_to_json(const ConvGeometry& g) {
  return json{{"out_channels", g.out_channels}, {"in_channels", g.in_channels},
              {"kernel_h", g.kernel_h},         {"kernel_w", g.kernel_w},
              {"stride", g.stride},             {"padding", g.padding},
              {"in_h", g.in_h},                 {"in_w", g.in_w}};
}

ConvGeometry geom_from_json(const json& j) {
  ConvGeometry g;
  g.out_channels = j.at("out_channels");
  g.in_channels = j.at("in_channels");
  g.kernel_h = j.at("kernel_h");
  g.kernel_w = j.at("kernel_w");
  g.stride = j.at("stride");
  g.padding = j.at("padding");
  g.in_h = j.at("in_h");
  g.in_w = j.at("in_w");
  return g;
}

// Tensors of one layer in declared (serialization) order.
std::vector<std::pair<std::string, const Tensor*>> layer_tensors(const Model& m, size_t i) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  const LayerParams& p = m.params[i];
  const std::string& name = m.layers[i].name;
  if (!p.weight.empty()) out.emplace_back(name + ".weight", &p.weight);
  if (!p.bias.empty()) out.emplace_back(name + ".bias", &p.bias);
  if (!p.gamma.empty()) out.emplace_back(name + ".gamma", &p.gamma);
  if (!p.beta.empty()) out.emplace_back(name + ".beta", &p.beta);
  if (!p.running_mean.empty()) out.emplace_back(name + ".running_mean", &p.running_mean);
  if (!p.running_var.empty()) out.emplace_back(name + ".running_var", &p.running_var);
  auto sit = m.structures.find(static_cast<int>(i));
  if (sit != m.structures.end())
    for (size_t s = 0; s < sit->second.size(); ++s)
      out.emplace_back(name + ".alpha" + std::to_string(s), &sit->second[s].alpha);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m, const std::string& config_ini) {
  json header;
  header["format_version"] = kFormatVersion;
  header["compacted"] = m.compacted;
  header["prune_mode"] = to_string(m.prune_mode);
  header["arch"] = m.arch;
  header["input"] = {m.input_channels, m.input_h, m.input_w};
  header["num_classes"] = m.num_classes;
  header["removed_layers"] = m.removed_layers;
  header["config"] = config_ini;

  json layers = json::array();
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    const LayerParams& p = m.params[i];
    json jl;
    jl["kind"] = to_string(l.kind);
    jl["name"] = l.name;
    jl["inputs"] = l.inputs;
    jl["has_bias"] = l.has_bias;
    jl["psp_attached"] = l.psp_attached;
    jl["exempt"] = to_string(l.exempt);
    jl["join_feeder"] = l.join_feeder;
    switch (l.kind) {
      case LayerKind::conv: jl["geom"] = geom_to_json(l.geom); break;
      case LayerKind::linear:
        jl["in_features"] = l.in_features;
        jl["out_features"] = l.out_features;
        break;
      case LayerKind::batchnorm: jl["channels"] = l.channels; break;
      case LayerKind::avgpool:
      case LayerKind::maxpool:
        jl["pool_window"] = l.pool_window;
        jl["pool_stride"] = l.pool_stride;
        break;
      default: break;
    }
    if (!p.input_gather.empty()) jl["input_gather"] = p.input_gather;
    if (p.packed) {
      jl["packed"] = true;
      jl["kept_cols"] = p.kept_cols;
    }
    if (!p.kernel_mask.empty()) jl["kernel_mask"] = p.kernel_mask;
    layers.push_back(std::move(jl));
  }
  header["layers"] = std::move(layers);

  json structures = json::array();
  for (const auto& [idx, sets] : m.structures) {
    for (const StructureSet& s : sets) {
      json js;
      js["layer"] = idx;
      js["granularity"] = to_string(s.granularity);
      js["epsilon"] = s.epsilon;
      js["regularizer"] = to_string(s.regularizer);
      js["grad_rule"] = to_string(s.grad_rule);
      if (!s.fixed_mask.empty()) js["fixed_mask"] = s.fixed_mask;
      structures.push_back(std::move(js));
    }
  }
  header["structures"] = std::move(structures);

  std::string blob;
  json tensors = json::array();
  for (size_t i = 0; i < m.layers.size(); ++i) {
    for (const auto& [name, t] : layer_tensors(m, i)) {
      json jt;
      jt["name"] = name;
      jt["shape"] = t->shape();
      jt["offset"] = blob.size();
      tensors.push_back(std::move(jt));
      append_le64(blob, t->data(), t->numel());
    }
  }
  header["tensors"] = std::move(tensors);

  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << kMagic << " " << htext.size() << "\n";
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw DataError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  std::string magic;
  size_t header_size = 0;
  in >> magic >> header_size;
  if (magic != kMagic) throw DataError(path + ": not a checkpoint (bad magic '" + magic + "')");
  in.get();  // newline
  std::string htext(header_size, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw DataError(path + ": truncated header");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  ck.header = json::parse(htext);
  if (ck.header.at("format_version").get<int>() != kFormatVersion)
    throw DataError(path + ": unsupported format version");
  ck.config_ini = ck.header.value("config", std::string());

  Model& m = ck.model;
  m.compacted = ck.header.at("compacted");
  m.prune_mode = prune_mode_from_string(ck.header.at("prune_mode"));
  m.arch = ck.header.at("arch");
  m.input_channels = ck.header.at("input")[0];
  m.input_h = ck.header.at("input")[1];
  m.input_w = ck.header.at("input")[2];
  m.num_classes = ck.header.at("num_classes");
  m.removed_layers = ck.header.at("removed_layers").get<std::vector<std::string>>();

  for (const json& jl : ck.header.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(jl.at("kind"));
    l.name = jl.at("name");
    l.inputs = jl.at("inputs").get<std::vector<int>>();
    l.has_bias = jl.at("has_bias");
    l.psp_attached = jl.at("psp_attached");
    l.exempt = exempt_from_string(jl.at("exempt"));
    l.join_feeder = jl.at("join_feeder");
    switch (l.kind) {
      case LayerKind::conv: l.geom = geom_from_json(jl.at("geom")); break;
      case LayerKind::linear:
        l.in_features = jl.at("in_features");
        l.out_features = jl.at("out_features");
        break;
      case LayerKind::batchnorm: l.channels = jl.at("channels"); break;
      case LayerKind::avgpool:
      case LayerKind::maxpool:
        l.pool_window = jl.at("pool_window");
        l.pool_stride = jl.at("pool_stride");
        break;
      default: break;
    }
    LayerParams p;
    if (jl.contains("input_gather"))
      p.input_gather = jl.at("input_gather").get<std::vector<int64_t>>();
    if (jl.value("packed", false)) {
      p.packed = true;
      p.kept_cols = jl.at("kept_cols").get<std::vector<int64_t>>();
    }
    if (jl.contains("kernel_mask")) p.kernel_mask = jl.at("kernel_mask").get<std::vector<uint8_t>>();
    m.layers.push_back(std::move(l));
    m.params.push_back(std::move(p));
  }

  for (const json& js : ck.header.at("structures")) {
    StructureSet s;
    s.granularity = granularity_from_string(js.at("granularity"));
    s.epsilon = js.at("epsilon");
    s.regularizer = reg_mode_from_string(js.at("regularizer"));
    s.grad_rule = grad_rule_from_string(js.at("grad_rule"));
    if (js.contains("fixed_mask")) s.fixed_mask = js.at("fixed_mask").get<std::vector<uint8_t>>();
    m.structures[js.at("layer").get<int>()].push_back(std::move(s));
  }

  // Blocks land by name; structure alphas resolve through their layer's sets.
  for (const json& jt : ck.header.at("tensors")) {
    const std::string name = jt.at("name");
    const auto shape = jt.at("shape").get<std::vector<int64_t>>();
    const size_t offset = jt.at("offset");
    Tensor t(shape);
    if (offset + static_cast<size_t>(t.numel()) * 8 > blob.size())
      throw DataError(path + ": tensor block '" + name + "' beyond end of file");
    read_le64(blob, offset, t.data(), t.numel());

    const size_t dot = name.rfind('.');
    const std::string layer_name = name.substr(0, dot);
    const std::string field = name.substr(dot + 1);
    const int li = m.layer_index(layer_name);
    if (li < 0) throw DataError(path + ": tensor block for unknown layer '" + layer_name + "'");
    LayerParams& p = m.params[static_cast<size_t>(li)];
    if (field == "weight") p.weight = std::move(t);
    else if (field == "bias") p.bias = std::move(t);
    else if (field == "gamma") p.gamma = std::move(t);
    else if (field == "beta") p.beta = std::move(t);
    else if (field == "running_mean") p.running_mean = std::move(t);
    else if (field == "running_var") p.running_var = std::move(t);
    else if (field.rfind("alpha", 0) == 0) {
      const auto set_idx = static_cast<size_t>(std::stoul(field.substr(5)));
      auto sit = m.structures.find(li);
      if (sit == m.structures.end() || set_idx >= sit->second.size())
        throw DataError(path + ": alpha block '" + name + "' has no structure set");
      sit->second[set_idx].alpha = std::move(t);
    } else {
      throw DataError(path + ": unknown tensor field '" + field + "'");
    }
  }
  return ck;
}

}  // namespace psp
