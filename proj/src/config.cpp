#include "psp/config.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "psp/errors.hpp"
#include "psp/rng.hpp"

namespace psp {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

using Section = std::map<std::string, std::string>;

std::map<std::string, Section> parse_ini(const std::string& text) {
  std::map<std::string, Section> sections;
  std::string current;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      current = trim(line.substr(1, line.size() - 2));
      sections[current];
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (current.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
    const std::string key = trim(line.substr(0, eq));
    if (sections[current].count(key))
      throw ConfigError("duplicate key '" + key + "' in section [" + current + "]");
    sections[current][key] = trim(line.substr(eq + 1));
  }
  return sections;
}

// Tracks consumed keys so leftovers can be rejected.
class SectionReader {
 public:
  SectionReader(const std::map<std::string, Section>& all, const std::string& name)
      : name_(name) {
    auto it = all.find(name);
    if (it != all.end()) kv_ = &it->second;
  }

  bool present() const { return kv_ != nullptr; }

  std::optional<std::string> raw(const std::string& key) {
    if (!kv_) return std::nullopt;
    auto it = kv_->find(key);
    if (it == kv_->end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  std::string str(const std::string& key, const std::string& dflt) {
    auto v = raw(key);
    return v ? *v : dflt;
  }

  double num(const std::string& key, double dflt) {
    auto v = raw(key);
    if (!v) return dflt;
    try {
      size_t pos = 0;
      const double d = std::stod(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw ConfigError("[" + name_ + "] " + key + ": '" + *v + "' is not a number");
    }
  }

  int64_t integer(const std::string& key, int64_t dflt) {
    const double d = num(key, static_cast<double>(dflt));
    const auto i = static_cast<int64_t>(d);
    if (static_cast<double>(i) != d)
      throw ConfigError("[" + name_ + "] " + key + ": expected an integer");
    return i;
  }

  bool boolean(const std::string& key, bool dflt) {
    auto v = raw(key);
    if (!v) return dflt;
    if (*v == "true" || *v == "1" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "off") return false;
    throw ConfigError("[" + name_ + "] " + key + ": expected true/false");
  }

  std::vector<double> num_list(const std::string& key, std::vector<double> dflt) {
    auto v = raw(key);
    if (!v) return dflt;
    std::vector<double> out;
    for (const std::string& item : split(*v, ','))
      if (!item.empty()) out.push_back(std::stod(item));
    return out;
  }

  void finish() const {
    if (!kv_) return;
    for (const auto& [key, value] : *kv_) {
      (void)value;
      if (!used_.count(key))
        throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]");
    }
  }

 private:
  const Section* kv_ = nullptr;
  std::string name_;
  std::set<std::string> used_;
};

std::vector<Granularity> parse_granularities(const std::string& s) {
  if (s == "layer+channel") return {Granularity::layer, Granularity::channel};
  return {granularity_from_string(s)};
}

std::string granularities_to_string(const std::vector<Granularity>& gs) {
  if (gs.size() == 2 && gs[0] == Granularity::layer && gs[1] == Granularity::channel)
    return "layer+channel";
  return to_string(gs.at(0));
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  const auto sections = parse_ini(text);
  for (const auto& [name, kv] : sections) {
    (void)kv;
    if (name != "model" && name != "train" && name != "prune" && name != "data" &&
        name != "output" && name != "sweep")
      throw ConfigError("unknown section [" + name + "]");
  }

  RunConfig c;

  SectionReader model(sections, "model");
  c.model.arch = model.str("arch", c.model.arch);
  if (c.model.arch != "resnet_small" && c.model.arch != "densenet_small")
    throw ConfigError("[model] arch must be resnet_small or densenet_small");
  c.model.depth = static_cast<int>(model.integer("depth", c.model.depth));
  {
    auto ws = model.num_list("widths", {8, 16, 32});
    c.model.widths.clear();
    for (double w : ws) c.model.widths.push_back(static_cast<int64_t>(w));
  }
  c.model.growth = static_cast<int>(model.integer("growth", c.model.growth));
  model.finish();

  SectionReader train(sections, "train");
  c.train.epochs = static_cast<int>(train.integer("epochs", c.train.epochs));
  c.train.batch_size = train.integer("batch_size", c.train.batch_size);
  c.train.lr = train.num("lr", c.train.lr);
  c.train.milestone_fracs = train.num_list("milestone_fracs", c.train.milestone_fracs);
  c.train.milestone_divisor = train.num("milestone_divisor", c.train.milestone_divisor);
  c.train.momentum = train.num("momentum", c.train.momentum);
  c.train.weight_decay = train.num("weight_decay", c.train.weight_decay);
  c.train.struct_reg = reg_mode_from_string(train.str("struct_reg", to_string(c.train.struct_reg)));
  c.train.struct_lambda = train.num("struct_lambda", c.train.struct_lambda);
  c.train.augment_flip = train.boolean("augment_flip", false);
  c.train.augment_crop = train.boolean("augment_crop", false);
  c.train.seed = static_cast<uint64_t>(train.integer("seed", 1));
  train.finish();

  SectionReader prune(sections, "prune");
  c.prune.mode = prune_mode_from_string(prune.str("mode", to_string(c.prune.mode)));
  c.prune.granularities = parse_granularities(prune.str("granularity", "column"));
  c.prune.epsilon = prune.num("epsilon", c.prune.epsilon);
  c.prune.fraction = prune.num("fraction", c.prune.fraction);
  c.prune.grad_rule = grad_rule_from_string(prune.str("grad_rule", to_string(c.prune.grad_rule)));
  c.prune.init_std = prune.num("init_std", c.prune.init_std);
  c.prune.regularizer = c.train.struct_reg;
  c.prune.seed = c.train.seed;
  if (auto ov = prune.raw("attach_overrides")) {
    for (const std::string& item : split(*ov, ',')) {
      if (item.empty()) continue;
      const size_t colon = item.find(':');
      if (colon == std::string::npos)
        throw ConfigError("[prune] attach_overrides: expected name:on|off");
      const std::string flag = trim(item.substr(colon + 1));
      if (flag != "on" && flag != "off")
        throw ConfigError("[prune] attach_overrides: expected name:on|off");
      c.prune.attach_overrides[trim(item.substr(0, colon))] = flag == "on";
    }
  }
  if (auto ov = prune.raw("epsilon_overrides")) {
    for (const std::string& item : split(*ov, ',')) {
      if (item.empty()) continue;
      const size_t colon = item.find(':');
      if (colon == std::string::npos)
        throw ConfigError("[prune] epsilon_overrides: expected name:value");
      c.prune.epsilon_overrides[trim(item.substr(0, colon))] =
          std::stod(trim(item.substr(colon + 1)));
    }
  }
  if (c.prune.epsilon < 0) throw ConfigError("[prune] epsilon must be >= 0");
  if (c.prune.fraction < 0 || c.prune.fraction >= 1)
    throw ConfigError("[prune] fraction must be in [0, 1)");
  prune.finish();

  SectionReader data(sections, "data");
  c.data.source = data.str("source", c.data.source);
  if (c.data.source != "synthetic" && c.data.source != "idx" && c.data.source != "cifar")
    throw ConfigError("[data] source must be synthetic, idx or cifar");
  c.data.classes = static_cast<int>(data.integer("classes", c.data.classes));
  c.data.train_samples = data.integer("train_samples", c.data.train_samples);
  c.data.val_samples = data.integer("val_samples", c.data.val_samples);
  c.data.channels = data.integer("channels", c.data.channels);
  c.data.height = data.integer("height", c.data.height);
  c.data.width = data.integer("width", c.data.width);
  c.data.noise = data.num("noise", c.data.noise);
  c.data.data_seed = static_cast<uint64_t>(data.integer("data_seed", 1234));
  c.data.root = data.str("root", "");
  c.data.train_images = data.str("train_images", "");
  c.data.train_labels = data.str("train_labels", "");
  c.data.val_images = data.str("val_images", "");
  c.data.val_labels = data.str("val_labels", "");
  if (auto v = data.raw("train_bins")) {
    for (const std::string& item : split(*v, ','))
      if (!item.empty()) c.data.train_bins.push_back(item);
  }
  c.data.val_bin = data.str("val_bin", "");
  data.finish();

  SectionReader output(sections, "output");
  c.output.checkpoint = output.str("checkpoint", c.output.checkpoint);
  c.output.log = output.str("log", c.output.log);
  c.output.run_id = output.str("run_id", c.output.run_id);
  output.finish();

  SectionReader sweep(sections, "sweep");
  if (sweep.present()) {
    const auto eps_values = sweep.num_list("epsilon_values", {});
    const auto lam_values = sweep.num_list("lambda_values", {});
    if (!eps_values.empty() && !lam_values.empty())
      throw ConfigError("[sweep] overlapping sweep axes: give epsilon_values or lambda_values");
    if (eps_values.empty() && lam_values.empty())
      throw ConfigError("[sweep] needs epsilon_values or lambda_values");
    SweepConfig s;
    s.axis = eps_values.empty() ? SweepAxis::lambda : SweepAxis::epsilon;
    s.values = eps_values.empty() ? lam_values : eps_values;
    c.sweep = s;
  }
  sweep.finish();

  return c;
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file '" + path + "' cannot be opened");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config_text(ss.str());
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

}  // namespace

std::string run_config_to_ini(const RunConfig& c) {
  std::ostringstream os;
  os << "[model]\n";
  os << "arch = " << c.model.arch << "\n";
  os << "depth = " << c.model.depth << "\n";
  os << "widths = ";
  for (size_t i = 0; i < c.model.widths.size(); ++i) os << (i ? "," : "") << c.model.widths[i];
  os << "\n";
  os << "growth = " << c.model.growth << "\n";

  os << "\n[train]\n";
  os << "epochs = " << c.train.epochs << "\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "lr = " << fmt(c.train.lr) << "\n";
  os << "milestone_fracs = " << fmt_list(c.train.milestone_fracs) << "\n";
  os << "milestone_divisor = " << fmt(c.train.milestone_divisor) << "\n";
  os << "momentum = " << fmt(c.train.momentum) << "\n";
  os << "weight_decay = " << fmt(c.train.weight_decay) << "\n";
  os << "struct_reg = " << to_string(c.train.struct_reg) << "\n";
  os << "struct_lambda = " << fmt(c.train.struct_lambda) << "\n";
  os << "augment_flip = " << (c.train.augment_flip ? "true" : "false") << "\n";
  os << "augment_crop = " << (c.train.augment_crop ? "true" : "false") << "\n";
  os << "seed = " << c.train.seed << "\n";

  os << "\n[prune]\n";
  os << "mode = " << to_string(c.prune.mode) << "\n";
  os << "granularity = " << granularities_to_string(c.prune.granularities) << "\n";
  os << "epsilon = " << fmt(c.prune.epsilon) << "\n";
  os << "fraction = " << fmt(c.prune.fraction) << "\n";
  os << "grad_rule = " << to_string(c.prune.grad_rule) << "\n";
  os << "init_std = " << fmt(c.prune.init_std) << "\n";
  if (!c.prune.attach_overrides.empty()) {
    os << "attach_overrides = ";
    bool first = true;
    for (const auto& [name, on] : c.prune.attach_overrides) {
      os << (first ? "" : ",") << name << ":" << (on ? "on" : "off");
      first = false;
    }
    os << "\n";
  }
  if (!c.prune.epsilon_overrides.empty()) {
    os << "epsilon_overrides = ";
    bool first = true;
    for (const auto& [name, eps] : c.prune.epsilon_overrides) {
      os << (first ? "" : ",") << name << ":" << fmt(eps);
      first = false;
    }
    os << "\n";
  }

  os << "\n[data]\n";
  os << "source = " << c.data.source << "\n";
  os << "classes = " << c.data.classes << "\n";
  os << "train_samples = " << c.data.train_samples << "\n";
  os << "val_samples = " << c.data.val_samples << "\n";
  os << "channels = " << c.data.channels << "\n";
  os << "height = " << c.data.height << "\n";
  os << "width = " << c.data.width << "\n";
  os << "noise = " << fmt(c.data.noise) << "\n";
  os << "data_seed = " << c.data.data_seed << "\n";
  if (!c.data.root.empty()) os << "root = " << c.data.root << "\n";
  if (!c.data.train_images.empty()) os << "train_images = " << c.data.train_images << "\n";
  if (!c.data.train_labels.empty()) os << "train_labels = " << c.data.train_labels << "\n";
  if (!c.data.val_images.empty()) os << "val_images = " << c.data.val_images << "\n";
  if (!c.data.val_labels.empty()) os << "val_labels = " << c.data.val_labels << "\n";
  if (!c.data.train_bins.empty()) {
    os << "train_bins = ";
    for (size_t i = 0; i < c.data.train_bins.size(); ++i)
      os << (i ? "," : "") << c.data.train_bins[i];
    os << "\n";
  }
  if (!c.data.val_bin.empty()) os << "val_bin = " << c.data.val_bin << "\n";

  os << "\n[output]\n";
  os << "checkpoint = " << c.output.checkpoint << "\n";
  os << "log = " << c.output.log << "\n";
  os << "run_id = " << c.output.run_id << "\n";

  if (c.sweep) {
    os << "\n[sweep]\n";
    if (c.sweep->axis == SweepAxis::epsilon)
      os << "epsilon_values = " << fmt_list(c.sweep->values) << "\n";
    else
      os << "lambda_values = " << fmt_list(c.sweep->values) << "\n";
  }
  return os.str();
}

namespace {

std::string resolve_path(const DataConfig& d, const std::string& p) {
  std::string root = d.root;
  if (const char* env = std::getenv("PSP_DATA_ROOT")) root = env;
  if (root.empty() || p.empty() || p.front() == '/') return p;
  return root + "/" + p;
}

}  // namespace

DatasetPair load_data(const DataConfig& d) {
  DatasetPair pair;
  if (d.source == "synthetic") {
    SyntheticSpec spec;
    spec.num_classes = d.classes;
    spec.samples = d.train_samples + d.val_samples;
    spec.channels = d.channels;
    spec.height = d.height;
    spec.width = d.width;
    spec.noise = d.noise;
    const Dataset all = make_synthetic(spec, d.data_seed);
    auto take = [&](int64_t lo, int64_t hi) {
      Dataset out;
      out.num_classes = all.num_classes;
      const int64_t chw = d.channels * d.height * d.width;
      out.images = Tensor({hi - lo, d.channels, d.height, d.width});
      out.labels.assign(all.labels.begin() + lo, all.labels.begin() + hi);
      std::copy(all.images.data() + lo * chw, all.images.data() + hi * chw, out.images.data());
      return out;
    };
    pair.train = take(0, d.train_samples);
    pair.val = take(d.train_samples, d.train_samples + d.val_samples);
  } else if (d.source == "idx") {
    if (d.train_images.empty() || d.train_labels.empty() || d.val_images.empty() ||
        d.val_labels.empty())
      throw DataError("idx source needs train_images/train_labels/val_images/val_labels");
    pair.train = load_idx(resolve_path(d, d.train_images), resolve_path(d, d.train_labels));
    pair.val = load_idx(resolve_path(d, d.val_images), resolve_path(d, d.val_labels));
  } else {
    if (d.train_bins.empty() || d.val_bin.empty())
      throw DataError("cifar source needs train_bins and val_bin");
    std::vector<std::string> train_paths;
    for (const std::string& p : d.train_bins) train_paths.push_back(resolve_path(d, p));
    pair.train = load_cifar_binary(train_paths);
    pair.val = load_cifar_binary({resolve_path(d, d.val_bin)});
  }
  const int classes = std::max(pair.train.num_classes, pair.val.num_classes);
  pair.train.num_classes = classes;
  pair.val.num_classes = classes;
  apply_mean_subtraction(pair);
  return pair;
}

Model build_model_from_config(const RunConfig& c, const DatasetPair& data) {
  const Tensor& imgs = data.train.images;
  const int64_t ch = imgs.dim(1), h = imgs.dim(2), w = imgs.dim(3);
  const int num_classes = data.train.num_classes;
  Model m = c.model.arch == "resnet_small"
                ? build_resnet_small(c.model.depth, num_classes, c.model.widths, ch, h, w)
                : build_densenet_small(c.model.depth, c.model.growth, num_classes, ch, h, w);
  init_model_params(m, c.train.seed);
  return m;
}

}  // namespace psp
