#include "framelet/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace framelet {

namespace {

[[noreturn]] void bad(const std::string& what) { throw std::invalid_argument("config: " + what); }

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) bad(key + ": expected a non-negative integer, got '" + value + "'");
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) bad(key + ": expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  bad(key + ": expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) bad("unformattable number");
  return std::string(buf, ptr);
}

std::string methods_to_text(const std::vector<MethodKind>& methods) {
  std::string out;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    if (i) out += ", ";
    out += method_name(methods[i]);
  }
  return out;
}

std::vector<MethodKind> methods_from_text(const std::string& value) {
  std::vector<MethodKind> out;
  std::stringstream stream(value);
  std::string item;
  while (std::getline(stream, item, ',')) {
    item = trim(item);
    if (item.empty()) bad("methods: empty entry in '" + value + "'");
    const MethodKind kind = method_from_name(item);
    if (std::find(out.begin(), out.end(), kind) != out.end())
      bad("methods: '" + item + "' listed twice");
    out.push_back(kind);
  }
  return out;
}

struct KeyDef {
  const char* section;  // "" = before any section header
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// One row per key: the parser, the canonical printer, and the membership
// test all read this table, so they cannot drift apart. Keys are listed in
// canonical dump order (sections as declared, keys alphabetical).
const std::vector<KeyDef>& key_table() {
  using C = ExperimentConfig;
  static const std::vector<KeyDef> table = {
      {"", "seed", [](C& c, const std::string& v) { c.seed = parse_u64("seed", v); },
       [](const C& c) { return std::to_string(c.seed); }},

      {"data", "accel_cols",
       [](C& c, const std::string& v) { c.data.accel_cols = parse_size("accel_cols", v); },
       [](const C& c) { return std::to_string(c.data.accel_cols); }},
      {"data", "accel_rows",
       [](C& c, const std::string& v) { c.data.accel_rows = parse_size("accel_rows", v); },
       [](const C& c) { return std::to_string(c.data.accel_rows); }},
      {"data", "acs_cols",
       [](C& c, const std::string& v) { c.data.acs_cols = parse_size("acs_cols", v); },
       [](const C& c) { return std::to_string(c.data.acs_cols); }},
      {"data", "acs_rows",
       [](C& c, const std::string& v) { c.data.acs_rows = parse_size("acs_rows", v); },
       [](const C& c) { return std::to_string(c.data.acs_rows); }},
      {"data", "height", [](C& c, const std::string& v) { c.data.height = parse_size("height", v); },
       [](const C& c) { return std::to_string(c.data.height); }},
      {"data", "kind",
       [](C& c, const std::string& v) { c.data.kind = data_kind_from_name(v); },
       [](const C& c) { return std::string(data_kind_name(c.data.kind)); }},
      {"data", "n_coils",
       [](C& c, const std::string& v) { c.data.n_coils = parse_size("n_coils", v); },
       [](const C& c) { return std::to_string(c.data.n_coils); }},
      {"data", "n_ellipses",
       [](C& c, const std::string& v) { c.data.n_ellipses = parse_size("n_ellipses", v); },
       [](const C& c) { return std::to_string(c.data.n_ellipses); }},
      {"data", "n_test",
       [](C& c, const std::string& v) { c.data.n_test = parse_size("n_test", v); },
       [](const C& c) { return std::to_string(c.data.n_test); }},
      {"data", "n_train",
       [](C& c, const std::string& v) { c.data.n_train = parse_size("n_train", v); },
       [](const C& c) { return std::to_string(c.data.n_train); }},
      {"data", "n_val", [](C& c, const std::string& v) { c.data.n_val = parse_size("n_val", v); },
       [](const C& c) { return std::to_string(c.data.n_val); }},
      {"data", "width", [](C& c, const std::string& v) { c.data.width = parse_size("width", v); },
       [](const C& c) { return std::to_string(c.data.width); }},

      {"network", "base_channels",
       [](C& c, const std::string& v) { c.network.base_channels = parse_size("base_channels", v); },
       [](const C& c) { return std::to_string(c.network.base_channels); }},
      {"network", "batchnorm",
       [](C& c, const std::string& v) { c.network.batchnorm = parse_bool("batchnorm", v); },
       [](const C& c) { return std::string(c.network.batchnorm ? "true" : "false"); }},
      {"network", "stages",
       [](C& c, const std::string& v) { c.network.stages = parse_size("stages", v); },
       [](const C& c) { return std::to_string(c.network.stages); }},

      {"scheme", "attention",
       [](C& c, const std::string& v) { c.scheme.attention = attention_from_name(v); },
       [](const C& c) { return std::string(attention_name(c.scheme.attention)); }},
      {"scheme", "keep_ratio",
       [](C& c, const std::string& v) { c.scheme.keep_ratio = parse_double("keep_ratio", v); },
       [](const C& c) { return format_double(c.scheme.keep_ratio); }},
      {"scheme", "kind", [](C& c, const std::string& v) { c.scheme.kind = scheme_from_name(v); },
       [](const C& c) { return std::string(scheme_name(c.scheme.kind)); }},
      {"scheme", "n_branches",
       [](C& c, const std::string& v) { c.scheme.n_branches = parse_size("n_branches", v); },
       [](const C& c) { return std::to_string(c.scheme.n_branches); }},
      {"scheme", "pool_magnitude",
       [](C& c, const std::string& v) { c.scheme.pool_magnitude = parse_bool("pool_magnitude", v); },
       [](const C& c) { return std::string(c.scheme.pool_magnitude ? "true" : "false"); }},

      {"training", "domain",
       [](C& c, const std::string& v) { c.training.domain = domain_from_name(v); },
       [](const C& c) { return std::string(domain_name(c.training.domain)); }},
      {"training", "epochs",
       [](C& c, const std::string& v) { c.training.epochs = parse_size("epochs", v); },
       [](const C& c) { return std::to_string(c.training.epochs); }},
      {"training", "halve_period",
       [](C& c, const std::string& v) { c.training.halve_period = parse_size("halve_period", v); },
       [](const C& c) { return std::to_string(c.training.halve_period); }},
      {"training", "loss",
       [](C& c, const std::string& v) { c.training.loss = loss_from_name(v); },
       [](const C& c) { return std::string(loss_name(c.training.loss)); }},
      {"training", "lr0",
       [](C& c, const std::string& v) { c.training.lr0 = parse_double("lr0", v); },
       [](const C& c) { return format_double(c.training.lr0); }},
      {"training", "lr_floor",
       [](C& c, const std::string& v) { c.training.lr_floor = parse_double("lr_floor", v); },
       [](const C& c) { return format_double(c.training.lr_floor); }},
      {"training", "normalize",
       [](C& c, const std::string& v) { c.training.normalize = parse_bool("normalize", v); },
       [](const C& c) { return std::string(c.training.normalize ? "true" : "false"); }},

      {"evaluation", "census_probes",
       [](C& c, const std::string& v) { c.evaluation.census_probes = parse_size("census_probes", v); },
       [](const C& c) { return std::to_string(c.evaluation.census_probes); }},
      {"evaluation", "geometry",
       [](C& c, const std::string& v) { c.evaluation.geometry = parse_bool("geometry", v); },
       [](const C& c) { return std::string(c.evaluation.geometry ? "true" : "false"); }},
      {"evaluation", "grappa_cols",
       [](C& c, const std::string& v) { c.evaluation.grappa_cols = parse_size("grappa_cols", v); },
       [](const C& c) { return std::to_string(c.evaluation.grappa_cols); }},
      {"evaluation", "grappa_rows",
       [](C& c, const std::string& v) { c.evaluation.grappa_rows = parse_size("grappa_rows", v); },
       [](const C& c) { return std::to_string(c.evaluation.grappa_rows); }},
      {"evaluation", "methods",
       [](C& c, const std::string& v) { c.evaluation.methods = methods_from_text(v); },
       [](const C& c) { return methods_to_text(c.evaluation.methods); }},
      {"evaluation", "raki_epochs",
       [](C& c, const std::string& v) { c.evaluation.raki_epochs = parse_size("raki_epochs", v); },
       [](const C& c) { return std::to_string(c.evaluation.raki_epochs); }},
  };
  return table;
}

const KeyDef* find_key(const std::string& section, const std::string& key) {
  for (const KeyDef& def : key_table())
    if (section == def.section && key == def.key) return &def;
  return nullptr;
}

bool known_section(const std::string& section) {
  for (const KeyDef& def : key_table())
    if (section == def.section) return true;
  return false;
}

}  // namespace

const char* method_name(MethodKind kind) {
  switch (kind) {
    case MethodKind::Grappa: return "grappa";
    case MethodKind::Raki: return "raki";
    case MethodKind::BaselineUnet: return "baseline-unet";
    case MethodKind::Bootstrap: return "bootstrap";
    case MethodKind::Residual: return "residual";
    case MethodKind::Iterative: return "iterative";
  }
  bad("method_name: bad kind");
}

MethodKind method_from_name(const std::string& name) {
  for (MethodKind kind : {MethodKind::Grappa, MethodKind::Raki, MethodKind::BaselineUnet,
                          MethodKind::Bootstrap, MethodKind::Residual, MethodKind::Iterative})
    if (name == method_name(kind)) return kind;
  bad("unknown method '" + name + "'");
}

bool method_is_network(MethodKind kind) {
  return kind != MethodKind::Grappa && kind != MethodKind::Raki;
}

SchemeKind method_scheme(MethodKind kind) {
  switch (kind) {
    case MethodKind::BaselineUnet: return SchemeKind::Baseline;
    case MethodKind::Bootstrap: return SchemeKind::Bootstrap;
    case MethodKind::Residual: return SchemeKind::Residual;
    case MethodKind::Iterative: return SchemeKind::Iterative;
    default: bad(std::string("method_scheme: ") + method_name(kind) + " is not a network method");
  }
}

const char* data_kind_name(DataKind kind) {
  return kind == DataKind::Phantom ? "phantom" : "exact-linear";
}

DataKind data_kind_from_name(const std::string& name) {
  if (name == "phantom") return DataKind::Phantom;
  if (name == "exact-linear") return DataKind::ExactLinear;
  bad("unknown data kind '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (data.height < 16 || data.width < 16) bad("data extents must be >= 16 per axis");
  if (data.n_coils == 0) bad("n_coils must be >= 1");
  if (data.accel_rows == 0 || data.accel_cols == 0) bad("acceleration factors must be >= 1");
  if (data.acs_rows == 0 || data.acs_cols == 0) bad("the calibration region must be nonempty");
  if (data.acs_rows > data.height || data.acs_cols > data.width)
    bad("the calibration region must fit inside the grid");
  if (data.n_ellipses == 0) bad("n_ellipses must be >= 1");
  if (network.stages == 0) bad("stages must be >= 1");
  if (network.base_channels == 0) bad("base_channels must be >= 1");
  if (scheme.n_branches == 0) bad("n_branches must be >= 1");
  if (!(scheme.keep_ratio > 0.0) || scheme.keep_ratio > 1.0)
    bad("keep_ratio must be in (0, 1]");
  if (evaluation.grappa_rows == 0 || evaluation.grappa_cols == 0)
    bad("calibration kernel extents must be >= 1");
  if (evaluation.census_probes == 0) bad("census_probes must be >= 1");
  train_config().validate();
}

std::string ExperimentConfig::canonical_text() const {
  std::string out;
  std::string current;
  for (const KeyDef& def : key_table()) {
    if (current != def.section) {
      current = def.section;
      out += "\n[" + current + "]\n";
    }
    out += std::string(def.key) + " = " + def.get(*this) + "\n";
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_text())));
  return std::string(buf);
}

DatasetParams ExperimentConfig::dataset_params(std::uint64_t stream, std::size_t n_samples) const {
  DatasetParams params;
  params.n_samples = n_samples;
  params.height = data.height;
  params.width = data.width;
  params.n_coils = data.n_coils;
  params.accel = {data.accel_rows, data.accel_cols};
  params.acs = {data.acs_rows, data.acs_cols};
  params.n_ellipses = data.n_ellipses;
  params.seed = derive_seed(seed, stream);
  return params;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig config;
  config.domain = training.domain;
  config.scheme = scheme;
  config.lr0 = training.lr0;
  config.lr_floor = training.lr_floor;
  config.halve_period = training.halve_period;
  config.epochs = training.epochs;
  config.seed = Seed{derive_seed(seed, seed_stream::kTraining)};
  config.loss = training.loss;
  config.normalize = training.normalize;
  return config;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig config;
  std::string section;
  std::vector<const KeyDef*> seen;
  std::istringstream stream(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(stream, raw)) {
    ++line_no;
    const auto hash_pos = raw.find('#');
    if (hash_pos != std::string::npos) raw.erase(hash_pos);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const std::string at = " (line " + std::to_string(line_no) + ")";
    if (line.front() == '[') {
      if (line.back() != ']') bad("unterminated section header" + at);
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty() || !known_section(section)) bad("unknown section '" + section + "'" + at);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) bad("expected key = value" + at);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) bad("empty key" + at);
    const KeyDef* def = find_key(section, key);
    if (!def) {
      const std::string where = section.empty() ? "top level" : "section [" + section + "]";
      bad("unknown key '" + key + "' in " + where + at);
    }
    if (std::find(seen.begin(), seen.end(), def) != seen.end())
      bad("key '" + key + "' set twice" + at);
    seen.push_back(def);
    def->set(config, value);
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) bad("cannot read " + file.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  ExperimentConfig config = parse_config(buffer.str());
  if (const char* env = std::getenv("FRAMELET_SEED"); env && *env) {
    config.seed = parse_u64("FRAMELET_SEED", env);
  }
  return config;
}

}  // namespace framelet
