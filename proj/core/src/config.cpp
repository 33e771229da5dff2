#include "gscnn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace gscnn {

std::set<GateSite> parse_gates(const std::string& text) {
  std::set<GateSite> out;
  if (text.empty() || text == "none") return out;
  if (text == "all")
    return {GateSite::k45, GateSite::k56, GateSite::k67};
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.insert(parse_gate_site(item));
  }
  return out;
}

std::string gates_to_string(const std::set<GateSite>& gates) {
  if (gates.empty()) return "none";
  std::string out;
  for (GateSite s : gates) {
    if (!out.empty()) out += ',';
    out += gate_site_name(s);
  }
  return out;
}

NetworkConfig RunConfig::network_config() const {
  NetworkConfig nc;
  nc.gate_placements = parse_gates(gates);
  nc.include_final_fc = include_final_fc;
  nc.normalize_embeddings = normalize_embeddings;
  nc.mg_stop_gradient = mg_stop_gradient;
  nc.gate_p_init = p_init;
  nc.validate();
  return nc;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.margin = margin;
  tc.lr = lr;
  tc.lr_decay = lr_decay;
  tc.rmsprop_decay = rmsprop_decay;
  tc.rmsprop_eps = rmsprop_eps;
  tc.batch_size = batch_size;
  tc.epochs = epochs;
  tc.negatives_per_positive = negatives_per_positive;
  tc.augment = augment;
  tc.val_fraction = val_fraction;
  tc.early_stop_min_delta = early_stop_min_delta;
  tc.early_stop_patience = early_stop_patience;
  tc.max_iters = max_iters;
  tc.validate();
  return tc;
}

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw std::invalid_argument("config key '" + key + "': bad boolean value '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': bad number '" + value + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': bad integer '" + value + "'");
  }
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  std::size_t e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_kv(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "manifest") c.manifest = value;
  else if (key == "data_root") c.data_root = value;
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "gates" || key == "gate_placements") c.gates = value;
  else if (key == "include_final_fc") c.include_final_fc = parse_bool(key, value);
  else if (key == "normalize_embeddings") c.normalize_embeddings = parse_bool(key, value);
  else if (key == "mg_stop_gradient") c.mg_stop_gradient = parse_bool(key, value);
  else if (key == "p_init") c.p_init = parse_double(key, value);
  else if (key == "margin") c.margin = parse_double(key, value);
  else if (key == "lr") c.lr = parse_double(key, value);
  else if (key == "lr_decay") c.lr_decay = parse_double(key, value);
  else if (key == "rmsprop_decay") c.rmsprop_decay = parse_double(key, value);
  else if (key == "rmsprop_eps") c.rmsprop_eps = parse_double(key, value);
  else if (key == "batch_size") c.batch_size = parse_int(key, value);
  else if (key == "epochs") c.epochs = parse_int(key, value);
  else if (key == "negatives_per_positive") c.negatives_per_positive = parse_int(key, value);
  else if (key == "augment") c.augment = parse_bool(key, value);
  else if (key == "val_fraction") c.val_fraction = parse_double(key, value);
  else if (key == "early_stop_min_delta") c.early_stop_min_delta = parse_double(key, value);
  else if (key == "early_stop_patience") c.early_stop_patience = parse_int(key, value);
  else if (key == "max_iters") c.max_iters = parse_int(key, value);
  else if (key == "precision") c.precision = value;
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "protocol") c.protocol = value;
  else if (key == "workers") c.workers = parse_int(key, value);
  else
    throw std::invalid_argument("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    try {
      apply_config_kv(c, key, value);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string resolve_data_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("GSCNN_DATA_ROOT")) return env;
  return "";
}

}  // namespace gscnn
