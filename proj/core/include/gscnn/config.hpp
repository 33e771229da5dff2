#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "gscnn/network.hpp"
#include "gscnn/training.hpp"

namespace gscnn {

// "none" | "all" | comma list of boundaries ("4-5,5-6").
std::set<GateSite> parse_gates(const std::string& text);
std::string gates_to_string(const std::set<GateSite>& gates);

// Everything an operator can set. Defaults pin the published constants:
// margin 1, batch 100, lr 0.002 decayed 0.9 per epoch, RMSProp 0.95,
// gate p_init 4, 20 epochs, 5x negative sampling.
struct RunConfig {
  // dataset + outputs
  std::string manifest;
  std::string data_root;  // empty -> $GSCNN_DATA_ROOT -> manifest directory
  std::string out_dir = "out";

  // network topology
  std::string gates = "none";
  bool include_final_fc = true;
  bool normalize_embeddings = false;
  bool mg_stop_gradient = false;
  double p_init = 4.0;

  // loss / optimizer / schedule
  double margin = 1.0;
  double lr = 0.002;
  double lr_decay = 0.9;
  double rmsprop_decay = 0.95;
  double rmsprop_eps = 1e-8;
  std::int64_t batch_size = 100;
  std::int64_t epochs = 20;
  std::int64_t negatives_per_positive = 5;
  bool augment = true;
  double val_fraction = 0.1;
  double early_stop_min_delta = 0.1;
  std::int64_t early_stop_patience = 3;
  std::int64_t max_iters = 0;

  // run behavior
  std::string precision = "f32";  // f32 | f64
  std::uint64_t seed = 1;
  std::string protocol = "sq";
  std::int64_t workers = 1;

  NetworkConfig network_config() const;
  TrainConfig train_config() const;
};

// One "key = value" per line, '#' comments, optional double quotes around
// string values. Unknown keys are an error naming the key.
void apply_config_kv(RunConfig& c, const std::string& key, const std::string& value);
void load_config_file(RunConfig& c, const std::string& path);

// Flag wins, then $GSCNN_DATA_ROOT, then empty (manifest directory).
std::string resolve_data_root(const std::string& flag_value);

}  // namespace gscnn
