#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

namespace gscnn {

// Append-style JSONL training log: one object per iteration and one per
// epoch validation pass.
class MetricsLogger {
 public:
  explicit MetricsLogger(const std::string& path);

  void iteration(std::int64_t iter, int epoch, double lr, double loss);
  void epoch_val(int epoch, double val_rank1, double val_map);

 private:
  std::ofstream os_;
  std::string path_;
};

}  // namespace gscnn
