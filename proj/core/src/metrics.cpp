#include "gscnn/metrics.hpp"

#include "json.hpp"

namespace gscnn {

MetricsLogger::MetricsLogger(const std::string& path) : os_(path), path_(path) {
  if (!os_) throw std::runtime_error("cannot open metrics log " + path);
}

void MetricsLogger::iteration(std::int64_t iter, int epoch, double lr, double loss) {
  const nlohmann::json j{{"iter", iter}, {"epoch", epoch}, {"lr", lr}, {"loss", loss}};
  os_ << j.dump() << '\n';
  os_.flush();
  if (!os_) throw std::runtime_error("failed writing metrics log " + path_);
}

void MetricsLogger::epoch_val(int epoch, double val_rank1, double val_map) {
  const nlohmann::json j{{"epoch", epoch}, {"val_rank1", val_rank1}, {"val_map", val_map}};
  os_ << j.dump() << '\n';
  os_.flush();
  if (!os_) throw std::runtime_error("failed writing metrics log " + path_);
}

}  // namespace gscnn
