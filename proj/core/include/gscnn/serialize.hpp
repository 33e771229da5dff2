#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gscnn/network.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

constexpr std::uint32_t kTensorFormatVersion = 1;
constexpr std::uint32_t kCheckpointFormatVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;
constexpr std::uint32_t kDtypeF64 = 1;

template <typename T>
constexpr std::uint32_t dtype_of();
template <>
constexpr std::uint32_t dtype_of<float>() {
  return kDtypeF32;
}
template <>
constexpr std::uint32_t dtype_of<double>() {
  return kDtypeF64;
}

// Type-erased tensor record. Values are held as double; an f32 payload widens
// losslessly, so save/load round trips are bit-exact in either precision.
struct RawTensor {
  Shape shape{0, 0, 0, 0};
  std::uint32_t dtype = kDtypeF32;
  std::vector<double> values;
};

// Single-tensor container: "GSCN", version u32, dtype u32, four u64 dims,
// raw little-endian values.
void write_raw_tensor(std::ostream& os, const RawTensor& t);
RawTensor read_raw_tensor(std::istream& is);
void save_raw_tensor(const std::string& path, const RawTensor& t);
RawTensor load_raw_tensor(const std::string& path);

template <typename T>
RawTensor to_raw(const Tensor<T>& t) {
  RawTensor raw;
  raw.shape = t.shape();
  raw.dtype = dtype_of<T>();
  raw.values.assign(t.values().begin(), t.values().end());
  return raw;
}

template <typename T>
Tensor<T> from_raw(const RawTensor& raw, bool requires_grad = false) {
  Tensor<T> t(raw.shape, requires_grad);
  T* v = t.data();
  for (std::size_t i = 0; i < raw.values.size(); ++i) v[i] = static_cast<T>(raw.values[i]);
  return t;
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  save_raw_tensor(path, to_raw(t));
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  return from_raw<T>(load_raw_tensor(path));
}

// Checkpoint archive: magic "GSCNCKPT", version u32, u64 header length, JSON
// header, then one tensor record per header entry in order.
struct CheckpointInfo {
  NetworkConfig config;
  std::uint32_t dtype = kDtypeF32;
  int epoch = 0;
  std::vector<std::pair<std::string, std::string>> tensors;  // (name, role)
};

std::string checkpoint_header_json(const CheckpointInfo& info);
CheckpointInfo parse_checkpoint_header(const std::string& json_text);
void write_checkpoint_raw(const std::string& path, const std::string& header,
                          const std::vector<RawTensor>& tensors);
std::pair<std::string, std::vector<RawTensor>> read_checkpoint_raw(const std::string& path);
// Header only; cheap config sniffing without pulling tensor payloads.
CheckpointInfo read_checkpoint_info(const std::string& path);

template <typename T>
void save_checkpoint(const std::string& path, NetworkParams<T>& params, int epoch) {
  CheckpointInfo info;
  info.config = params.config;
  info.dtype = dtype_of<T>();
  info.epoch = epoch;
  std::vector<RawTensor> raws;
  for (auto& [name, t] : params.named_trainable()) {
    info.tensors.emplace_back(name, "trainable");
    raws.push_back(to_raw(*t));
  }
  for (auto& [name, t] : params.named_buffers()) {
    info.tensors.emplace_back(name, "buffer");
    raws.push_back(to_raw(*t));
  }
  write_checkpoint_raw(path, checkpoint_header_json(info), raws);
}

template <typename T>
NetworkParams<T> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr) {
  auto [header, raws] = read_checkpoint_raw(path);
  CheckpointInfo info = parse_checkpoint_header(header);
  if (raws.size() != info.tensors.size())
    throw std::runtime_error(path + ": header lists " + std::to_string(info.tensors.size()) +
                             " tensors but archive holds " + std::to_string(raws.size()));

  NetworkParams<T> net = init_network<T>(info.config, 0);
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& [name, t] : net.named_all()) by_name[name] = t;
  if (by_name.size() != raws.size())
    throw std::runtime_error(path + ": checkpoint/config mismatch: archive has " +
                             std::to_string(raws.size()) + " tensors, network expects " +
                             std::to_string(by_name.size()));

  for (std::size_t i = 0; i < raws.size(); ++i) {
    const std::string& name = info.tensors[i].first;
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error(path + ": unexpected tensor '" + name + "' in checkpoint");
    Tensor<T>* dst = it->second;
    if (!(dst->shape() == raws[i].shape))
      throw std::runtime_error(path + ": tensor '" + name + "' has shape " +
                               raws[i].shape.str() + ", expected " + dst->shape().str());
    T* v = dst->data();
    for (std::size_t j = 0; j < raws[i].values.size(); ++j)
      v[j] = static_cast<T>(raws[i].values[j]);
  }
  if (info_out) *info_out = info;
  return net;
}

}  // namespace gscnn
