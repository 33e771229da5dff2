#include "gscnn/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialized containers assume a little-endian host");

namespace gscnn {

namespace {

using nlohmann::json;

constexpr char kTensorMagic[4] = {'G', 'S', 'C', 'N'};
constexpr char kCheckpointMagic[8] = {'G', 'S', 'C', 'N', 'C', 'K', 'P', 'T'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const char* what) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error(std::string("truncated stream while reading ") + what);
  return v;
}

json config_to_json(const NetworkConfig& c) {
  json gates = json::array();
  for (GateSite s : c.gate_placements) gates.push_back(gate_site_name(s));
  return json{{"input_h", c.input_h},
              {"input_w", c.input_w},
              {"input_c", c.input_c},
              {"gate_placements", gates},
              {"include_final_fc", c.include_final_fc},
              {"normalize_embeddings", c.normalize_embeddings},
              {"mg_stop_gradient", c.mg_stop_gradient},
              {"gate_p_init", c.gate_p_init}};
}

NetworkConfig config_from_json(const json& j) {
  NetworkConfig c;
  c.input_h = j.at("input_h").get<index_t>();
  c.input_w = j.at("input_w").get<index_t>();
  c.input_c = j.at("input_c").get<index_t>();
  for (const auto& g : j.at("gate_placements"))
    c.gate_placements.insert(parse_gate_site(g.get<std::string>()));
  c.include_final_fc = j.at("include_final_fc").get<bool>();
  c.normalize_embeddings = j.at("normalize_embeddings").get<bool>();
  c.mg_stop_gradient = j.at("mg_stop_gradient").get<bool>();
  c.gate_p_init = j.at("gate_p_init").get<double>();
  return c;
}

}  // namespace

void write_raw_tensor(std::ostream& os, const RawTensor& t) {
  if (t.shape.size() != static_cast<index_t>(t.values.size()))
    throw std::invalid_argument("write_raw_tensor: shape " + t.shape.str() + " holds " +
                                std::to_string(t.shape.size()) + " values, got " +
                                std::to_string(t.values.size()));
  os.write(kTensorMagic, 4);
  put<std::uint32_t>(os, kTensorFormatVersion);
  put<std::uint32_t>(os, t.dtype);
  put<std::uint64_t>(os, static_cast<std::uint64_t>(t.shape.n));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(t.shape.h));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(t.shape.w));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(t.shape.c));
  if (t.dtype == kDtypeF32) {
    std::vector<float> narrow(t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i)
      narrow[i] = static_cast<float>(t.values[i]);
    os.write(reinterpret_cast<const char*>(narrow.data()),
             static_cast<std::streamsize>(narrow.size() * sizeof(float)));
  } else if (t.dtype == kDtypeF64) {
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  } else {
    throw std::invalid_argument("write_raw_tensor: unknown dtype tag " +
                                std::to_string(t.dtype));
  }
  if (!os) throw std::runtime_error("write_raw_tensor: stream write failed");
}

RawTensor read_raw_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw std::runtime_error("read_raw_tensor: bad magic (not a GSCN tensor)");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kTensorFormatVersion)
    throw std::runtime_error("read_raw_tensor: unsupported format version " +
                             std::to_string(version));
  RawTensor t;
  t.dtype = get<std::uint32_t>(is, "dtype");
  if (t.dtype != kDtypeF32 && t.dtype != kDtypeF64)
    throw std::runtime_error("read_raw_tensor: unknown dtype tag " + std::to_string(t.dtype));
  t.shape.n = static_cast<index_t>(get<std::uint64_t>(is, "dim n"));
  t.shape.h = static_cast<index_t>(get<std::uint64_t>(is, "dim h"));
  t.shape.w = static_cast<index_t>(get<std::uint64_t>(is, "dim w"));
  t.shape.c = static_cast<index_t>(get<std::uint64_t>(is, "dim c"));
  if (t.shape.n < 0 || t.shape.h < 0 || t.shape.w < 0 || t.shape.c < 0)
    throw std::runtime_error("read_raw_tensor: negative dimension");
  const std::size_t count = static_cast<std::size_t>(t.shape.size());
  t.values.resize(count);
  if (t.dtype == kDtypeF32) {
    std::vector<float> narrow(count);
    is.read(reinterpret_cast<char*>(narrow.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!is) throw std::runtime_error("read_raw_tensor: truncated f32 payload");
    for (std::size_t i = 0; i < count; ++i) t.values[i] = static_cast<double>(narrow[i]);
  } else {
    is.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw std::runtime_error("read_raw_tensor: truncated f64 payload");
  }
  return t;
}

void save_raw_tensor(const std::string& path, const RawTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_raw_tensor(os, t);
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path);
}

RawTensor load_raw_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return read_raw_tensor(is);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::string checkpoint_header_json(const CheckpointInfo& info) {
  json tensors = json::array();
  for (const auto& [name, role] : info.tensors)
    tensors.push_back(json{{"name", name}, {"role", role}});
  const json header{{"format", "gscnn-checkpoint"},
                    {"version", kCheckpointFormatVersion},
                    {"precision", info.dtype == kDtypeF64 ? "f64" : "f32"},
                    {"epoch", info.epoch},
                    {"network", config_to_json(info.config)},
                    {"tensors", tensors}};
  return header.dump();
}

CheckpointInfo parse_checkpoint_header(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "gscnn-checkpoint")
    throw std::runtime_error("checkpoint header has wrong format tag");
  const auto version = j.at("version").get<std::uint32_t>();
  if (version != kCheckpointFormatVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  CheckpointInfo info;
  info.dtype = j.at("precision").get<std::string>() == "f64" ? kDtypeF64 : kDtypeF32;
  info.epoch = j.at("epoch").get<int>();
  info.config = config_from_json(j.at("network"));
  for (const auto& t : j.at("tensors"))
    info.tensors.emplace_back(t.at("name").get<std::string>(), t.at("role").get<std::string>());
  return info;
}

void write_checkpoint_raw(const std::string& path, const std::string& header,
                          const std::vector<RawTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  put<std::uint32_t>(os, kCheckpointFormatVersion);
  put<std::uint64_t>(os, static_cast<std::uint64_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const RawTensor& t : tensors) write_raw_tensor(os, t);
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path);
}

std::pair<std::string, std::vector<RawTensor>> read_checkpoint_raw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint archive");
  const auto version = get<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointFormatVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const auto header_len = get<std::uint64_t>(is, "header length");
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error(path + ": truncated header");

  CheckpointInfo info = parse_checkpoint_header(header);
  std::vector<RawTensor> tensors;
  tensors.reserve(info.tensors.size());
  for (std::size_t i = 0; i < info.tensors.size(); ++i) {
    try {
      tensors.push_back(read_raw_tensor(is));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": tensor '" + info.tensors[i].first + "': " + e.what());
    }
  }
  return {std::move(header), std::move(tensors)};
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint archive");
  const auto version = get<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointFormatVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const auto header_len = get<std::uint64_t>(is, "header length");
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error(path + ": truncated header");
  return parse_checkpoint_header(header);
}

}  // namespace gscnn
