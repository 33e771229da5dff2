#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gscnn/layers.hpp"
#include "gscnn/matching_gate.hpp"
#include "gscnn/ops.hpp"
#include "gscnn/rng.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

// A gate site names the boundary after the 1-based block it follows.
enum class GateSite : int { k45 = 4, k56 = 5, k67 = 6 };

inline std::string gate_site_name(GateSite s) {
  switch (s) {
    case GateSite::k45: return "4-5";
    case GateSite::k56: return "5-6";
    case GateSite::k67: return "6-7";
  }
  throw std::logic_error("gate_site_name: bad site");
}

// Key used for parameter names and config files: "gate45" etc.
inline std::string gate_site_key(GateSite s) {
  switch (s) {
    case GateSite::k45: return "gate45";
    case GateSite::k56: return "gate56";
    case GateSite::k67: return "gate67";
  }
  throw std::logic_error("gate_site_key: bad site");
}

inline GateSite parse_gate_site(const std::string& text) {
  if (text == "4-5" || text == "45" || text == "gate45") return GateSite::k45;
  if (text == "5-6" || text == "56" || text == "gate56") return GateSite::k56;
  if (text == "6-7" || text == "67" || text == "gate67") return GateSite::k67;
  throw std::invalid_argument("unknown gate site '" + text + "' (expected 4-5, 5-6 or 6-7)");
}

struct NetworkConfig {
  index_t input_h = 128;
  index_t input_w = 64;
  index_t input_c = 3;
  std::set<GateSite> gate_placements;
  bool include_final_fc = true;
  bool normalize_embeddings = false;
  // Blocks the gradient through the gate mask so boosting acts as a fixed
  // reweighting of the current pair; default lets gradients flow everywhere.
  bool mg_stop_gradient = false;
  double gate_p_init = 4.0;

  bool gated() const { return !gate_placements.empty(); }
  index_t n_blocks() const { return include_final_fc ? 7 : 6; }

  void validate() const {
    if (input_h <= 0 || input_w <= 0 || input_c <= 0)
      throw std::invalid_argument("NetworkConfig: nonpositive input shape");
    if (!include_final_fc && gate_placements.count(GateSite::k67))
      throw std::invalid_argument(
          "NetworkConfig: gate 6-7 requires the final embedding layer");
    if (gate_p_init <= kGatePFloor)
      throw std::invalid_argument("NetworkConfig: gate_p_init must exceed the p floor");
  }

  static NetworkConfig baseline() { return NetworkConfig{}; }

  static NetworkConfig gated_full() {
    NetworkConfig c;
    c.gate_placements = {GateSite::k45, GateSite::k56, GateSite::k67};
    return c;
  }

  // Variant with gates at 4-5 and 5-6 only and the 512-d layer-6 output as
  // the embedding.
  static NetworkConfig gated_short() {
    NetworkConfig c;
    c.gate_placements = {GateSite::k45, GateSite::k56};
    c.include_final_fc = false;
    return c;
  }
};

// Backbone description; one row per block, in order.
struct BackboneRow {
  index_t kh, kw, cout, pad_h, pad_w;
  bool pool;
};

inline constexpr BackboneRow kBackbone[7] = {
    {5, 5, 32, 2, 2, true},    // 1: 128x64x3 -> 128x64x32 -> pool 64x32x32
    {3, 3, 50, 1, 1, true},    // 2: -> 64x32x50 -> pool 32x16x50
    {3, 3, 32, 1, 1, true},    // 3: -> 32x16x32 -> pool 16x8x32
    {1, 4, 32, 0, 0, false},   // 4: -> 16x5x32
    {1, 3, 32, 0, 0, false},   // 5: -> 16x3x32
    {1, 3, 32, 0, 0, false},   // 6: -> 16x1x32
    {16, 1, 150, 0, 0, false}  // 7: -> 1x1x150 (embedding)
};

// Output shape (n = 1) after each block, pooling included. Throws if the
// input shape does not survive the backbone (negative conv output or an odd
// extent hitting a 2x2 pool).
inline std::vector<Shape> backbone_shapes(const NetworkConfig& config) {
  config.validate();
  std::vector<Shape> out;
  index_t h = config.input_h, w = config.input_w, c = config.input_c;
  for (index_t i = 0; i < config.n_blocks(); ++i) {
    const BackboneRow& row = kBackbone[i];
    h = h + 2 * row.pad_h - row.kh + 1;
    w = w + 2 * row.pad_w - row.kw + 1;
    c = row.cout;
    if (h <= 0 || w <= 0)
      throw std::invalid_argument("backbone_shapes: block " + std::to_string(i + 1) +
                                  " output collapses to " + std::to_string(h) + "x" +
                                  std::to_string(w));
    if (row.pool) {
      if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("backbone_shapes: block " + std::to_string(i + 1) +
                                    " feeds odd extent into 2x2 pool");
      h /= 2;
      w /= 2;
    }
    out.push_back(Shape{1, h, w, c});
  }
  return out;
}

inline index_t embedding_dim(const NetworkConfig& config) {
  const Shape s = backbone_shapes(config).back();
  return s.h * s.w * s.c;
}

template <typename T>
struct NetworkParams {
  NetworkConfig config;
  std::vector<ConvBlockParams<T>> blocks;
  std::map<GateSite, MatchingGateParams<T>> gates;

  std::vector<std::pair<std::string, Tensor<T>*>> named_trainable() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    static const char* block_names[] = {"filters", "bias", "bn_gamma", "bn_beta",
                                        "prelu_slope"};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto ptrs = blocks[i].trainable();
      for (std::size_t j = 0; j < ptrs.size(); ++j)
        out.emplace_back("conv" + std::to_string(i + 1) + "." + block_names[j], ptrs[j]);
    }
    static const char* gate_names[] = {"w", "b", "slope", "p"};
    for (auto& [site, g] : gates) {
      auto ptrs = g.trainable();
      for (std::size_t j = 0; j < ptrs.size(); ++j)
        out.emplace_back(gate_site_key(site) + "." + gate_names[j], ptrs[j]);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      out.emplace_back("conv" + std::to_string(i + 1) + ".bn_running_mean",
                       &blocks[i].bn_running_mean);
      out.emplace_back("conv" + std::to_string(i + 1) + ".bn_running_var",
                       &blocks[i].bn_running_var);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_all() {
    auto out = named_trainable();
    auto bufs = named_buffers();
    out.insert(out.end(), bufs.begin(), bufs.end());
    return out;
  }

  index_t trainable_count() {
    index_t n = 0;
    for (auto& [name, t] : named_trainable()) n += t->size();
    return n;
  }

  index_t buffer_count() {
    index_t n = 0;
    for (auto& [name, t] : named_buffers()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_trainable()) t->zero_grad();
  }

  // Post-step projection back into the valid parameter region: the Gaussian
  // widths must stay strictly positive.
  void apply_constraints() {
    for (auto& [site, g] : gates) {
      T* pv = g.p.data();
      for (index_t i = 0; i < g.p.size(); ++i)
        pv[i] = std::max(pv[i], static_cast<T>(kGatePFloor));
    }
  }
};

template <typename T>
NetworkParams<T> init_network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  const std::vector<Shape> shapes = backbone_shapes(config);
  NetworkParams<T> net;
  net.config = config;
  Rng master(seed);

  index_t cin = config.input_c;
  for (index_t i = 0; i < config.n_blocks(); ++i) {
    const BackboneRow& row = kBackbone[i];
    Rng sub = master.stream("conv", static_cast<std::uint64_t>(i + 1));
    net.blocks.emplace_back(row.kh, row.kw, cin, row.cout, row.pad_h, row.pad_w, sub);
    cin = row.cout;
  }
  for (GateSite site : config.gate_placements) {
    const Shape& at = shapes[static_cast<std::size_t>(static_cast<int>(site)) - 1];
    Rng sub = master.stream(gate_site_key(site));
    net.gates.emplace(site,
                      MatchingGateParams<T>(at.w, at.c, static_cast<T>(config.gate_p_init), sub));
  }
  return net;
}

namespace detail {

template <typename T>
Tensor<T> run_block(const Tensor<T>& x, NetworkParams<T>& params, index_t li, Mode mode,
                    bool update_running) {
  Tensor<T> y = convblock_forward(x, params.blocks[static_cast<std::size_t>(li - 1)], mode,
                                  update_running);
  if (kBackbone[li - 1].pool) y = maxpool2x2(y);
  return y;
}

// If a gate sits on the boundary after 1-based block `li`, split the stacked
// batch into its two streams, gate them against each other and restack.
template <typename T>
Tensor<T> apply_gate_if_any(const Tensor<T>& x, NetworkParams<T>& params, index_t li,
                            index_t n_pair) {
  if (li < 4 || li > 6) return x;
  const GateSite site = static_cast<GateSite>(li);
  auto it = params.gates.find(site);
  if (it == params.gates.end()) return x;
  Tensor<T> x1 = slice_batch(x, 0, n_pair);
  Tensor<T> x2 = slice_batch(x, n_pair, n_pair);
  MatchingGateOutput<T> out =
      matching_gate_forward(x1, x2, it->second, params.config.mg_stop_gradient);
  return concat_batch(out.a1, out.a2);
}

// Flatten the final map to (n,1,1,dim) and optionally L2-normalize each
// embedding.
template <typename T>
Tensor<T> finish_embedding(const Tensor<T>& x, const NetworkConfig& config) {
  const Shape& s = x.shape();
  Tensor<T> emb = reshape(x, Shape{s.n, 1, 1, s.h * s.w * s.c});
  if (config.normalize_embeddings) emb = l2norm_channels(emb);
  return emb;
}

template <typename T>
void check_input(const Tensor<T>& img, const NetworkConfig& config, const char* what) {
  const Shape& s = img.shape();
  if (s.h != config.input_h || s.w != config.input_w || s.c != config.input_c ||
      s.n < 1)
    throw std::invalid_argument(std::string(what) + ": input shape " + s.str() +
                                " does not match configured " +
                                std::to_string(config.input_h) + "x" +
                                std::to_string(config.input_w) + "x" +
                                std::to_string(config.input_c));
}

}  // namespace detail

// Weight-shared forward of an image pair. Both batches are stacked into one
// 2n batch so train-mode batch norm sees the pooled statistics of both
// streams; gates exchange information between the two halves at their
// configured boundaries.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> forward_pair(const Tensor<T>& img1, const Tensor<T>& img2,
                                             NetworkParams<T>& params, Mode mode,
                                             bool update_running = true) {
  detail::check_input(img1, params.config, "forward_pair");
  detail::check_input(img2, params.config, "forward_pair");
  if (img1.shape().n != img2.shape().n)
    throw std::invalid_argument("forward_pair: stream batch sizes differ");
  const index_t n = img1.shape().n;

  Tensor<T> x = concat_batch(img1, img2);
  for (index_t li = 1; li <= params.config.n_blocks(); ++li) {
    x = detail::run_block(x, params, li, mode, update_running);
    x = detail::apply_gate_if_any(x, params, li, n);
  }
  Tensor<T> emb = detail::finish_embedding(x, params.config);
  return {slice_batch(emb, 0, n), slice_batch(emb, n, n)};
}

template <typename T>
T pair_distance(const std::vector<T>& e1, const std::vector<T>& e2) {
  if (e1.size() != e2.size())
    throw std::invalid_argument("pair_distance: dimension mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < e1.size(); ++i) {
    const T d = e1[i] - e2[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Per-image Euclidean distances between two embedding batches of shape
// (n,1,1,dim).
template <typename T>
std::vector<T> pair_distances(const Tensor<T>& e1, const Tensor<T>& e2) {
  detail::check_same_shape("pair_distances", e1, e2);
  const Shape& s = e1.shape();
  const index_t dim = s.h * s.w * s.c;
  std::vector<T> out(static_cast<std::size_t>(s.n));
  for (index_t i = 0; i < s.n; ++i) {
    T acc = T(0);
    const T* a = e1.data() + i * dim;
    const T* b = e2.data() + i * dim;
    for (index_t j = 0; j < dim; ++j) {
      const T d = a[j] - b[j];
      acc += d * d;
    }
    out[static_cast<std::size_t>(i)] = std::sqrt(acc);
  }
  return out;
}

// First 1-based block whose output cannot be cached per image: for the
// baseline the whole net is per-image (returns n_blocks), for a gated net
// everything up to the first gate boundary is pair-independent.
inline index_t cache_boundary(const NetworkConfig& config) {
  if (config.gate_placements.empty()) return config.n_blocks();
  return static_cast<index_t>(static_cast<int>(*config.gate_placements.begin()));
}

// Eval-mode per-image features through blocks 1..cache_boundary. For the
// baseline this is the finished embedding. Gradients are never recorded.
template <typename T>
Tensor<T> image_features(const Tensor<T>& img, NetworkParams<T>& params) {
  NoGradGuard ng;
  detail::check_input(img, params.config, "image_features");
  const index_t stop = cache_boundary(params.config);
  Tensor<T> x = img;
  for (index_t li = 1; li <= stop; ++li)
    x = detail::run_block(x, params, li, Mode::kEval, false);
  if (stop == params.config.n_blocks()) x = detail::finish_embedding(x, params.config);
  return x;
}

// Eval-mode completion from cached features: the gate at the cache boundary,
// then the remaining blocks. Bit-identical to a full forward_pair in eval
// mode because eval-mode blocks act on each image independently.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pair_tail(const Tensor<T>& f1, const Tensor<T>& f2,
                                          NetworkParams<T>& params) {
  NoGradGuard ng;
  detail::check_same_shape("pair_tail", f1, f2);
  const index_t n = f1.shape().n;
  const index_t boundary = cache_boundary(params.config);
  if (boundary == params.config.n_blocks()) return {f1, f2};  // already embeddings
  Tensor<T> x = concat_batch(f1, f2);
  x = detail::apply_gate_if_any(x, params, boundary, n);
  for (index_t li = boundary + 1; li <= params.config.n_blocks(); ++li) {
    x = detail::run_block(x, params, li, Mode::kEval, false);
    x = detail::apply_gate_if_any(x, params, li, n);
  }
  Tensor<T> emb = detail::finish_embedding(x, params.config);
  return {slice_batch(emb, 0, n), slice_batch(emb, n, n)};
}

}  // namespace gscnn
