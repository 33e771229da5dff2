#pragma once

#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gscnn/data.hpp"
#include "gscnn/network.hpp"
#include "gscnn/serialize.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

enum class Protocol { kSQ, kMQ };

Protocol parse_protocol(const std::string& text);

struct DistanceMatrix {
  index_t rows = 0, cols = 0;
  std::vector<double> d;  // row-major
  std::vector<int> query_id, query_cam, gallery_id, gallery_cam;

  double& at(index_t r, index_t c) { return d[static_cast<std::size_t>(r * cols + c)]; }
  double at(index_t r, index_t c) const { return d[static_cast<std::size_t>(r * cols + c)]; }
  void validate() const;
};

struct RankingResult {
  std::vector<double> cmc;  // index k = rank k+1
  double map = 0.0;
  std::vector<double> per_query_ap;
  index_t n_queries = 0;
  index_t n_excluded = 0;

  double rank_k(index_t k) const {
    if (cmc.empty() || k < 1) return 0.0;
    return cmc[static_cast<std::size_t>(std::min(k, static_cast<index_t>(cmc.size())) - 1)];
  }
};

// CMC curve and mAP under the re-id protocol: same-camera-same-identity
// gallery entries are excluded per query, ties broken by gallery index, and
// queries without any cross-camera match are dropped (counted in
// n_excluded). MQ fuses all query rows of one (identity, camera) group by
// min-max rescaling each row to [0,1] and averaging; single-row groups skip
// the rescale so they reduce to SQ.
RankingResult cmc_map(const DistanceMatrix& dm, Protocol protocol);

std::string results_json(const RankingResult& r);
void save_results_json(const std::string& path, const RankingResult& r);
void save_distance_csv(const std::string& path, const DistanceMatrix& dm);
void save_distance_tensor(const std::string& path, const DistanceMatrix& dm);

// Numeric CSV reader (comments and blank lines skipped) for round-trip
// checks of the exported grids.
std::vector<std::vector<double>> read_csv(const std::string& path);

// Splits a flat entry pool for ranking: smallest camera id becomes the query
// side, everything else gallery.
void derive_query_gallery(const Manifest& m, const std::vector<index_t>& pool,
                          std::vector<index_t>* query_idx, std::vector<index_t>* gallery_idx);

template <typename T>
void subtract_image(Tensor<T>& img, const Tensor<T>& mean) {
  detail::check_same_shape("subtract_image", img, mean);
  T* v = img.data();
  const T* m = mean.data();
  for (index_t i = 0; i < img.size(); ++i) v[i] -= m[i];
}

// Train-split mean, or a zero image when the manifest has no train entries
// (external galleries evaluated with a checkpoint trained elsewhere).
template <typename T>
Tensor<T> mean_image_or_zero(const Manifest& m, index_t h = 128, index_t w = 64) {
  if (m.split_indices(Split::kTrain).empty()) return Tensor<T>(Shape{1, h, w, 3});
  return compute_mean_image<T>(m, h, w);
}

// Pairwise query x gallery distances in eval mode. Per-image features up to
// the first gate are computed once per distinct image; the baseline caches
// whole embeddings and never runs pair forwards. With workers > 1 the query
// rows are split across threads after the sequential cache fill; every cell
// is computed independently, so the result is bitwise identical to the
// single-worker run.
template <typename T>
DistanceMatrix compute_distance_matrix(NetworkParams<T>& net, const Manifest& m,
                                       const std::vector<index_t>& query_idx,
                                       const std::vector<index_t>& gallery_idx,
                                       const Tensor<T>& mean, int workers = 1) {
  if (query_idx.empty() || gallery_idx.empty())
    throw std::invalid_argument("compute_distance_matrix: empty query or gallery split");
  if (workers < 1) throw std::invalid_argument("compute_distance_matrix: workers must be >= 1");
  NoGradGuard ng;

  std::map<std::string, Tensor<T>> cache;
  auto features = [&](index_t ei) -> const Tensor<T>& {
    const ManifestEntry& e = m.entries[static_cast<std::size_t>(ei)];
    const std::string path = m.resolve(e);
    auto it = cache.find(path);
    if (it == cache.end()) {
      Tensor<T> img = load_image<T>(path, net.config.input_h, net.config.input_w);
      subtract_image(img, mean);
      it = cache.emplace(path, image_features(img, net)).first;
    }
    return it->second;
  };

  DistanceMatrix dm;
  dm.rows = static_cast<index_t>(query_idx.size());
  dm.cols = static_cast<index_t>(gallery_idx.size());
  dm.d.resize(static_cast<std::size_t>(dm.rows * dm.cols));
  for (index_t q : query_idx) {
    dm.query_id.push_back(m.entries[static_cast<std::size_t>(q)].identity_id);
    dm.query_cam.push_back(m.entries[static_cast<std::size_t>(q)].camera_id);
  }
  for (index_t g : gallery_idx) {
    dm.gallery_id.push_back(m.entries[static_cast<std::size_t>(g)].identity_id);
    dm.gallery_cam.push_back(m.entries[static_cast<std::size_t>(g)].camera_id);
  }

  std::vector<const Tensor<T>*> qf, gf;
  for (index_t q : query_idx) qf.push_back(&features(q));
  for (index_t g : gallery_idx) gf.push_back(&features(g));

  const bool pairwise = net.config.gated();
  auto fill_rows = [&](index_t r0, index_t r1) {
    NoGradGuard worker_ng;  // the guard is thread-local
    for (index_t r = r0; r < r1; ++r) {
      const Tensor<T>& fq = *qf[static_cast<std::size_t>(r)];
      for (index_t c = 0; c < dm.cols; ++c) {
        const Tensor<T>& fg = *gf[static_cast<std::size_t>(c)];
        double dist;
        if (pairwise) {
          auto [e1, e2] = pair_tail(fq, fg, net);
          dist = static_cast<double>(pair_distances(e1, e2)[0]);
        } else {
          dist = static_cast<double>(pair_distances(fq, fg)[0]);
        }
        dm.at(r, c) = dist;
      }
    }
  };

  const index_t n_workers = std::min<index_t>(workers, dm.rows);
  if (n_workers <= 1) {
    fill_rows(0, dm.rows);
    return dm;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_workers));
  const index_t chunk = (dm.rows + n_workers - 1) / n_workers;
  for (index_t t = 0; t < n_workers; ++t) {
    const index_t r0 = t * chunk;
    const index_t r1 = std::min(dm.rows, r0 + chunk);
    pool.emplace_back([&, t, r0, r1]() {
      try {
        fill_rows(r0, r1);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return dm;
}

// Loads each checkpoint and averages the per-pair distances ("aggregate the
// matching scores over all epochs by averaging"). All checkpoints must share
// one network config.
template <typename T>
DistanceMatrix compute_distance_matrix(const std::vector<std::string>& checkpoint_paths,
                                       const Manifest& m,
                                       const std::vector<index_t>& query_idx,
                                       const std::vector<index_t>& gallery_idx,
                                       int workers = 1) {
  if (checkpoint_paths.empty())
    throw std::invalid_argument("compute_distance_matrix: empty checkpoint list");
  Tensor<T> mean;
  DistanceMatrix acc;
  std::string config_header;
  for (std::size_t i = 0; i < checkpoint_paths.size(); ++i) {
    CheckpointInfo info;
    NetworkParams<T> net = load_checkpoint<T>(checkpoint_paths[i], &info);
    const std::string header = checkpoint_header_json(CheckpointInfo{info.config, 0, 0, {}});
    if (i == 0) {
      config_header = header;
      mean = mean_image_or_zero<T>(m, net.config.input_h, net.config.input_w);
      acc = compute_distance_matrix(net, m, query_idx, gallery_idx, mean, workers);
    } else {
      if (header != config_header)
        throw std::runtime_error(checkpoint_paths[i] +
                                 ": network config differs from first checkpoint");
      const DistanceMatrix dm =
          compute_distance_matrix(net, m, query_idx, gallery_idx, mean, workers);
      for (std::size_t j = 0; j < acc.d.size(); ++j) acc.d[j] += dm.d[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(checkpoint_paths.size());
  for (double& v : acc.d) v *= inv;
  return acc;
}

// Eval-mode forward of one pair collecting the gate mask at every placement.
template <typename T>
std::map<GateSite, Tensor<T>> forward_pair_gate_masks(const Tensor<T>& img1,
                                                      const Tensor<T>& img2,
                                                      NetworkParams<T>& params) {
  if (!params.config.gated())
    throw std::invalid_argument("forward_pair_gate_masks: model has no gates");
  NoGradGuard ng;
  detail::check_input(img1, params.config, "forward_pair_gate_masks");
  detail::check_input(img2, params.config, "forward_pair_gate_masks");
  if (img1.shape().n != 1 || img2.shape().n != 1)
    throw std::invalid_argument("forward_pair_gate_masks: expects single-image pair");

  std::map<GateSite, Tensor<T>> masks;
  Tensor<T> x = concat_batch(img1, img2);
  for (index_t li = 1; li <= params.config.n_blocks(); ++li) {
    x = detail::run_block(x, params, li, Mode::kEval, false);
    if (li >= 4 && li <= 6) {
      const GateSite site = static_cast<GateSite>(li);
      auto it = params.gates.find(site);
      if (it == params.gates.end()) continue;
      Tensor<T> x1 = slice_batch(x, 0, 1);
      Tensor<T> x2 = slice_batch(x, 1, 1);
      MatchingGateOutput<T> out =
          matching_gate_forward(x1, x2, it->second, params.config.mg_stop_gradient);
      masks.emplace(site, out.mask.g);
      x = concat_batch(out.a1, out.a2);
    }
  }
  return masks;
}

namespace detail {
void write_csv_grid(const std::string& path, const std::vector<std::vector<double>>& rows);
}  // namespace detail

// Writes, per gate, the (rows x channels) mask grid and its channel-averaged
// rows x 1 profile: out_dir/gate45.csv, out_dir/gate45_profile.csv, ...
template <typename T>
std::vector<std::string> dump_gate_masks(NetworkParams<T>& params, const Tensor<T>& img1,
                                         const Tensor<T>& img2, const std::string& out_dir) {
  const auto masks = forward_pair_gate_masks(img1, img2, params);
  std::vector<std::string> written;
  for (const auto& [site, g] : masks) {
    const Shape& s = g.shape();  // (1, rows, 1, channels)
    std::vector<std::vector<double>> grid(static_cast<std::size_t>(s.h));
    std::vector<std::vector<double>> profile(static_cast<std::size_t>(s.h));
    for (index_t r = 0; r < s.h; ++r) {
      double row_sum = 0.0;
      auto& row = grid[static_cast<std::size_t>(r)];
      row.resize(static_cast<std::size_t>(s.c));
      for (index_t c = 0; c < s.c; ++c) {
        const double v = static_cast<double>(g.at(0, r, 0, c));
        row[static_cast<std::size_t>(c)] = v;
        row_sum += v;
      }
      profile[static_cast<std::size_t>(r)] = {row_sum / static_cast<double>(s.c)};
    }
    const std::string base = out_dir + "/" + gate_site_key(site);
    detail::write_csv_grid(base + ".csv", grid);
    detail::write_csv_grid(base + "_profile.csv", profile);
    written.push_back(base + ".csv");
    written.push_back(base + "_profile.csv");
  }
  return written;
}

}  // namespace gscnn
