#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gscnn/data.hpp"
#include "gscnn/evaluation.hpp"
#include "gscnn/metrics.hpp"
#include "gscnn/network.hpp"
#include "gscnn/rng.hpp"
#include "gscnn/serialize.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

// Label convention throughout: 0 = positive (same identity), 1 = negative.
inline void check_pair_label(int label) {
  if (label != 0 && label != 1)
    throw std::invalid_argument("pair label must be 0 (positive) or 1 (negative), got " +
                                std::to_string(label));
}

// Scalar contrastive loss and its derivative in the distance:
// (1-y)*d^2/2 + y*max(0, margin-d)^2/2.
template <typename T>
std::pair<T, T> contrastive_loss(T d, int label, T margin) {
  check_pair_label(label);
  if (margin <= T(0)) throw std::invalid_argument("contrastive loss margin must be positive");
  if (label == 0) return {d * d / T(2), d};
  const T rest = std::max(T(0), margin - d);
  return {rest * rest / T(2), -rest};
}

// Mean contrastive loss over an embedding batch, differentiable in both
// embedding tensors. The positive branch backpropagates through d^2 directly
// so d = 0 needs no special case; an exactly-coincident negative pair gets a
// zero gradient (no direction to push).
template <typename T>
Tensor<T> contrastive_loss_batch(const Tensor<T>& emb1, const Tensor<T>& emb2,
                                 const std::vector<int>& labels, T margin) {
  detail::check_same_shape("contrastive_loss_batch", emb1, emb2);
  if (margin <= T(0)) throw std::invalid_argument("contrastive loss margin must be positive");
  const Shape& s = emb1.shape();
  const index_t n = s.n;
  const index_t dim = s.h * s.w * s.c;
  if (static_cast<index_t>(labels.size()) != n)
    throw std::invalid_argument("contrastive_loss_batch: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(n));
  for (int label : labels) check_pair_label(label);

  auto dist = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  const T* a = emb1.data();
  const T* b = emb2.data();
  T total = T(0);
  for (index_t i = 0; i < n; ++i) {
    T acc = T(0);
    for (index_t j = 0; j < dim; ++j) {
      const T diff = a[i * dim + j] - b[i * dim + j];
      acc += diff * diff;
    }
    const T d = std::sqrt(acc);
    (*dist)[static_cast<std::size_t>(i)] = d;
    const auto [loss, dl] = contrastive_loss(d, labels[static_cast<std::size_t>(i)], margin);
    total += loss;
  }

  auto backward = [n, dim, labels, margin, dist](detail::Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const T go = self.grad[0] / static_cast<T>(n);
    const T* av = an.value.data();
    const T* bv = bn.value.data();
    T* ga = an.requires_grad ? an.ensure_grad().data() : nullptr;
    T* gb = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
    if (!ga && !gb) return;
    for (index_t i = 0; i < n; ++i) {
      const T d = (*dist)[static_cast<std::size_t>(i)];
      T k;  // dloss/dd divided by d, so grad_a = k * (a - b)
      if (labels[static_cast<std::size_t>(i)] == 0) {
        k = T(1);
      } else {
        if (d >= margin || d <= T(0)) continue;
        k = -(margin - d) / d;
      }
      const T gk = go * k;
      for (index_t j = 0; j < dim; ++j) {
        const T diff = av[i * dim + j] - bv[i * dim + j];
        if (ga) ga[i * dim + j] += gk * diff;
        if (gb) gb[i * dim + j] -= gk * diff;
      }
    }
  };
  Tensor<T> out = detail::make_op_output<T>("contrastive_loss", Shape{1, 1, 1, 1},
                                            {emb1, emb2}, backward);
  out.data()[0] = total / static_cast<T>(n);
  return out;
}

template <typename T>
struct OptimizerState {
  T decay;
  T eps;
  std::vector<std::vector<T>> ms;  // mean-square accumulators, named_trainable() order

  explicit OptimizerState(double decay_in = 0.95, double eps_in = 1e-8)
      : decay(static_cast<T>(decay_in)), eps(static_cast<T>(eps_in)) {}

  void init(NetworkParams<T>& net) {
    ms.clear();
    for (auto& [name, t] : net.named_trainable())
      ms.emplace_back(static_cast<std::size_t>(t->size()), T(0));
  }
};

// s <- decay*s + (1-decay)*g^2 ; theta <- theta - lr*g/(sqrt(s)+eps), then
// the gate p-floor. Parameters without a populated gradient count as g = 0.
template <typename T>
void rmsprop_step(NetworkParams<T>& net, OptimizerState<T>& state, T lr) {
  auto named = net.named_trainable();
  if (state.ms.size() != named.size())
    throw std::invalid_argument("rmsprop_step: optimizer state does not match network");
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor<T>& t = *named[i].second;
    std::vector<T>& s = state.ms[i];
    if (s.size() != static_cast<std::size_t>(t.size()))
      throw std::invalid_argument("rmsprop_step: accumulator size mismatch for " +
                                  named[i].first);
    const T* g = t.has_grad() ? t.grad().data() : nullptr;
    T* v = t.data();
    const T one_minus = T(1) - state.decay;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const T gj = g ? g[j] : T(0);
      s[j] = state.decay * s[j] + one_minus * gj * gj;
      v[j] -= lr * gj / (std::sqrt(s[j]) + state.eps);
    }
  }
  net.apply_constraints();
}

enum class AugKind : std::uint8_t { kNone = 0, kFlip = 1, kTranslate = 2 };

struct PairSample {
  index_t e1 = 0, e2 = 0;  // manifest entry indices
  int label = 0;
  AugKind aug = AugKind::kNone;
  std::int8_t dy1 = 0, dx1 = 0, dy2 = 0, dx2 = 0;
};

// One epoch of pair samples: every cross-camera positive (plus a flipped and
// a translated copy when augmenting), and per subject 5x as many uniformly
// drawn negatives. Shuffled; deterministic in the passed stream.
inline std::vector<PairSample> build_epoch_pairs(const Manifest& m,
                                                 const std::vector<index_t>& pool, Rng& rng,
                                                 bool augment, index_t neg_ratio,
                                                 index_t img_h = 128, index_t img_w = 64,
                                                 index_t* skipped_identities = nullptr) {
  std::map<int, std::vector<index_t>> by_id;
  for (index_t i : pool) by_id[m.entries[static_cast<std::size_t>(i)].identity_id].push_back(i);
  if (by_id.size() < 2)
    throw std::invalid_argument("build_epoch_pairs: need at least 2 identities, got " +
                                std::to_string(by_id.size()));

  const auto max_dy = static_cast<std::int64_t>(0.05 * static_cast<double>(img_h));
  const auto max_dx = static_cast<std::int64_t>(0.05 * static_cast<double>(img_w));
  index_t skipped = 0;
  std::vector<PairSample> samples;
  std::vector<std::pair<int, index_t>> positives_per_id;  // (identity, count)

  for (const auto& [id, entries] : by_id) {
    index_t count = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      for (std::size_t j = i + 1; j < entries.size(); ++j) {
        const ManifestEntry& a = m.entries[static_cast<std::size_t>(entries[i])];
        const ManifestEntry& b = m.entries[static_cast<std::size_t>(entries[j])];
        if (a.camera_id == b.camera_id) continue;  // cross-camera positives only
        PairSample base{entries[i], entries[j], 0, AugKind::kNone, 0, 0, 0, 0};
        samples.push_back(base);
        ++count;
        if (augment) {
          PairSample flipped = base;
          flipped.aug = AugKind::kFlip;
          samples.push_back(flipped);
          PairSample shifted = base;
          shifted.aug = AugKind::kTranslate;
          shifted.dy1 = static_cast<std::int8_t>(rng.uniform_int(-max_dy, max_dy));
          shifted.dx1 = static_cast<std::int8_t>(rng.uniform_int(-max_dx, max_dx));
          shifted.dy2 = static_cast<std::int8_t>(rng.uniform_int(-max_dy, max_dy));
          shifted.dx2 = static_cast<std::int8_t>(rng.uniform_int(-max_dx, max_dx));
          samples.push_back(shifted);
          count += 2;
        }
      }
    }
    if (count == 0)
      ++skipped;
    else
      positives_per_id.emplace_back(id, count);
  }
  if (skipped_identities) *skipped_identities = skipped;

  // Negatives: per subject, neg_ratio times its positive count, drawn
  // uniformly from the subject's images x everyone else's images.
  for (const auto& [id, count] : positives_per_id) {
    const std::vector<index_t>& own = by_id[id];
    std::vector<index_t> others;
    for (const auto& [oid, entries] : by_id)
      if (oid != id) others.insert(others.end(), entries.begin(), entries.end());
    if (others.empty()) continue;
    for (index_t k = 0; k < neg_ratio * count; ++k) {
      PairSample neg;
      neg.e1 = own[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(own.size()) - 1))];
      neg.e2 = others[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(others.size()) - 1))];
      neg.label = 1;
      samples.push_back(neg);
    }
  }

  for (std::size_t i = samples.size(); i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(samples[i - 1], samples[j]);
  }
  return samples;
}

// Decoded [0,1] images for a fixed entry set, keyed by manifest index.
template <typename T>
class ImageStore {
 public:
  ImageStore(const Manifest& m, const std::vector<index_t>& indices, index_t h = 128,
             index_t w = 64) {
    for (index_t i : indices)
      if (!images_.count(i))
        images_.emplace(i, load_image<T>(m.resolve(m.entries[static_cast<std::size_t>(i)]),
                                         h, w));
  }

  const Tensor<T>& image(index_t i) const {
    auto it = images_.find(i);
    if (it == images_.end())
      throw std::out_of_range("ImageStore: entry " + std::to_string(i) + " not preloaded");
    return it->second;
  }

 private:
  std::map<index_t, Tensor<T>> images_;
};

namespace detail {

// Writes one augmented, mean-subtracted image into a batch slab.
template <typename T>
void place_augmented(const Tensor<T>& src, const Tensor<T>& mean, AugKind aug, int dy, int dx,
                     T* dst) {
  const Shape& s = src.shape();
  const T* sv = src.data();
  const T* mv = mean.data();
  for (index_t y = 0; y < s.h; ++y)
    for (index_t x = 0; x < s.w; ++x)
      for (index_t c = 0; c < s.c; ++c) {
        T v;
        if (aug == AugKind::kFlip) {
          v = sv[(y * s.w + (s.w - 1 - x)) * s.c + c];
        } else if (aug == AugKind::kTranslate) {
          const index_t sy = y - dy, sx = x - dx;
          v = (sy < 0 || sy >= s.h || sx < 0 || sx >= s.w) ? T(0)
                                                           : sv[(sy * s.w + sx) * s.c + c];
        } else {
          v = sv[(y * s.w + x) * s.c + c];
        }
        dst[(y * s.w + x) * s.c + c] = v - mv[(y * s.w + x) * s.c + c];
      }
}

}  // namespace detail

template <typename T>
struct PairBatch {
  Tensor<T> x1, x2;
  std::vector<int> labels;
};

template <typename T>
PairBatch<T> assemble_pair_batch(const std::vector<PairSample>& samples, std::size_t begin,
                                 std::size_t end, const ImageStore<T>& store,
                                 const Tensor<T>& mean) {
  if (end <= begin || end > samples.size())
    throw std::invalid_argument("assemble_pair_batch: bad sample range");
  const Shape ms = mean.shape();
  const index_t n = static_cast<index_t>(end - begin);
  PairBatch<T> batch;
  batch.x1 = Tensor<T>(Shape{n, ms.h, ms.w, ms.c});
  batch.x2 = Tensor<T>(Shape{n, ms.h, ms.w, ms.c});
  const index_t stride = ms.h * ms.w * ms.c;
  for (std::size_t k = begin; k < end; ++k) {
    const PairSample& p = samples[k];
    const index_t slot = static_cast<index_t>(k - begin);
    detail::place_augmented(store.image(p.e1), mean, p.aug, p.dy1, p.dx1,
                            batch.x1.data() + slot * stride);
    detail::place_augmented(store.image(p.e2), mean, p.aug, p.dy2, p.dx2,
                            batch.x2.data() + slot * stride);
    batch.labels.push_back(p.label);
  }
  return batch;
}

struct TrainConfig {
  double margin = 1.0;
  double lr = 0.002;
  double lr_decay = 0.9;
  double rmsprop_decay = 0.95;
  double rmsprop_eps = 1e-8;
  index_t batch_size = 100;
  index_t epochs = 20;
  index_t negatives_per_positive = 5;
  bool augment = true;
  double val_fraction = 0.1;          // identities carved off train if no val split
  double early_stop_min_delta = 0.1;  // rank-1 percentage points
  index_t early_stop_patience = 3;
  index_t max_iters = 0;  // 0 = run the full schedule
  bool checkpoint_each_epoch = true;

  void validate() const {
    if (margin <= 0) throw std::invalid_argument("TrainConfig: margin must be positive");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (lr_decay <= 0 || lr_decay > 1)
      throw std::invalid_argument("TrainConfig: lr_decay outside (0,1]");
    if (rmsprop_decay <= 0 || rmsprop_decay >= 1)
      throw std::invalid_argument("TrainConfig: rmsprop_decay outside (0,1)");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (negatives_per_positive < 0)
      throw std::invalid_argument("TrainConfig: negative ratio must be >= 0");
    if (val_fraction < 0 || val_fraction >= 1)
      throw std::invalid_argument("TrainConfig: val_fraction outside [0,1)");
    if (early_stop_patience < 1)
      throw std::invalid_argument("TrainConfig: early_stop_patience must be >= 1");
  }
};

struct TrainResult {
  std::vector<std::string> checkpoints;
  index_t iterations = 0;
  int epochs_run = 0;
  double first_iter_loss = std::numeric_limits<double>::quiet_NaN();
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  double mean_last10_loss = std::numeric_limits<double>::quiet_NaN();
  double best_val_rank1 = std::numeric_limits<double>::quiet_NaN();
  bool early_stopped = false;
  index_t skipped_identities = 0;
};

// The Siamese training loop: per-epoch pair stream, RMSProp with per-epoch
// LR decay, per-epoch validation Rank-1 with saturation early stopping, one
// checkpoint per epoch. Deterministic in (net init, seed).
template <typename T>
TrainResult train(NetworkParams<T>& net, const Manifest& manifest, const TrainConfig& cfg,
                  std::uint64_t seed, const std::string& out_dir,
                  MetricsLogger* metrics = nullptr) {
  cfg.validate();
  Rng master(seed);
  if (!out_dir.empty() && cfg.checkpoint_each_epoch)
    std::filesystem::create_directories(out_dir);

  std::vector<index_t> train_pool = manifest.split_indices(Split::kTrain);
  std::vector<index_t> val_pool = manifest.split_indices(Split::kVal);
  if (train_pool.empty()) throw std::invalid_argument("train: manifest has no train entries");

  // The mean image is always taken over all split=train entries, so it does
  // not depend on the validation carve below and eval can recompute it.
  Tensor<T> mean = compute_mean_image<T>(manifest, net.config.input_h, net.config.input_w);

  if (val_pool.empty() && cfg.val_fraction > 0) {
    std::vector<int> ids;
    for (index_t i : train_pool) {
      const int id = manifest.entries[static_cast<std::size_t>(i)].identity_id;
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    Rng carve = master.stream("valsplit");
    for (std::size_t i = ids.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(carve.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(ids[i - 1], ids[j]);
    }
    const std::size_t n_val_ids = static_cast<std::size_t>(
        std::llround(cfg.val_fraction * static_cast<double>(ids.size())));
    const std::vector<int> val_ids(ids.begin(),
                                   ids.begin() + static_cast<std::ptrdiff_t>(n_val_ids));
    std::vector<index_t> kept;
    for (index_t i : train_pool) {
      const int id = manifest.entries[static_cast<std::size_t>(i)].identity_id;
      if (std::find(val_ids.begin(), val_ids.end(), id) != val_ids.end())
        val_pool.push_back(i);
      else
        kept.push_back(i);
    }
    train_pool.swap(kept);
    if (train_pool.empty())
      throw std::invalid_argument("train: validation carve consumed every train identity");
  }

  std::vector<index_t> preload = train_pool;
  preload.insert(preload.end(), val_pool.begin(), val_pool.end());
  ImageStore<T> store(manifest, preload, net.config.input_h, net.config.input_w);

  OptimizerState<T> opt(cfg.rmsprop_decay, cfg.rmsprop_eps);
  opt.init(net);

  TrainResult res;
  std::deque<double> tail_losses;
  double best_rank1_pct = -1.0;
  index_t since_improve = 0;
  index_t iter = 0;
  bool stop = false;

  for (index_t epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    const T lr = static_cast<T>(cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch - 1)));
    Rng erng = master.stream("epoch", static_cast<std::uint64_t>(epoch));
    index_t skipped = 0;
    const std::vector<PairSample> samples =
        build_epoch_pairs(manifest, train_pool, erng, cfg.augment, cfg.negatives_per_positive,
                          net.config.input_h, net.config.input_w, &skipped);
    res.skipped_identities = skipped;
    if (samples.empty())
      throw std::invalid_argument("train: no cross-camera positive pairs in train split");

    for (std::size_t b = 0; b < samples.size() && !stop; b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(cfg.batch_size));
      PairBatch<T> batch = assemble_pair_batch(samples, b, e, store, mean);
      net.zero_grad();
      auto [emb1, emb2] = forward_pair(batch.x1, batch.x2, net, Mode::kTrain, true);
      Tensor<T> loss =
          contrastive_loss_batch(emb1, emb2, batch.labels, static_cast<T>(cfg.margin));
      const double lval = static_cast<double>(loss.data()[0]);
      ++iter;
      if (!std::isfinite(lval))
        throw std::runtime_error("training diverged (non-finite loss) at iteration " +
                                 std::to_string(iter));
      loss.backward();
      rmsprop_step(net, opt, lr);
      if (metrics) metrics->iteration(static_cast<std::int64_t>(iter),
                                      static_cast<int>(epoch), static_cast<double>(lr), lval);
      if (iter == 1) res.first_iter_loss = lval;
      res.last_loss = lval;
      tail_losses.push_back(lval);
      if (tail_losses.size() > 10) tail_losses.pop_front();
      if (cfg.max_iters > 0 && iter >= cfg.max_iters) stop = true;
    }

    double val_rank1 = std::numeric_limits<double>::quiet_NaN();
    double val_map = std::numeric_limits<double>::quiet_NaN();
    if (!val_pool.empty()) {
      std::vector<index_t> vq, vg;
      derive_query_gallery(manifest, val_pool, &vq, &vg);
      if (!vq.empty() && !vg.empty()) {
        try {
          const DistanceMatrix dm = compute_distance_matrix(net, manifest, vq, vg, mean);
          const RankingResult rr = cmc_map(dm, Protocol::kSQ);
          val_rank1 = rr.rank_k(1);
          val_map = rr.map;
        } catch (const std::invalid_argument&) {
          // validation split without a rankable query; leave NaN
        }
      }
    }
    if (metrics) metrics->epoch_val(static_cast<int>(epoch), val_rank1, val_map);
    if (!out_dir.empty() && cfg.checkpoint_each_epoch) {
      const std::string path = out_dir + "/epoch_" + std::to_string(epoch) + ".ckpt";
      save_checkpoint(path, net, static_cast<int>(epoch));
      res.checkpoints.push_back(path);
    }
    res.epochs_run = static_cast<int>(epoch);

    if (std::isfinite(val_rank1)) {
      if (!(res.best_val_rank1 >= val_rank1)) res.best_val_rank1 = val_rank1;
      const double pct = val_rank1 * 100.0;
      if (pct > best_rank1_pct + cfg.early_stop_min_delta) {
        best_rank1_pct = pct;
        since_improve = 0;
      } else if (++since_improve >= cfg.early_stop_patience) {
        res.early_stopped = true;
        stop = true;
      }
    }
  }

  res.iterations = iter;
  if (!tail_losses.empty()) {
    double acc = 0.0;
    for (double v : tail_losses) acc += v;
    res.mean_last10_loss = acc / static_cast<double>(tail_losses.size());
  }
  return res;
}

}  // namespace gscnn
