#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gscnn/serialize.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

enum class Split { kTrain, kVal, kQuery, kGallery };

Split parse_split(const std::string& text);
std::string split_name(Split s);

struct ManifestEntry {
  std::string image_path;
  int identity_id = 0;
  int camera_id = 0;
  Split split = Split::kTrain;
};

struct Manifest {
  std::string root;  // image_path entries resolve relative to this directory
  std::vector<ManifestEntry> entries;

  std::vector<index_t> split_indices(Split s) const {
    std::vector<index_t> out;
    for (index_t i = 0; i < static_cast<index_t>(entries.size()); ++i)
      if (entries[static_cast<std::size_t>(i)].split == s) out.push_back(i);
    return out;
  }

  std::string resolve(const ManifestEntry& e) const;
};

// CSV with header image_path,identity_id,camera_id,split. An empty root
// defaults to the directory containing the CSV. Load validates identity ids,
// the query-subset-of-gallery rule and that every referenced file exists.
Manifest load_manifest(const std::string& csv_path, const std::string& root = "");
void save_manifest(const std::string& csv_path, const Manifest& m);

// 8-bit interleaved RGB, the PPM (P6, maxval 255) payload.
struct ImageU8 {
  index_t h = 0, w = 0;
  std::vector<unsigned char> rgb;
};

ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

// Bilinear resample with the half-pixel center convention; channels
// interleaved. Exact 2x decimation averages each 4-neighborhood.
std::vector<double> resize_bilinear(const std::vector<double>& src, index_t sh, index_t sw,
                                    index_t dh, index_t dw, index_t channels);

namespace detail {
// Sniffs PPM vs tensor container, decodes to [0,1] doubles at the stored
// resolution.
std::vector<double> load_image_f64(const std::string& path, index_t* h, index_t* w);
}  // namespace detail

// Image as a (1,128,64,3) tensor in [0,1]; other resolutions are resized.
template <typename T>
Tensor<T> load_image(const std::string& path, index_t out_h = 128, index_t out_w = 64) {
  index_t h = 0, w = 0;
  std::vector<double> px = detail::load_image_f64(path, &h, &w);
  if (h != out_h || w != out_w) px = resize_bilinear(px, h, w, out_h, out_w, 3);
  Tensor<T> t(Shape{1, out_h, out_w, 3});
  T* v = t.data();
  for (std::size_t i = 0; i < px.size(); ++i) v[i] = static_cast<T>(px[i]);
  return t;
}

// Pixelwise mean over the train split.
template <typename T>
Tensor<T> compute_mean_image(const Manifest& m, index_t out_h = 128, index_t out_w = 64) {
  const std::vector<index_t> train = m.split_indices(Split::kTrain);
  if (train.empty()) throw std::invalid_argument("compute_mean_image: empty training split");
  std::vector<double> acc(static_cast<std::size_t>(out_h * out_w * 3), 0.0);
  for (index_t i : train) {
    Tensor<double> img =
        load_image<double>(m.resolve(m.entries[static_cast<std::size_t>(i)]), out_h, out_w);
    const double* v = img.data();
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
  }
  const double inv = 1.0 / static_cast<double>(train.size());
  Tensor<T> mean(Shape{1, out_h, out_w, 3});
  T* mv = mean.data();
  for (std::size_t j = 0; j < acc.size(); ++j) mv[j] = static_cast<T>(acc[j] * inv);
  return mean;
}

// Desk-scale stand-in dataset: two-tone identities over two cameras, an
// optional fraction of twin identity pairs that differ only by a small
// high-contrast cue patch.
struct SyntheticSpec {
  index_t n_identities = 20;
  index_t images_per_identity = 4;
  index_t cameras = 2;
  index_t cue_h = 12, cue_w = 12;
  double noise_sigma = 0.02;
  double local_cue_fraction = 0.0;
  index_t height = 128, width = 64;
  // Identity pairs are assigned whole to a split so twins never straddle one.
  double test_fraction = 0.25;
  double val_fraction = 0.15;

  void validate() const {
    if (n_identities < 2) throw std::invalid_argument("SyntheticSpec: need >= 2 identities");
    if (images_per_identity < 1 || cameras < 1)
      throw std::invalid_argument("SyntheticSpec: need >= 1 image and camera");
    if (cue_h <= 0 || cue_w <= 0 || cue_h > height || cue_w > width)
      throw std::invalid_argument("SyntheticSpec: cue patch does not fit the image");
    if (local_cue_fraction < 0.0 || local_cue_fraction > 1.0)
      throw std::invalid_argument("SyntheticSpec: local_cue_fraction outside [0,1]");
    if (noise_sigma < 0.0) throw std::invalid_argument("SyntheticSpec: negative noise sigma");
    if (test_fraction < 0.0 || val_fraction < 0.0 || test_fraction + val_fraction > 0.9)
      throw std::invalid_argument("SyntheticSpec: bad split fractions");
  }
};

// Writes PPM images under out_dir/images plus out_dir/manifest.csv and
// returns the manifest. Deterministic in seed.
Manifest generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed,
                            const std::string& out_dir);

}  // namespace gscnn
