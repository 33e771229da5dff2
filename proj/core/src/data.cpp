#include "gscnn/data.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gscnn/rng.hpp"

namespace fs = std::filesystem;

namespace gscnn {

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "query") return Split::kQuery;
  if (text == "gallery") return Split::kGallery;
  throw std::invalid_argument("unknown split '" + text +
                              "' (expected train, val, query or gallery)");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  throw std::logic_error("split_name: bad split");
}

std::string Manifest::resolve(const ManifestEntry& e) const {
  fs::path p(e.image_path);
  if (p.is_absolute() || root.empty()) return e.image_path;
  return (fs::path(root) / p).string();
}

static const char* kManifestHeader = "image_path,identity_id,camera_id,split";

Manifest load_manifest(const std::string& csv_path, const std::string& root) {
  std::ifstream is(csv_path);
  if (!is) throw std::runtime_error("cannot open manifest " + csv_path);

  Manifest m;
  m.root = root.empty() ? fs::path(csv_path).parent_path().string() : root;

  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != kManifestHeader)
        throw std::runtime_error(csv_path + ": expected header '" +
                                 std::string(kManifestHeader) + "', got '" + line + "'");
      saw_header = true;
      continue;
    }
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 4)
      throw std::runtime_error(csv_path + ":" + std::to_string(lineno) + ": expected 4 fields, got " +
                               std::to_string(fields.size()));
    ManifestEntry e;
    e.image_path = fields[0];
    try {
      e.identity_id = std::stoi(fields[1]);
      e.camera_id = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw std::runtime_error(csv_path + ":" + std::to_string(lineno) + ": bad integer field");
    }
    if (e.identity_id < 0)
      throw std::runtime_error(csv_path + ":" + std::to_string(lineno) + ": negative identity_id");
    e.split = parse_split(fields[3]);
    m.entries.push_back(std::move(e));
  }
  if (!saw_header) throw std::runtime_error(csv_path + ": empty manifest");

  std::set<int> gallery_ids, query_ids;
  for (const ManifestEntry& e : m.entries) {
    if (e.split == Split::kGallery) gallery_ids.insert(e.identity_id);
    if (e.split == Split::kQuery) query_ids.insert(e.identity_id);
  }
  for (int id : query_ids)
    if (!gallery_ids.count(id))
      throw std::runtime_error(csv_path + ": query identity " + std::to_string(id) +
                               " has no gallery entry");
  for (const ManifestEntry& e : m.entries) {
    const std::string p = m.resolve(e);
    if (!fs::exists(p)) throw std::runtime_error(csv_path + ": missing image file " + p);
  }
  return m;
}

void save_manifest(const std::string& csv_path, const Manifest& m) {
  std::ofstream os(csv_path);
  if (!os) throw std::runtime_error("cannot open " + csv_path + " for writing");
  os << kManifestHeader << '\n';
  for (const ManifestEntry& e : m.entries)
    os << e.image_path << ',' << e.identity_id << ',' << e.camera_id << ','
       << split_name(e.split) << '\n';
  os.close();
  if (!os) throw std::runtime_error("failed writing " + csv_path);
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& is, const std::string& path) {
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (c == EOF) throw std::runtime_error(path + ": truncated PPM header");
  std::string tok(1, static_cast<char>(c));
  while ((c = is.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
  return tok;
}

}  // namespace

ImageU8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (ppm_token(is, path) != "P6") throw std::runtime_error(path + ": not a P6 PPM");
  ImageU8 img;
  try {
    img.w = std::stoll(ppm_token(is, path));
    img.h = std::stoll(ppm_token(is, path));
    const long long maxval = std::stoll(ppm_token(is, path));
    if (maxval != 255) throw std::runtime_error(path + ": unsupported maxval");
  } catch (const std::invalid_argument&) {
    throw std::runtime_error(path + ": malformed PPM header");
  }
  if (img.w <= 0 || img.h <= 0) throw std::runtime_error(path + ": bad PPM dimensions");
  const std::size_t count = static_cast<std::size_t>(img.w * img.h * 3);
  img.rgb.resize(count);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(is.gcount()) != count)
    throw std::runtime_error(path + ": truncated PPM pixel data");
  return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.w * img.h * 3))
    throw std::invalid_argument("write_ppm: pixel buffer does not match dimensions");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "P6\n" << img.w << ' ' << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<double> resize_bilinear(const std::vector<double>& src, index_t sh, index_t sw,
                                    index_t dh, index_t dw, index_t channels) {
  if (src.size() != static_cast<std::size_t>(sh * sw * channels))
    throw std::invalid_argument("resize_bilinear: source buffer/shape mismatch");
  std::vector<double> dst(static_cast<std::size_t>(dh * dw * channels));
  const double sy_scale = static_cast<double>(sh) / static_cast<double>(dh);
  const double sx_scale = static_cast<double>(sw) / static_cast<double>(dw);
  auto clampi = [](index_t v, index_t hi) { return std::min(std::max(v, index_t(0)), hi); };
  for (index_t y = 0; y < dh; ++y) {
    const double sy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
    const index_t y0 = static_cast<index_t>(std::floor(sy));
    const double fy = sy - static_cast<double>(y0);
    const index_t y0c = clampi(y0, sh - 1), y1c = clampi(y0 + 1, sh - 1);
    for (index_t x = 0; x < dw; ++x) {
      const double sx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
      const index_t x0 = static_cast<index_t>(std::floor(sx));
      const double fx = sx - static_cast<double>(x0);
      const index_t x0c = clampi(x0, sw - 1), x1c = clampi(x0 + 1, sw - 1);
      for (index_t c = 0; c < channels; ++c) {
        const double a = src[static_cast<std::size_t>((y0c * sw + x0c) * channels + c)];
        const double b = src[static_cast<std::size_t>((y0c * sw + x1c) * channels + c)];
        const double d = src[static_cast<std::size_t>((y1c * sw + x0c) * channels + c)];
        const double e = src[static_cast<std::size_t>((y1c * sw + x1c) * channels + c)];
        dst[static_cast<std::size_t>((y * dw + x) * channels + c)] =
            (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * d + fx * e);
      }
    }
  }
  return dst;
}

namespace detail {

std::vector<double> load_image_f64(const std::string& path, index_t* h, index_t* w) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw std::runtime_error("cannot open " + path);
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  probe.close();

  if (magic[0] == 'P' && magic[1] == '6') {
    const ImageU8 img = read_ppm(path);
    *h = img.h;
    *w = img.w;
    std::vector<double> px(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
      px[i] = static_cast<double>(img.rgb[i]) / 255.0;
    return px;
  }
  if (magic[0] == 'G' && magic[1] == 'S' && magic[2] == 'C' && magic[3] == 'N') {
    const RawTensor t = load_raw_tensor(path);
    if (t.shape.n != 1 || t.shape.c != 3)
      throw std::runtime_error(path + ": tensor image must have shape (1,h,w,3), got " +
                               t.shape.str());
    *h = t.shape.h;
    *w = t.shape.w;
    std::vector<double> px(t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i)
      px[i] = std::min(std::max(t.values[i], 0.0), 1.0);
    return px;
  }
  throw std::runtime_error(path + ": unsupported image format (want PPM P6 or GSCN tensor)");
}

}  // namespace detail

namespace {

struct Rect {
  index_t r0, r1, c0, c1;  // half-open
};

void fill_rect(std::vector<double>& buf, index_t h, index_t w, const Rect& r, double red,
               double green, double blue) {
  const index_t r0 = std::max(r.r0, index_t(0)), r1 = std::min(r.r1, h);
  const index_t c0 = std::max(r.c0, index_t(0)), c1 = std::min(r.c1, w);
  for (index_t y = r0; y < r1; ++y)
    for (index_t x = c0; x < c1; ++x) {
      double* px = buf.data() + (y * w + x) * 3;
      px[0] = red;
      px[1] = green;
      px[2] = blue;
    }
}

struct PairPlan {
  bool twin = false;
  Split split = Split::kTrain;
  double cue_rgb[3] = {0.95, 0.05, 0.95};
  index_t cue_r0 = 0, cue_c0 = 0;  // relative to body center column
  bool cue_is_hat = true;
};

}  // namespace

Manifest generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed,
                            const std::string& out_dir) {
  spec.validate();
  const index_t n_pairs = (spec.n_identities + 1) / 2;
  Rng master(seed);

  // Whole identity pairs are dealt to splits so twins never straddle one.
  std::vector<index_t> perm(static_cast<std::size_t>(n_pairs));
  for (index_t i = 0; i < n_pairs; ++i) perm[static_cast<std::size_t>(i)] = i;
  {
    Rng shuffle = master.stream("splits");
    for (index_t i = n_pairs - 1; i > 0; --i) {
      const index_t j = shuffle.uniform_int(0, i);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
  }
  index_t n_test = static_cast<index_t>(std::llround(spec.test_fraction * n_pairs));
  index_t n_val = static_cast<index_t>(std::llround(spec.val_fraction * n_pairs));
  while (n_test + n_val >= n_pairs && n_val > 0) --n_val;
  while (n_test + n_val >= n_pairs && n_test > 0) --n_test;
  if (n_test > 0 && (spec.cameras < 2 || spec.images_per_identity < 2))
    throw std::invalid_argument(
        "generate_synthetic: query/gallery split needs >= 2 cameras and >= 2 images per "
        "identity");

  std::vector<PairPlan> plans(static_cast<std::size_t>(n_pairs));
  std::vector<std::vector<index_t>> split_groups(3);  // test, val, train in perm order
  for (index_t k = 0; k < n_pairs; ++k) {
    const index_t pair = perm[static_cast<std::size_t>(k)];
    const int group = k < n_test ? 0 : (k < n_test + n_val ? 1 : 2);
    plans[static_cast<std::size_t>(pair)].split =
        group == 0 ? Split::kQuery : (group == 1 ? Split::kVal : Split::kTrain);
    split_groups[static_cast<std::size_t>(group)].push_back(pair);
  }
  // Twins stratified per split so the hard negatives reach train and eval in
  // proportion. Singleton pairs (odd identity count) never twin.
  for (auto& group : split_groups) {
    index_t quota = static_cast<index_t>(
        std::llround(spec.local_cue_fraction * static_cast<double>(group.size())));
    for (index_t pair : group) {
      if (quota == 0) break;
      if (2 * pair + 1 >= spec.n_identities) continue;
      plans[static_cast<std::size_t>(pair)].twin = true;
      --quota;
    }
  }
  for (index_t k = 0; k < n_pairs; ++k) {
    PairPlan& plan = plans[static_cast<std::size_t>(k)];
    Rng cue = master.stream("cue", static_cast<std::uint64_t>(k));
    plan.cue_is_hat = (cue.next_u64() & 1) != 0;
    for (double& ch : plan.cue_rgb) ch = (cue.next_u64() & 1) ? 0.95 : 0.05;
    plan.cue_r0 = plan.cue_is_hat ? index_t(6) : spec.height / 2 - spec.cue_h / 2;
    plan.cue_c0 = plan.cue_is_hat ? -spec.cue_w / 2 : -(spec.cue_w + 14);
    plan.cue_r0 = std::min(plan.cue_r0, spec.height - spec.cue_h);
  }

  fs::create_directories(fs::path(out_dir) / "images");
  Manifest m;
  m.root = out_dir;

  for (index_t id = 0; id < spec.n_identities; ++id) {
    const index_t pair = id / 2;
    const PairPlan& plan = plans[static_cast<std::size_t>(pair)];
    const bool is_cue_carrier = plan.twin && (id % 2 == 1);
    // Twins share the appearance (and per-image nuisance) of the pair's first
    // member; only the cue patch and the pixel noise tell them apart.
    const index_t appearance_id = plan.twin ? 2 * pair : id;

    Rng look = master.stream("identity", static_cast<std::uint64_t>(appearance_id));
    const double torso[3] = {look.uniform(0.1, 0.9), look.uniform(0.1, 0.9),
                             look.uniform(0.1, 0.9)};
    const double legs[3] = {look.uniform(0.1, 0.9), look.uniform(0.1, 0.9),
                            look.uniform(0.1, 0.9)};
    const double skin = look.uniform(0.5, 0.85);

    for (index_t j = 0; j < spec.images_per_identity; ++j) {
      const int camera = static_cast<int>(j % spec.cameras);
      Rng nuis = master.stream("nuisance",
                               static_cast<std::uint64_t>(appearance_id) * 4096 + j);
      const double bg = 0.30 + 0.10 * nuis.next_double();
      const index_t body_dx = nuis.uniform_int(-4, 4);
      const index_t torso_dw = nuis.uniform_int(-3, 3);
      const double bright = nuis.uniform(-0.08, 0.08);
      const double hue[3] = {nuis.uniform(0.9, 1.1), nuis.uniform(0.9, 1.1),
                             nuis.uniform(0.9, 1.1)};
      const index_t cam_dx = nuis.uniform_int(-3, 3);

      const index_t h = spec.height, w = spec.width;
      std::vector<double> buf(static_cast<std::size_t>(h * w * 3), bg);
      const index_t cx = w / 2 + body_dx;
      fill_rect(buf, h, w, Rect{h / 13, h / 5, cx - 10, cx + 10}, skin, skin * 0.82,
                skin * 0.70);
      fill_rect(buf, h, w, Rect{index_t(h * 0.22), index_t(h * 0.58), cx - 16 - torso_dw,
                                cx + 16 + torso_dw},
                torso[0], torso[1], torso[2]);
      fill_rect(buf, h, w, Rect{index_t(h * 0.60), index_t(h * 0.95), cx - 12, cx + 12},
                legs[0], legs[1], legs[2]);
      if (is_cue_carrier) {
        const index_t c0 = std::min(std::max(cx + plan.cue_c0, index_t(0)), w - spec.cue_w);
        fill_rect(buf, h, w,
                  Rect{plan.cue_r0, plan.cue_r0 + spec.cue_h, c0, c0 + spec.cue_w},
                  plan.cue_rgb[0], plan.cue_rgb[1], plan.cue_rgb[2]);
      }
      if (camera > 0) {
        std::vector<double> shifted(buf.size(), bg);
        for (index_t y = 0; y < h; ++y)
          for (index_t x = 0; x < w; ++x) {
            const index_t sx = x - cam_dx;
            if (sx < 0 || sx >= w) continue;
            for (index_t c = 0; c < 3; ++c)
              shifted[static_cast<std::size_t>((y * w + x) * 3 + c)] =
                  buf[static_cast<std::size_t>((y * w + sx) * 3 + c)];
          }
        for (index_t y = 0; y < h; ++y)
          for (index_t x = 0; x < w; ++x)
            for (index_t c = 0; c < 3; ++c) {
              double& px = shifted[static_cast<std::size_t>((y * w + x) * 3 + c)];
              px = px * hue[c] + bright;
            }
        buf.swap(shifted);
      }
      Rng noise = master.stream("noise", static_cast<std::uint64_t>(id) * 4096 + j);
      ImageU8 img;
      img.h = h;
      img.w = w;
      img.rgb.resize(buf.size());
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const double v =
            std::min(std::max(buf[i] + noise.normal(0.0, spec.noise_sigma), 0.0), 1.0);
        img.rgb[i] = static_cast<unsigned char>(std::lround(v * 255.0));
      }

      char name[64];
      std::snprintf(name, sizeof(name), "images/id%03lld_cam%d_%02lld.ppm",
                    static_cast<long long>(id), camera, static_cast<long long>(j));
      write_ppm((fs::path(out_dir) / name).string(), img);

      ManifestEntry e;
      e.image_path = name;
      e.identity_id = static_cast<int>(id);
      e.camera_id = camera;
      if (plan.split == Split::kQuery)
        e.split = camera == 0 ? Split::kQuery : Split::kGallery;
      else
        e.split = plan.split;
      m.entries.push_back(std::move(e));
    }
  }

  save_manifest((fs::path(out_dir) / "manifest.csv").string(), m);
  return m;
}

}  // namespace gscnn
