#include "gscnn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace gscnn {

Protocol parse_protocol(const std::string& text) {
  if (text == "sq" || text == "SQ") return Protocol::kSQ;
  if (text == "mq" || text == "MQ") return Protocol::kMQ;
  throw std::invalid_argument("unknown protocol '" + text + "' (expected sq or mq)");
}

void DistanceMatrix::validate() const {
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("DistanceMatrix: empty query or gallery axis");
  if (d.size() != static_cast<std::size_t>(rows * cols) ||
      query_id.size() != static_cast<std::size_t>(rows) ||
      query_cam.size() != static_cast<std::size_t>(rows) ||
      gallery_id.size() != static_cast<std::size_t>(cols) ||
      gallery_cam.size() != static_cast<std::size_t>(cols))
    throw std::invalid_argument("DistanceMatrix: metadata does not match dimensions");
  for (double v : d)
    if (!std::isfinite(v) || v < 0.0)
      throw std::invalid_argument("DistanceMatrix: distances must be finite and nonnegative");
}

namespace {

struct QueryRow {
  const double* d;
  int id, cam;
};

// Rank one query row against the gallery: same-camera-same-identity entries
// skipped, ties by gallery index. Returns false when the query has no
// cross-camera match.
bool rank_one(const QueryRow& row, const std::vector<int>& gallery_id,
              const std::vector<int>& gallery_cam, std::vector<index_t>& order_scratch,
              std::vector<double>& cmc_hits, double* ap) {
  const index_t cols = static_cast<index_t>(gallery_id.size());
  order_scratch.clear();
  bool any_good = false;
  for (index_t c = 0; c < cols; ++c) {
    const bool same_id = gallery_id[static_cast<std::size_t>(c)] == row.id;
    const bool same_cam = gallery_cam[static_cast<std::size_t>(c)] == row.cam;
    if (same_id && same_cam) continue;  // excluded junk entry
    order_scratch.push_back(c);
    any_good = any_good || same_id;
  }
  if (!any_good) return false;

  std::stable_sort(order_scratch.begin(), order_scratch.end(), [&](index_t a, index_t b) {
    const double da = row.d[a], db = row.d[b];
    if (da != db) return da < db;
    return a < b;
  });

  index_t hits = 0;
  double precision_sum = 0.0;
  bool first_seen = false;
  for (std::size_t pos = 0; pos < order_scratch.size(); ++pos) {
    if (gallery_id[static_cast<std::size_t>(order_scratch[pos])] != row.id) continue;
    ++hits;
    precision_sum += static_cast<double>(hits) / static_cast<double>(pos + 1);
    if (!first_seen) {
      first_seen = true;
      cmc_hits[pos] += 1.0;  // first correct match at rank pos+1
    }
  }
  *ap = precision_sum / static_cast<double>(hits);
  return true;
}

RankingResult rank_rows(const std::vector<QueryRow>& rows, const std::vector<int>& gallery_id,
                        const std::vector<int>& gallery_cam) {
  const index_t cols = static_cast<index_t>(gallery_id.size());
  RankingResult res;
  res.cmc.assign(static_cast<std::size_t>(cols), 0.0);
  std::vector<index_t> scratch;
  for (const QueryRow& row : rows) {
    double ap = 0.0;
    if (!rank_one(row, gallery_id, gallery_cam, scratch, res.cmc, &ap)) {
      ++res.n_excluded;
      continue;
    }
    res.per_query_ap.push_back(ap);
    ++res.n_queries;
  }
  if (res.n_queries == 0)
    throw std::invalid_argument("cmc_map: no query has a valid cross-camera match");
  // First-hit histogram -> cumulative fraction.
  double running = 0.0;
  for (double& v : res.cmc) {
    running += v;
    v = running / static_cast<double>(res.n_queries);
  }
  res.map = std::accumulate(res.per_query_ap.begin(), res.per_query_ap.end(), 0.0) /
            static_cast<double>(res.n_queries);
  return res;
}

}  // namespace

RankingResult cmc_map(const DistanceMatrix& dm, Protocol protocol) {
  dm.validate();

  if (protocol == Protocol::kSQ) {
    std::vector<QueryRow> rows;
    rows.reserve(static_cast<std::size_t>(dm.rows));
    for (index_t r = 0; r < dm.rows; ++r)
      rows.push_back(QueryRow{dm.d.data() + r * dm.cols, dm.query_id[static_cast<std::size_t>(r)],
                              dm.query_cam[static_cast<std::size_t>(r)]});
    return rank_rows(rows, dm.gallery_id, dm.gallery_cam);
  }

  // MQ: fuse rows per (identity, camera) group in first-appearance order.
  std::vector<std::pair<int, int>> group_keys;
  std::map<std::pair<int, int>, std::vector<index_t>> groups;
  for (index_t r = 0; r < dm.rows; ++r) {
    const std::pair<int, int> key{dm.query_id[static_cast<std::size_t>(r)],
                                  dm.query_cam[static_cast<std::size_t>(r)]};
    auto [it, inserted] = groups.emplace(key, std::vector<index_t>{});
    if (inserted) group_keys.push_back(key);
    it->second.push_back(r);
  }

  std::vector<std::vector<double>> merged(group_keys.size());
  std::vector<QueryRow> rows;
  for (std::size_t gi = 0; gi < group_keys.size(); ++gi) {
    const std::vector<index_t>& members = groups[group_keys[gi]];
    std::vector<double>& out = merged[gi];
    out.assign(static_cast<std::size_t>(dm.cols), 0.0);
    if (members.size() == 1) {
      const double* src = dm.d.data() + members[0] * dm.cols;
      out.assign(src, src + dm.cols);
    } else {
      for (index_t r : members) {
        const double* src = dm.d.data() + r * dm.cols;
        const auto [mn_it, mx_it] = std::minmax_element(src, src + dm.cols);
        const double mn = *mn_it, range = *mx_it - *mn_it;
        // A constant row carries no ranking information; it rescales to zero.
        for (index_t c = 0; c < dm.cols; ++c)
          out[static_cast<std::size_t>(c)] +=
              range > 0.0 ? (src[c] - mn) / range : 0.0;
      }
      for (double& v : out) v /= static_cast<double>(members.size());
    }
    rows.push_back(QueryRow{out.data(), group_keys[gi].first, group_keys[gi].second});
  }
  return rank_rows(rows, dm.gallery_id, dm.gallery_cam);
}

std::string results_json(const RankingResult& r) {
  const nlohmann::json j{{"rank1", r.rank_k(1)},   {"rank5", r.rank_k(5)},
                         {"rank10", r.rank_k(10)}, {"map", r.map},
                         {"n_queries", r.n_queries}, {"n_excluded", r.n_excluded}};
  return j.dump(2);
}

void save_results_json(const std::string& path, const RankingResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << results_json(r) << '\n';
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path);
}

namespace detail {

void write_csv_grid(const std::string& path, const std::vector<std::vector<double>>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << row[i];
    }
    os << '\n';
  }
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path);
}

}  // namespace detail

void save_distance_csv(const std::string& path, const DistanceMatrix& dm) {
  dm.validate();
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(dm.rows));
  for (index_t r = 0; r < dm.rows; ++r) {
    rows[static_cast<std::size_t>(r)].assign(dm.d.begin() + r * dm.cols,
                                             dm.d.begin() + (r + 1) * dm.cols);
  }
  detail::write_csv_grid(path, rows);
}

void save_distance_tensor(const std::string& path, const DistanceMatrix& dm) {
  dm.validate();
  RawTensor t;
  t.shape = Shape{1, dm.rows, dm.cols, 1};
  t.dtype = kDtypeF64;
  t.values = dm.d;
  save_raw_tensor(path, t);
}

std::vector<std::vector<double>> read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ": non-numeric CSV cell '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void derive_query_gallery(const Manifest& m, const std::vector<index_t>& pool,
                          std::vector<index_t>* query_idx, std::vector<index_t>* gallery_idx) {
  query_idx->clear();
  gallery_idx->clear();
  if (pool.empty()) return;
  int min_cam = m.entries[static_cast<std::size_t>(pool[0])].camera_id;
  for (index_t i : pool)
    min_cam = std::min(min_cam, m.entries[static_cast<std::size_t>(i)].camera_id);
  for (index_t i : pool) {
    if (m.entries[static_cast<std::size_t>(i)].camera_id == min_cam)
      query_idx->push_back(i);
    else
      gallery_idx->push_back(i);
  }
}

}  // namespace gscnn
