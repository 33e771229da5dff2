#include <cmath>

#include "doctest.h"
#include "gscnn/evaluation.hpp"
#include "oracles.hpp"

using namespace gscnn;

namespace {

DistanceMatrix make_dm(index_t rows, index_t cols, std::vector<double> d,
                       std::vector<int> qid, std::vector<int> qcam, std::vector<int> gid,
                       std::vector<int> gcam) {
  DistanceMatrix dm;
  dm.rows = rows;
  dm.cols = cols;
  dm.d = std::move(d);
  dm.query_id = std::move(qid);
  dm.query_cam = std::move(qcam);
  dm.gallery_id = std::move(gid);
  dm.gallery_cam = std::move(gcam);
  return dm;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("single query, match in front") {
  auto dm = make_dm(1, 2, {0.1, 0.9}, {0}, {0}, {0, 1}, {1, 1});
  RankingResult r = cmc_map(dm, Protocol::kSQ);
  REQUIRE(r.cmc.size() == 2);
  CHECK(r.cmc[0] == 1.0);
  CHECK(r.cmc[1] == 1.0);
  CHECK(r.map == 1.0);
  CHECK(r.n_queries == 1);
  CHECK(r.n_excluded == 0);
}

TEST_CASE("single query, two matches behind a distractor") {
  auto dm = make_dm(1, 3, {0.1, 0.2, 0.3}, {7}, {0}, {3, 7, 7}, {1, 1, 1});
  RankingResult r = cmc_map(dm, Protocol::kSQ);
  CHECK(r.cmc[0] == 0.0);
  CHECK(r.cmc[1] == 1.0);
  CHECK(r.cmc[2] == 1.0);
  CHECK(r.map == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("same-camera entries of the query identity are junk") {
  // the closest gallery entry shares id and camera with the query; after its
  // removal the true cross-camera match ranks first among the remaining
  auto dm = make_dm(1, 3, {0.05, 0.5, 0.9}, {4}, {0}, {4, 4, 9}, {0, 1, 1});
  RankingResult r = cmc_map(dm, Protocol::kSQ);
  CHECK(r.cmc[0] == 1.0);
  CHECK(r.map == 1.0);
  // without the exclusion the distractor-free rank would differ: drop the
  // junk column and the result is the same, proving it carried no weight
  auto clean = make_dm(1, 2, {0.5, 0.9}, {4}, {0}, {4, 9}, {1, 1});
  RankingResult rc = cmc_map(clean, Protocol::kSQ);
  CHECK(rc.cmc[0] == r.cmc[0]);
  CHECK(rc.map == r.map);
}

TEST_CASE("queries without any cross-camera match are excluded, not scored") {
  auto dm = make_dm(2, 2, {0.1, 0.2, 0.3, 0.4}, {1, 2}, {0, 0}, {1, 2}, {0, 1});
  // query 0: its only same-id entry shares the camera -> excluded
  RankingResult r = cmc_map(dm, Protocol::kSQ);
  CHECK(r.n_queries == 0 + 1);
  CHECK(r.n_excluded == 1);
  CHECK(r.per_query_ap.size() == 1);

  auto hopeless = make_dm(1, 1, {0.5}, {3}, {0}, {8}, {1});
  CHECK(testutil::throws_containing([&] { cmc_map(hopeless, Protocol::kSQ); },
                                    "no query has a valid cross-camera match"));
}

TEST_CASE("ties resolve by gallery index") {
  auto dm = make_dm(1, 2, {0.5, 0.5}, {1}, {0}, {2, 1}, {1, 1});
  RankingResult r = cmc_map(dm, Protocol::kSQ);
  CHECK(r.cmc[0] == 0.0);  // the tied distractor sits at the lower index
  CHECK(r.cmc[1] == 1.0);

  auto swapped = make_dm(1, 2, {0.5, 0.5}, {1}, {0}, {1, 2}, {1, 1});
  RankingResult rs = cmc_map(swapped, Protocol::kSQ);
  CHECK(rs.cmc[0] == 1.0);
}

TEST_CASE("cmc curves are cumulative and end at one") {
  Rng rng(301);
  for (int trial = 0; trial < 10; ++trial) {
    DistanceMatrix dm = testutil::random_distance_matrix(rng, 12, 30, 6, 2);
    RankingResult r;
    try {
      r = cmc_map(dm, Protocol::kSQ);
    } catch (const std::invalid_argument&) {
      continue;
    }
    REQUIRE(r.cmc.size() == 30);
    for (std::size_t k = 1; k < r.cmc.size(); ++k) CHECK(r.cmc[k] >= r.cmc[k - 1]);
    CHECK(r.cmc.back() == 1.0);
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
  }
}

TEST_CASE("ranking depends only on the distance order") {
  Rng rng(302);
  DistanceMatrix dm = testutil::random_distance_matrix(rng, 20, 60, 8, 2);
  DistanceMatrix cubed = dm;
  for (double& v : cubed.d) v = v * v * v;  // strictly monotone, tie-preserving
  RankingResult a = cmc_map(dm, Protocol::kSQ);
  RankingResult b = cmc_map(cubed, Protocol::kSQ);
  CHECK(a.cmc == b.cmc);
  CHECK(a.map == b.map);
  CHECK(a.per_query_ap == b.per_query_ap);
}

TEST_CASE("agrees exactly with the brute-force oracle") {
  Rng rng(303);
  for (int trial = 0; trial < 6; ++trial) {
    DistanceMatrix dm = testutil::random_distance_matrix(rng, 50, 200, 12, 3);
    for (Protocol p : {Protocol::kSQ, Protocol::kMQ}) {
      RankingResult got, want;
      bool got_threw = false, want_threw = false;
      try {
        got = cmc_map(dm, p);
      } catch (const std::invalid_argument&) {
        got_threw = true;
      }
      try {
        want = testutil::oracle_cmc_map(dm, p);
      } catch (const std::invalid_argument&) {
        want_threw = true;
      }
      CAPTURE(trial);
      REQUIRE(got_threw == want_threw);
      if (got_threw) continue;
      CHECK(got.cmc == want.cmc);
      CHECK(got.map == want.map);
      CHECK(got.per_query_ap == want.per_query_ap);
      CHECK(got.n_queries == want.n_queries);
      CHECK(got.n_excluded == want.n_excluded);
    }
  }
}

TEST_CASE("multi-query fusion rescales and averages the group rows") {
  auto dm = make_dm(2, 3, {0.2, 0.4, 0.6, 0.9, 0.3, 0.3}, {1, 1}, {0, 0}, {5, 1, 6},
                    {1, 1, 1});
  // fused: [0,0.5,1]/rescale of row1 and [1,0,0] of row2 -> [0.5,0.25,0.5]
  RankingResult mq = cmc_map(dm, Protocol::kMQ);
  CHECK(mq.n_queries == 1);  // one (id,cam) group
  CHECK(mq.cmc[0] == 1.0);
  CHECK(mq.map == 1.0);

  RankingResult sq = cmc_map(dm, Protocol::kSQ);
  CHECK(sq.n_queries == 2);
  CHECK(sq.map == doctest::Approx(0.75).epsilon(1e-12));  // (1/2 + 1)/2
}

TEST_CASE("a constant row adds nothing to the fused ranking") {
  auto with_flat = make_dm(2, 3, {0.2, 0.4, 0.6, 0.5, 0.5, 0.5}, {2, 2}, {0, 0},
                           {9, 2, 9}, {1, 1, 1});
  RankingResult r = cmc_map(with_flat, Protocol::kMQ);
  // fused = ([0,0.5,1] + [0,0,0]) / 2: order decided by the informative row
  CHECK(r.n_queries == 1);
  CHECK(r.cmc[0] == 0.0);
  CHECK(r.cmc[1] == 1.0);
}

TEST_CASE("with singleton groups the two protocols coincide") {
  Rng rng(304);
  DistanceMatrix dm = testutil::random_distance_matrix(rng, 18, 40, 40, 2);
  // force unique (id, cam) per query row
  for (index_t r = 0; r < dm.rows; ++r) {
    dm.query_id[static_cast<std::size_t>(r)] = static_cast<int>(r);
    dm.query_cam[static_cast<std::size_t>(r)] = 0;
  }
  for (index_t c = 0; c < dm.cols; ++c) dm.gallery_cam[static_cast<std::size_t>(c)] = 1;
  dm.gallery_id[0] = 17;  // make sure every id finds some match
  for (index_t r = 0; r < dm.rows; ++r)
    dm.gallery_id[static_cast<std::size_t>(r + 10) % static_cast<std::size_t>(dm.cols)] =
        static_cast<int>(r);
  RankingResult sq = cmc_map(dm, Protocol::kSQ);
  RankingResult mq = cmc_map(dm, Protocol::kMQ);
  CHECK(sq.cmc == mq.cmc);
  CHECK(sq.map == mq.map);
  CHECK(sq.per_query_ap == mq.per_query_ap);
  CHECK(sq.n_queries == mq.n_queries);
}

TEST_CASE("distance matrices are validated before ranking") {
  DistanceMatrix empty;
  CHECK(testutil::throws_containing([&] { cmc_map(empty, Protocol::kSQ); }, "empty"));

  auto dm = make_dm(1, 2, {0.1, 0.2}, {0}, {0}, {0, 1}, {1, 1});
  dm.gallery_id.push_back(4);  // metadata out of step
  CHECK(testutil::throws_containing([&] { cmc_map(dm, Protocol::kSQ); }, "metadata"));

  auto neg = make_dm(1, 2, {-0.1, 0.2}, {0}, {0}, {0, 1}, {1, 1});
  CHECK(testutil::throws_containing([&] { neg.validate(); }, "nonnegative"));
  auto nan = make_dm(1, 2, {std::nan(""), 0.2}, {0}, {0}, {0, 1}, {1, 1});
  CHECK_THROWS(nan.validate());

  CHECK(parse_protocol("sq") == Protocol::kSQ);
  CHECK(parse_protocol("MQ") == Protocol::kMQ);
  CHECK_THROWS(parse_protocol("both"));
}

}  // TEST_SUITE
