#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gscnn/training.hpp"
#include "oracles.hpp"

using namespace gscnn;
namespace fs = std::filesystem;

namespace {

template <typename T>
std::vector<std::vector<T>> snapshot(NetworkParams<T>& net) {
  std::vector<std::vector<T>> out;
  for (auto& [name, t] : net.named_trainable()) out.push_back(t->values());
  return out;
}

Manifest tiny_synth(const std::string& dir, index_t ids, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_identities = ids;
  spec.images_per_identity = 2;
  spec.test_fraction = 0.0;
  spec.val_fraction = 0.0;
  return generate_synthetic(spec, seed, dir);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.augment = false;
  cfg.val_fraction = 0.0;
  return cfg;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("contrastive loss hits its pinned values") {
  auto [l0, g0] = contrastive_loss(0.0, 0, 1.0);
  CHECK(l0 == 0.0);
  CHECK(g0 == 0.0);
  auto [l1, g1] = contrastive_loss(2.0, 0, 1.0);
  CHECK(l1 == 2.0);  // d^2/2
  CHECK(g1 == 2.0);
  auto [l2, g2] = contrastive_loss(1.5, 1, 1.0);  // separated negative
  CHECK(l2 == 0.0);
  CHECK(g2 == 0.0);
  auto [l3, g3] = contrastive_loss(0.0, 1, 1.0);  // coincident negative
  CHECK(l3 == 0.5);
  CHECK(g3 == -1.0);
  auto [l4, g4] = contrastive_loss(0.25, 1, 1.0);
  CHECK(l4 == doctest::Approx(0.75 * 0.75 / 2).epsilon(1e-12));
  CHECK(g4 == doctest::Approx(-0.75).epsilon(1e-12));
  CHECK_THROWS(contrastive_loss(0.5, 2, 1.0));
  CHECK_THROWS(contrastive_loss(0.5, 0, 0.0));
}

TEST_CASE("batch loss is the mean of the scalar losses") {
  Rng rng(401);
  const index_t n = 7, dim = 5;
  Tensor<double> e1 = Tensor<double>::uniform(Shape{n, 1, 1, dim}, rng, -1.0, 1.0);
  Tensor<double> e2 = Tensor<double>::uniform(Shape{n, 1, 1, dim}, rng, -1.0, 1.0);
  std::vector<int> labels;
  for (index_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_u64() & 1));

  Tensor<double> batch = contrastive_loss_batch(e1, e2, labels, 1.0);
  const std::vector<double> dists = pair_distances(e1, e2);
  double want = 0.0;
  for (index_t i = 0; i < n; ++i)
    want += contrastive_loss(dists[static_cast<std::size_t>(i)],
                             labels[static_cast<std::size_t>(i)], 1.0)
                .first;
  want /= static_cast<double>(n);
  CHECK(batch.data()[0] == doctest::Approx(want).epsilon(1e-12));

  std::vector<int> short_labels{0};
  CHECK_THROWS(contrastive_loss_batch(e1, e2, short_labels, 1.0));
}

TEST_CASE("loss sees only embedding differences") {
  Rng rng(402);
  const Shape s{4, 1, 1, 6};
  Tensor<double> e1 = Tensor<double>::uniform(s, rng, -1.0, 1.0);
  Tensor<double> e2 = Tensor<double>::uniform(s, rng, -1.0, 1.0);
  const std::vector<int> labels{0, 1, 0, 1};
  Tensor<double> base = contrastive_loss_batch(e1, e2, labels, 1.0);

  Tensor<double> t1 = e1.detached(), t2 = e2.detached();
  for (index_t i = 0; i < t1.size(); ++i) {
    const double shift = 0.37 * static_cast<double>(i % 6);
    t1.data()[i] += shift;
    t2.data()[i] += shift;
  }
  Tensor<double> moved = contrastive_loss_batch(t1, t2, labels, 1.0);
  CHECK(std::abs(moved.data()[0] - base.data()[0]) <= 1e-9);
}

TEST_CASE("rmsprop first step from rest matches the closed form") {
  auto net = init_network<double>(NetworkConfig::baseline(), 403);
  OptimizerState<double> opt(0.95, 1e-8);
  opt.init(net);
  const auto before = snapshot(net);

  auto named = net.named_trainable();
  auto& grads = named[0].second->node()->ensure_grad();
  grads[0] = 1.0;
  rmsprop_step(net, opt, 0.002);

  const double delta = named[0].second->data()[0] - before[0][0];
  CHECK(delta == doctest::Approx(-0.002 / (std::sqrt(0.05) + 1e-8)).epsilon(1e-12));
  CHECK(delta == doctest::Approx(-0.008944).epsilon(1e-4));  // published magnitude
  for (std::size_t i = 0; i < before[0].size(); ++i)
    if (i != 0) REQUIRE(named[0].second->values()[i] == before[0][i]);
  for (std::size_t k = 1; k < before.size(); ++k)
    CHECK(named[k].second->values() == before[k]);  // untouched tensors stay bitwise
  CHECK(opt.ms[0][0] == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("a gradient-free step leaves parameters in place") {
  auto net = init_network<double>(NetworkConfig::baseline(), 404);
  OptimizerState<double> opt(0.95, 1e-8);
  opt.init(net);
  opt.ms[0].assign(opt.ms[0].size(), 0.25);  // stale accumulator
  const auto before = snapshot(net);
  rmsprop_step(net, opt, 0.002);
  auto named = net.named_trainable();
  for (std::size_t k = 0; k < before.size(); ++k)
    CHECK(named[k].second->values() == before[k]);
  CHECK(opt.ms[0][0] == doctest::Approx(0.25 * 0.95).epsilon(1e-12));  // still decays
}

TEST_CASE("zero learning rate only feeds the accumulators") {
  auto net = init_network<double>(NetworkConfig::baseline(), 405);
  OptimizerState<double> opt(0.95, 1e-8);
  opt.init(net);
  auto named = net.named_trainable();
  auto& grads = named[2].second->node()->ensure_grad();
  for (auto& g : grads) g = 2.0;
  const auto before = snapshot(net);
  rmsprop_step(net, opt, 0.0);
  for (std::size_t k = 0; k < before.size(); ++k)
    CHECK(named[k].second->values() == before[k]);
  CHECK(opt.ms[2][0] == doctest::Approx(0.05 * 4.0).epsilon(1e-12));
}

TEST_CASE("at steady state the step size forgets the gradient scale") {
  auto probe = [](double g) {
    auto net = init_network<double>(NetworkConfig::baseline(), 406);
    OptimizerState<double> opt(0.95, 1e-8);
    opt.init(net);
    opt.ms[0][0] = g * g;  // converged second moment
    const double was = net.named_trainable()[0].second->data()[0];
    net.named_trainable()[0].second->node()->ensure_grad()[0] = g;
    rmsprop_step(net, opt, 0.002);
    return net.named_trainable()[0].second->data()[0] - was;
  };
  const double small = probe(0.1);
  const double large = probe(1.0);
  CHECK(std::abs(small + 0.002) <= 1e-6);
  CHECK(std::abs(large + 0.002) <= 1e-6);
  CHECK(std::abs(small - large) <= 1e-7);
}

TEST_CASE("the gaussian width is clamped to its floor after the step") {
  auto net = init_network<double>(NetworkConfig::gated_full(), 407);
  auto& p = net.gates.at(GateSite::k45).p;
  for (index_t i = 0; i < p.size(); ++i) p.data()[i] = 0.005;
  OptimizerState<double> opt(0.95, 1e-8);
  opt.init(net);
  p.node()->ensure_grad().assign(static_cast<std::size_t>(p.size()), 1.0);
  rmsprop_step(net, opt, 0.002);  // raw step ~0.0089 would cross zero
  for (index_t i = 0; i < p.size(); ++i) CHECK(p.data()[i] == kGatePFloor);
}

TEST_CASE("train configs reject out-of-range settings") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto expect_throw = [](auto mutate, const std::string& needle) {
    TrainConfig c;
    mutate(c);
    CHECK(testutil::throws_containing([&] { c.validate(); }, needle));
  };
  expect_throw([](TrainConfig& c) { c.margin = 0.0; }, "margin");
  expect_throw([](TrainConfig& c) { c.lr = -1.0; }, "lr");
  expect_throw([](TrainConfig& c) { c.lr_decay = 1.5; }, "lr_decay");
  expect_throw([](TrainConfig& c) { c.rmsprop_decay = 1.0; }, "rmsprop_decay");
  expect_throw([](TrainConfig& c) { c.batch_size = 0; }, "batch_size");
  expect_throw([](TrainConfig& c) { c.epochs = 0; }, "epochs");
  expect_throw([](TrainConfig& c) { c.val_fraction = 1.0; }, "val_fraction");
  expect_throw([](TrainConfig& c) { c.early_stop_patience = 0; }, "patience");
}

TEST_CASE("non-finite losses abort training with the iteration number") {
  const std::string dir = testutil::temp_dir("diverge");
  Manifest m = tiny_synth(dir + "/data", 3, 411);
  auto net = init_network<float>(NetworkConfig::baseline(), 411);
  net.blocks[0].filters.data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = quick_config();
  cfg.max_iters = 1;
  CHECK(testutil::throws_containing(
      [&] { train(net, m, cfg, 1, dir + "/out"); },
      "training diverged (non-finite loss) at iteration 1"));
  fs::remove_all(dir);
}

TEST_CASE("training without train entries fails up front") {
  Manifest m;
  m.entries = {{"x", 0, 0, Split::kQuery}, {"x", 0, 1, Split::kGallery}};
  auto net = init_network<float>(NetworkConfig::baseline(), 412);
  TrainConfig cfg = quick_config();
  CHECK(testutil::throws_containing([&] { train(net, m, cfg, 1, ""); },
                                    "no train entries"));
}

TEST_CASE("a fixed seed reproduces checkpoints and logs to the byte") {
  const std::string dir = testutil::temp_dir("train_det");
  Manifest m = tiny_synth(dir + "/data", 3, 413);

  auto run = [&](const std::string& tag) {
    const std::string out = dir + "/" + tag;
    fs::create_directories(out);
    auto net = init_network<float>(NetworkConfig::gated_full(), 55);
    MetricsLogger log(out + "/metrics.jsonl");
    TrainConfig cfg = quick_config();
    TrainResult res = train(net, m, cfg, 99, out, &log);
    return std::make_pair(out, res);
  };
  auto [o1, r1] = run("a");
  auto [o2, r2] = run("b");

  CHECK(r1.iterations == r2.iterations);
  CHECK(r1.iterations > 0);
  CHECK(r1.epochs_run == 2);
  CHECK(r1.first_iter_loss == r2.first_iter_loss);
  CHECK(std::isfinite(r1.first_iter_loss));
  CHECK(r1.last_loss == r2.last_loss);
  CHECK(r1.mean_last10_loss == r2.mean_last10_loss);
  REQUIRE(r1.checkpoints.size() == 2);
  CHECK(r1.checkpoints[0] == o1 + "/epoch_1.ckpt");
  CHECK(r1.checkpoints[1] == o1 + "/epoch_2.ckpt");
  for (int e = 1; e <= 2; ++e) {
    const std::string name = "/epoch_" + std::to_string(e) + ".ckpt";
    CHECK(testutil::read_file_bytes(o1 + name) == testutil::read_file_bytes(o2 + name));
    CheckpointInfo info = read_checkpoint_info(o1 + name);
    CHECK(info.epoch == e);
  }
  CHECK(testutil::read_file_bytes(o1 + "/metrics.jsonl") ==
        testutil::read_file_bytes(o2 + "/metrics.jsonl"));
  CHECK(std::isnan(r1.best_val_rank1));  // no validation split configured
  CHECK_FALSE(r1.early_stopped);
  fs::remove_all(dir);
}

TEST_CASE("saturating validation accuracy stops the run early") {
  const std::string dir = testutil::temp_dir("train_stop");
  Manifest m = tiny_synth(dir + "/data", 4, 414);
  auto net = init_network<float>(NetworkConfig::baseline(), 56);
  TrainConfig cfg = quick_config();
  cfg.lr = 1e-12;  // effectively frozen: the validation score cannot move
  cfg.val_fraction = 0.5;
  cfg.epochs = 10;
  cfg.early_stop_patience = 2;
  TrainResult res = train(net, m, cfg, 7, dir + "/out");
  CHECK(res.early_stopped);
  CHECK(res.epochs_run == 3);  // 1 improvement + 2 stale epochs
  CHECK(std::isfinite(res.best_val_rank1));
  CHECK(res.best_val_rank1 >= 0.0);
  CHECK(res.best_val_rank1 <= 1.0);
  fs::remove_all(dir);
}

}  // TEST_SUITE
