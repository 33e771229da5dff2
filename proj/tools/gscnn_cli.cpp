#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gscnn/config.hpp"
#include "gscnn/data.hpp"
#include "gscnn/evaluation.hpp"
#include "gscnn/metrics.hpp"
#include "gscnn/netcheck.hpp"
#include "gscnn/network.hpp"
#include "gscnn/serialize.hpp"
#include "gscnn/training.hpp"

namespace fs = std::filesystem;
using namespace gscnn;

namespace {

// The config file is applied before the real parse so every flag given on
// the command line overrides its file value (flags > file > defaults).
std::string preparse_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

template <typename F>
int with_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f(float(0));
  if (precision == "f64") return f(double(0));
  throw std::invalid_argument("precision must be f32 or f64, got '" + precision + "'");
}

void add_config_option(CLI::App* cmd) {
  // The file itself is handled by preparse_config_path; this only teaches the
  // parser to accept the flag. The sink must outlive parse(), hence static.
  static std::string sink;
  cmd->add_option("--config", sink,
                  "Flat key = value config file, applied before flag overrides");
}

void add_data_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--manifest", rc.manifest, "Dataset manifest CSV");
  cmd->add_option("--data-root", rc.data_root,
                  "Image root (default: $GSCNN_DATA_ROOT, then the manifest directory)");
  cmd->add_option("--out-dir", rc.out_dir, "Output directory")->capture_default_str();
}

void add_network_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--gates", rc.gates,
                  "Gate boundaries: none, all, or a list like 4-5,5-6")
      ->capture_default_str();
  cmd->add_flag("--include-final-fc,!--no-final-fc", rc.include_final_fc,
                "Keep the final embedding layer (block 7)");
  cmd->add_flag("--normalize-embeddings", rc.normalize_embeddings,
                "L2-normalize embeddings before the distance");
  cmd->add_flag("--mg-stop-gradient", rc.mg_stop_gradient,
                "Treat gate masks as constants in the backward pass");
  cmd->add_option("--p-init", rc.p_init, "Initial Gaussian gate width")->capture_default_str();
  cmd->add_option("--precision", rc.precision, "f32 or f64")->capture_default_str();
  cmd->add_option("--seed", rc.seed, "Master RNG seed")->capture_default_str();
}

int cmd_train(const RunConfig& rc) {
  if (rc.manifest.empty())
    throw std::invalid_argument("no manifest given (set --manifest or the manifest config key)");
  const Manifest m = load_manifest(rc.manifest, resolve_data_root(rc.data_root));
  const NetworkConfig nc = rc.network_config();
  const TrainConfig tc = rc.train_config();
  fs::create_directories(rc.out_dir);
  MetricsLogger metrics(rc.out_dir + "/metrics.jsonl");
  return with_precision(rc.precision, [&](auto tag) {
    using T = decltype(tag);
    NetworkParams<T> net = init_network<T>(nc, rc.seed);
    const TrainResult res = train(net, m, tc, rc.seed, rc.out_dir, &metrics);
    std::cout << "gates=" << gates_to_string(nc.gate_placements) << " params="
              << net.trainable_count() << " precision=" << rc.precision << "\n";
    std::cout << "iterations=" << res.iterations << " epochs=" << res.epochs_run
              << (res.early_stopped ? " (early stop)" : "") << "\n";
    std::cout << "loss first=" << res.first_iter_loss << " last=" << res.last_loss
              << " mean_last10=" << res.mean_last10_loss << "\n";
    if (std::isfinite(res.best_val_rank1))
      std::cout << "best_val_rank1=" << res.best_val_rank1 << "\n";
    std::cout << "checkpoints=" << res.checkpoints.size() << " under " << rc.out_dir << "\n";
    return 0;
  });
}

int cmd_eval(const RunConfig& rc, const std::vector<std::string>& checkpoints,
             const std::string& split, bool save_distances) {
  if (rc.manifest.empty())
    throw std::invalid_argument("no manifest given (set --manifest or the manifest config key)");
  if (checkpoints.empty()) throw std::invalid_argument("no checkpoints given (--checkpoint)");
  if (rc.workers < 1) throw std::invalid_argument("workers must be >= 1");
  const Manifest m = load_manifest(rc.manifest, resolve_data_root(rc.data_root));

  std::vector<index_t> q, g;
  if (split == "test") {
    q = m.split_indices(Split::kQuery);
    g = m.split_indices(Split::kGallery);
  } else if (split == "train" || split == "val") {
    const auto pool = m.split_indices(split == "train" ? Split::kTrain : Split::kVal);
    derive_query_gallery(m, pool, &q, &g);
  } else {
    throw std::invalid_argument("unknown eval split '" + split + "' (test, train or val)");
  }
  const Protocol protocol = parse_protocol(rc.protocol);

  return with_precision(rc.precision, [&](auto tag) {
    using T = decltype(tag);
    const DistanceMatrix dm =
        compute_distance_matrix<T>(checkpoints, m, q, g, static_cast<int>(rc.workers));
    dm.validate();
    const RankingResult r = cmc_map(dm, protocol);
    fs::create_directories(rc.out_dir);
    save_results_json(rc.out_dir + "/results.json", r);
    if (save_distances) {
      save_distance_csv(rc.out_dir + "/distances.csv", dm);
      save_distance_tensor(rc.out_dir + "/distances.gscn", dm);
    }
    std::cout << results_json(r) << "\n";
    return 0;
  });
}

void print_check_line(const std::string& name, const GradCheckEntry& e, double tol) {
  std::cout << "  " << name << " max_rel_err=" << e.max_rel_err << " n=" << e.n_checked;
  if (e.n_skipped > 0) std::cout << " skipped=" << e.n_skipped;
  if (e.worst_coord >= 0)
    std::cout << " worst(a=" << e.worst_analytic << " fd=" << e.worst_numeric << ")";
  if (!e.finite)
    std::cout << " NON-FINITE";
  else if (e.max_rel_err >= tol || e.n_checked == 0)
    std::cout << " FAIL";
  std::cout << "\n";
}

int cmd_gradcheck(const RunConfig& rc, index_t coords, double eps, bool skip_layers,
                  bool inject_bug) {
  const NetworkConfig nc = rc.network_config();
  constexpr double tol = 1e-4;
  std::cout.setf(std::ios::scientific, std::ios::floatfield);
  std::cout.precision(3);
  bool ok = true;

  if (!skip_layers) {
    std::cout << "layer checks (f64, eps=" << eps << ", coords<=" << coords << ")\n";
    for (const NamedReport& nr : layer_gradchecks<double>(rc.seed, coords, eps)) {
      for (const GradCheckEntry& e : nr.report.entries)
        print_check_line(nr.name + "/" + e.name, e, tol);
      ok = ok && nr.report.passed(tol);
    }
  }

  std::cout << "network check (gates=" << gates_to_string(nc.gate_placements) << ")\n";
  const GradCheckReport net_report =
      network_gradcheck<double>(nc, rc.seed, coords, eps, inject_bug);
  for (const GradCheckEntry& e : net_report.entries) print_check_line(e.name, e, tol);
  ok = ok && net_report.passed(tol);

  std::cout << (ok ? "gradcheck PASS" : "gradcheck FAIL") << " (tol=" << tol << ")\n";
  return ok ? 0 : 1;
}

int cmd_synth(const SyntheticSpec& spec, std::uint64_t seed, const std::string& out_dir) {
  const Manifest m = generate_synthetic(spec, seed, out_dir);
  std::cout << "wrote " << m.entries.size() << " images and " << out_dir
            << "/manifest.csv\n";
  return 0;
}

int cmd_dump_gates(const RunConfig& rc, const std::string& checkpoint,
                   const std::string& img1_path, const std::string& img2_path) {
  return with_precision(rc.precision, [&](auto tag) {
    using T = decltype(tag);
    NetworkParams<T> net = load_checkpoint<T>(checkpoint);
    Tensor<T> i1 = load_image<T>(img1_path, net.config.input_h, net.config.input_w);
    Tensor<T> i2 = load_image<T>(img2_path, net.config.input_h, net.config.input_w);
    if (!rc.manifest.empty()) {
      const Manifest m = load_manifest(rc.manifest, resolve_data_root(rc.data_root));
      const Tensor<T> mean = mean_image_or_zero<T>(m, net.config.input_h, net.config.input_w);
      subtract_image(i1, mean);
      subtract_image(i2, mean);
    }
    fs::create_directories(rc.out_dir);
    for (const std::string& f : dump_gate_masks(net, i1, i2, rc.out_dir))
      std::cout << f << "\n";
    return 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig rc;
  const std::string config_path = preparse_config_path(argc, argv);
  if (!config_path.empty()) {
    try {
      load_config_file(rc, config_path);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }

  CLI::App app{"Siamese CNN with matching gates for pairwise person re-identification"};
  app.require_subcommand(1);
  add_config_option(&app);
  int rcode = 0;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write per-epoch checkpoints");
  add_config_option(train_cmd);
  add_data_options(train_cmd, rc);
  add_network_options(train_cmd, rc);
  train_cmd->add_option("--margin", rc.margin, "Contrastive margin")->capture_default_str();
  train_cmd->add_option("--lr", rc.lr, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--lr-decay", rc.lr_decay, "Per-epoch LR factor")->capture_default_str();
  train_cmd->add_option("--rmsprop-decay", rc.rmsprop_decay, "RMSProp decay")
      ->capture_default_str();
  train_cmd->add_option("--rmsprop-eps", rc.rmsprop_eps, "RMSProp epsilon")
      ->capture_default_str();
  train_cmd->add_option("--batch-size", rc.batch_size, "Pairs per batch")->capture_default_str();
  train_cmd->add_option("--epochs", rc.epochs, "Epoch count")->capture_default_str();
  train_cmd->add_option("--negatives", rc.negatives_per_positive,
                        "Negative pairs per positive pair")
      ->capture_default_str();
  train_cmd->add_flag("--augment,!--no-augment", rc.augment,
                      "Flip + translate augmentation of positive pairs");
  train_cmd->add_option("--val-fraction", rc.val_fraction,
                        "Identity fraction carved off train for validation when the manifest "
                        "has no val split")
      ->capture_default_str();
  train_cmd->add_option("--early-stop-min-delta", rc.early_stop_min_delta,
                        "Rank-1 percentage points counted as improvement")
      ->capture_default_str();
  train_cmd->add_option("--early-stop-patience", rc.early_stop_patience,
                        "Epochs without improvement before stopping")
      ->capture_default_str();
  train_cmd->add_option("--max-iters", rc.max_iters, "Stop after N iterations (0 = full run)")
      ->capture_default_str();
  train_cmd->callback([&]() { rcode = cmd_train(rc); });

  auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints on a manifest split");
  add_config_option(eval_cmd);
  add_data_options(eval_cmd, rc);
  eval_cmd->add_option("--precision", rc.precision, "f32 or f64")->capture_default_str();
  std::vector<std::string> eval_checkpoints;
  eval_cmd->add_option("--checkpoint", eval_checkpoints,
                       "Checkpoint file; repeat to average distances over epochs");
  eval_cmd->add_option("--protocol", rc.protocol, "sq or mq")->capture_default_str();
  std::string eval_split = "test";
  eval_cmd->add_option("--split", eval_split, "test (query/gallery), train or val")
      ->capture_default_str();
  eval_cmd->add_option("--workers", rc.workers, "Threads over query rows")
      ->capture_default_str();
  bool save_distances = false;
  eval_cmd->add_flag("--save-distances", save_distances,
                     "Also write distances.csv and distances.gscn");
  eval_cmd->callback([&]() { rcode = cmd_eval(rc, eval_checkpoints, eval_split, save_distances); });

  auto* grad_cmd = app.add_subcommand("gradcheck",
                                      "Finite-difference checks per layer and end-to-end (f64)");
  add_config_option(grad_cmd);
  add_network_options(grad_cmd, rc);
  index_t grad_coords = 200;
  double grad_eps = 1e-5;
  bool grad_skip_layers = false;
  bool grad_inject_bug = false;
  grad_cmd->add_option("--coords", grad_coords, "Sampled coordinates per tensor")
      ->capture_default_str();
  grad_cmd->add_option("--eps", grad_eps, "Central-difference step")->capture_default_str();
  grad_cmd->add_flag("--skip-layers", grad_skip_layers, "Only run the end-to-end check");
  grad_cmd->add_flag("--inject-backward-bug", grad_inject_bug)->group("");
  grad_cmd->callback(
      [&]() { rcode = cmd_gradcheck(rc, grad_coords, grad_eps, grad_skip_layers, grad_inject_bug); });

  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic two-camera dataset");
  add_config_option(synth_cmd);
  SyntheticSpec spec;
  synth_cmd->add_option("--identities", spec.n_identities, "Identity count")
      ->capture_default_str();
  synth_cmd->add_option("--per-id", spec.images_per_identity, "Images per identity")
      ->capture_default_str();
  synth_cmd->add_option("--cameras", spec.cameras, "Camera count")->capture_default_str();
  synth_cmd->add_option("--cue-fraction", spec.local_cue_fraction,
                        "Fraction of identities generated as twin pairs differing only by a "
                        "local cue patch")
      ->capture_default_str();
  synth_cmd->add_option("--cue-h", spec.cue_h, "Cue patch height")->capture_default_str();
  synth_cmd->add_option("--cue-w", spec.cue_w, "Cue patch width")->capture_default_str();
  synth_cmd->add_option("--noise-sigma", spec.noise_sigma, "Per-pixel Gaussian noise")
      ->capture_default_str();
  synth_cmd->add_option("--height", spec.height, "Image height")->capture_default_str();
  synth_cmd->add_option("--width", spec.width, "Image width")->capture_default_str();
  synth_cmd->add_option("--test-fraction", spec.test_fraction, "Identity fraction held out "
                        "as query/gallery")
      ->capture_default_str();
  synth_cmd->add_option("--val-fraction", spec.val_fraction, "Identity fraction for the val split")
      ->capture_default_str();
  synth_cmd->add_option("--seed", rc.seed, "Master RNG seed")->capture_default_str();
  synth_cmd->add_option("--out-dir", rc.out_dir, "Output directory")->capture_default_str();
  synth_cmd->callback([&]() { rcode = cmd_synth(spec, rc.seed, rc.out_dir); });

  auto* dump_cmd = app.add_subcommand("dump-gates",
                                      "Write per-gate mask grids and profiles for one pair");
  add_config_option(dump_cmd);
  add_data_options(dump_cmd, rc);
  dump_cmd->add_option("--precision", rc.precision, "f32 or f64")->capture_default_str();
  std::string dump_checkpoint, dump_img1, dump_img2;
  dump_cmd->add_option("--checkpoint", dump_checkpoint, "Trained checkpoint")->required();
  dump_cmd->add_option("img1", dump_img1, "First image")->required();
  dump_cmd->add_option("img2", dump_img2, "Second image")->required();
  dump_cmd->callback([&]() { rcode = cmd_dump_gates(rc, dump_checkpoint, dump_img1, dump_img2); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rcode;
}
