// digitsum: command-line driver for the weakly supervised digit pipeline.
//
//   digitsum run --w 2 --h 2 --data /path/to/mnist
//   digitsum sweep --ws 1,2,4,8 --hs 2,4 --artifacts runs/sweep --csv sweep.csv
//
// Exit status: 0 success, 1 stage failure, 2 bad arguments or configuration, 3 refused resume.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "digitsum/digitsum.hpp"

namespace {

using namespace digitsum;

struct Flags {
  std::string config_file;
  bool no_resume = false;
  std::string embedding;
  std::string export_idx;
};

// Flags mirror RunConfig fields. Values given on the command line override the config file.
void add_config_flags(CLI::App& app, RunConfig& cfg, Flags& flags) {
  app.set_help_flag("--help", "print this help");  // -h would clash with --h
  app.add_option("--config", flags.config_file, "flat JSON config file");
  app.add_option("--w", cfg.w, "digits per number");
  app.add_option("--h", cfg.h, "numbers per example");
  app.add_option("--factor", cfg.oversample_factor, "times each image appears in the corpus");
  app.add_option("--seed", cfg.seed, "run seed");
  app.add_option("--batch-size", cfg.batch_size, "examples per assignment batch");
  app.add_option("--embedding", flags.embedding, "autoencoder | pca")->check(CLI::IsMember({"autoencoder", "pca"}));
  app.add_option("--embed-dim", cfg.embed_dim, "embedding width");
  app.add_option("--ae-epochs", cfg.ae_epochs, "autoencoder epochs");
  app.add_option("--ae-seed", cfg.ae_seed, "autoencoder seed");
  app.add_option("--ae-optimizer", cfg.ae_optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
  app.add_option("--ae-init", cfg.ae_init, "uniform | he")->check(CLI::IsMember({"uniform", "he"}));
  app.add_option("--ae-lr", cfg.ae_lr, "autoencoder learning rate");
  app.add_option("--ae-momentum", cfg.ae_momentum, "autoencoder momentum (sgd)");
  app.add_option("--ae-batch", cfg.ae_batch, "autoencoder minibatch");
  app.add_option("--k", cfg.k, "cluster count");
  app.add_option("--kmeans-max-iter", cfg.kmeans_max_iter, "Lloyd iteration cap");
  app.add_option("--kmeans-tol", cfg.kmeans_tol, "centroid shift tolerance");
  app.add_option("--kmeans-n-init", cfg.kmeans_n_init, "k-means restarts, best inertia kept");
  app.add_option("--radii", cfg.radii, "radius schedule")->delimiter(',');
  app.add_option("--cnn-epochs", cfg.cnn_epochs, "classifier epochs");
  app.add_option("--cnn-lr", cfg.cnn_lr, "classifier learning rate");
  app.add_option("--cnn-momentum", cfg.cnn_momentum, "classifier momentum");
  app.add_option("--cnn-batch", cfg.cnn_batch, "classifier minibatch");
  app.add_flag("--synthetic", cfg.synthetic, "use Gaussian clusters instead of MNIST");
  app.add_option("--synth-images", cfg.synth_images, "synthetic training images");
  app.add_option("--synth-test-images", cfg.synth_test_images, "synthetic test images");
  app.add_option("--synth-separation", cfg.synth_separation, "minimum centroid distance");
  app.add_option("--synth-dim", cfg.synth_dim, "synthetic dimension");
  app.add_option("--data", cfg.data_dir, "MNIST directory (DIGITSUM_DATA overrides)");
  app.add_option("--artifacts", cfg.artifacts_dir, "run directory");
  app.add_option("--ae-cache", cfg.ae_cache_dir, "directory for shared autoencoder weights");
  app.add_flag("--no-resume", flags.no_resume, "recompute stages even if artifacts exist");
}

// Applies the config file underneath the flags the user typed.
RunConfig resolve(const CLI::App& app, const RunConfig& from_flags, const Flags& flags) {
  RunConfig cfg = from_flags;
  if (!flags.config_file.empty()) {
    std::ifstream in(flags.config_file);
    if (!in) throw argument_error("cannot open config " + flags.config_file);
    const json file = json::parse(in);
    cfg = config_from_json(file);
    // Re-apply explicitly given flags.
    const json given = to_json(from_flags);
    for (const auto* opt : app.get_options()) {
      if (opt->count() == 0) continue;
      std::string key = opt->get_name();
      if (key.rfind("--", 0) != 0) continue;
      key = key.substr(2);
      for (auto& ch : key) ch = ch == '-' ? '_' : ch;
      if (key == "data" || key == "artifacts" || key == "ae_cache") key += "_dir";
      if (given.contains(key)) cfg = config_from_json({{key, given.at(key)}}, cfg);
    }
  }
  if (!flags.embedding.empty()) cfg.embedding = parse_backend(flags.embedding);
  return cfg;
}

int report_exit(const RunReport& r) {
  std::cout << to_json(r).dump(2) << std::endl;
  return r.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised digit classification from grid sums"};
  app.require_subcommand(1);
  app.set_help_flag("-?,--help", "print this help");

  struct StageCommand {
    const char* name;
    Stage stage;
    const char* help;
  };
  const StageCommand stages[] = {
      {"generate-data", Stage::data, "load or synthesize images and build corpora"},
      {"embed", Stage::embed, "pretrain or load the embedding and encode images"},
      {"cluster", Stage::cluster, "k-means in embedding space"},
      {"assign", Stage::assign, "solve the cluster to digit assignment"},
      {"infer", Stage::infer, "propagate constraints to correct labels"},
      {"train", Stage::train, "train the classifier on inferred labels"},
      {"evaluate", Stage::evaluate, "score classification and addition on the test split"},
      {"run", Stage::evaluate, "all stages"},
  };

  RunConfig cfg;
  Flags flags;
  std::vector<std::pair<CLI::App*, Stage>> commands;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_config_flags(*sub, cfg, flags);
    commands.emplace_back(sub, s.stage);
  }
  commands.front().first->add_option("--export-idx", flags.export_idx, "also write the training store as IDX files here");

  auto* sweep_cmd = app.add_subcommand("sweep", "run a grid of configurations and write CSV");
  add_config_flags(*sweep_cmd, cfg, flags);
  std::vector<int> ws{1, 2, 4, 8}, hs{2, 4}, factors{1};
  std::vector<std::uint64_t> seeds{0};
  int workers = 1;
  std::string csv_path = "sweep.csv";
  sweep_cmd->add_option("--ws", ws, "w values")->delimiter(',');
  sweep_cmd->add_option("--hs", hs, "h values")->delimiter(',');
  sweep_cmd->add_option("--factors", factors, "oversample factors")->delimiter(',');
  sweep_cmd->add_option("--seeds", seeds, "seeds")->delimiter(',');
  sweep_cmd->add_option("--workers", workers, "concurrent runs")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--csv", csv_path, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    Workspace ws_cache(&std::cerr);
    for (auto& [sub, stage] : commands) {
      if (!sub->parsed()) continue;
      const RunConfig resolved = resolve(*sub, cfg, flags);
      const RunReport report = run_pipeline(resolved, ws_cache, stage, !flags.no_resume);
      if (!flags.export_idx.empty() && report.ok()) {
        const auto store = detail::load_data(resolved, ws_cache).train;
        std::filesystem::create_directories(flags.export_idx);
        save_idx(store, std::filesystem::path(flags.export_idx) / "train-images-idx3-ubyte",
                 std::filesystem::path(flags.export_idx) / "train-labels-idx1-ubyte");
      }
      return report_exit(report);
    }

    const RunConfig base = resolve(*sweep_cmd, cfg, flags);
    std::vector<RunConfig> configs;
    for (int w : ws) {
      for (int h : hs) {
        for (int f : factors) {
          for (auto s : seeds) {
            RunConfig c = base;
            c.w = w;
            c.h = h;
            c.oversample_factor = f;
            c.seed = s;
            c.artifacts_dir = (std::filesystem::path(base.artifacts_dir) /
                               ("w" + std::to_string(w) + "_h" + std::to_string(h) + "_f" + std::to_string(f) + "_s" +
                                std::to_string(s)))
                                  .string();
            if (c.ae_cache_dir.empty()) c.ae_cache_dir = (std::filesystem::path(base.artifacts_dir) / "autoencoders").string();
            configs.push_back(std::move(c));
          }
        }
      }
    }
    const auto reports = sweep(configs, ws_cache, workers);
    std::ofstream csv(csv_path);
    if (!csv) throw format_error("cannot write " + csv_path);
    write_sweep_csv(csv, reports);
    write_sweep_csv(std::cout, reports);
    bool all_ok = true;
    for (const auto& r : reports) all_ok = all_ok && r.ok();
    return all_ok ? 0 : 1;
  } catch (const argument_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const consistency_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
