#pragma once

// End-to-end orchestration: data -> embedding -> clustering -> digit assignment -> label
// inference -> classifier training -> evaluation. Every stage persists its artifact into the run
// directory stamped with the run's config hash, so a later invocation resumes from the last
// completed stage and refuses artifacts written under a different configuration.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "digitsum/assignment.hpp"
#include "digitsum/classifier.hpp"
#include "digitsum/clustering.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/embedding.hpp"
#include "digitsum/error.hpp"
#include "digitsum/evaluation.hpp"
#include "digitsum/inference.hpp"
#include "digitsum/tensor_io.hpp"

namespace digitsum {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Stage { data = 0, embed, cluster, assign, infer, train, evaluate };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::data: return "data";
    case Stage::embed: return "embed";
    case Stage::cluster: return "cluster";
    case Stage::assign: return "assign";
    case Stage::infer: return "infer";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

enum class EmbeddingBackend { autoencoder, pca };

struct RunConfig {
  int w = 2;
  int h = 2;
  int oversample_factor = 1;
  std::uint64_t seed = 0;
  int batch_size = 100;

  EmbeddingBackend embedding = EmbeddingBackend::autoencoder;
  int embed_dim = 10;
  int ae_epochs = 100;
  std::uint64_t ae_seed = 0;
  std::string ae_optimizer = "adam";
  std::string ae_init = "uniform";
  double ae_lr = 1e-3;
  double ae_momentum = 0.9;
  int ae_batch = 256;

  int k = 10;
  int kmeans_max_iter = 300;
  double kmeans_tol = 1e-4;
  int kmeans_n_init = 10;

  std::vector<int> radii{1, 2, 3, 4, 5};

  int cnn_epochs = 10;
  double cnn_lr = 0.01;
  double cnn_momentum = 0.9;
  int cnn_batch = 32;

  bool synthetic = false;
  int synth_images = 4000;
  int synth_test_images = 1000;
  double synth_separation = 60.0;
  int synth_dim = 784;

  // Locations; not part of the config hash.
  std::string data_dir = "data/mnist";
  std::string artifacts_dir = "runs/default";
  std::string ae_cache_dir;  // empty: <artifacts_dir>/..
};

inline const char* to_string(EmbeddingBackend b) { return b == EmbeddingBackend::pca ? "pca" : "autoencoder"; }

inline EmbeddingBackend parse_backend(const std::string& s) {
  if (s == "pca") return EmbeddingBackend::pca;
  if (s == "autoencoder") return EmbeddingBackend::autoencoder;
  throw argument_error("unknown embedding backend '" + s + "' (expected autoencoder or pca)");
}

// Fields that determine results.
inline json config_content(const RunConfig& c) {
  return {{"w", c.w},
          {"h", c.h},
          {"factor", c.oversample_factor},
          {"seed", c.seed},
          {"batch_size", c.batch_size},
          {"embedding", to_string(c.embedding)},
          {"embed_dim", c.embed_dim},
          {"ae_epochs", c.ae_epochs},
          {"ae_seed", c.ae_seed},
          {"ae_optimizer", c.ae_optimizer},
          {"ae_init", c.ae_init},
          {"ae_lr", c.ae_lr},
          {"ae_momentum", c.ae_momentum},
          {"ae_batch", c.ae_batch},
          {"k", c.k},
          {"kmeans_max_iter", c.kmeans_max_iter},
          {"kmeans_tol", c.kmeans_tol},
          {"kmeans_n_init", c.kmeans_n_init},
          {"radii", c.radii},
          {"cnn_epochs", c.cnn_epochs},
          {"cnn_lr", c.cnn_lr},
          {"cnn_momentum", c.cnn_momentum},
          {"cnn_batch", c.cnn_batch},
          {"synthetic", c.synthetic},
          {"synth_images", c.synth_images},
          {"synth_test_images", c.synth_test_images},
          {"synth_separation", c.synth_separation},
          {"synth_dim", c.synth_dim}};
}

inline json to_json(const RunConfig& c) {
  json j = config_content(c);
  j["data_dir"] = c.data_dir;
  j["artifacts_dir"] = c.artifacts_dir;
  j["ae_cache_dir"] = c.ae_cache_dir;
  return j;
}

// Flat JSON; absent keys keep the values already in `base`.
inline RunConfig config_from_json(const json& j, RunConfig c = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("w", c.w);
  get("h", c.h);
  get("factor", c.oversample_factor);
  get("seed", c.seed);
  get("batch_size", c.batch_size);
  if (j.contains("embedding")) c.embedding = parse_backend(j.at("embedding").get<std::string>());
  get("embed_dim", c.embed_dim);
  get("ae_epochs", c.ae_epochs);
  get("ae_seed", c.ae_seed);
  get("ae_optimizer", c.ae_optimizer);
  get("ae_init", c.ae_init);
  get("ae_lr", c.ae_lr);
  get("ae_momentum", c.ae_momentum);
  get("ae_batch", c.ae_batch);
  get("k", c.k);
  get("kmeans_max_iter", c.kmeans_max_iter);
  get("kmeans_tol", c.kmeans_tol);
  get("kmeans_n_init", c.kmeans_n_init);
  get("radii", c.radii);
  get("cnn_epochs", c.cnn_epochs);
  get("cnn_lr", c.cnn_lr);
  get("cnn_momentum", c.cnn_momentum);
  get("cnn_batch", c.cnn_batch);
  get("synthetic", c.synthetic);
  get("synth_images", c.synth_images);
  get("synth_test_images", c.synth_test_images);
  get("synth_separation", c.synth_separation);
  get("synth_dim", c.synth_dim);
  get("data_dir", c.data_dir);
  get("artifacts_dir", c.artifacts_dir);
  get("ae_cache_dir", c.ae_cache_dir);
  return c;
}

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(config_content(c).dump()); }

// Hash of the fields the shared autoencoder depends on.
inline std::string autoencoder_hash(const RunConfig& c) {
  const json j = {{"epochs", c.ae_epochs},     {"seed", c.ae_seed},       {"optimizer", c.ae_optimizer},
                  {"init", c.ae_init},
                  {"lr", c.ae_lr},             {"momentum", c.ae_momentum}, {"batch", c.ae_batch},
                  {"embed_dim", c.embed_dim},  {"synthetic", c.synthetic},
                  {"synthetic_data", c.synthetic ? json{c.seed, c.synth_images, c.synth_test_images, c.synth_separation,
                                                        c.synth_dim}
                                                 : json(nullptr)}};
  return fnv1a_hex(j.dump());
}

inline AutoencoderHyper autoencoder_hyper(const RunConfig& c) {
  AutoencoderHyper hy;
  hy.batch_size = c.ae_batch;
  hy.learning_rate = c.ae_lr;
  hy.momentum = c.ae_momentum;
  if (c.ae_optimizer == "adam") hy.optimizer = AeOptimizer::adam;
  else if (c.ae_optimizer == "sgd") hy.optimizer = AeOptimizer::sgd_momentum;
  else throw argument_error("unknown autoencoder optimizer '" + c.ae_optimizer + "' (expected adam or sgd)");
  hy.init = parse_ae_init(c.ae_init);
  return hy;
}

// Checks hard limits and returns warnings for values outside the tested envelope.
inline std::vector<std::string> validate(const RunConfig& c) {
  if (c.w < 1 || c.h < 1) throw argument_error("w and h must be >= 1");
  if (c.w > 18) throw argument_error("w above 18 overflows 64-bit sums");
  if (c.oversample_factor < 1) throw argument_error("factor must be >= 1");
  if (c.batch_size < 1) throw argument_error("batch_size must be >= 1");
  if (c.k < 1 || c.k > 10) throw argument_error("k must be in [1,10]");
  if (c.kmeans_n_init < 1) throw argument_error("kmeans_n_init must be >= 1");
  if (c.cnn_epochs < 0 || c.ae_epochs < 0) throw argument_error("epoch counts must be >= 0");
  for (int r : c.radii) {
    if (r < 1 || r > 5) throw argument_error("radii must lie in [1,5]");
  }
  autoencoder_hyper(c);
  std::vector<std::string> warnings;
  if (c.w > 10) warnings.push_back("w=" + std::to_string(c.w) + " is outside the tested range 1..10");
  if (c.h > 6) warnings.push_back("h=" + std::to_string(c.h) + " is outside the tested range 1..6");
  return warnings;
}

struct RunReport {
  RunConfig config;
  std::string hash;
  std::string status = "ok";
  std::string failed_stage;
  std::string error;

  std::optional<double> purity;
  std::optional<DigitAssignment> assignment;
  std::optional<double> label_acc_pre;
  std::optional<double> label_acc_post;
  json inference_summary;
  std::optional<double> cls_acc;
  std::optional<double> add_acc;
  std::size_t train_images = 0;
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;

  // Wall-clock seconds. Stage times sum to total; autoencoder pretraining and evaluation are
  // reported on their own.
  std::map<std::string, double> stage_seconds{{"cluster", 0.0}, {"assign", 0.0}, {"infer", 0.0}, {"train", 0.0}};
  double autoencoder_seconds = 0.0;
  double evaluate_seconds = 0.0;
  std::vector<std::string> resumed;

  double total_seconds() const {
    double t = 0.0;
    for (const auto& [_, s] : stage_seconds) t += s;
    return t;
  }
  bool ok() const { return status == "ok"; }
};

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const RunReport& r) {
  json metrics = {{"purity", optional_json(r.purity)},
                  {"label_acc_pre", optional_json(r.label_acc_pre)},
                  {"label_acc_post", optional_json(r.label_acc_post)},
                  {"cls_acc", optional_json(r.cls_acc)},
                  {"add_acc", optional_json(r.add_acc)},
                  {"assignment", r.assignment ? to_json(*r.assignment) : json(nullptr)},
                  {"inference", r.inference_summary.is_null() ? json(nullptr) : r.inference_summary}};
  json timing = {{"stages", r.stage_seconds},
                 {"total", r.total_seconds()},
                 {"autoencoder", r.autoencoder_seconds},
                 {"evaluate", r.evaluate_seconds},
                 {"resumed", r.resumed}};
  json j = {{"config", to_json(r.config)},
            {"config_hash", r.hash},
            {"status", r.status},
            {"metrics", metrics},
            {"counts", {{"train_images", r.train_images}, {"train_examples", r.train_examples}, {"test_examples", r.test_examples}}},
            {"timing", timing}};
  if (!r.ok()) {
    j["failed_stage"] = r.failed_stage;
    j["error"] = r.error;
  }
  return j;
}

inline const char* csv_header() {
  return "w,h,factor,seed,purity,label_acc_pre,label_acc_post,cls_acc,add_acc,t_cluster,t_assign,t_infer,t_train,t_total";
}

inline std::string csv_row(const RunReport& r) {
  std::ostringstream os;
  os << std::setprecision(6);
  auto opt = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << r.config.w << ',' << r.config.h << ',' << r.config.oversample_factor << ',' << r.config.seed << ',';
  opt(r.purity);
  os << ',';
  opt(r.label_acc_pre);
  os << ',';
  opt(r.label_acc_post);
  os << ',';
  opt(r.cls_acc);
  os << ',';
  opt(r.add_acc);
  os << ',' << r.stage_seconds.at("cluster") << ',' << r.stage_seconds.at("assign") << ',' << r.stage_seconds.at("infer")
     << ',' << r.stage_seconds.at("train") << ',' << r.total_seconds();
  return os.str();
}

// Shared, lazily loaded inputs: MNIST splits and trained autoencoders. Safe to use from several
// concurrent runs.
class Workspace {
 public:
  explicit Workspace(std::ostream* log = nullptr) : log_(log) {}

  const ImageStore& mnist(const std::string& dir, Split split) {
    std::lock_guard lock(mutex_);
    const std::string key = dir + (split == Split::test ? "#test" : "#train");
    auto it = mnist_.find(key);
    if (it == mnist_.end()) it = mnist_.emplace(key, load_mnist(dir, split)).first;
    return it->second;
  }

  // Loads the autoencoder for `cfg` from the cache directory or trains and caches it. Returns the
  // training time in seconds through `seconds` (0 when loaded).
  const AutoencoderParams<float>& autoencoder(const RunConfig& cfg, const ImageStore& store, const fs::path& cache_dir,
                                              double* seconds) {
    std::lock_guard lock(mutex_);
    const std::string key = autoencoder_hash(cfg);
    if (seconds) *seconds = 0.0;
    if (auto it = autoencoders_.find(key); it != autoencoders_.end()) return it->second;
    const fs::path path = cache_dir / ("autoencoder-" + key + ".bin");
    if (fs::exists(path)) {
      json meta;
      auto params = load_autoencoder(path, &meta);
      if (meta.value("ae_hash", "") != key) throw consistency_error("autoencoder cache " + path.string() + " has a different hash");
      return autoencoders_.emplace(key, std::move(params)).first->second;
    }
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> widths = default_encoder_widths();
    widths.back() = cfg.embed_dim;
    auto params = train_autoencoder<float>(store, cfg.ae_epochs, cfg.ae_seed, autoencoder_hyper(cfg), widths,
                                           [&](int epoch, double loss, const AutoencoderParams<float>&) {
                                             if (log_) *log_ << "[autoencoder] epoch " << epoch << " loss " << loss << std::endl;
                                           });
    if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fs::create_directories(cache_dir);
    save_autoencoder(path, params, {{"ae_hash", key}});
    return autoencoders_.emplace(key, std::move(params)).first->second;
  }

  std::ostream* log() const { return log_; }

 private:
  std::mutex mutex_;
  std::ostream* log_;
  std::map<std::string, ImageStore> mnist_;
  std::map<std::string, AutoencoderParams<float>> autoencoders_;
};

namespace detail {

struct RunData {
  ImageStore train;
  ImageStore test;
  Corpus corpus;
  Corpus test_corpus;
};

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
}

inline void check_hash(const std::string& found, const std::string& expected, const fs::path& what) {
  if (found != expected) {
    throw consistency_error(what.string() + " was produced by config " + found + ", current config is " + expected +
                            "; refusing to resume");
  }
}

inline void save_corpus_stamped(const fs::path& path, const Corpus& corpus, const std::string& hash) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path.string());
  out << "# config_hash " << hash << '\n';
  write_corpus(out, corpus);
}

inline Corpus load_corpus_stamped(const fs::path& path, const std::string& hash) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  std::string first;
  std::getline(in, first);
  const std::string prefix = "# config_hash ";
  check_hash(first.rfind(prefix, 0) == 0 ? first.substr(prefix.size()) : std::string("<none>"), hash, path);
  return read_corpus(in);
}

inline RunData load_data(const RunConfig& cfg, Workspace& ws) {
  RunData d;
  if (cfg.synthetic) {
    const auto total = static_cast<std::size_t>(cfg.synth_images + cfg.synth_test_images);
    auto synth = generate_synthetic(total, 10, cfg.synth_separation, cfg.synth_dim, 1, 1, cfg.seed);
    const auto n_train = static_cast<std::size_t>(cfg.synth_images);
    d.train = slice_rows(synth.store, 0, n_train, Split::train);
    d.test = slice_rows(synth.store, n_train, total, Split::test);
  } else {
    d.train = ws.mnist(cfg.data_dir, Split::train);
    d.test = ws.mnist(cfg.data_dir, Split::test);
  }
  return d;
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

// Runs every stage up to and including `last`. Stage failures are reported, not thrown; invalid
// configurations and hash mismatches on resume are thrown.
inline RunReport run_pipeline(RunConfig cfg, Workspace& ws, Stage last = Stage::evaluate, bool resume = true) {
  if (const char* env = std::getenv("DIGITSUM_DATA"); env && *env) cfg.data_dir = env;
  std::ostream* log = ws.log();
  for (const auto& w : validate(cfg)) {
    if (log) *log << "warning: " << w << std::endl;
  }

  RunReport report;
  report.config = cfg;
  report.hash = config_hash(cfg);
  const fs::path dir = cfg.artifacts_dir;
  fs::create_directories(dir);
  const fs::path cache_dir = cfg.ae_cache_dir.empty() ? dir.parent_path() / "autoencoders" : fs::path(cfg.ae_cache_dir);

  const fs::path config_path = dir / "config.json";
  if (fs::exists(config_path)) {
    const json prior = detail::read_json(config_path);
    detail::check_hash(prior.value("config_hash", "<none>"), report.hash, config_path);
  } else {
    detail::write_json(config_path, {{"config", to_json(cfg)}, {"config_hash", report.hash}});
  }
  auto stamped = [&](json j) {
    j["config_hash"] = report.hash;
    return j;
  };
  auto reusable = [&](const fs::path& p) { return resume && fs::exists(p); };

  Stage current = Stage::data;
  auto say = [&](const std::string& msg) {
    if (log) *log << "[" << stage_name(current) << "] " << msg << std::endl;
  };

  try {
    // Data: stores are reloaded every time; corpora are persisted.
    detail::RunData data = detail::load_data(cfg, ws);
    report.train_images = data.train.size();
    const fs::path corpus_path = dir / "corpus.txt";
    const fs::path test_corpus_path = dir / "test_corpus.txt";
    if (reusable(corpus_path) && reusable(test_corpus_path)) {
      data.corpus = detail::load_corpus_stamped(corpus_path, report.hash);
      data.test_corpus = detail::load_corpus_stamped(test_corpus_path, report.hash);
      report.resumed.push_back("data");
    } else {
      data.corpus = build_corpus(data.train, cfg.w, cfg.h, cfg.oversample_factor, cfg.seed);
      data.test_corpus = build_corpus(data.test, cfg.w, cfg.h, 1, mix_seed(cfg.seed + 1));
      detail::save_corpus_stamped(corpus_path, data.corpus, report.hash);
      detail::save_corpus_stamped(test_corpus_path, data.test_corpus, report.hash);
    }
    report.train_examples = data.corpus.size();
    report.test_examples = data.test_corpus.size();
    say(std::to_string(data.corpus.size()) + " training examples over " + std::to_string(data.train.size()) + " images");
    if (last == Stage::data) return report;

    // Step 1a: embedding. Autoencoder pretraining is timed separately.
    current = Stage::embed;
    const fs::path emb_path = dir / "embedding.bin";
    EmbeddingMatrix emb;
    double embed_seconds = 0.0;
    if (reusable(emb_path)) {
      const auto file = TensorFile::load(emb_path);
      detail::check_hash(file.meta.value("config_hash", "<none>"), report.hash, emb_path);
      emb = file.get_matrix<double>("embedding");
      report.resumed.push_back("embed");
    } else {
      if (cfg.embedding == EmbeddingBackend::autoencoder) {
        const auto& params = ws.autoencoder(cfg, data.train, cache_dir, &report.autoencoder_seconds);
        detail::Timer t;
        emb = encode(params, data.train);
        embed_seconds = t.seconds();
      } else {
        detail::Timer t;
        emb = pca_embed(data.train, cfg.embed_dim);
        embed_seconds = t.seconds();
      }
      TensorFile file;
      file.meta = stamped({{"kind", "embedding"}, {"backend", to_string(cfg.embedding)}});
      file.put_matrix("embedding", emb);
      file.save(emb_path);
    }
    if (last == Stage::embed) return report;

    // Step 1b: k-means.
    current = Stage::cluster;
    const fs::path model_path = dir / "clusters.bin";
    const fs::path assign_path = dir / "clusters.i32";
    ClusterModel model;
    if (reusable(model_path) && reusable(assign_path)) {
      json meta;
      model = load_cluster_model(model_path, assign_path, &meta);
      detail::check_hash(meta.value("config_hash", "<none>"), report.hash, model_path);
      report.resumed.push_back("cluster");
    } else {
      detail::Timer t;
      model = kmeans(emb, cfg.k, cfg.seed, KMeansOptions{cfg.kmeans_max_iter, cfg.kmeans_tol, cfg.kmeans_n_init});
      report.stage_seconds["cluster"] = embed_seconds + t.seconds();
      save_cluster_model(model_path, assign_path, model, stamped(json::object()));
    }
    report.purity = cluster_purity(model, data.train);
    say("purity " + std::to_string(*report.purity) + " after " + std::to_string(model.iterations) + " iterations");
    if (last == Stage::cluster) return report;

    // Step 2: cluster -> digit assignment.
    current = Stage::assign;
    const fs::path digits_path = dir / "assignment.json";
    DigitAssignment assignment;
    if (reusable(digits_path)) {
      const json j = detail::read_json(digits_path);
      detail::check_hash(j.value("config_hash", "<none>"), report.hash, digits_path);
      assignment = assignment_from_json(j);
      report.resumed.push_back("assign");
    } else {
      detail::Timer t;
      assignment = solve_corpus(data.corpus, model, cfg.batch_size);
      report.stage_seconds["assign"] = t.seconds();
      detail::write_json(digits_path, stamped(to_json(assignment)));
    }
    if (static_cast<int>(assignment.digits.size()) != model.k) throw consistency_error("assignment does not cover all clusters");
    report.assignment = assignment;
    LabelState state = init_labels(model, assignment);
    report.label_acc_pre = label_accuracy(state.label, data.train);
    say("satisfied " + std::to_string(assignment.satisfied_count) + "/" + std::to_string(data.corpus.size()) +
        ", label accuracy " + std::to_string(*report.label_acc_pre));
    if (last == Stage::assign) return report;

    // Step 3: label inference.
    current = Stage::infer;
    const fs::path labels_path = dir / "labels.i32";
    const fs::path labels_meta_path = dir / "labels.json";
    std::vector<Digit> labels;
    if (reusable(labels_path) && reusable(labels_meta_path)) {
      const json j = detail::read_json(labels_meta_path);
      detail::check_hash(j.value("config_hash", "<none>"), report.hash, labels_meta_path);
      const auto raw = read_int_array(labels_path);
      if (raw.size() != data.train.size()) throw consistency_error("label file length does not match the store");
      labels.assign(raw.begin(), raw.end());
      report.inference_summary = j.at("summary");
      report.resumed.push_back("infer");
    } else {
      detail::Timer t;
      state = run_inference(std::move(state), data.corpus, model, cfg.radii);
      labels = final_labels(state);
      report.stage_seconds["infer"] = t.seconds();
      report.inference_summary = summary_json(state);
      const std::vector<std::int32_t> raw(labels.begin(), labels.end());
      write_int_array(labels_path, raw);
      detail::write_json(labels_meta_path, stamped({{"summary", report.inference_summary}}));
    }
    report.label_acc_post = label_accuracy(labels, data.train);
    say("label accuracy after inference " + std::to_string(*report.label_acc_post));
    if (last == Stage::infer) return report;

    // Step 4: classifier.
    current = Stage::train;
    const fs::path cnn_path = dir / "cnn.bin";
    CnnParams<float> cnn;
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(data.train.pixels()))));
    if (static_cast<Eigen::Index>(side) * side != data.train.pixels()) {
      throw shape_error("classifier needs square images; got " + std::to_string(data.train.pixels()) + " values");
    }
    if (reusable(cnn_path)) {
      json meta;
      cnn = load_cnn(cnn_path, &meta);
      detail::check_hash(meta.value("config_hash", "<none>"), report.hash, cnn_path);
      report.resumed.push_back("train");
    } else {
      detail::Timer t;
      CnnHyper hyper{cfg.cnn_batch, cfg.cnn_lr, cfg.cnn_momentum};
      cnn = train_cnn(init_cnn<float>(cfg.seed, side), data.train, labels, cfg.cnn_epochs, cfg.seed, hyper,
                      [&](int epoch, double loss, const CnnParams<float>&) {
                        say("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
                      });
      report.stage_seconds["train"] = t.seconds();
      save_cnn(cnn_path, cnn, stamped(json::object()));
    }
    if (last == Stage::train) return report;

    current = Stage::evaluate;
    detail::Timer t;
    const auto predicted = classify(cnn, data.test.images()).digits;
    report.cls_acc = label_accuracy(predicted, data.test);
    report.add_acc = addition_accuracy(predicted, data.test_corpus);
    report.evaluate_seconds = t.seconds();
    say("classification " + std::to_string(*report.cls_acc) + ", addition " + std::to_string(*report.add_acc));
  } catch (const consistency_error& e) {
    if (std::string(e.what()).find("refusing to resume") != std::string::npos) throw;
    report.status = "failed";
    report.failed_stage = stage_name(current);
    report.error = e.what();
  } catch (const std::exception& e) {
    report.status = "failed";
    report.failed_stage = stage_name(current);
    report.error = e.what();
  }
  if (!report.ok() && log) *log << "stage " << report.failed_stage << " failed: " << report.error << std::endl;
  detail::write_json(dir / "report.json", to_json(report));
  return report;
}

inline RunReport run_pipeline(const RunConfig& cfg, Stage last = Stage::evaluate, bool resume = true) {
  Workspace ws;
  return run_pipeline(cfg, ws, last, resume);
}

// Runs each config (up to `workers` at a time) and returns one CSV row per config, in order. The
// autoencoder is trained once per distinct autoencoder configuration and shared.
inline std::vector<RunReport> sweep(const std::vector<RunConfig>& configs, Workspace& ws, int workers = 1,
                                    Stage last = Stage::evaluate) {
  std::vector<RunReport> reports(configs.size());
  std::mutex report_mutex;
  auto run_one = [&](std::size_t i) {
    RunReport r;
    try {
      r = run_pipeline(configs[i], ws, last, true);
    } catch (const std::exception& e) {
      r.config = configs[i];
      r.hash = config_hash(configs[i]);
      r.status = "failed";
      r.failed_stage = "config";
      r.error = e.what();
    }
    std::lock_guard lock(report_mutex);
    reports[i] = std::move(r);
  };
  workers = std::max(1, workers);
  for (std::size_t start = 0; start < configs.size(); start += static_cast<std::size_t>(workers)) {
    std::vector<std::future<void>> running;
    for (std::size_t i = start; i < std::min(configs.size(), start + static_cast<std::size_t>(workers)); ++i) {
      running.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, run_one, i));
    }
    for (auto& f : running) f.get();
  }
  return reports;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  out << csv_header() << '\n';
  for (const auto& r : reports) out << csv_row(r) << '\n';
}

}  // namespace digitsum
