#pragma once

// Latent representations for clustering: a fully connected symmetric autoencoder trained on
// pixel reconstruction, and a PCA projection used as a fast deterministic alternative.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "digitsum/dataset.hpp"
#include "digitsum/error.hpp"
#include "digitsum/random.hpp"
#include "digitsum/tensor_io.hpp"

namespace digitsum {

using EmbeddingMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline const std::vector<int>& default_encoder_widths() {
  static const std::vector<int> widths{784, 500, 500, 2000, 10};
  return widths;
}

template <typename Scalar>
struct DenseLayer {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  Matrix weight;  // in x out
  RowVector bias;
  bool relu = true;

  Eigen::Index in() const noexcept { return weight.rows(); }
  Eigen::Index out() const noexcept { return weight.cols(); }
};

// he_normal: N(0, 2/fan_in). fan_in_uniform: U(-sqrt(1/fan_in), sqrt(1/fan_in)), the smaller
// scale used by the deep-clustering autoencoders; it clusters markedly better on MNIST.
enum class AeInit { he_normal, fan_in_uniform };

inline const char* to_string(AeInit i) { return i == AeInit::he_normal ? "he" : "uniform"; }

inline AeInit parse_ae_init(const std::string& s) {
  if (s == "he") return AeInit::he_normal;
  if (s == "uniform") return AeInit::fan_in_uniform;
  throw argument_error("unknown autoencoder init '" + s + "' (expected he or uniform)");
}

// Zero bias.
template <typename Scalar>
DenseLayer<Scalar> init_dense(int in, int out, bool relu, AeInit init, rng_type& rng) {
  DenseLayer<Scalar> layer{typename DenseLayer<Scalar>::Matrix(in, out), DenseLayer<Scalar>::RowVector::Zero(out),
                           relu};
  const double scale = init == AeInit::he_normal ? std::sqrt(2.0 / in) : std::sqrt(1.0 / in);
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
    const double r = init == AeInit::he_normal ? normal01(rng) : 2.0 * uniform01(rng) - 1.0;
    layer.weight.data()[i] = static_cast<Scalar>(scale * r);
  }
  return layer;
}

template <typename Scalar>
struct AutoencoderParams {
  std::vector<DenseLayer<Scalar>> encoder;
  std::vector<DenseLayer<Scalar>> decoder;
  std::uint64_t seed = 0;
  int epochs = 0;

  Eigen::Index input_dim() const { return encoder.front().in(); }
  Eigen::Index latent_dim() const { return encoder.back().out(); }

  std::vector<int> encoder_widths() const {
    std::vector<int> w{static_cast<int>(input_dim())};
    for (const auto& l : encoder) w.push_back(static_cast<int>(l.out()));
    return w;
  }

  // Encoder layers followed by decoder layers.
  std::vector<DenseLayer<Scalar>*> layers() {
    std::vector<DenseLayer<Scalar>*> all;
    for (auto& l : encoder) all.push_back(&l);
    for (auto& l : decoder) all.push_back(&l);
    return all;
  }
  std::vector<const DenseLayer<Scalar>*> layers() const {
    std::vector<const DenseLayer<Scalar>*> all;
    for (const auto& l : encoder) all.push_back(&l);
    for (const auto& l : decoder) all.push_back(&l);
    return all;
  }
};

// Encoder widths w0 -> ... -> wk; decoder mirrors them. Hidden layers use ReLU, the latent
// layer and the reconstruction layer are linear.
template <typename Scalar = float>
AutoencoderParams<Scalar> init_autoencoder(std::span<const int> widths, std::uint64_t seed,
                                           AeInit init = AeInit::fan_in_uniform) {
  if (widths.size() < 2) throw argument_error("autoencoder needs at least input and latent widths");
  for (int w : widths) {
    if (w < 1) throw argument_error("layer widths must be positive");
  }
  auto rng = make_rng(seed, 0xae);
  AutoencoderParams<Scalar> p;
  p.seed = seed;
  const std::size_t n = widths.size() - 1;
  for (std::size_t l = 0; l < n; ++l) {
    p.encoder.push_back(init_dense<Scalar>(widths[l], widths[l + 1], l + 1 < n, init, rng));
  }
  for (std::size_t l = n; l > 0; --l) {
    p.decoder.push_back(init_dense<Scalar>(widths[l], widths[l - 1], l > 1, init, rng));
  }
  return p;
}

enum class AeOptimizer { sgd_momentum, adam };

struct AutoencoderHyper {
  int batch_size = 256;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  AeOptimizer optimizer = AeOptimizer::sgd_momentum;
  AeInit init = AeInit::fan_in_uniform;
  // Adam moments.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

template <typename Scalar>
struct AutoencoderGradient {
  double loss = 0.0;
  std::vector<DenseLayer<Scalar>> layers;  // same order as AutoencoderParams::layers()
};

namespace detail {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
MatrixX<Scalar> dense_forward(const DenseLayer<Scalar>& layer, const MatrixX<Scalar>& x) {
  MatrixX<Scalar> z = x * layer.weight;
  z.rowwise() += layer.bias;
  if (layer.relu) z = z.cwiseMax(Scalar(0));
  return z;
}

}  // namespace detail

// Mean squared reconstruction error over every pixel of `batch` and its gradient.
template <typename Scalar>
AutoencoderGradient<Scalar> reconstruction_gradient(const AutoencoderParams<Scalar>& params,
                                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& batch) {
  using Matrix = detail::MatrixX<Scalar>;
  const auto layers = params.layers();
  if (batch.cols() != params.input_dim()) throw shape_error("batch width does not match autoencoder input");

  std::vector<Matrix> acts;
  acts.reserve(layers.size() + 1);
  acts.push_back(batch);
  for (const auto* layer : layers) acts.push_back(detail::dense_forward(*layer, acts.back()));

  const double count = static_cast<double>(batch.rows()) * batch.cols();
  Matrix delta = acts.back() - batch;
  AutoencoderGradient<Scalar> g;
  g.loss = static_cast<double>(delta.template cast<double>().squaredNorm()) / count;
  delta *= static_cast<Scalar>(2.0 / count);

  g.layers.resize(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = *layers[l];
    if (layer.relu) delta = delta.cwiseProduct((acts[l + 1].array() > Scalar(0)).matrix().template cast<Scalar>());
    g.layers[l].weight.noalias() = acts[l].transpose() * delta;
    g.layers[l].bias = delta.colwise().sum();
    g.layers[l].relu = layer.relu;
    if (l > 0) {
      Matrix prev = delta * layer.weight.transpose();
      delta = std::move(prev);
    }
  }
  return g;
}

template <typename Scalar>
double reconstruction_loss(const AutoencoderParams<Scalar>& params, const ImageMatrix& images) {
  if (images.cols() != params.input_dim()) throw shape_error("image width does not match autoencoder input");
  const auto layers = params.layers();
  double total = 0.0;
  constexpr Eigen::Index chunk = 1024;
  for (Eigen::Index start = 0; start < images.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, images.rows() - start);
    detail::MatrixX<Scalar> x = images.middleRows(start, n).template cast<Scalar>();
    detail::MatrixX<Scalar> a = x;
    for (const auto* layer : layers) a = detail::dense_forward(*layer, a);
    total += (a - x).template cast<double>().squaredNorm();
  }
  return total / (static_cast<double>(images.rows()) * images.cols());
}

// Called after every epoch with the 1-based epoch number and the mean training loss of that epoch.
template <typename Scalar>
using AutoencoderEpochCallback = std::function<void(int, double, const AutoencoderParams<Scalar>&)>;

// Continues training `params` for `epochs` further epochs of shuffled mini-batches.
template <typename Scalar>
void fit_autoencoder(AutoencoderParams<Scalar>& params, const ImageStore& store, int epochs, std::uint64_t seed,
                     const AutoencoderHyper& hyper, const std::type_identity_t<AutoencoderEpochCallback<Scalar>>& on_epoch = {}) {
  using Matrix = detail::MatrixX<Scalar>;
  if (epochs < 0) throw argument_error("epochs must be non-negative");
  if (hyper.batch_size < 1) throw argument_error("batch size must be positive");
  if (store.pixels() != params.input_dim()) throw shape_error("store width does not match autoencoder input");

  const auto layers = params.layers();
  std::vector<DenseLayer<Scalar>> vel, sq;
  for (const auto* l : layers) {
    vel.push_back({Matrix::Zero(l->in(), l->out()), DenseLayer<Scalar>::RowVector::Zero(l->out()), l->relu});
  }
  if (hyper.optimizer == AeOptimizer::adam) sq = vel;

  const auto n = static_cast<Eigen::Index>(store.size());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  auto rng = make_rng(seed, 0xae01);
  std::int64_t step = 0;
  Matrix batch;
  const auto lr = static_cast<Scalar>(hyper.learning_rate);
  const auto mom = static_cast<Scalar>(hyper.momentum);

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    shuffle(order, rng);
    double loss_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += hyper.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(hyper.batch_size, n - start);
      batch.resize(b, store.pixels());
      for (Eigen::Index r = 0; r < b; ++r) {
        batch.row(r) = store.images().row(order[static_cast<std::size_t>(start + r)]).template cast<Scalar>();
      }
      auto g = reconstruction_gradient(params, batch);
      if (!std::isfinite(g.loss)) throw divergence_error("autoencoder loss became non-finite", epoch);
      loss_sum += g.loss * static_cast<double>(b);
      ++step;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& p = *layers[l];
        auto& v = vel[l];
        if (hyper.optimizer == AeOptimizer::sgd_momentum) {
          v.weight = mom * v.weight - lr * g.layers[l].weight;
          v.bias = mom * v.bias - lr * g.layers[l].bias;
          p.weight += v.weight;
          p.bias += v.bias;
        } else {
          const auto b1 = static_cast<Scalar>(hyper.beta1);
          const auto b2 = static_cast<Scalar>(hyper.beta2);
          const auto eps = static_cast<Scalar>(hyper.epsilon);
          const auto alpha = static_cast<Scalar>(hyper.learning_rate * std::sqrt(1.0 - std::pow(hyper.beta2, step)) /
                                                 (1.0 - std::pow(hyper.beta1, step)));
          auto& s = sq[l];
          v.weight = b1 * v.weight + (1 - b1) * g.layers[l].weight;
          v.bias = b1 * v.bias + (1 - b1) * g.layers[l].bias;
          s.weight = b2 * s.weight + (1 - b2) * g.layers[l].weight.cwiseAbs2();
          s.bias = b2 * s.bias + (1 - b2) * g.layers[l].bias.cwiseAbs2();
          p.weight.array() -= alpha * v.weight.array() / (s.weight.array().sqrt() + eps);
          p.bias.array() -= alpha * v.bias.array() / (s.bias.array().sqrt() + eps);
        }
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss)) throw divergence_error("autoencoder loss became non-finite", epoch);
    ++params.epochs;
    if (on_epoch) on_epoch(params.epochs, epoch_loss, params);
  }
}

template <typename Scalar = float>
AutoencoderParams<Scalar> train_autoencoder(const ImageStore& store, int epochs, std::uint64_t seed,
                                            const AutoencoderHyper& hyper = {},
                                            std::span<const int> widths = default_encoder_widths(),
                                            const std::type_identity_t<AutoencoderEpochCallback<Scalar>>& on_epoch = {}) {
  std::vector<int> w(widths.begin(), widths.end());
  w.front() = static_cast<int>(store.pixels());
  auto params = init_autoencoder<Scalar>(w, seed, hyper.init);
  fit_autoencoder(params, store, epochs, seed, hyper, on_epoch);
  return params;
}

// Forward pass through the encoder only.
template <typename Scalar>
EmbeddingMatrix encode(const AutoencoderParams<Scalar>& params, const ImageStore& store) {
  if (store.pixels() != params.input_dim()) {
    throw shape_error("store has " + std::to_string(store.pixels()) + " pixels but encoder expects " +
                      std::to_string(params.input_dim()));
  }
  EmbeddingMatrix out(static_cast<Eigen::Index>(store.size()), params.latent_dim());
  constexpr Eigen::Index chunk = 1024;
  for (Eigen::Index start = 0; start < out.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, out.rows() - start);
    detail::MatrixX<Scalar> a = store.images().middleRows(start, n).template cast<Scalar>();
    for (const auto& layer : params.encoder) a = detail::dense_forward(layer, a);
    out.middleRows(start, n) = a.template cast<double>();
  }
  return out;
}

inline void save_autoencoder(const std::filesystem::path& path, const AutoencoderParams<float>& params,
                             const nlohmann::json& extra_meta = nlohmann::json::object()) {
  TensorFile file;
  file.meta = extra_meta;
  file.meta["kind"] = "autoencoder";
  file.meta["encoder_widths"] = params.encoder_widths();
  file.meta["seed"] = params.seed;
  file.meta["epochs"] = params.epochs;
  const auto layers = params.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    file.put_matrix("layer" + std::to_string(l) + ".weight", layers[l]->weight);
    file.put_matrix("layer" + std::to_string(l) + ".bias", layers[l]->bias);
  }
  file.save(path);
}

inline AutoencoderParams<float> load_autoencoder(const std::filesystem::path& path, nlohmann::json* meta = nullptr) {
  const auto file = TensorFile::load(path);
  if (file.meta.value("kind", "") != "autoencoder") throw format_error(path.string() + " is not an autoencoder file");
  const auto widths = file.meta.at("encoder_widths").get<std::vector<int>>();
  auto params = init_autoencoder<float>(widths, 0);
  params.seed = file.meta.at("seed").get<std::uint64_t>();
  params.epochs = file.meta.at("epochs").get<int>();
  auto layers = params.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXf w = file.get_matrix<float>("layer" + std::to_string(l) + ".weight");
    Eigen::MatrixXf b = file.get_matrix<float>("layer" + std::to_string(l) + ".bias");
    if (w.rows() != layers[l]->in() || w.cols() != layers[l]->out() || b.cols() != layers[l]->out()) {
      throw shape_error("layer " + std::to_string(l) + " shape mismatch in " + path.string());
    }
    layers[l]->weight = w;
    layers[l]->bias = b.row(0);
  }
  if (meta) *meta = file.meta;
  return params;
}

// Principal-component projection fitted on centered data.
struct PcaModel {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // pixels x dim, orthonormal columns (zero columns past the rank)

  EmbeddingMatrix project(const ImageMatrix& images) const {
    EmbeddingMatrix centered = images.cast<double>();
    centered.rowwise() -= mean;
    return centered * components;
  }

  Eigen::MatrixXd reconstruct(const EmbeddingMatrix& coords) const {
    Eigen::MatrixXd x = coords * components.transpose();
    x.rowwise() += mean;
    return x;
  }
};

inline PcaModel pca_fit(const ImageStore& store, int dim) {
  const Eigen::Index d = store.pixels();
  if (dim < 1 || dim > d) throw argument_error("pca dimension must be in [1," + std::to_string(d) + "]");
  if (store.size() == 0) throw argument_error("pca needs at least one image");
  const auto& x = store.images();
  PcaModel model;
  model.mean = x.cast<double>().colwise().mean();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  constexpr Eigen::Index chunk = 4096;
  for (Eigen::Index start = 0; start < x.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, x.rows() - start);
    Eigen::MatrixXd c = x.middleRows(start, n).cast<double>();
    c.rowwise() -= model.mean;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(c.transpose());
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(x.rows());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto& values = eig.eigenvalues();  // ascending
  const double top = std::max(values(d - 1), 0.0);
  model.components = Eigen::MatrixXd::Zero(d, dim);
  for (int k = 0; k < dim; ++k) {
    const Eigen::Index src = d - 1 - k;
    if (values(src) <= 1e-10 * top || top == 0.0) continue;  // rank deficient: leave zero
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    model.components.col(k) = v;
  }
  return model;
}

inline EmbeddingMatrix pca_embed(const ImageStore& store, int dim) { return pca_fit(store, dim).project(store.images()); }

}  // namespace digitsum
