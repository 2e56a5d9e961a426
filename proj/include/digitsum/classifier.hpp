#pragma once

// Small convolutional classifier trained with SGD + momentum on softmax cross-entropy.
//
// Activations are row-major matrices. A spatial activation of a batch of B images with shape
// H x W x C is stored as (B*H*W) x C, so each image's block is contiguous in (y, x, c) order and
// flattening to B x (H*W*C) is a reinterpretation of the same buffer. Convolutions are valid
// (no padding) and computed as an im2col product; pooling is 2x2 with stride 2, odd edges dropped.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "digitsum/dataset.hpp"
#include "digitsum/embedding.hpp"
#include "digitsum/error.hpp"
#include "digitsum/random.hpp"
#include "digitsum/tensor_io.hpp"

namespace digitsum {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct ConvLayer {
  int kernel = 3;
  int in_channels = 0;
  int out_channels = 0;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weight;  // (kernel*kernel*in) x out, rows in (ky, kx, c) order
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> bias;
};

struct MaxPoolLayer {};

template <typename Scalar>
using CnnLayer = std::variant<ConvLayer<Scalar>, MaxPoolLayer, DenseLayer<Scalar>>;

struct LayerSpec {
  enum class Kind { conv, pool, dense } kind;
  int units = 0;  // filters for conv, width for dense
  int kernel = 3;
  bool relu = true;  // dense only; convolutions always use ReLU

  static LayerSpec conv(int filters, int kernel = 3) { return {Kind::conv, filters, kernel, true}; }
  static LayerSpec pool() { return {Kind::pool, 0, 0, false}; }
  static LayerSpec dense(int units, bool relu = true) { return {Kind::dense, units, 0, relu}; }
};

// conv32 - pool - conv64 - conv64 - pool - dense100 - dense10 (linear logits).
inline std::vector<LayerSpec> mnist_architecture() {
  return {LayerSpec::conv(32), LayerSpec::pool(), LayerSpec::conv(64), LayerSpec::conv(64),
          LayerSpec::pool(), LayerSpec::dense(100), LayerSpec::dense(10, false)};
}

struct ActShape {
  int h = 1;
  int w = 1;
  int c = 0;
  bool spatial = true;

  std::int64_t size() const { return static_cast<std::int64_t>(h) * w * c; }
  friend bool operator==(const ActShape&, const ActShape&) = default;
};

template <typename Scalar>
struct CnnParams {
  int side = 28;
  int channels = 1;
  std::vector<CnnLayer<Scalar>> layers;
  std::uint64_t seed = 0;
  int epochs = 0;

  std::int64_t input_size() const { return static_cast<std::int64_t>(side) * side * channels; }
};

// Output shape of every layer for the params' input geometry.
template <typename Scalar>
std::vector<ActShape> layer_output_shapes(const CnnParams<Scalar>& p) {
  std::vector<ActShape> out;
  ActShape s{p.side, p.side, p.channels, true};
  for (const auto& layer : p.layers) {
    if (const auto* conv = std::get_if<ConvLayer<Scalar>>(&layer)) {
      s = {s.h - conv->kernel + 1, s.w - conv->kernel + 1, conv->out_channels, true};
    } else if (std::holds_alternative<MaxPoolLayer>(layer)) {
      s = {s.h / 2, s.w / 2, s.c, true};
    } else {
      s = {1, 1, static_cast<int>(std::get<DenseLayer<Scalar>>(layer).out()), false};
    }
    out.push_back(s);
  }
  return out;
}

// He-uniform weights (limit sqrt(6/fan_in), variance 2/fan_in) and zero biases.
template <typename Scalar = float>
CnnParams<Scalar> init_cnn(std::uint64_t seed, int side = 28, int channels = 1,
                           const std::vector<LayerSpec>& specs = mnist_architecture()) {
  auto rng = make_rng(seed, 0xc1);
  CnnParams<Scalar> p;
  p.side = side;
  p.channels = channels;
  p.seed = seed;
  ActShape s{side, side, channels, true};
  auto fill = [&](auto& weight, int fan_in) {
    const double limit = std::sqrt(6.0 / fan_in);
    for (Eigen::Index i = 0; i < weight.size(); ++i) {
      weight.data()[i] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * limit);
    }
  };
  for (const auto& spec : specs) {
    switch (spec.kind) {
      case LayerSpec::Kind::conv: {
        if (!s.spatial) throw argument_error("convolution after a dense layer");
        if (s.h < spec.kernel || s.w < spec.kernel) throw shape_error("activation smaller than kernel");
        ConvLayer<Scalar> conv{spec.kernel, s.c, spec.units, {}, {}};
        const int fan_in = spec.kernel * spec.kernel * s.c;
        conv.weight.resize(fan_in, spec.units);
        fill(conv.weight, fan_in);
        conv.bias = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>::Zero(spec.units);
        p.layers.emplace_back(std::move(conv));
        s = {s.h - spec.kernel + 1, s.w - spec.kernel + 1, spec.units, true};
        break;
      }
      case LayerSpec::Kind::pool:
        if (!s.spatial || s.h < 2 || s.w < 2) throw shape_error("pooling needs a spatial activation of at least 2x2");
        p.layers.emplace_back(MaxPoolLayer{});
        s = {s.h / 2, s.w / 2, s.c, true};
        break;
      case LayerSpec::Kind::dense: {
        const auto fan_in = static_cast<int>(s.size());
        DenseLayer<Scalar> dense{typename DenseLayer<Scalar>::Matrix(fan_in, spec.units),
                                 DenseLayer<Scalar>::RowVector::Zero(spec.units), spec.relu};
        fill(dense.weight, fan_in);
        p.layers.emplace_back(std::move(dense));
        s = {1, 1, spec.units, false};
        break;
      }
    }
  }
  if (s.spatial || s.c != 10) throw argument_error("architecture must end in a 10-unit dense layer");
  return p;
}

namespace detail {

template <typename Scalar>
struct LayerCache {
  RowMatrix<Scalar> input;   // layer input
  RowMatrix<Scalar> output;  // post-activation output
  RowMatrix<Scalar> cols;    // im2col buffer (conv)
  std::vector<Eigen::Index> argmax;  // flat input index per output element (pool)
  ActShape in_shape;
};

template <typename Scalar>
void im2col(const RowMatrix<Scalar>& x, int batch, const ActShape& s, int k, RowMatrix<Scalar>& cols) {
  const int ho = s.h - k + 1, wo = s.w - k + 1;
  cols.resize(static_cast<Eigen::Index>(batch) * ho * wo, static_cast<Eigen::Index>(k) * k * s.c);
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        Scalar* dst = cols.row((static_cast<Eigen::Index>(b) * ho + oy) * wo + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const Scalar* src = x.row((static_cast<Eigen::Index>(b) * s.h + oy + ky) * s.w + ox).data();
          std::copy(src, src + static_cast<std::ptrdiff_t>(k) * s.c, dst);
          dst += static_cast<std::ptrdiff_t>(k) * s.c;
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& dcols, int batch, const ActShape& s, int k, RowMatrix<Scalar>& dx) {
  const int ho = s.h - k + 1, wo = s.w - k + 1;
  dx = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(batch) * s.h * s.w, s.c);
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Scalar* src = dcols.row((static_cast<Eigen::Index>(b) * ho + oy) * wo + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          Scalar* dst = dx.row((static_cast<Eigen::Index>(b) * s.h + oy + ky) * s.w + ox).data();
          const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(k) * s.c;
          for (std::ptrdiff_t t = 0; t < n; ++t) dst[t] += src[t];
          src += n;
        }
      }
    }
  }
}

// Forward pass over a batch of flattened images (B x side*side*channels). Returns logits (B x 10).
template <typename Scalar>
RowMatrix<Scalar> cnn_forward(const CnnParams<Scalar>& p, const RowMatrix<Scalar>& images,
                              std::vector<LayerCache<Scalar>>* caches) {
  const int batch = static_cast<int>(images.rows());
  ActShape s{p.side, p.side, p.channels, true};
  // Spatial (B*H*W) x C view of the input.
  RowMatrix<Scalar> x =
      Eigen::Map<const RowMatrix<Scalar>>(images.data(), static_cast<Eigen::Index>(batch) * p.side * p.side, p.channels);
  if (caches) caches->assign(p.layers.size(), {});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    RowMatrix<Scalar> y;
    LayerCache<Scalar>* cache = caches ? &(*caches)[l] : nullptr;
    ActShape next = s;
    if (const auto* conv = std::get_if<ConvLayer<Scalar>>(&layer)) {
      RowMatrix<Scalar> local_cols;
      RowMatrix<Scalar>& cols = cache ? cache->cols : local_cols;
      im2col(x, batch, s, conv->kernel, cols);
      y.noalias() = cols * conv->weight;
      y.rowwise() += conv->bias;
      y = y.cwiseMax(Scalar(0));
      next = {s.h - conv->kernel + 1, s.w - conv->kernel + 1, conv->out_channels, true};
    } else if (std::holds_alternative<MaxPoolLayer>(layer)) {
      next = {s.h / 2, s.w / 2, s.c, true};
      y.resize(static_cast<Eigen::Index>(batch) * next.h * next.w, s.c);
      std::vector<Eigen::Index> local_arg;
      auto& arg = cache ? cache->argmax : local_arg;
      arg.assign(static_cast<std::size_t>(y.size()), 0);
      for (int b = 0; b < batch; ++b) {
        for (int oy = 0; oy < next.h; ++oy) {
          for (int ox = 0; ox < next.w; ++ox) {
            const Eigen::Index orow = (static_cast<Eigen::Index>(b) * next.h + oy) * next.w + ox;
            for (int c = 0; c < s.c; ++c) {
              Eigen::Index best = -1;
              Scalar best_v = 0;
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const Eigen::Index irow = (static_cast<Eigen::Index>(b) * s.h + 2 * oy + dy) * s.w + 2 * ox + dx;
                  const Scalar v = x(irow, c);
                  if (best < 0 || v > best_v) {  // first maximum wins ties
                    best = irow * s.c + c;
                    best_v = v;
                  }
                }
              }
              y(orow, c) = best_v;
              arg[static_cast<std::size_t>(orow * s.c + c)] = best;
            }
          }
        }
      }
    } else {
      const auto& dense = std::get<DenseLayer<Scalar>>(layer);
      if (s.spatial) {
        x = Eigen::Map<const RowMatrix<Scalar>>(x.data(), batch, static_cast<Eigen::Index>(s.size())).eval();
      }
      y.noalias() = x * dense.weight;
      y.rowwise() += dense.bias;
      if (dense.relu) y = y.cwiseMax(Scalar(0));
      next = {1, 1, static_cast<int>(dense.out()), false};
    }
    if (cache) {
      cache->input = std::move(x);
      cache->output = y;
      cache->in_shape = s;
    }
    x = std::move(y);
    s = next;
  }
  return x;
}

template <typename Scalar>
RowMatrix<Scalar> softmax_rows(const RowMatrix<Scalar>& logits) {
  RowMatrix<Scalar> p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const Scalar m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace detail

template <typename Scalar>
struct CnnGradient {
  double loss = 0.0;
  std::vector<CnnLayer<Scalar>> layers;  // MaxPoolLayer entries carry nothing
};

// Mean softmax cross-entropy of `images` against `labels` and its gradient.
template <typename Scalar>
CnnGradient<Scalar> cnn_gradient(const CnnParams<Scalar>& p, const RowMatrix<Scalar>& images,
                                 std::span<const Digit> labels) {
  if (images.cols() != p.input_size()) throw shape_error("image width does not match network input");
  if (static_cast<std::size_t>(images.rows()) != labels.size()) throw consistency_error("label count mismatch");
  const int batch = static_cast<int>(images.rows());
  std::vector<detail::LayerCache<Scalar>> caches;
  const RowMatrix<Scalar> logits = detail::cnn_forward(p, images, &caches);
  RowMatrix<Scalar> delta = detail::softmax_rows(logits);

  CnnGradient<Scalar> g;
  for (int b = 0; b < batch; ++b) {
    g.loss -= std::log(std::max(static_cast<double>(delta(b, labels[static_cast<std::size_t>(b)])), 1e-300));
    delta(b, labels[static_cast<std::size_t>(b)]) -= Scalar(1);
  }
  g.loss /= batch;
  delta /= static_cast<Scalar>(batch);

  g.layers.resize(p.layers.size(), MaxPoolLayer{});
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    auto& cache = caches[l];
    const ActShape& s = cache.in_shape;
    if (const auto* conv = std::get_if<ConvLayer<Scalar>>(&p.layers[l])) {
      delta = delta.cwiseProduct((cache.output.array() > Scalar(0)).matrix().template cast<Scalar>());
      ConvLayer<Scalar> gc{conv->kernel, conv->in_channels, conv->out_channels, {}, {}};
      gc.weight.noalias() = cache.cols.transpose() * delta;
      gc.bias = delta.colwise().sum();
      g.layers[l] = std::move(gc);
      if (l > 0) {
        RowMatrix<Scalar> dcols = delta * conv->weight.transpose();
        detail::col2im(dcols, batch, s, conv->kernel, delta);
      }
    } else if (std::holds_alternative<MaxPoolLayer>(p.layers[l])) {
      RowMatrix<Scalar> dx = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(batch) * s.h * s.w, s.c);
      for (Eigen::Index i = 0; i < delta.size(); ++i) {
        dx.data()[cache.argmax[static_cast<std::size_t>(i)]] += delta.data()[i];
      }
      delta = std::move(dx);
    } else {
      const auto& dense = std::get<DenseLayer<Scalar>>(p.layers[l]);
      if (dense.relu) delta = delta.cwiseProduct((cache.output.array() > Scalar(0)).matrix().template cast<Scalar>());
      DenseLayer<Scalar> gd{cache.input.transpose() * delta, delta.colwise().sum(), dense.relu};
      g.layers[l] = std::move(gd);
      if (l > 0) {
        RowMatrix<Scalar> dx = delta * dense.weight.transpose();
        if (s.spatial) {
          // Back to the (B*H*W) x C layout of the previous layer.
          dx = Eigen::Map<const RowMatrix<Scalar>>(dx.data(), static_cast<Eigen::Index>(batch) * s.h * s.w, s.c).eval();
        }
        delta = std::move(dx);
      }
    }
  }
  return g;
}

struct CnnHyper {
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
};

template <typename Scalar>
using CnnEpochCallback = std::function<void(int, double, const CnnParams<Scalar>&)>;

// Mini-batch SGD with momentum (v <- m v - lr g; w <- w + v), reshuffled every epoch.
template <typename Scalar>
CnnParams<Scalar> train_cnn(CnnParams<Scalar> params, const ImageStore& store, std::span<const Digit> labels,
                            int epochs, std::uint64_t seed, const CnnHyper& hyper = {},
                            const std::type_identity_t<CnnEpochCallback<Scalar>>& on_epoch = {}) {
  if (labels.size() != store.size()) throw consistency_error("labels are not aligned with the store");
  if (store.pixels() != params.input_size()) throw shape_error("store images do not match network input");
  if (epochs < 0) throw argument_error("epochs must be non-negative");
  if (hyper.batch_size < 1) throw argument_error("batch size must be positive");

  std::vector<CnnLayer<Scalar>> velocity = params.layers;
  for (auto& v : velocity) {
    std::visit(
        [](auto& layer) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(layer)>, MaxPoolLayer>) {
            layer.weight.setZero();
            layer.bias.setZero();
          }
        },
        v);
  }
  const auto lr = static_cast<Scalar>(hyper.learning_rate);
  const auto mom = static_cast<Scalar>(hyper.momentum);
  const auto n = static_cast<Eigen::Index>(store.size());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  auto rng = make_rng(seed, 0xc2);
  RowMatrix<Scalar> batch;
  std::vector<Digit> batch_labels;

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    shuffle(order, rng);
    double loss_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += hyper.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(hyper.batch_size, n - start);
      batch.resize(b, store.pixels());
      batch_labels.resize(static_cast<std::size_t>(b));
      for (Eigen::Index r = 0; r < b; ++r) {
        const auto idx = order[static_cast<std::size_t>(start + r)];
        batch.row(r) = store.images().row(idx).template cast<Scalar>();
        batch_labels[static_cast<std::size_t>(r)] = labels[static_cast<std::size_t>(idx)];
      }
      auto g = cnn_gradient(params, batch, batch_labels);
      if (!std::isfinite(g.loss)) throw divergence_error("classifier loss became non-finite", epoch);
      loss_sum += g.loss * static_cast<double>(b);
      for (std::size_t l = 0; l < params.layers.size(); ++l) {
        std::visit(
            [&](auto& layer) {
              using L = std::decay_t<decltype(layer)>;
              if constexpr (!std::is_same_v<L, MaxPoolLayer>) {
                auto& v = std::get<L>(velocity[l]);
                const auto& gl = std::get<L>(g.layers[l]);
                v.weight = mom * v.weight - lr * gl.weight;
                v.bias = mom * v.bias - lr * gl.bias;
                layer.weight += v.weight;
                layer.bias += v.bias;
              }
            },
            params.layers[l]);
      }
    }
    ++params.epochs;
    if (on_epoch) on_epoch(params.epochs, loss_sum / static_cast<double>(n), params);
  }
  return params;
}

struct Classification {
  std::vector<Digit> digits;
  Eigen::Matrix<double, Eigen::Dynamic, 10, Eigen::RowMajor> probabilities;
};

template <typename Scalar>
Classification classify(const CnnParams<Scalar>& params, const ImageMatrix& images) {
  if (images.cols() != params.input_size()) {
    throw shape_error("images have " + std::to_string(images.cols()) + " values, network expects " +
                      std::to_string(params.input_size()));
  }
  Classification out;
  out.digits.resize(static_cast<std::size_t>(images.rows()));
  out.probabilities.resize(images.rows(), 10);
  constexpr Eigen::Index chunk = 256;
  for (Eigen::Index start = 0; start < images.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, images.rows() - start);
    RowMatrix<Scalar> x = images.middleRows(start, n).template cast<Scalar>();
    const RowMatrix<double> prob = detail::softmax_rows<double>(detail::cnn_forward<Scalar>(params, x, nullptr).template cast<double>());
    for (Eigen::Index r = 0; r < n; ++r) {
      Eigen::Index arg;
      prob.row(r).maxCoeff(&arg);
      out.digits[static_cast<std::size_t>(start + r)] = static_cast<Digit>(arg);
    }
    out.probabilities.middleRows(start, n) = prob;
  }
  return out;
}

inline nlohmann::json architecture_json(const CnnParams<float>& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : p.layers) {
    if (const auto* conv = std::get_if<ConvLayer<float>>(&layer)) {
      layers.push_back({{"type", "conv"}, {"filters", conv->out_channels}, {"kernel", conv->kernel}});
    } else if (std::holds_alternative<MaxPoolLayer>(layer)) {
      layers.push_back({{"type", "pool"}});
    } else {
      const auto& d = std::get<DenseLayer<float>>(layer);
      layers.push_back({{"type", "dense"}, {"units", d.out()}, {"relu", d.relu}});
    }
  }
  return layers;
}

inline void save_cnn(const std::filesystem::path& path, const CnnParams<float>& p,
                     const nlohmann::json& extra_meta = nlohmann::json::object()) {
  TensorFile file;
  file.meta = extra_meta;
  file.meta["kind"] = "cnn";
  file.meta["side"] = p.side;
  file.meta["channels"] = p.channels;
  file.meta["seed"] = p.seed;
  file.meta["epochs"] = p.epochs;
  file.meta["layers"] = architecture_json(p);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    std::visit(
        [&](const auto& layer) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(layer)>, MaxPoolLayer>) {
            file.put_matrix("layer" + std::to_string(l) + ".weight", layer.weight);
            file.put_matrix("layer" + std::to_string(l) + ".bias", layer.bias);
          }
        },
        p.layers[l]);
  }
  file.save(path);
}

inline CnnParams<float> load_cnn(const std::filesystem::path& path, nlohmann::json* meta = nullptr) {
  const auto file = TensorFile::load(path);
  if (file.meta.value("kind", "") != "cnn") throw format_error(path.string() + " is not a classifier file");
  std::vector<LayerSpec> specs;
  for (const auto& l : file.meta.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv") specs.push_back(LayerSpec::conv(l.at("filters").get<int>(), l.at("kernel").get<int>()));
    else if (type == "pool") specs.push_back(LayerSpec::pool());
    else specs.push_back(LayerSpec::dense(l.at("units").get<int>(), l.at("relu").get<bool>()));
  }
  auto p = init_cnn<float>(0, file.meta.at("side").get<int>(), file.meta.at("channels").get<int>(), specs);
  p.seed = file.meta.at("seed").get<std::uint64_t>();
  p.epochs = file.meta.at("epochs").get<int>();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    std::visit(
        [&](auto& layer) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(layer)>, MaxPoolLayer>) {
            Eigen::MatrixXf w = file.get_matrix<float>("layer" + std::to_string(l) + ".weight");
            Eigen::MatrixXf b = file.get_matrix<float>("layer" + std::to_string(l) + ".bias");
            if (w.rows() != layer.weight.rows() || w.cols() != layer.weight.cols() || b.cols() != layer.bias.cols()) {
              throw shape_error("layer " + std::to_string(l) + " shape mismatch in " + path.string());
            }
            layer.weight = w;
            layer.bias = b.row(0);
          }
        },
        p.layers[l]);
  }
  if (meta) *meta = file.meta;
  return p;
}

}  // namespace digitsum
