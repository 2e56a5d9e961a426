#pragma once

// Image storage, IDX ingestion and sum-supervised example construction.
//
// IDX layout (big-endian):
//   images: 0x00000803 | count | rows | cols | count*rows*cols unsigned bytes
//   labels: 0x00000801 | count | count unsigned bytes

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "digitsum/error.hpp"
#include "digitsum/random.hpp"

namespace digitsum {

using ImageMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageId = std::uint32_t;
using Digit = std::uint8_t;

enum class Split { train, test, synthetic };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::synthetic: return "synthetic";
  }
  return "unknown";
}

// N images (one per row, intensities in [0,1]) together with held-out digit labels.
class ImageStore {
 public:
  ImageStore() = default;

  ImageStore(ImageMatrix images, std::vector<Digit> labels, Split split, int rows, int cols)
      : images_(std::move(images)), labels_(std::move(labels)), split_(split), rows_(rows), cols_(cols) {
    if (static_cast<std::size_t>(images_.rows()) != labels_.size()) {
      throw consistency_error("image count " + std::to_string(images_.rows()) +
                              " does not match label count " + std::to_string(labels_.size()));
    }
    if (static_cast<Eigen::Index>(rows_) * cols_ != images_.cols()) {
      throw shape_error("image geometry " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                        " does not match row width " + std::to_string(images_.cols()));
    }
    if (images_.size() > 0 && (images_.minCoeff() < 0.0f || images_.maxCoeff() > 1.0f)) {
      throw argument_error("image intensities must lie in [0,1]");
    }
    for (Digit d : labels_) {
      if (d > 9) throw argument_error("label out of range: " + std::to_string(d));
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  Eigen::Index pixels() const noexcept { return images_.cols(); }
  int image_rows() const noexcept { return rows_; }
  int image_cols() const noexcept { return cols_; }
  Split split() const noexcept { return split_; }
  const ImageMatrix& images() const noexcept { return images_; }

  // Ground truth. Reserved for corpus construction and evaluation; no training stage reads it.
  std::span<const Digit> evaluation_labels() const noexcept { return labels_; }

 private:
  ImageMatrix images_;
  std::vector<Digit> labels_;
  Split split_ = Split::train;
  int rows_ = 0;
  int cols_ = 0;
};

// 10^{w-j} for column j (1-based) of a w-digit number; exact integer.
inline std::int64_t positional_weight(int w, int j) {
  if (w < 1 || w > 18) throw argument_error("width out of range: " + std::to_string(w));
  if (j < 1 || j > w) {
    throw argument_error("column " + std::to_string(j) + " outside [1," + std::to_string(w) + "]");
  }
  std::int64_t p = 1;
  for (int e = 0; e < w - j; ++e) p *= 10;
  return p;
}

// One training instance: an h x w grid of image ids plus the sum of the h numbers it spells.
struct Example {
  int w = 1;
  int h = 1;
  std::int64_t sum = 0;
  std::vector<ImageId> ids;  // row-major, ids[i * w + j] for row i, column j (0-based)

  ImageId id(int i, int j) const { return ids[static_cast<std::size_t>(i) * w + j]; }
  std::size_t cells() const noexcept { return ids.size(); }
  // Weight of cell index `cell` (row-major) in the sum.
  std::int64_t weight(std::size_t cell) const { return positional_weight(w, static_cast<int>(cell % w) + 1); }

  friend bool operator==(const Example&, const Example&) = default;
};

struct Corpus {
  int w = 1;
  int h = 1;
  int oversample_factor = 1;
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

// Sum spelled by `digits` laid out row-major in an h x w grid.
inline std::int64_t grid_sum(std::span<const Digit> digits, int w) {
  std::int64_t s = 0;
  for (std::size_t cell = 0; cell < digits.size(); ++cell) {
    s += static_cast<std::int64_t>(digits[cell]) * positional_weight(w, static_cast<int>(cell % w) + 1);
  }
  return s;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw format_error("truncated IDX header in " + path);
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

inline std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path.string());
  return in;
}

}  // namespace detail

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

inline ImageStore load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                           Split split = Split::train) {
  auto img = detail::open_binary(images_path);
  const std::string ip = images_path.string();
  if (const auto magic = detail::read_be32(img, ip); magic != idx_images_magic) {
    throw format_error("bad image magic number in " + ip);
  }
  const std::uint32_t count = detail::read_be32(img, ip);
  const std::uint32_t rows = detail::read_be32(img, ip);
  const std::uint32_t cols = detail::read_be32(img, ip);
  if (rows == 0 || cols == 0) throw format_error("zero image dimension in " + ip);

  auto lab = detail::open_binary(labels_path);
  const std::string lp = labels_path.string();
  if (const auto magic = detail::read_be32(lab, lp); magic != idx_labels_magic) {
    throw format_error("bad label magic number in " + lp);
  }
  const std::uint32_t label_count = detail::read_be32(lab, lp);
  if (label_count != count) {
    throw consistency_error("image file has " + std::to_string(count) + " entries but label file has " +
                            std::to_string(label_count));
  }

  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> raw(static_cast<std::size_t>(count) * pixels);
  if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw format_error("truncated pixel data in " + ip);
  }
  std::vector<Digit> labels(count);
  if (!lab.read(reinterpret_cast<char*>(labels.data()), count)) {
    throw format_error("truncated label data in " + lp);
  }
  for (Digit d : labels) {
    if (d > 9) throw format_error("label byte " + std::to_string(d) + " out of range in " + lp);
  }

  ImageMatrix images(count, static_cast<Eigen::Index>(pixels));
  std::transform(raw.begin(), raw.end(), images.data(), [](unsigned char b) { return b / 255.0f; });
  return ImageStore(std::move(images), std::move(labels), split, static_cast<int>(rows), static_cast<int>(cols));
}

// Standard MNIST file names inside `dir`.
inline ImageStore load_mnist(const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::test ? "t10k" : "train";
  return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), split);
}

// Writes a store back out as IDX files; intensities are rounded to bytes.
inline void save_idx(const ImageStore& store, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw format_error("cannot write IDX files");
  detail::write_be32(img, idx_images_magic);
  detail::write_be32(img, static_cast<std::uint32_t>(store.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(store.image_rows()));
  detail::write_be32(img, static_cast<std::uint32_t>(store.image_cols()));
  const auto& m = store.images();
  std::vector<char> bytes(static_cast<std::size_t>(m.size()));
  std::transform(m.data(), m.data() + m.size(), bytes.begin(),
                 [](float v) { return static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))); });
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  detail::write_be32(lab, idx_labels_magic);
  detail::write_be32(lab, static_cast<std::uint32_t>(store.size()));
  const auto labels = store.evaluation_labels();
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// Shuffles image ids by seed (f independent shuffles concatenated), cuts them into grids of
// w*h and computes each grid's sum from the held-out labels. Leftover ids are dropped.
inline Corpus build_corpus(const ImageStore& store, int w, int h, int oversample_factor, std::uint64_t seed) {
  if (w < 1 || h < 1) throw argument_error("grid dimensions must be positive");
  if (w > 18) throw argument_error("width above 18 overflows 64-bit sums");
  if (oversample_factor < 1) throw argument_error("oversample factor must be >= 1");
  const std::size_t n = store.size();
  const std::size_t cells = static_cast<std::size_t>(w) * h;
  if (cells > n) {
    throw insufficient_data_error("grid of " + std::to_string(cells) + " cells exceeds " + std::to_string(n) +
                                  " images");
  }

  auto rng = make_rng(seed, 0xc0);
  std::vector<ImageId> order;
  order.reserve(n * oversample_factor);
  std::vector<ImageId> perm(n);
  for (int f = 0; f < oversample_factor; ++f) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<ImageId>(i);
    shuffle(perm, rng);
    order.insert(order.end(), perm.begin(), perm.end());
  }

  const auto labels = store.evaluation_labels();
  Corpus corpus{w, h, oversample_factor, {}};
  const std::size_t count = order.size() / cells;
  corpus.examples.reserve(count);
  std::vector<Digit> digits(cells);
  for (std::size_t e = 0; e < count; ++e) {
    Example ex{w, h, 0, {order.begin() + e * cells, order.begin() + (e + 1) * cells}};
    for (std::size_t c = 0; c < cells; ++c) digits[c] = labels[ex.ids[c]];
    ex.sum = grid_sum(digits, w);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

struct SyntheticData {
  ImageStore store;
  Corpus corpus;
};

// Isotropic unit-variance Gaussians around centroids whose minimum pairwise distance is exactly
// `separation`. Point i belongs to Gaussian i % n_clusters. All coordinates are then mapped by a
// single affine transform onto [0,1], which scales every distance by the same factor.
inline SyntheticData generate_synthetic(std::size_t n_images, int n_clusters, double separation, int dim, int w,
                                        int h, std::uint64_t seed) {
  if (n_clusters < 1 || n_clusters > 10) throw argument_error("n_clusters must be in [1,10]");
  if (!(separation > 0.0)) throw argument_error("separation must be positive");
  if (dim < 1) throw argument_error("dim must be positive");
  if (n_images == 0) throw argument_error("n_images must be positive");

  auto rng = make_rng(seed, 0x5e);
  Eigen::MatrixXd centroids(n_clusters, dim);
  for (Eigen::Index i = 0; i < centroids.size(); ++i) centroids.data()[i] = normal01(rng);
  if (n_clusters > 1) {
    double min_dist = std::numeric_limits<double>::infinity();
    for (int a = 0; a < n_clusters; ++a) {
      for (int b = a + 1; b < n_clusters; ++b) {
        min_dist = std::min(min_dist, (centroids.row(a) - centroids.row(b)).norm());
      }
    }
    centroids *= separation / min_dist;
  }

  Eigen::MatrixXd raw(static_cast<Eigen::Index>(n_images), dim);
  std::vector<Digit> labels(n_images);
  for (std::size_t i = 0; i < n_images; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(n_clusters));
    labels[i] = static_cast<Digit>(c);
    for (int d = 0; d < dim; ++d) raw(static_cast<Eigen::Index>(i), d) = centroids(c, d) + normal01(rng);
  }
  const double lo = raw.minCoeff();
  const double span = std::max(raw.maxCoeff() - lo, 1e-12);
  ImageMatrix images = ((raw.array() - lo) / span).cast<float>().matrix();
  images = images.cwiseMax(0.0f).cwiseMin(1.0f);

  // Perfect-square dimensions are laid out as square images so the classifier can consume them.
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
  const bool square = side * side == dim;
  ImageStore store(std::move(images), std::move(labels), Split::synthetic, square ? side : 1, square ? side : dim);
  Corpus corpus = build_corpus(store, w, h, 1, seed);
  return {std::move(store), std::move(corpus)};
}

// Rows [begin, end) of `store` with their labels, tagged as `split`.
inline ImageStore slice_rows(const ImageStore& store, std::size_t begin, std::size_t end, Split split) {
  if (begin > end || end > store.size()) throw argument_error("row slice out of range");
  const auto labels = store.evaluation_labels();
  return ImageStore(store.images().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)),
                    {labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end)},
                    split, store.image_rows(), store.image_cols());
}

// Line-delimited text: "w h s id_11 ... id_hw" per example; '#' lines are comments.
inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  out << "# oversample_factor " << corpus.oversample_factor << '\n';
  for (const auto& ex : corpus.examples) {
    out << ex.w << ' ' << ex.h << ' ' << ex.sum;
    for (ImageId id : ex.ids) out << ' ' << id;
    out << '\n';
  }
}

inline Corpus read_corpus(std::istream& in) {
  Corpus corpus;
  bool first = true;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string key;
      if (hs >> key && key == "oversample_factor") hs >> corpus.oversample_factor;
      continue;
    }
    std::istringstream ls(line);
    Example ex;
    if (!(ls >> ex.w >> ex.h >> ex.sum) || ex.w < 1 || ex.h < 1) {
      throw format_error("malformed corpus record on line " + std::to_string(lineno));
    }
    ex.ids.assign(std::istream_iterator<ImageId>(ls), std::istream_iterator<ImageId>());
    if (ex.ids.size() != static_cast<std::size_t>(ex.w) * ex.h) {
      throw format_error("record on line " + std::to_string(lineno) + " has wrong id count");
    }
    if (first) {
      corpus.w = ex.w;
      corpus.h = ex.h;
      first = false;
    } else if (ex.w != corpus.w || ex.h != corpus.h) {
      throw consistency_error("mixed grid shapes in corpus at line " + std::to_string(lineno));
    }
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path.string());
  write_corpus(out, corpus);
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  return read_corpus(in);
}

}  // namespace digitsum
