#pragma once

// Flat binary tensor files with a JSON header.
//
//   bytes 0..3   "DSTF"
//   bytes 4..11  header length L, little-endian uint64
//   next L bytes UTF-8 JSON: {"tensors":[{"name","dtype","shape"}...], "meta":{...}}
//   remainder    tensor payloads, little-endian, concatenated in header order
//
// Integer arrays that stand alone (cluster assignment, final labels) are written as raw
// little-endian int32 without a header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "digitsum/error.hpp"

namespace digitsum {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

enum class DType { f32, f64, i32 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
  }
  return "?";
}

inline std::size_t dtype_size(DType t) { return t == DType::f64 ? 8 : 4; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "i32") return DType::i32;
  throw format_error("unknown dtype " + s);
}

struct Tensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> bytes;

  std::int64_t elements() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else {
    static_assert(std::is_same_v<T, std::int32_t>);
    return DType::i32;
  }
}

class TensorFile {
 public:
  nlohmann::json meta = nlohmann::json::object();

  const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

  template <typename T>
  void put(std::string name, std::vector<std::int64_t> shape, std::span<const T> values) {
    Tensor t{std::move(name), dtype_of<T>(), std::move(shape), {}};
    if (t.elements() != static_cast<std::int64_t>(values.size())) {
      throw shape_error("tensor " + t.name + " shape does not match value count");
    }
    t.bytes.resize(values.size_bytes());
    std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
    tensors_.push_back(std::move(t));
  }

  // Stores a dense matrix row-major as shape [rows, cols].
  template <typename Derived>
  void put_matrix(std::string name, const Eigen::MatrixBase<Derived>& m) {
    using T = typename Derived::Scalar;
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    put<T>(std::move(name), {rm.rows(), rm.cols()}, std::span<const T>(rm.data(), static_cast<std::size_t>(rm.size())));
  }

  const Tensor& find(const std::string& name) const {
    for (const auto& t : tensors_) {
      if (t.name == name) return t;
    }
    throw format_error("tensor " + name + " missing from file");
  }

  template <typename T>
  std::vector<T> get(const std::string& name) const {
    const Tensor& t = find(name);
    if (t.dtype != dtype_of<T>()) throw format_error("tensor " + name + " has dtype " + dtype_name(t.dtype));
    std::vector<T> out(static_cast<std::size_t>(t.elements()));
    std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    return out;
  }

  template <typename T>
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> get_matrix(const std::string& name) const {
    const Tensor& t = find(name);
    if (t.shape.size() != 2) throw shape_error("tensor " + name + " is not a matrix");
    const auto v = get<T>(name);
    return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), t.shape[0],
                                                                                               t.shape[1]);
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors_) {
      header["tensors"].push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}});
    }
    header["meta"] = meta;
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot write " + path.string());
    out.write("DSTF", 4);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors_) {
      out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    }
    if (!out) throw format_error("short write to " + path.string());
  }

  static TensorFile load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("cannot open " + path.string());
    char magic[4];
    std::uint64_t len = 0;
    if (!in.read(magic, 4) || std::memcmp(magic, "DSTF", 4) != 0) {
      throw format_error("bad tensor file magic in " + path.string());
    }
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30)) {
      throw format_error("bad tensor header length in " + path.string());
    }
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw format_error("truncated header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw format_error(std::string("tensor header is not JSON: ") + e.what());
    }
    TensorFile file;
    file.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      Tensor t;
      t.name = entry.at("name").get<std::string>();
      t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      t.bytes.resize(static_cast<std::size_t>(t.elements()) * dtype_size(t.dtype));
      if (!in.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()))) {
        throw format_error("truncated payload for tensor " + t.name);
      }
      file.tensors_.push_back(std::move(t));
    }
    return file;
  }

 private:
  std::vector<Tensor> tensors_;
};

inline void write_int_array(const std::filesystem::path& path, std::span<const std::int32_t> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

inline std::vector<std::int32_t> read_int_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw format_error("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % 4 != 0) throw format_error(path.string() + " is not an int32 array");
  std::vector<std::int32_t> v(size / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(size));
  return v;
}

}  // namespace digitsum
