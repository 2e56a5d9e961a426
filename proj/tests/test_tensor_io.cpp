#include <fstream>

#include <gtest/gtest.h>

#include "digitsum/tensor_io.hpp"
#include "test_util.hpp"

using namespace digitsum;

TEST(TensorFile, RoundTripsAllTypes) {
  testutil::TempDir dir;
  TensorFile f;
  f.meta = {{"seed", 7}, {"note", "x"}};
  Eigen::MatrixXf m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  f.put_matrix("m", m);
  const std::vector<double> d{0.1, -2.5};
  f.put<double>("d", {2}, d);
  const std::vector<std::int32_t> ints{-1, 0, 7};
  f.put<std::int32_t>("i", {3, 1}, ints);
  f.save(dir / "t.bin");

  const auto g = TensorFile::load(dir / "t.bin");
  EXPECT_EQ(g.meta.at("seed"), 7);
  EXPECT_EQ(g.get_matrix<float>("m"), m);
  EXPECT_EQ(g.get<double>("d"), d);
  EXPECT_EQ(g.get<std::int32_t>("i"), ints);
  EXPECT_THROW(g.get<float>("d"), format_error);
  EXPECT_THROW(g.find("missing"), format_error);
}

TEST(TensorFile, ShapeMismatchRejected) {
  TensorFile f;
  const std::vector<float> v(5);
  EXPECT_THROW(f.put<float>("v", {2, 2}, v), shape_error);
}

TEST(TensorFile, CorruptFilesRejected) {
  testutil::TempDir dir;
  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out << "NOPE0000";
  }
  EXPECT_THROW(TensorFile::load(dir / "bad.bin"), format_error);

  TensorFile f;
  const std::vector<float> v(100, 1.0f);
  f.put<float>("v", {100}, v);
  f.save(dir / "t.bin");
  std::filesystem::resize_file(dir / "t.bin", std::filesystem::file_size(dir / "t.bin") - 8);
  EXPECT_THROW(TensorFile::load(dir / "t.bin"), format_error);
}

TEST(IntArray, RoundTrip) {
  testutil::TempDir dir;
  const std::vector<std::int32_t> v{3, 1, 4, 1, 5, 9, 2, 6};
  write_int_array(dir / "a.i32", v);
  EXPECT_EQ(read_int_array(dir / "a.i32"), v);
  std::filesystem::resize_file(dir / "a.i32", 7);
  EXPECT_THROW(read_int_array(dir / "a.i32"), format_error);
}
