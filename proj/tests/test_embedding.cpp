#include <cmath>

#include <gtest/gtest.h>

#include "digitsum/clustering.hpp"
#include "digitsum/embedding.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace digitsum;

TEST(Autoencoder, LayoutMirrorsEncoder) {
  const auto p = init_autoencoder<float>(default_encoder_widths(), 1);
  ASSERT_EQ(p.encoder.size(), 4u);
  ASSERT_EQ(p.decoder.size(), 4u);
  EXPECT_EQ(p.encoder_widths(), (std::vector<int>{784, 500, 500, 2000, 10}));
  const int dec_out[] = {2000, 500, 500, 784};
  for (int l = 0; l < 4; ++l) EXPECT_EQ(p.decoder[l].out(), dec_out[l]);
  EXPECT_TRUE(p.encoder[2].relu);
  EXPECT_FALSE(p.encoder[3].relu);
  EXPECT_TRUE(p.decoder[2].relu);
  EXPECT_FALSE(p.decoder[3].relu);
}

TEST(Autoencoder, HeNormalVariance) {
  const std::vector<int> widths{784, 2000};
  const auto p = init_autoencoder<double>(widths, 3, AeInit::he_normal);
  const auto& w = p.encoder[0].weight;
  const double mean = w.mean();
  const double var = (w.array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(var / (2.0 / 784), 1.0, 0.02);
  EXPECT_TRUE(p.encoder[0].bias.isZero());
}

TEST(Autoencoder, FanInUniformBoundsAndVariance) {
  const std::vector<int> widths{784, 2000};
  const auto p = init_autoencoder<double>(widths, 3);
  const auto& w = p.encoder[0].weight;
  const double limit = std::sqrt(1.0 / 784);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), limit);
  // Var of U(-a, a) is a^2 / 3.
  EXPECT_NEAR(w.array().square().mean() / (limit * limit / 3.0), 1.0, 0.02);
  EXPECT_EQ(parse_ae_init("he"), AeInit::he_normal);
  EXPECT_EQ(parse_ae_init(to_string(AeInit::fan_in_uniform)), AeInit::fan_in_uniform);
  EXPECT_THROW(parse_ae_init("glorot"), argument_error);
}

TEST(Autoencoder, SeedDeterminesWeights) {
  const std::vector<int> widths{16, 8, 3};
  const auto a = init_autoencoder<float>(widths, 5), b = init_autoencoder<float>(widths, 5),
             c = init_autoencoder<float>(widths, 6);
  EXPECT_EQ(a.encoder[0].weight, b.encoder[0].weight);
  EXPECT_NE(a.encoder[0].weight, c.encoder[0].weight);
}

TEST(Autoencoder, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) EXPECT_LT(gradcheck::autoencoder_toy(seed), 1e-4) << "seed " << seed;
}

TEST(Autoencoder, TrainingReducesLoss) {
  const auto store = testutil::random_store(64, 4, 1);
  const std::vector<int> widths{16, 32, 4};
  for (auto opt : {AeOptimizer::adam, AeOptimizer::sgd_momentum}) {
    AutoencoderHyper hy;
    hy.batch_size = 16;
    hy.optimizer = opt;
    hy.learning_rate = opt == AeOptimizer::adam ? 1e-2 : 5e-2;
    auto p = init_autoencoder<float>(widths, 4);
    const double before = reconstruction_loss(p, store.images());
    std::vector<double> losses;
    fit_autoencoder(p, store, 100, 4, hy, [&](int, double loss, const AutoencoderParams<float>&) { losses.push_back(loss); });
    const double after = reconstruction_loss(p, store.images());
    EXPECT_EQ(p.epochs, 100);
    EXPECT_EQ(losses.size(), 100u);
    EXPECT_LT(after, 0.5 * before);
  }
}

TEST(Autoencoder, DivergenceReportsEpoch) {
  const auto store = testutil::random_store(32, 4, 1);
  AutoencoderHyper hy;
  hy.learning_rate = 1e6;
  hy.batch_size = 8;
  try {
    train_autoencoder<float>(store, 5, 0, hy, std::vector<int>{16, 8, 2});
    FAIL() << "expected divergence";
  } catch (const divergence_error& e) {
    EXPECT_GE(e.epoch(), 1);
    EXPECT_LE(e.epoch(), 5);
  }
}

TEST(Autoencoder, ZeroEpochsKeepsInitialWeights) {
  const auto store = testutil::random_store(8, 4, 1);
  const std::vector<int> widths{16, 8, 2};
  const auto p = train_autoencoder<float>(store, 0, 3, {}, widths);
  EXPECT_EQ(p.encoder[0].weight, init_autoencoder<float>(widths, 3).encoder[0].weight);
}

TEST(Autoencoder, EncodeShapesAndMismatch) {
  const auto store = testutil::random_store(2100, 4, 1);
  const std::vector<int> widths{16, 8, 3};
  const auto p = init_autoencoder<float>(widths, 0);
  const auto emb = encode(p, store);
  EXPECT_EQ(emb.rows(), 2100);
  EXPECT_EQ(emb.cols(), 3);
  // Chunking does not change results beyond float rounding (a lone row takes Eigen's GEMV path).
  const auto single = encode(p, ImageStore(store.images().bottomRows(1), {0}, Split::train, 4, 4));
  EXPECT_NEAR((single.row(0) - emb.row(2099)).norm(), 0.0, 1e-5 * (1.0 + emb.row(2099).norm()));
  EXPECT_THROW(encode(p, testutil::random_store(3, 5, 0)), shape_error);
}

TEST(Autoencoder, SaveLoadRoundTrip) {
  testutil::TempDir dir;
  const auto store = testutil::random_store(20, 4, 1);
  auto p = train_autoencoder<float>(store, 2, 1, {}, std::vector<int>{16, 8, 3});
  save_autoencoder(dir / "ae.bin", p, {{"tag", "x"}});
  nlohmann::json meta;
  const auto q = load_autoencoder(dir / "ae.bin", &meta);
  EXPECT_EQ(meta.at("tag"), "x");
  EXPECT_EQ(q.epochs, 2);
  EXPECT_EQ(encode(p, store), encode(q, store));
}

TEST(Pca, RecoversLowRankData) {
  // Points on a 2-d affine plane in 9 dims.
  auto rng = make_rng(2);
  Eigen::MatrixXd basis(2, 9);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = normal01(rng) * 0.1;
  ImageMatrix x(200, 9);
  for (int i = 0; i < 200; ++i) {
    const Eigen::RowVector2d c(uniform01(rng), uniform01(rng));
    x.row(i) = (Eigen::RowVectorXd::Constant(9, 0.5) + c * basis).cast<float>();
  }
  const ImageStore store(x, std::vector<Digit>(200, 0), Split::train, 3, 3);
  const auto model = pca_fit(store, 3);
  const Eigen::MatrixXd gram = model.components.leftCols(2).transpose() * model.components.leftCols(2);
  EXPECT_TRUE(gram.isIdentity(1e-9));
  EXPECT_TRUE(model.components.col(2).isZero());
  const auto rec = model.reconstruct(model.project(x));
  EXPECT_LT((rec - x.cast<double>()).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_THROW(pca_fit(store, 10), argument_error);
}

TEST(Autoencoder, OverfitsSingleImage) {
  const auto store = testutil::random_store(1, 4, 7);
  AutoencoderHyper hy;
  hy.optimizer = AeOptimizer::adam;
  hy.learning_rate = 1e-2;
  hy.batch_size = 1;
  const auto p = train_autoencoder<float>(store, 500, 1, hy, std::vector<int>{16, 8, 4});
  EXPECT_LT(reconstruction_loss(p, store.images()), 1e-3);
}

TEST(Autoencoder, ZeroEncoderGivesZeroEmbedding) {
  auto p = init_autoencoder<float>(std::vector<int>{16, 8, 3}, 0);
  for (auto& l : p.encoder) {
    l.weight.setZero();
    l.bias.setZero();
  }
  EXPECT_TRUE(encode(p, testutil::random_store(5, 4, 0)).isZero());
}

TEST(Autoencoder, EncodeIsPureAndRowwise) {
  const auto p = init_autoencoder<float>(std::vector<int>{16, 8, 3}, 0);
  ImageMatrix x(2, 16);
  x.row(0) = testutil::random_store(1, 4, 3).images().row(0);
  x.row(1) = x.row(0);
  const ImageStore twice(x, {0, 0}, Split::train, 4, 4);
  const auto a = encode(p, twice), b = encode(p, twice);
  EXPECT_EQ(a.row(0), a.row(1));
  EXPECT_EQ(a, b);
}

TEST(Autoencoder, FinalEpochLossNotAboveFirst) {
  const auto store = testutil::random_store(128, 4, 2);
  AutoencoderHyper hy;
  hy.batch_size = 32;
  std::vector<double> losses;
  train_autoencoder<float>(store, 20, 0, hy, std::vector<int>{16, 16, 4},
                           [&](int, double l, const AutoencoderParams<float>&) { losses.push_back(l); });
  EXPECT_LE(losses.back(), losses.front());
}

TEST(Autoencoder, SameSeedSameTraining) {
  const auto store = testutil::random_store(64, 4, 2);
  const std::vector<int> widths{16, 8, 3};
  const auto a = train_autoencoder<float>(store, 3, 5, {}, widths), b = train_autoencoder<float>(store, 3, 5, {}, widths);
  EXPECT_EQ(a.decoder.back().weight, b.decoder.back().weight);
}

TEST(Pca, SeparatedGaussiansClusterPerfectly) {
  const auto data = generate_synthetic(1000, 10, 100.0, 50, 1, 1, 3);
  const auto emb = pca_embed(data.store, 10);
  EXPECT_EQ(emb.cols(), 10);
  EXPECT_EQ(emb.rows(), 1000);
  EXPECT_DOUBLE_EQ(purity(kmeans(emb, 10, 0), data.store.evaluation_labels()), 1.0);
}
