#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fodforge/classifier.hpp"
#include "test_util.hpp"

namespace fodforge {
namespace {

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd z = testing::random_vector(rng, 15).reshaped(5, 3);
  const std::vector<int> y{0, 3, 4};
  const CrossEntropy ce = softmax_cross_entropy(z, y);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Eigen::MatrixXd zp = z, zm = z;
    zp(i) += 1e-6;
    zm(i) -= 1e-6;
    const double num = (softmax_cross_entropy(zp, y).loss - softmax_cross_entropy(zm, y).loss) / 2e-6;
    EXPECT_NEAR(ce.dlogits(i), num, 1e-8);
  }
  EXPECT_THROW(softmax_cross_entropy(z, {0, 5, 1}), InvalidInput);
}

TEST(FixelClassifier, ArchitectureAndShapes) {
  FixelClassifier net;
  std::size_t weights = 0;
  for (const auto& t : net.params().tensors())
    if (t.name.ends_with(".weight")) ++weights;
  EXPECT_EQ(weights, kClassifierWidths.size() - 1);
  const Eigen::MatrixXd logits = net.predict(Eigen::MatrixXd::Random(45, 7));
  EXPECT_EQ(logits.rows(), 5);
  EXPECT_EQ(logits.cols(), 7);
  EXPECT_THROW(net.predict(Eigen::MatrixXd::Random(47, 2)), InvalidInput);
}

TEST(FixelClassifier, FrozenUseLeavesParametersUntouched) {
  FixelClassifier net;
  net.init(5);
  const auto before = net.params().tensors();
  const std::size_t calls = net.calls();
  FixelClassifier::Cache cache;
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(45, 6);
  const CrossEntropy ce = softmax_cross_entropy(net.predict(x, &cache), {0, 1, 2, 3, 4, 1});
  net.input_gradient(cache, ce.dlogits);
  EXPECT_EQ(net.calls(), calls + 1);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(net.params().tensors()[i].value, before[i].value) << before[i].name;
    EXPECT_EQ(net.params().tensors()[i].grad, before[i].grad) << before[i].name;
  }
}

TEST(FixelClassifier, InputGradientMatchesFiniteDifferences) {
  FixelClassifier net;
  net.init(9);
  const LabelledFods data = synthetic_fixel_dataset(4, 11);
  const Eigen::MatrixXd& x = data.coeffs;
  const std::vector<int> y{0, 1, 2, 3};
  FixelClassifier::Cache cache;
  const CrossEntropy ce = softmax_cross_entropy(net.predict(x, &cache), y);
  const Eigen::MatrixXd g = net.input_gradient(cache, ce.dlogits);
  std::mt19937_64 rng(2);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(x.size()));
    Eigen::MatrixXd xp = x, xm = x;
    xp(i) += 1e-6;
    xm(i) -= 1e-6;
    const double num = (softmax_cross_entropy(net.predict(xp), y).loss - softmax_cross_entropy(net.predict(xm), y).loss) / 2e-6;
    EXPECT_LE(testing::rel_err(g(i), num, 1e-6), 1e-4) << "entry " << i;
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(FixelClassifier, TrainModeInputGradientMatchesFiniteDifferences) {
  FixelClassifier net;
  net.init(4);
  const LabelledFods data = synthetic_fixel_dataset(6, 13);
  const std::vector<int> y{0, 1, 2, 3, 4, 1};
  auto loss = [&](const Eigen::MatrixXd& x) { return softmax_cross_entropy(net.forward(x, nn::Mode::Train), y).loss; };
  FixelClassifier::Cache cache;
  const CrossEntropy ce = softmax_cross_entropy(net.forward(data.coeffs, nn::Mode::Train, &cache), y);
  const Eigen::MatrixXd g = net.input_gradient(cache, ce.dlogits);
  for (Eigen::Index i = 0; i < 20; ++i) {
    Eigen::MatrixXd xp = data.coeffs, xm = data.coeffs;
    xp(3 * i) += 1e-6;
    xm(3 * i) -= 1e-6;
    EXPECT_LE(testing::rel_err(g(3 * i), (loss(xp) - loss(xm)) / 2e-6, 1e-6), 1e-4);
  }
}

TEST(SyntheticFixels, LabelsCoverAllClasses) {
  const LabelledFods d = synthetic_fixel_dataset(300, 1);
  EXPECT_EQ(d.coeffs.rows(), 45);
  EXPECT_EQ(d.coeffs.cols(), 300);
  std::array<int, 5> hist{};
  for (int y : d.labels) {
    ASSERT_GE(y, 0);
    ASSERT_LE(y, 4);
    ++hist[static_cast<std::size_t>(y)];
  }
  for (int h : hist) EXPECT_GT(h, 20);
  const LabelledFods again = synthetic_fixel_dataset(300, 1);
  EXPECT_EQ(again.coeffs, d.coeffs);
  EXPECT_EQ(again.labels, d.labels);
}

TEST(SyntheticFixels, RotationKeepsBandPowerAndMovesPeaks) {
  const ShScheme sh(8);
  const Vec3 d(0.0, 0.0, 1.0);
  const Eigen::Matrix3d R = Eigen::AngleAxisd(0.7, Vec3(1.0, 2.0, 0.5).normalized()).toRotationMatrix();
  const Eigen::VectorXd c = delta_sh(d, sh);
  const Eigen::VectorXd r = rotate_sh(c, R, sh);
  EXPECT_LE((r - delta_sh(R * d, sh)).norm(), 1e-9 * c.norm());
  for (int l = 0; l <= 8; l += 2) {
    const int start = ShScheme::count(l) - (2 * l + 1);
    EXPECT_NEAR(c.segment(start, 2 * l + 1).norm(), r.segment(start, 2 * l + 1).norm(), 1e-9);
  }
  const LabelledFods base = synthetic_fixel_dataset(20, 2);
  const LabelledFods aug = augment_with_rotations(base, 2, 3);
  EXPECT_EQ(aug.coeffs.cols(), 60);
  EXPECT_EQ(aug.labels.size(), 60u);
  EXPECT_THROW(augment_with_rotations(base, -1, 3), ConfigError);
}

TEST(ClassifierTraining, LossDecreasesAndIsDeterministic) {
  const LabelledFods d = synthetic_fixel_dataset(200, 7);
  ClassifierTrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch = 20;
  cfg.seed = 1;
  FixelClassifier a, b;
  const ClassifierTrainResult ra = train_classifier(a, d.coeffs, d.labels, cfg);
  EXPECT_LT(ra.final_loss, ra.initial_loss);
  EXPECT_EQ(ra.epoch_loss.size(), 10u);
  EXPECT_LT(ra.epoch_loss.back(), ra.epoch_loss.front());
  train_classifier(b, d.coeffs, d.labels, cfg);
  for (std::size_t i = 0; i < a.params().tensors().size(); ++i)
    EXPECT_EQ(a.params().tensors()[i].value, b.params().tensors()[i].value);
}

TEST(ClassifierTraining, RejectsDegenerateData) {
  FixelClassifier net;
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(45, 10);
  EXPECT_THROW(train_classifier(net, x, std::vector<int>(10, 2)), ConfigError);
  EXPECT_THROW(train_classifier(net, x, std::vector<int>(9, 2)), InvalidInput);
  std::vector<int> bad(10, 1);
  bad[0] = 5;
  EXPECT_THROW(train_classifier(net, x, bad), InvalidInput);
  ClassifierTrainConfig cfg;
  cfg.epochs = 0;
  std::vector<int> ok(10, 1);
  ok[0] = 0;
  EXPECT_THROW(train_classifier(net, x, ok, cfg), ConfigError);
}

TEST(ClassifierTraining, SixFixelsLabelledFour) {
  // Six well separated equal lobes segment to six fixels, which the label caps at four.
  const ShScheme sh(8);
  const double g = (1.0 + std::sqrt(5.0)) / 2.0;
  const std::vector<Vec3> axes{Vec3(0, 1, g), Vec3(0, -1, g), Vec3(1, g, 0), Vec3(-1, g, 0), Vec3(g, 0, 1), Vec3(-g, 0, 1)};
  Eigen::VectorXd c = Eigen::VectorXd::Zero(sh.size());
  for (const Vec3& a : axes) c += delta_sh(a.normalized(), sh) / 6.0;
  const std::size_t count = FixelSegmenter().segment(c).size();
  EXPECT_GE(count, 5u);
  EXPECT_EQ(fixel_label(count), 4);
}

TEST(SyntheticFixels, NoiseCopiesKeepLabels) {
  const LabelledFods base = synthetic_fixel_dataset(30, 4);
  const LabelledFods aug = augment_with_noise(base, 2, 0.05, 1);
  ASSERT_EQ(aug.coeffs.cols(), 90);
  for (int j = 0; j < 30; ++j) {
    EXPECT_EQ(aug.labels[static_cast<std::size_t>(60 + j)], base.labels[static_cast<std::size_t>(j)]);
    EXPECT_LE((aug.coeffs.col(60 + j) - base.coeffs.col(j)).cwiseAbs().maxCoeff(), 0.05 * 6.0);
  }
  EXPECT_EQ(augment_with_noise(base, 0, 0.05, 1).coeffs, base.coeffs);
  EXPECT_EQ(augment_with_noise(base, 2, 0.05, 1).coeffs, aug.coeffs);
  EXPECT_THROW(augment_with_noise(base, 1, -1.0, 1), ConfigError);
}

}  // namespace
}  // namespace fodforge
