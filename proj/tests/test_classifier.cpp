#include <doctest.h>

#include <cmath>

#include "fds/classifier.hpp"
#include "fds/trainer.hpp"
#include "gradcheck.hpp"

using namespace fds;
using namespace fds::classifier;
using fds::nn::Mat;

namespace {

template <typename T>
Mat<T> random_batch(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n;
  Mat<T> x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(n(rng));
  return x;
}

}  // namespace

TEST_CASE("cross entropy of uniform logits is ln m") {
  for (int m : {2, 3, 7, 10}) {
    const Mat<double> logits = Mat<double>::Constant(5, m, 0.3);
    const std::vector<int> labels{0, 1, 0, 1, 1};
    CHECK(std::abs(trainer::cross_entropy<double>(logits, labels) - std::log(static_cast<double>(m))) < 1e-12);
  }
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  const auto logits = random_batch<double>(4, 3, 1);
  const std::vector<int> labels{2, 0, 1, 1};
  Mat<double> d;
  trainer::cross_entropy<double>(logits, labels, &d);
  const auto p = softmax(logits);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) CHECK(d(r, c) == doctest::Approx((p(r, c) - (labels[r] == c ? 1.0 : 0.0)) / 4.0));
  CHECK_THROWS(trainer::cross_entropy<double>(logits, std::vector<int>{0, 1}));
  CHECK_THROWS(trainer::cross_entropy<double>(logits, std::vector<int>{0, 1, 2, 3}));
}

TEST_CASE("softmax rows and argmax ties") {
  Mat<double> logits(2, 3);
  logits << 1000.0, 1000.0, 999.0, -5.0, 0.0, 5.0;
  const auto p = softmax(logits);
  for (int r = 0; r < 2; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0));
  CHECK(p(0, 0) == p(0, 1));
  std::vector<double> row{0.4, 0.4, 0.2};
  CHECK(argmax(row) == 0);
  row = {0.1, 0.3, 0.6};
  CHECK(argmax(row) == 2);
}

TEST_CASE("mlp classifier gradients match finite differences") {
  ClassifierConfig cfg;
  cfg.architecture = "mlp";
  cfg.hidden = 8;
  cfg.penultimate = 4;
  Rng rng(3);
  Network<double> net(cfg, data::PayloadMode::point, {2}, 3, rng);
  const auto x = random_batch<double>(6, 2, 4);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  const auto r = testing::check_gradients(net.params(), [&](bool bp) { return trainer::cross_entropy_loss(net, x, labels, bp); });
  CHECK(r.parameters == 75);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("conv classifier gradients match finite differences") {
  ClassifierConfig cfg;
  cfg.architecture = "conv";
  cfg.conv1_channels = 2;
  cfg.conv2_channels = 2;
  cfg.penultimate = 4;
  Rng rng(5);
  Network<double> net(cfg, data::PayloadMode::image, {1, 4, 4}, 2, rng);
  const auto x = random_batch<double>(3, 16, 6);
  const std::vector<int> labels{0, 1, 1};
  const auto r = testing::check_gradients(net.params(), [&](bool bp) { return trainer::cross_entropy_loss(net, x, labels, bp); });
  CHECK(r.parameters == 80);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("linear classifier gradients match finite differences") {
  ClassifierConfig cfg;
  cfg.architecture = "linear";
  Rng rng(7);
  Network<double> net(cfg, data::PayloadMode::point, {2}, 4, rng);
  const auto x = random_batch<double>(5, 2, 8);
  const std::vector<int> labels{0, 3, 2, 1, 3};
  const auto r = testing::check_gradients(net.params(), [&](bool bp) { return trainer::cross_entropy_loss(net, x, labels, bp); });
  CHECK(r.parameters == 12);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("classifier construction errors") {
  ClassifierConfig cfg;
  cfg.architecture = "conv";
  CHECK_THROWS_AS(Classifier(cfg, data::PayloadMode::point, {2}, 2, 0), ConfigError);
  cfg.architecture = "transformer";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  Classifier ok(ClassifierConfig{}, data::PayloadMode::point, {2}, 2, 0);
  CHECK_THROWS(ok.predict_proba(Mat<float>::Zero(1, 3)));
}

TEST_CASE("classifier checkpoint round trip") {
  ClassifierConfig cfg;
  cfg.architecture = "conv";
  Classifier a(cfg, data::PayloadMode::image, {1, 8, 8}, 3, 11);
  const auto ck = a.to_checkpoint();
  const auto b = Classifier::from_checkpoint(ck);
  CHECK(a.content_hash() == b.content_hash());
  const auto x = random_batch<float>(4, 64, 12);
  CHECK(a.predict_proba(x) == b.predict_proba(x));
  CHECK(b.shape() == std::vector<int>{1, 8, 8});

  Classifier c(cfg, data::PayloadMode::image, {1, 8, 8}, 3, 12);
  CHECK(c.content_hash() != a.content_hash());
  c.set_weights(a.weights());
  CHECK(c.predict_proba(x) == a.predict_proba(x));
  CHECK_THROWS(c.set_weights(std::vector<float>(3, 0.0f)));
}

TEST_CASE("predictions are row independent") {
  Classifier h(ClassifierConfig{}, data::PayloadMode::point, {2}, 3, 1);
  const auto x = random_batch<float>(10, 2, 2);
  const auto full = h.predict_proba(x);
  for (int r = 0; r < 10; ++r) CHECK(h.predict_proba(x.row(r)) == full.row(r));
  CHECK(h.features(x).cols() == h.feature_dim());
}
