#include <doctest.h>

#include <cmath>

#include "fds/metrics.hpp"
#include "test_util.hpp"

using namespace fds;
using namespace fds::metrics;
using fds::nn::Mat;

namespace {

Mat<float> gaussian(int n, int d, double shift, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g;
  Mat<float> x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(g(rng));
  x.col(0).array() += static_cast<float>(shift);
  return x;
}

}  // namespace

TEST_CASE("diversity shift of a set with itself is near zero") {
  const auto x = gaussian(1000, 4, 0.0, 1);
  CHECK(diversity_shift(x, x).value <= 0.1);
  CHECK(diversity_shift(x, gaussian(1000, 4, 0.0, 2)).value <= 0.1);
}

TEST_CASE("diversity shift of disjoint sets is near one") {
  const auto a = gaussian(1000, 4, 0.0, 1);
  const auto b = gaussian(1000, 4, 10.0, 2);
  const auto s = diversity_shift(a, b, {}, "h");
  CHECK(s.value >= 0.9);
  CHECK(s.extractor_hash == "h");
  CHECK(s.estimator == kDiversityEstimator);
}

TEST_CASE("diversity shift grows with separation and is deterministic") {
  const auto a = gaussian(600, 3, 0.0, 1);
  double prev = -1.0;
  for (double shift : {0.0, 1.0, 2.0, 4.0}) {
    const double v = diversity_shift(a, gaussian(600, 3, shift, 2)).value;
    CHECK(v >= prev - 0.05);
    prev = v;
  }
  const auto b = gaussian(600, 3, 1.0, 3);
  CHECK(diversity_shift(a, b, {.seed = 4}).value == diversity_shift(a, b, {.seed = 4}).value);
  CHECK_THROWS(diversity_shift(a, gaussian(10, 2, 0.0, 1)));
  CHECK_THROWS(diversity_shift(a, gaussian(1, 3, 0.0, 1)));
}

TEST_CASE("t-SNE separates two clusters") {
  Mat<float> x(60, 5);
  x.topRows(30) = gaussian(30, 5, 0.0, 1);
  x.bottomRows(30) = gaussian(30, 5, 20.0, 2);
  const auto p = tsne(x, {.perplexity = 10.0, .iterations = 300, .seed = 3});
  REQUIRE(p.coords.rows() == 60);
  REQUIRE(p.coords.cols() == 2);
  CHECK(p.coords.allFinite());
  const Eigen::RowVector2d ca = p.coords.topRows(30).colwise().mean();
  const Eigen::RowVector2d cb = p.coords.bottomRows(30).colwise().mean();
  double spread = 0.0;
  for (int r = 0; r < 30; ++r) spread = std::max(spread, (p.coords.row(r) - ca).norm());
  CHECK((ca - cb).norm() > spread);
  const auto q = tsne(x, {.perplexity = 10.0, .iterations = 300, .seed = 3});
  CHECK(q.coords == p.coords);
}

TEST_CASE("embedding projection writes csv and svg") {
  testing::TempDir dir;
  const auto x = gaussian(20, 3, 0.0, 1);
  std::vector<std::string> labels(20, "a");
  for (int i = 10; i < 20; ++i) labels[static_cast<std::size_t>(i)] = "b";
  project_embeddings(x, labels, dir / "emb", {.perplexity = 5.0, .iterations = 100});
  const auto csv = read_text_file(dir / "emb.csv");
  CHECK(csv.rfind("x,y,label\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);
  CHECK(read_text_file(dir / "emb.svg").find("<svg") != std::string::npos);
  CHECK_THROWS(project_embeddings(x, std::vector<std::string>(3, "a"), dir / "bad"));
}
