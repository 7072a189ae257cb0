#include "fds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fds/plot.hpp"

namespace fds::metrics {

namespace {

using MatD = Eigen::MatrixXd;
using VecD = Eigen::VectorXd;

// Class-weighted L2-regularised logistic regression by Newton's method. The
// last column of x is the (unpenalised) bias.
VecD fit_logistic(const MatD& x, const VecD& y, const VecD& w, double l2, int iters) {
  const auto d = x.cols();
  VecD beta = VecD::Zero(d);
  VecD reg = VecD::Constant(d, l2);
  reg(d - 1) = 1e-9;
  for (int it = 0; it < iters; ++it) {
    const VecD z = (x * beta).cwiseMax(-30.0).cwiseMin(30.0);
    const VecD p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    const VecD g = x.transpose() * (w.array() * (p - y).array()).matrix() + reg.cwiseProduct(beta);
    const VecD s = (w.array() * p.array() * (1.0 - p.array())).matrix();
    MatD h = x.transpose() * s.asDiagonal() * x;
    h.diagonal() += reg;
    const VecD step = h.ldlt().solve(g);
    beta -= step;
    if (step.norm() < 1e-10) break;
  }
  return beta;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(derive_seed(seed, n));
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

DiversityScore diversity_shift(const Mat<float>& fa, const Mat<float>& fb, const DiversityConfig& cfg,
                               const std::string& extractor_hash) {
  if (fa.cols() != fb.cols()) throw std::invalid_argument("diversity_shift: feature dimension mismatch");
  if (fa.rows() < 2 || fb.rows() < 2) throw std::invalid_argument("diversity_shift: each set needs at least two points");
  const auto d = fa.cols();
  const double n_all = static_cast<double>(fa.rows() + fb.rows());
  VecD mean = (fa.cast<double>().colwise().sum() + fb.cast<double>().colwise().sum()).transpose() / n_all;
  VecD var = VecD::Zero(d);
  for (Eigen::Index r = 0; r < fa.rows(); ++r) var += (fa.row(r).cast<double>().transpose() - mean).cwiseAbs2();
  for (Eigen::Index r = 0; r < fb.rows(); ++r) var += (fb.row(r).cast<double>().transpose() - mean).cwiseAbs2();
  const VecD sd = (var / n_all).cwiseSqrt().cwiseMax(1e-8);

  const auto pa = permutation(static_cast<std::size_t>(fa.rows()), cfg.seed);
  const auto pb = permutation(static_cast<std::size_t>(fb.rows()), cfg.seed);
  auto row = [&](const Mat<float>& f, std::size_t r) {
    VecD v(d + 1);
    v.head(d) = (f.row(static_cast<Eigen::Index>(r)).cast<double>().transpose() - mean).cwiseQuotient(sd);
    v(d) = 1.0;
    return v;
  };
  double hit_a = 0.0, hit_b = 0.0;
  for (int fold = 0; fold < 2; ++fold) {
    auto in_fold = [&](std::size_t k, std::size_t n) { return (k < n / 2) == (fold == 0); };
    std::vector<std::size_t> ta, tb, ea, eb;
    for (std::size_t k = 0; k < pa.size(); ++k) (in_fold(k, pa.size()) ? ta : ea).push_back(pa[k]);
    for (std::size_t k = 0; k < pb.size(); ++k) (in_fold(k, pb.size()) ? tb : eb).push_back(pb[k]);
    const auto n = static_cast<Eigen::Index>(ta.size() + tb.size());
    MatD x(n, d + 1);
    VecD y(n), w(n);
    Eigen::Index i = 0;
    for (auto r : ta) x.row(i) = row(fa, r).transpose(), y(i) = 1.0, w(i++) = 0.5 / static_cast<double>(ta.size());
    for (auto r : tb) x.row(i) = row(fb, r).transpose(), y(i) = 0.0, w(i++) = 0.5 / static_cast<double>(tb.size());
    const VecD beta = fit_logistic(x, y, w, cfg.l2, cfg.newton_iterations);
    for (auto r : ea) {
      const double z = row(fa, r).dot(beta);
      hit_a += z > 0.0 ? 1.0 : (z == 0.0 ? 0.5 : 0.0);
    }
    for (auto r : eb) {
      const double z = row(fb, r).dot(beta);
      hit_b += z < 0.0 ? 1.0 : (z == 0.0 ? 0.5 : 0.0);
    }
  }
  DiversityScore s;
  s.balanced_accuracy = 0.5 * (hit_a / static_cast<double>(fa.rows()) + hit_b / static_cast<double>(fb.rows()));
  s.value = std::clamp(2.0 * s.balanced_accuracy - 1.0, 0.0, 1.0);
  s.extractor_hash = extractor_hash;
  return s;
}

Mat<float> features_for_metric(const classifier::Classifier& h, const Mat<float>& payloads, int batch_size) {
  require(batch_size >= 1, "features_for_metric: batch_size must be >= 1");
  Mat<float> out(payloads.rows(), h.feature_dim());
  for (Eigen::Index start = 0; start < payloads.rows(); start += batch_size) {
    const Eigen::Index n = std::min<Eigen::Index>(batch_size, payloads.rows() - start);
    out.middleRows(start, n) = h.features(payloads.middleRows(start, n));
  }
  return out;
}

Mat<float> features_for_metric(const classifier::Classifier& h, const data::MultiDomainDataset& dataset,
                               std::span<const SampleId> ids, int batch_size) {
  return features_for_metric(h, dataset.gather(ids), batch_size);
}

// --- t-SNE ---------------------------------------------------------------

Projection tsne(const Mat<float>& features, const TsneConfig& cfg) {
  const auto n = features.rows();
  if (n < 10) throw std::invalid_argument("tsne: need at least 10 points");
  Projection out;
  MatD x = features.cast<double>();
  Rng rng(derive_seed(cfg.seed, 0x75e));
  std::normal_distribution<double> normal(0.0, 1.0);
  MatD dist(n, n);
  auto distances = [&] {
    const VecD sq = x.rowwise().squaredNorm();
    dist = (-2.0 * x * x.transpose()).colwise() + sq;
    dist.rowwise() += sq.transpose();
    dist = dist.cwiseMax(0.0);
  };
  distances();
  if (dist.maxCoeff() < 1e-12) {
    std::cerr << "warning: identical features, adding jitter before projection\n";
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += 1e-4 * normal(rng);
    out.jittered = true;
    distances();
  }
  const double perp = std::min(cfg.perplexity, static_cast<double>(n - 1) / 3.0);
  const double target = std::log(perp);
  MatD p = MatD::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = INFINITY;
    for (int it = 0; it < 64; ++it) {
      double sum = 0.0, hsum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double v = std::exp(-beta * dist(i, j));
        p(i, j) = v;
        sum += v;
        hsum += beta * dist(i, j) * v;
      }
      sum = std::max(sum, 1e-300);
      const double h = std::log(sum) + hsum / sum;
      for (Eigen::Index j = 0; j < n; ++j) p(i, j) /= sum;
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  MatD y(n, 2), gains = MatD::Ones(n, 2), update = MatD::Zero(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = 1e-4 * normal(rng);
  MatD q(n, n), grad(n, 2);
  for (int it = 0; it < cfg.iterations; ++it) {
    const double exag = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    const VecD sq = y.rowwise().squaredNorm();
    MatD num = (-2.0 * y * y.transpose()).colwise() + sq;
    num.rowwise() += sq.transpose();
    num = (1.0 / (1.0 + num.array())).matrix();
    num.diagonal().setZero();
    const double qsum = std::max(num.sum(), 1e-300);
    q = (num / qsum).cwiseMax(1e-12);
    const MatD coef = ((exag * p - q).array() * num.array()).matrix();
    grad = 4.0 * (coef.rowwise().sum().asDiagonal() * y - coef * y);
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      const bool same = (grad.data()[k] > 0.0) == (update.data()[k] > 0.0);
      gains.data()[k] = std::max(same ? gains.data()[k] * 0.8 : gains.data()[k] + 0.2, 0.01);
      update.data()[k] = momentum * update.data()[k] - cfg.learning_rate * gains.data()[k] * grad.data()[k];
      y.data()[k] += update.data()[k];
    }
    y.rowwise() -= y.colwise().mean();
  }
  out.coords = y;
  return out;
}

Projection project_embeddings(const Mat<float>& features, const std::vector<std::string>& labels,
                              const std::filesystem::path& stem, const TsneConfig& cfg, const std::string& title) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) throw std::invalid_argument("project_embeddings: one label per point");
  Projection proj = tsne(features, cfg);
  std::ostringstream csv;
  csv << "x,y,label\n";
  std::vector<std::pair<double, double>> pts;
  for (Eigen::Index i = 0; i < proj.coords.rows(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,", proj.coords(i, 0), proj.coords(i, 1));
    csv << buf << labels[static_cast<std::size_t>(i)] << '\n';
    pts.emplace_back(proj.coords(i, 0), proj.coords(i, 1));
  }
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  write_file_atomic(stem.string() + ".csv", csv.str());
  plot::write_scatter(stem.string() + ".svg", pts, labels, title + " [features: " + kFeatureExtractorTag + "]");
  return proj;
}

}  // namespace fds::metrics
