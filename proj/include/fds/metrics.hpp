#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fds/classifier.hpp"
#include "fds/dataset.hpp"

namespace fds::metrics {

using nn::Mat;

inline constexpr const char* kDiversityEstimator = "crossfit-logistic-2fold";
inline constexpr const char* kFeatureExtractorTag = "feedback-classifier-penultimate";

struct DiversityConfig {
  double l2 = 1e-2;
  int newton_iterations = 30;
  std::uint64_t seed = 0;
};

// Two-sample discriminator score: a class-balanced logistic regression is
// cross-fitted over two folds; value = clamp(2 * balanced_accuracy - 1, 0, 1).
// An approximation of a support-mismatch shift, not the OoD-Bench estimator.
struct DiversityScore {
  double value = 0.0;
  double balanced_accuracy = 0.5;
  std::string estimator = kDiversityEstimator;
  std::string extractor_hash;
};

DiversityScore diversity_shift(const Mat<float>& features_a, const Mat<float>& features_b, const DiversityConfig& config = {},
                               const std::string& extractor_hash = {});

// Penultimate activations of the classifier.
Mat<float> features_for_metric(const classifier::Classifier& h, const data::MultiDomainDataset& dataset,
                               std::span<const SampleId> ids, int batch_size = 256);
Mat<float> features_for_metric(const classifier::Classifier& h, const Mat<float>& payloads, int batch_size = 256);

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 500;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 100;
  std::uint64_t seed = 0;
};

struct Projection {
  Mat<double> coords;  // n x 2
  bool jittered = false;
};

// Exact t-SNE (perplexity-calibrated Gaussian affinities, Student-t embedding).
Projection tsne(const Mat<float>& features, const TsneConfig& config = {});

// Writes <stem>.csv (x,y,label) and <stem>.svg colored by label.
Projection project_embeddings(const Mat<float>& features, const std::vector<std::string>& labels,
                              const std::filesystem::path& stem, const TsneConfig& config = {},
                              const std::string& title = "t-SNE");

}  // namespace fds::metrics
