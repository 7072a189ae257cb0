#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/classifier.hpp"
#include "fds/dataset.hpp"

namespace fds::trainer {

using classifier::Classifier;
using classifier::ClassifierConfig;
using nn::Mat;

// Mean negative log-likelihood of the true classes. When d_logits is given it
// receives d loss / d logits.
template <typename T>
double cross_entropy(const Mat<T>& logits, std::span<const int> labels, Mat<T>* d_logits = nullptr) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw std::invalid_argument("cross_entropy: one label per row");
  const auto m = logits.cols();
  for (int y : labels)
    if (y < 0 || y >= m) throw std::out_of_range("cross_entropy: label out of range");
  const Mat<double> p = classifier::softmax(logits);
  const double n = static_cast<double>(logits.rows());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) loss -= std::log(std::max(p(r, labels[static_cast<std::size_t>(r)]), 1e-300));
  if (d_logits) {
    Mat<double> g = p;
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    *d_logits = (g / n).template cast<T>();
  }
  return loss / n;
}

// Loss of a classifier network on a labeled batch (training path).
template <typename T>
double cross_entropy_loss(classifier::Network<T>& net, const Mat<T>& x, std::span<const int> labels, bool backprop) {
  const Mat<T> logits = net.forward(x);
  Mat<T> d;
  const double loss = cross_entropy<T>(logits, labels, backprop ? &d : nullptr);
  if (backprop) net.backward(d);
  return loss;
}

struct TrainConfig {
  ClassifierConfig classifier;
  int steps = 2000;
  int batch_size = 64;  // split evenly across training domains
  double lr = 1e-3;
  double weight_decay = 0.0;
  int checkpoint_every = 50;
  int ring_size = 200;
  bool record_test_trace = false;  // never used for selection

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LogEntry {
  int step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous entry
  double val_accuracy = 0.0;
  std::optional<double> test_accuracy;
};

struct RingCheckpoint {
  int step = 0;
  double val_accuracy = 0.0;
  std::vector<float> weights;
};

struct TrainRun {
  std::vector<LogEntry> log;
  std::vector<RingCheckpoint> ring;  // oldest first
  RingCheckpoint best;
  nlohmann::json config_echo;
  std::uint64_t seed = 0;

  nlohmann::json log_json() const;
};

struct TrainResult {
  Classifier model;  // best-validation checkpoint
  Classifier final_model;
  TrainRun run;
};

// ERM over split.train_ids with domain-balanced batches; pseudo-domains count
// as domains. Validation accuracy is measured at every checkpoint.
TrainResult train_erm(const data::MultiDomainDataset& dataset, const data::SplitPlan& split, const TrainConfig& config,
                      std::uint64_t seed);

std::vector<float> average_weights(std::span<const std::vector<float>> checkpoints);

struct WindowPolicy {
  double tol_start = 0.005;  // accuracy fractions (0.5 pp)
  double tol_end = 0.005;
};

struct SwadWindow {
  int start_index = -1, end_index = -1;
  int start_step = 0, end_step = 0;
  bool fallback = false;
};

// Window over the ring: starts at the first checkpoint whose val accuracy is
// within tol_start of the ring maximum and ends at the last checkpoint before
// val accuracy falls more than tol_end below the window maximum.
SwadWindow swad_window(const TrainRun& run, const WindowPolicy& policy);

Classifier swad_average(const TrainRun& run, const Classifier& architecture, const WindowPolicy& policy,
                        SwadWindow* window = nullptr);

std::vector<int> predict_classes(const classifier::ProbabilisticModel& model, const data::MultiDomainDataset& dataset,
                                 std::span<const SampleId> ids, int batch_size = 64);

double evaluate(const classifier::ProbabilisticModel& model, const data::MultiDomainDataset& dataset,
                std::span<const SampleId> ids, int batch_size = 64);

// --- reports -------------------------------------------------------------

struct ReportRecord {
  std::string method;
  std::string target_domain;
  std::uint64_t seed = 0;
  std::string split_mode = "standard";
  std::optional<double> accuracy;  // absent when the cell failed
  std::string error;
  nlohmann::json artifacts = nlohmann::json::object();
};

struct Aggregate {
  double mean = 0.0;
  std::optional<double> std;
  int count = 0;
};

class RunReport {
 public:
  // Throws if split modes would be mixed in one report.
  void add(ReportRecord r);
  void merge(const RunReport& other);

  const std::vector<ReportRecord>& records() const { return records_; }
  std::optional<std::string> split_mode() const;

  std::vector<std::string> methods() const;
  std::vector<std::string> domains() const;
  // Returns nullopt when no successful record exists.
  std::optional<Aggregate> cell(const std::string& method, const std::string& domain) const;
  // Mean over domains of per-domain means; std over seeds of per-seed domain averages.
  std::optional<Aggregate> overall(const std::string& method) const;
  std::vector<double> accuracies(const std::string& method, const std::string& domain = {}) const;

  std::string to_csv() const;
  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& dir) const;

  nlohmann::json metadata = nlohmann::json::object();

 private:
  std::vector<ReportRecord> records_;
};

Aggregate mean_std(std::span<const double> values);

}  // namespace fds::trainer
