#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/classifier.hpp"
#include "fds/dataset.hpp"
#include "fds/mixing.hpp"
#include "fds/trainer.hpp"

namespace fds::filter {

using mixing::CellKey;
using nn::Mat;
using mixing::SamplePool;

// Natural-log entropy; probabilities are clamped at 1e-12 before the log and
// exact zeros contribute nothing.
double entropy(std::span<const double> probabilities);

struct PredictionRecord {
  std::uint64_t generation_id = 0;
  std::vector<double> probabilities;
  int predicted_class = 0;
  double entropy = 0.0;
  bool correct = false;
};

std::vector<PredictionRecord> score_pool(const SamplePool& pool, const classifier::ProbabilisticModel& h, int batch_size = 64);

// `none` keeps the first N_L entries of each cell in generation order
// (unfiltered tiers at a matched sample count).
enum class FilterMode { entropy_only, entropy_plus_reject, random, none };

std::string to_string(FilterMode m);
FilterMode filter_mode_from_string(const std::string& s);

struct CellVerdict {
  std::vector<std::uint64_t> correct_ids;
  std::vector<std::uint64_t> selected_ids;
  std::vector<std::uint64_t> rejected_semantic_ids;
  std::vector<std::uint64_t> rejected_low_entropy_ids;
};

struct FilterVerdict {
  std::map<CellKey, CellVerdict> cells;
  int n_l = 0;
  FilterMode mode = FilterMode::entropy_plus_reject;
  std::string classifier_hash;

  std::size_t selected_count() const;
  // Cells whose selection fell short of n_l.
  std::vector<CellKey> shortfalls() const;
  nlohmann::json to_json() const;
  static FilterVerdict from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static FilterVerdict load(const std::filesystem::path& path);
};

// Per cell: reject misclassified entries, then keep the n_l correct entries
// with the highest entropy (ties: lower generation_id first).
FilterVerdict select(std::span<const PredictionRecord> records, const SamplePool& pool, int n_l);

// entropy_only ignores correctness; random keeps n_l uniformly chosen entries per cell.
FilterVerdict filter_ablation_mode(std::span<const PredictionRecord> records, const SamplePool& pool, int n_l,
                                   FilterMode mode, std::uint64_t seed = 0);

// Everything in a pool, unfiltered (the "basic" and "+interpolation" tiers).
FilterVerdict keep_all(const SamplePool& pool);

std::string pseudo_domain_name(const data::MultiDomainDataset& original, int domain_i, int domain_j);

struct Augmented {
  data::MultiDomainDataset dataset;
  std::vector<SampleId> synthetic_ids;  // in selection order
  std::map<std::pair<int, int>, int> pseudo_domains;  // (i, j) -> new domain id
};

// A = O plus one sample per selected entry. Synthetic ids continue after the
// largest original id. `target_domain` is re-checked against the pool.
Augmented assemble_augmented(const data::MultiDomainDataset& original, const FilterVerdict& verdict, const SamplePool& pool,
                             int target_domain = -1);

// Training split on A: original train/val/test plus the synthetic ids in train.
data::SplitPlan augment_split(const data::SplitPlan& split, std::span<const SampleId> synthetic_ids);

// Delegates to the ERM trainer on the original train ids only.
trainer::TrainResult train_feedback_classifier(const data::MultiDomainDataset& original, const data::SplitPlan& split,
                                               const trainer::TrainConfig& config, std::uint64_t seed);

// Default N_L: scale times the average original per-class count over source domains.
int default_n_l(const data::MultiDomainDataset& original, const data::SplitPlan& split, double scale = 1.0);

}  // namespace fds::filter
