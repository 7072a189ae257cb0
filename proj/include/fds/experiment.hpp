#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/dataset.hpp"
#include "fds/diffusion.hpp"
#include "fds/filter.hpp"
#include "fds/mixing.hpp"
#include "fds/run_directory.hpp"
#include "fds/trainer.hpp"

namespace fds::experiment {

// One row family of a report. `base` picks the best-validation checkpoint
// (erm) or the SWAD average (swad) of the training run.
struct MethodSpec {
  std::string name;
  std::string base = "erm";
  bool augment = false;
  mixing::Strategy strategy = mixing::Strategy::condition_level;
  filter::FilterMode filter = filter::FilterMode::entropy_plus_reject;
  double n_l_scale = 1.0;
  std::vector<int> pair_subset;  // indices into the sorted source pairs; empty keeps all

  nlohmann::json to_json() const;
  static MethodSpec from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  double val_fraction = 0.2;
  double in_domain_test_fraction = 0.2;
  bool oracle = false;
  std::vector<int> targets;  // empty: every domain
  std::vector<std::uint64_t> seeds{0, 1, 2};
  diffusion::DiffusionTrainConfig diffusion;
  mixing::MixPolicy mix;
  int per_cell_target = 32;
  filter::FilterMode filter_mode = filter::FilterMode::entropy_plus_reject;
  double n_l_scale = 1.0;
  std::optional<int> n_l;  // overrides the scale rule
  trainer::TrainConfig trainer;
  trainer::WindowPolicy swad;
  std::string tier = "filtering";  // tier behind erm+fds / swad+fds
  std::vector<MethodSpec> methods;
  bool diversity = false;
  bool record_traces = false;
  int trace_target = -1;  // -1: every target

  void validate() const;
};

// Names: erm, baseline, swad, erm+fds, swad+fds, basic, interpolation,
// filtering, entropy_only, random_filter, noise_level, condition_level, both.
MethodSpec standard_method(const std::string& name, const ExperimentConfig& config);
std::vector<MethodSpec> standard_methods(const std::vector<std::string>& names, const ExperimentConfig& config);

struct StageHooks {
  std::function<void(const std::string& stage, int target, std::uint64_t seed)> on_stage;
};

struct CellResult {
  int target = 0;
  std::string label;
  std::uint64_t seed = 0;
  std::string split_mode;
  std::map<std::string, double> accuracy;                       // by method name
  std::map<std::string, std::vector<trainer::LogEntry>> logs;   // by method name
  std::map<std::string, double> diversity;                      // "original" plus augmented method names
  nlohmann::json info = nlohmann::json::object();
  std::string error;
};

struct ExperimentResult {
  trainer::RunReport report;
  std::vector<CellResult> cells;
};

// Per target domain and seed: split, feedback/baseline training, diffusion,
// pools, filtering, augmented training, evaluation on the held-out domain.
ExperimentResult leave_one_out_experiment(const data::MultiDomainDataset& dataset, const ExperimentConfig& config,
                                          RunDirectory* run_dir = nullptr, const StageHooks& hooks = {});

// Same pipeline evaluated on a held-out split of the source domains; one cell
// per excluded domain, labeled by the source-set initials.
ExperimentResult in_domain_experiment(const data::MultiDomainDataset& dataset, const ExperimentConfig& config,
                                      RunDirectory* run_dir = nullptr, const StageHooks& hooks = {});

// "C,S,P" style label of every domain except `excluded`; full names when initials collide.
std::string source_set_label(const data::MultiDomainDataset& dataset, int excluded);

}  // namespace fds::experiment
