#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fds/config.hpp"
#include "fds/experiment.hpp"
#include "fds/run_directory.hpp"

namespace fds::pipeline {

struct PipelineResult {
  trainer::RunReport report;
  std::vector<experiment::CellResult> cells;
  bool skipped = false;   // every stage was already complete for this config
  int failed_records = 0;
  int computed = 0;       // artifacts produced in this invocation
  int reused = 0;
};

// dataset -> feedback classifier -> diffusion -> pools -> filter -> final
// training -> evaluation -> reports, with manifest checkpoints in between.
// A rerun with an unchanged config skips every stage; artifacts are
// hash-verified before anything is reused.
PipelineResult run_pipeline(const RunConfig& config, const std::filesystem::path& run_dir, bool force = false);

struct SweepResult {
  trainer::RunReport report;           // one method group per scale
  std::vector<double> scales;
  double reference_per_class = 0.0;    // average images per class per source domain
  std::vector<std::string> pool_hashes;  // distinct pool artifacts touched by the sweep
};

// Filter and final training per N_L scale; the diffusion model and pools come
// from the run-directory cache.
SweepResult sweep_nl(const RunConfig& config, const std::filesystem::path& run_dir, std::span<const double> scales,
                     bool force = false);

// Runs the configured method grid against shared cached artifacts.
trainer::RunReport ablation_suite(const RunConfig& config, const std::filesystem::path& run_dir, bool force = false);

// Re-emits the summary tables and plots from reports/report.json.
void write_summaries(const std::filesystem::path& run_dir);
void write_plots(const std::filesystem::path& run_dir);

// Average training images per class per source domain; the unit of the N_L
// scale.
double reference_per_class(const data::MultiDomainDataset& dataset, const data::SplitPlan& split);

// Markdown table of per-domain means and the overall column.
std::string markdown_table(const trainer::RunReport& report);

// --- single stages -----------------------------------------------------
// Manual stage artifacts live under <kind>/manual/<target>/seed<seed>/.

struct StageContext {
  RunConfig config;
  std::filesystem::path run_dir;
  std::string target;  // domain name
  std::uint64_t seed = 0;
  bool force = false;
};

data::MultiDomainDataset stage_dataset(const StageContext& ctx);  // build or load dataset/
void stage_ingest(const StageContext& ctx, const std::filesystem::path& folder, int image_size);
std::filesystem::path stage_train_diffusion(const StageContext& ctx);
std::filesystem::path stage_generate_pool(const StageContext& ctx, mixing::Strategy strategy);
std::filesystem::path stage_filter(const StageContext& ctx, mixing::Strategy strategy);
// `augmented`: train on the original sources plus the filtered pool.
std::filesystem::path stage_train_classifier(const StageContext& ctx, std::optional<mixing::Strategy> augmented);
nlohmann::json stage_evaluate(const StageContext& ctx);

}  // namespace fds::pipeline
