#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/dataset.hpp"
#include "fds/experiment.hpp"

namespace fds {

struct DatasetBlock {
  std::string kind = "gaussian";  // gaussian | shapes | folder | saved
  int n_domains = 3;
  int n_classes = 2;
  int per_cell = 200;
  data::DomainGeometry geometry;
  std::vector<std::string> styles{"filled", "outline", "textured", "faint"};
  int image_size = 16;
  int channels = 1;
  double pixel_noise = 0.02;
  std::string path;
  std::uint64_t seed = 0;
};

struct RunConfig {
  DatasetBlock dataset;
  std::string protocol = "leave_one_out";  // leave_one_out | in_domain
  std::vector<std::string> targets;        // domain names; empty = all
  std::string trace_target;                // domain name; empty = all when traces are on
  std::vector<std::string> methods{"erm", "erm+fds", "swad", "swad+fds"};
  std::vector<experiment::MethodSpec> custom_methods;
  std::vector<std::string> ablation_grid{"baseline", "basic", "interpolation", "filtering"};
  std::vector<double> sweep_scales{0.5, 1.0, 2.0};
  experiment::ExperimentConfig experiment;
  bool plots = true;
  bool tsne = false;
  bool gallery = true;
  std::string run_dir;

  // Strict parse: unknown keys and out-of-range values raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  // Resolves domain names and method lists against the dataset.
  experiment::ExperimentConfig resolve(const data::MultiDomainDataset& dataset) const;
};

// Desk-scale defaults for the two built-in benchmarks.
RunConfig default_point_config();
RunConfig default_shapes_config();

data::MultiDomainDataset build_dataset(const DatasetBlock& block);

}  // namespace fds
