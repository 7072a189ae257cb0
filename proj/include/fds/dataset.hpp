#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/common.hpp"
#include "fds/nn/layers.hpp"

namespace fds::data {

inline constexpr const char* kDatasetFormat = "fds-dataset-v1";

enum class PayloadMode { point, image };

std::string to_string(PayloadMode mode);
PayloadMode payload_mode_from_string(const std::string& s);

struct Sample {
  std::vector<float> payload;
  int class_id = 0;
  int domain_id = 0;
  SampleId sample_id = 0;
};

// Samples stored sample-major in one contiguous buffer. Payload reads can be
// observed (used by tests to prove the target domain stays untouched).
class MultiDomainDataset {
 public:
  using AccessObserver = std::function<void(int domain_id, SampleId id)>;

  MultiDomainDataset() = default;
  MultiDomainDataset(PayloadMode mode, std::vector<int> shape, std::vector<std::string> domain_names,
                     std::vector<std::string> class_names);

  void add(std::span<const float> payload, int class_id, int domain_id, SampleId id);
  void add(const Sample& s) { add(s.payload, s.class_id, s.domain_id, s.sample_id); }

  PayloadMode mode() const { return mode_; }
  const std::vector<int>& shape() const { return shape_; }
  int payload_dim() const { return dim_; }
  int n_domains() const { return static_cast<int>(domain_names_.size()); }
  int n_classes() const { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& domain_names() const { return domain_names_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::size_t size() const { return ids_.size(); }

  int class_id(std::size_t index) const { return classes_[index]; }
  int domain_id(std::size_t index) const { return domains_[index]; }
  SampleId sample_id(std::size_t index) const { return ids_[index]; }
  const std::vector<SampleId>& sample_ids() const { return ids_; }

  bool contains(SampleId id) const { return index_.count(id) != 0; }
  std::size_t index_of(SampleId id) const;
  int domain_of(SampleId id) const { return domains_[index_of(id)]; }
  int class_of(SampleId id) const { return classes_[index_of(id)]; }

  std::span<const float> payload(std::size_t index) const;
  Sample sample(std::size_t index) const;
  // Stacks payloads of the given ids into a (ids.size() x payload_dim) batch.
  nn::Mat<float> gather(std::span<const SampleId> ids) const;

  std::vector<SampleId> ids_in_domain(int domain) const;
  std::size_t cell_count(int domain, int class_id) const;

  // Appends a domain name and returns its id.
  int add_domain(const std::string& name);

  // Copy without any sample of `domain`; the domain list is kept so ids stay stable.
  MultiDomainDataset without_domain(int domain) const;

  // Throws if invariants fail. Derived datasets may have empty cells.
  void validate(bool require_all_cells = true) const;

  void set_access_observer(AccessObserver obs) { observer_ = std::move(obs); }

  std::string content_hash() const;

  void save(const std::filesystem::path& dir) const;
  static MultiDomainDataset load(const std::filesystem::path& dir);

 private:
  PayloadMode mode_ = PayloadMode::point;
  std::vector<int> shape_;
  int dim_ = 0;
  std::vector<std::string> domain_names_, class_names_;
  std::vector<float> payloads_;
  std::vector<int> classes_, domains_;
  std::vector<SampleId> ids_;
  std::unordered_map<SampleId, std::size_t> index_;
  AccessObserver observer_;
};

// --- point benchmark -----------------------------------------------------

// Class means sit on a circle; each domain index rotates the constellation
// and translates it by domain_shift.
struct DomainGeometry {
  double class_radius = 2.0;
  double domain_rotation = 0.25;
  std::array<double, 2> domain_shift{1.5, 0.0};
  double sigma = 0.25;
  // Optional override, indexed domain * n_classes + class.
  std::vector<std::array<double, 2>> explicit_means;

  std::array<double, 2> mean(int domain, int class_id, int n_classes) const;
};

MultiDomainDataset make_gaussian_domains(int n_domains, int n_classes, int per_cell_count,
                                         const DomainGeometry& geometry, std::uint64_t seed);

// One-domain, one-class Gaussian world; test fixture for sampler oracles.
MultiDomainDataset make_gaussian_cell(std::array<double, 2> mean, double sigma, int count, std::uint64_t seed);

// --- image benchmark -----------------------------------------------------

const std::vector<std::string>& shape_class_vocabulary();
const std::vector<std::string>& style_vocabulary();

struct ShapesOptions {
  int channels = 1;
  double pixel_noise = 0.02;
};

MultiDomainDataset make_styled_shapes(int n_classes, const std::vector<std::string>& styles, int per_cell_count,
                                      int image_size, std::uint64_t seed, const ShapesOptions& options = {});

// root/<domain>/<class>/<image files>
MultiDomainDataset ingest_image_folder(const std::filesystem::path& root, int image_size);

// --- splits --------------------------------------------------------------

struct SplitPlan {
  int target_domain = 0;
  std::vector<SampleId> train_ids, val_ids, test_ids;
  double val_fraction = 0.2;
  std::string mode = "standard";  // standard | oracle | in_domain

  void check_disjoint() const;
  nlohmann::json to_json() const;
  static SplitPlan from_json(const nlohmann::json& j);
};

SplitPlan leave_one_out_split(const MultiDomainDataset& dataset, int target_domain, double val_fraction,
                              std::uint64_t seed);

// Trains on every source sample, validates on a stratified val_fraction of the
// target domain, tests on the rest of the target domain.
SplitPlan oracle_split(const MultiDomainDataset& dataset, int target_domain, double val_fraction, std::uint64_t seed);

// Held-out split inside the source domains; the excluded domain is never used.
SplitPlan in_domain_split(const MultiDomainDataset& dataset, int excluded_domain, double test_fraction,
                          double val_fraction, std::uint64_t seed);

// Throws LeakageError if any id belongs to `target_domain`.
void assert_no_domain(const MultiDomainDataset& dataset, std::span<const SampleId> ids, int target_domain,
                      const std::string& context);

}  // namespace fds::data
