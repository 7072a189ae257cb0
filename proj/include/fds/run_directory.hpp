#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/common.hpp"

namespace fds {

inline constexpr const char* kManifestFormat = "fds-manifest-v1";

// Run directory layout plus a manifest of content hashes.
//
//   config.json  dataset/  diffusion/  pools/  verdicts/  classifiers/
//   reports/  plots/  manifest.json
//
// Every artifact is recorded under a key together with the hash of the
// inputs that produced it. A recorded artifact whose inputs hash matches is
// reused; one whose files no longer match their recorded hashes raises
// IntegrityError naming the file.
class RunDirectory {
 public:
  static RunDirectory open(const std::filesystem::path& root, bool force = false);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& relative) const { return root_ / relative; }
  bool forced() const { return force_; }

  // True when `key` is recorded with this inputs hash and all of its files verify.
  bool fresh(const std::string& key, const std::string& inputs_hash);
  void record(const std::string& key, const std::string& inputs_hash, const std::vector<std::string>& files,
              const nlohmann::json& info = nlohmann::json::object());
  const nlohmann::json* artifact(const std::string& key) const;
  std::string file_hash(const std::string& key, const std::string& file) const;

  void mark_stage(const std::string& stage, const std::string& status, const std::string& detail = {});
  std::string stage_status(const std::string& stage) const;

  // Verifies every recorded file; throws IntegrityError on the first mismatch.
  void verify_all() const;

  // Reuse-or-compute helper.
  template <typename T>
  T cached(const std::string& key, const std::string& inputs_hash, const std::vector<std::string>& files,
           const std::function<T()>& make, const std::function<void(const T&)>& save,
           const std::function<T()>& load) {
    if (fresh(key, inputs_hash)) {
      ++reused_;
      return load();
    }
    T value = make();
    save(value);
    record(key, inputs_hash, files);
    ++computed_;
    return value;
  }

  int reused() const { return reused_; }
  int computed() const { return computed_; }

  const nlohmann::json& manifest() const { return manifest_; }
  void save_manifest() const;

 private:
  std::filesystem::path root_;
  bool force_ = false;
  nlohmann::json manifest_;
  std::vector<std::string> refreshed_;  // keys recomputed under --force
  int reused_ = 0, computed_ = 0;
};

}  // namespace fds
