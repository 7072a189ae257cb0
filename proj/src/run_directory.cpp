#include "fds/run_directory.hpp"

#include <algorithm>

namespace fds {

using nlohmann::json;

namespace {
const char* kLayout[] = {"dataset", "diffusion", "pools", "verdicts", "classifiers", "reports", "plots"};
}

RunDirectory RunDirectory::open(const std::filesystem::path& root, bool force) {
  if (root.empty()) throw ConfigError("run directory not set (use --run-dir or FDS_RUN_DIR)");
  RunDirectory rd;
  rd.root_ = root;
  rd.force_ = force;
  std::filesystem::create_directories(root);
  for (const char* d : kLayout) std::filesystem::create_directories(root / d);
  const auto mpath = root / "manifest.json";
  if (std::filesystem::exists(mpath)) {
    try {
      rd.manifest_ = json::parse(read_text_file(mpath));
    } catch (const json::exception& e) {
      throw IntegrityError("unreadable manifest " + mpath.string() + ": " + e.what());
    }
    if (rd.manifest_.value("version", std::string()) != kManifestFormat)
      throw IntegrityError("unsupported manifest version in " + mpath.string());
  } else {
    rd.manifest_ = json{{"version", kManifestFormat}, {"artifacts", json::object()}, {"stages", json::object()}};
  }
  return rd;
}

const json* RunDirectory::artifact(const std::string& key) const {
  const auto& a = manifest_.at("artifacts");
  const auto it = a.find(key);
  return it == a.end() ? nullptr : &*it;
}

std::string RunDirectory::file_hash(const std::string& key, const std::string& file) const {
  const auto* a = artifact(key);
  if (!a) throw std::out_of_range("no artifact " + key);
  return a->at("files").at(file).get<std::string>();
}

bool RunDirectory::fresh(const std::string& key, const std::string& inputs_hash) {
  if (force_ && std::find(refreshed_.begin(), refreshed_.end(), key) == refreshed_.end()) return false;
  const auto* a = artifact(key);
  if (!a || a->value("inputs_hash", std::string()) != inputs_hash) return false;
  for (const auto& [file, hash] : a->at("files").items()) {
    const auto p = root_ / file;
    if (!std::filesystem::exists(p)) throw IntegrityError("missing artifact file " + p.string());
    if (sha256_file(p) != hash.get<std::string>()) throw IntegrityError("hash mismatch for " + p.string());
  }
  return true;
}

void RunDirectory::record(const std::string& key, const std::string& inputs_hash, const std::vector<std::string>& files,
                          const json& info) {
  json fj = json::object();
  for (const auto& f : files) {
    const auto p = root_ / f;
    if (!std::filesystem::exists(p)) throw StageError("artifact file was not written: " + p.string());
    fj[f] = sha256_file(p);
  }
  manifest_["artifacts"][key] = json{{"inputs_hash", inputs_hash}, {"files", fj}, {"info", info}};
  refreshed_.push_back(key);
  save_manifest();
}

void RunDirectory::mark_stage(const std::string& stage, const std::string& status, const std::string& detail) {
  json s{{"status", status}};
  if (!detail.empty()) s["detail"] = detail;
  manifest_["stages"][stage] = s;
  save_manifest();
}

std::string RunDirectory::stage_status(const std::string& stage) const {
  const auto& s = manifest_.at("stages");
  const auto it = s.find(stage);
  return it == s.end() ? std::string() : it->value("status", std::string());
}

void RunDirectory::verify_all() const {
  for (const auto& [key, a] : manifest_.at("artifacts").items()) {
    for (const auto& [file, hash] : a.at("files").items()) {
      const auto p = root_ / file;
      if (!std::filesystem::exists(p)) throw IntegrityError("missing artifact file " + p.string());
      if (sha256_file(p) != hash.get<std::string>()) throw IntegrityError("hash mismatch for " + p.string());
    }
  }
}

void RunDirectory::save_manifest() const { write_file_atomic(root_ / "manifest.json", manifest_.dump(2) + "\n"); }

}  // namespace fds
