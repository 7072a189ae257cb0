#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace fds {

inline constexpr const char* kCheckpointFormat = "fds-ckpt-v1";

// Versioned binary container: format tag, JSON header, then named float32
// tensors in insertion order.
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<float>>> tensors;

  void add(std::string name, std::vector<float> values) { tensors.emplace_back(std::move(name), std::move(values)); }
  const std::vector<float>& tensor(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<std::byte> encode() const;
  static Checkpoint decode(std::span<const std::byte> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace fds
