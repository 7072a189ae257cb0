#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/diffusion.hpp"

namespace fds::mixing {

using diffusion::ConditionEmbedding;
using diffusion::DiffusionModel;
using diffusion::SamplerConfig;

inline constexpr const char* kPoolFormat = "fds-pool-v1";

// `pure` samples a single source domain (the "basic" ablation tier).
enum class Strategy { pure, noise_level, condition_level, both };

// `merged` blends latents once at the mix step and then blends per-step
// dual-condition updates; `independent` keeps both trajectories apart and
// blends only the final latents.
enum class NoiseMixMode { merged, independent };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);
std::string to_string(NoiseMixMode m);
NoiseMixMode noise_mode_from_string(const std::string& s);

// Elementwise alpha*a + (1-alpha)*b that returns a (or b) exactly at the
// endpoints and wherever a == b.
float blend(float a, float b, double alpha);

struct MixRequest {
  int class_id = 0;
  int domain_i = 0;
  int domain_j = 1;
  double alpha = 0.5;
  Strategy strategy = Strategy::condition_level;
  int mix_step = 1;  // DDIM steps completed before the latents merge
  NoiseMixMode noise_mode = NoiseMixMode::merged;
  SamplerConfig sampler;
  bool allow_same_domain = false;  // test constructor: relaxes domain_i < domain_j

  void validate() const;
};

struct SyntheticSample {
  std::vector<float> payload;
  int class_id = 0;
  int domain_i = 0;
  int domain_j = 0;
  double alpha = 1.0;
  Strategy strategy = Strategy::pure;
  std::optional<int> mix_step;
  std::uint64_t seed = 0;
  double cfg_scale = 1.0;
  std::uint64_t generation_id = 0;
  std::string payload_hash;
};

std::string payload_hash(std::span<const float> payload);

// c_mixed = alpha * tau_i + (1 - alpha) * tau_j for two pure embeddings of one class.
ConditionEmbedding condition_interpolate(const ConditionEmbedding& tau_i, const ConditionEmbedding& tau_j, double alpha);

SyntheticSample sample_condition_level(const DiffusionModel& model, const MixRequest& request);
SyntheticSample sample_noise_level(const DiffusionModel& model, const MixRequest& request);

// Batched generation for any mix of strategies; output order follows input.
// Each row depends only on its own request.
std::vector<SyntheticSample> sample_requests(const DiffusionModel& model, std::span<const MixRequest> requests,
                                             diffusion::DecodeStats* stats = nullptr, int chunk = 64);

struct MixPolicy {
  Strategy strategy = Strategy::condition_level;
  double alpha_min = 0.3, alpha_max = 0.7;
  int mix_step_min = 20, mix_step_max = 45;
  double cfg_min = 5.0, cfg_max = 6.0;
  int ddim_steps = 50;
  double eta = 0.0;
  NoiseMixMode noise_mode = NoiseMixMode::merged;

  void validate() const;
  nlohmann::json to_json() const;
  static MixPolicy from_json(const nlohmann::json& j);
};

using CellKey = std::tuple<int, int, int>;  // (domain_i, domain_j, class)

struct SamplePool {
  std::vector<SyntheticSample> entries;
  int per_cell_target = 0;
  MixPolicy policy;
  std::uint64_t seed = 0;
  std::string model_hash;
  diffusion::DecodeStats decode_stats;

  // Entry indices grouped by cell, in generation order.
  std::map<CellKey, std::vector<std::size_t>> cells() const;
  int payload_dim() const { return entries.empty() ? 0 : static_cast<int>(entries.front().payload.size()); }

  void save(const std::filesystem::path& dir) const;
  static SamplePool load(const std::filesystem::path& dir);
};

// Requests for every unordered pair i < j of `domains` (or every single
// domain for the pure strategy) and every class, per_cell_target each.
std::vector<MixRequest> plan_pool(std::span<const int> domains, std::span<const int> classes, int per_cell_target,
                                  const MixPolicy& policy, std::uint64_t seed);

SamplePool generate_pool(const DiffusionModel& model, std::span<const int> domains, std::span<const int> classes,
                         int per_cell_target, const MixPolicy& policy, std::uint64_t seed);

}  // namespace fds::mixing
