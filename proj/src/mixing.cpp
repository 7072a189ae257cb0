#include "fds/mixing.hpp"

#include <set>
#include <sstream>

namespace fds::mixing {

using diffusion::Mat;
using nlohmann::json;

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::pure: return "pure";
    case Strategy::noise_level: return "noise_level";
    case Strategy::condition_level: return "condition_level";
    case Strategy::both: return "both";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "pure") return Strategy::pure;
  if (s == "noise_level") return Strategy::noise_level;
  if (s == "condition_level") return Strategy::condition_level;
  if (s == "both") return Strategy::both;
  throw ConfigError("unknown mixing strategy: " + s);
}

std::string to_string(NoiseMixMode m) { return m == NoiseMixMode::merged ? "merged" : "independent"; }

NoiseMixMode noise_mode_from_string(const std::string& s) {
  if (s == "merged") return NoiseMixMode::merged;
  if (s == "independent") return NoiseMixMode::independent;
  throw ConfigError("unknown noise mix mode: " + s);
}

float blend(float a, float b, double alpha) {
  if (alpha == 1.0 || a == b) return a;
  if (alpha == 0.0) return b;
  const auto al = static_cast<float>(alpha);
  return al * a + (1.0f - al) * b;
}

namespace {

bool is_dual(Strategy s) { return s == Strategy::noise_level || s == Strategy::both; }

Mat<float> blend_rows(const Mat<float>& a, const Mat<float>& b, double alpha) {
  Mat<float> out(a.rows(), a.cols());
  for (Eigen::Index k = 0; k < a.size(); ++k) out.data()[k] = blend(a.data()[k], b.data()[k], alpha);
  return out;
}

}  // namespace

void MixRequest::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("mix request: alpha must lie in [0,1]");
  if (strategy == Strategy::pure) {
    if (domain_i != domain_j) throw std::invalid_argument("mix request: pure strategy needs domain_i == domain_j");
    return;
  }
  if (!allow_same_domain && !(domain_i < domain_j)) throw std::invalid_argument("mix request: requires domain_i < domain_j");
  if (is_dual(strategy) && noise_mode == NoiseMixMode::merged && (mix_step < 1 || mix_step > sampler.ddim_steps))
    throw std::invalid_argument("mix request: mix step outside [1, ddim_steps]");
}

std::string payload_hash(std::span<const float> payload) { return sha256_hex(encode_f32_le(payload)); }

ConditionEmbedding condition_interpolate(const ConditionEmbedding& a, const ConditionEmbedding& b, double alpha) {
  using Kind = ConditionEmbedding::Kind;
  if (a.kind != Kind::pure || b.kind != Kind::pure) throw std::invalid_argument("condition_interpolate: embeddings must be pure");
  if (a.class_id != b.class_id) throw std::invalid_argument("condition_interpolate: class mismatch");
  if (a.vector.size() != b.vector.size()) throw std::invalid_argument("condition_interpolate: dimension mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("condition_interpolate: alpha must lie in [0,1]");
  ConditionEmbedding out;
  out.vector.resize(a.vector.size());
  for (std::size_t i = 0; i < a.vector.size(); ++i) out.vector[i] = blend(a.vector[i], b.vector[i], alpha);
  out.kind = Kind::mixed;
  out.class_id = a.class_id;
  out.domain_i = a.domain_i;
  out.domain_j = b.domain_i;
  out.alpha = alpha;
  return out;
}

namespace {

std::vector<float> row_vector(const Mat<float>& m, Eigen::Index r) { return {m.row(r).data(), m.row(r).data() + m.cols()}; }

// Latents for a chunk of single-trajectory requests (pure / condition level).
Mat<float> single_chunk(const DiffusionModel& model, std::span<const MixRequest* const> reqs) {
  std::vector<ConditionEmbedding> embs;
  std::vector<SamplerConfig> cfgs;
  for (const auto* r : reqs) {
    const auto ti = model.encode_condition(r->class_id, r->domain_i);
    if (r->strategy == Strategy::pure) {
      embs.push_back(ti);
    } else {
      embs.push_back(condition_interpolate(ti, model.encode_condition(r->class_id, r->domain_j), r->alpha));
    }
    cfgs.push_back(r->sampler);
  }
  return diffusion::ddim_sample_latents(model, diffusion::embeddings_matrix(embs), cfgs);
}

// Latents for a chunk of dual-trajectory requests (noise level / both).
Mat<float> dual_chunk(const DiffusionModel& model, std::span<const MixRequest* const> reqs) {
  const auto B = static_cast<Eigen::Index>(reqs.size());
  const int dim = model.data_dim();
  const int S = reqs.front()->sampler.ddim_steps;
  const double eta = reqs.front()->sampler.eta;
  std::vector<ConditionEmbedding> ei, ej, post_a, post_b;
  std::vector<SamplerConfig> cfgs;
  std::vector<double> scales;
  std::vector<int> merge_at;
  Mat<float> za(B, dim);
  for (Eigen::Index r = 0; r < B; ++r) {
    const auto& q = *reqs[static_cast<std::size_t>(r)];
    ei.push_back(model.encode_condition(q.class_id, q.domain_i));
    ej.push_back(model.encode_condition(q.class_id, q.domain_j));
    if (q.strategy == Strategy::both) {
      const auto mixed = condition_interpolate(ei.back(), ej.back(), q.alpha);
      post_a.push_back(mixed);
      post_b.push_back(mixed);
    } else {
      post_a.push_back(ei.back());
      post_b.push_back(ej.back());
    }
    merge_at.push_back(q.noise_mode == NoiseMixMode::independent ? S : q.mix_step);
    cfgs.push_back(q.sampler);
    scales.push_back(q.sampler.resolved_cfg());
    za.row(r) = diffusion::initial_noise(dim, q.sampler.seed);
  }
  const Mat<float> Ei = diffusion::embeddings_matrix(ei), Ej = diffusion::embeddings_matrix(ej);
  const Mat<float> Pa = diffusion::embeddings_matrix(post_a), Pb = diffusion::embeddings_matrix(post_b);
  Mat<float> zb = za;
  auto rngs = diffusion::step_rngs(cfgs);
  const auto ts = diffusion::ddim_timesteps(model.schedule().train_timesteps, S);
  Mat<float> Ea(B, Ei.cols()), Eb(B, Ei.cols());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int step = static_cast<int>(i) + 1;
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    for (Eigen::Index r = 0; r < B; ++r) {
      const bool merged = step > merge_at[static_cast<std::size_t>(r)];
      Ea.row(r) = merged ? Pa.row(r) : Ei.row(r);
      Eb.row(r) = merged ? Pb.row(r) : Ej.row(r);
    }
    const Mat<float> eps_a = diffusion::guided_epsilon(model, za, ts[i], Ea, scales, step, nullptr);
    const Mat<float> eps_b = diffusion::guided_epsilon(model, zb, ts[i], Eb, scales, step, nullptr);
    Mat<float> noise;
    if (eta > 0.0) noise = diffusion::step_noise(rngs, dim);
    za = diffusion::ddim_update(za, eps_a, ts[i], t_prev, model.schedule(), eta, eta > 0.0 ? &noise : nullptr, model.x0_range());
    zb = diffusion::ddim_update(zb, eps_b, ts[i], t_prev, model.schedule(), eta, eta > 0.0 ? &noise : nullptr, model.x0_range());
    for (Eigen::Index r = 0; r < B; ++r) {
      if (step < merge_at[static_cast<std::size_t>(r)]) continue;
      const Mat<float> m = blend_rows(za.row(r), zb.row(r), reqs[static_cast<std::size_t>(r)]->alpha);
      za.row(r) = m;
      zb.row(r) = m;
    }
  }
  return za;
}

}  // namespace

std::vector<SyntheticSample> sample_requests(const DiffusionModel& model, std::span<const MixRequest> requests,
                                             diffusion::DecodeStats* stats, int chunk) {
  require(chunk >= 1, "sample_requests: chunk must be >= 1");
  const int T = model.schedule().train_timesteps;
  for (const auto& r : requests) {
    r.validate();
    r.sampler.validate(T);
  }
  std::vector<SyntheticSample> out(requests.size());
  // Group by trajectory kind and step count; rows are independent so grouping
  // never changes results.
  std::map<std::tuple<bool, int, double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < requests.size(); ++i)
    groups[{is_dual(requests[i].strategy), requests[i].sampler.ddim_steps, requests[i].sampler.eta}].push_back(i);
  for (const auto& [key, idx] : groups) {
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(chunk)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(chunk));
      std::vector<const MixRequest*> reqs;
      for (std::size_t k = start; k < end; ++k) reqs.push_back(&requests[idx[k]]);
      const Mat<float> z = std::get<0>(key) ? dual_chunk(model, reqs) : single_chunk(model, reqs);
      for (std::size_t k = start; k < end; ++k) {
        const auto& q = requests[idx[k]];
        auto& s = out[idx[k]];
        s.payload = model.decode(row_vector(z, static_cast<Eigen::Index>(k - start)), stats);
        s.class_id = q.class_id;
        s.domain_i = q.domain_i;
        s.domain_j = q.domain_j;
        s.alpha = q.strategy == Strategy::pure ? 1.0 : q.alpha;
        s.strategy = q.strategy;
        if (is_dual(q.strategy)) s.mix_step = q.noise_mode == NoiseMixMode::independent ? q.sampler.ddim_steps : q.mix_step;
        s.seed = q.sampler.seed;
        s.cfg_scale = q.sampler.resolved_cfg();
        s.payload_hash = payload_hash(s.payload);
      }
    }
  }
  return out;
}

SyntheticSample sample_condition_level(const DiffusionModel& model, const MixRequest& request) {
  if (request.strategy != Strategy::condition_level) throw std::invalid_argument("sample_condition_level: wrong strategy");
  return sample_requests(model, std::span(&request, 1)).front();
}

SyntheticSample sample_noise_level(const DiffusionModel& model, const MixRequest& request) {
  if (request.strategy != Strategy::noise_level) throw std::invalid_argument("sample_noise_level: wrong strategy");
  return sample_requests(model, std::span(&request, 1)).front();
}

// --- policy & pools --------------------------------------------------------

void MixPolicy::validate() const {
  if (!(alpha_min >= 0.0 && alpha_max <= 1.0 && alpha_min <= alpha_max)) throw ConfigError("mix policy: alpha range must lie in [0,1]");
  if (ddim_steps < 1) throw ConfigError("mix policy: ddim_steps must be >= 1");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("mix policy: eta must lie in [0,1]");
  if (!(cfg_min >= 1.0 && cfg_max >= cfg_min)) throw ConfigError("mix policy: cfg range must satisfy 1 <= min <= max");
  if (is_dual(strategy) && !(mix_step_min >= 1 && mix_step_max <= ddim_steps && mix_step_min <= mix_step_max))
    throw ConfigError("mix policy: mix step range must lie in [1, ddim_steps]");
}

json MixPolicy::to_json() const {
  return json{{"strategy", to_string(strategy)}, {"alpha", {alpha_min, alpha_max}},   {"mix_step", {mix_step_min, mix_step_max}},
              {"cfg", {cfg_min, cfg_max}},       {"ddim_steps", ddim_steps},          {"eta", eta},
              {"noise_mode", to_string(noise_mode)}};
}

MixPolicy MixPolicy::from_json(const json& j) {
  MixPolicy p;
  p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  p.alpha_min = j.at("alpha").at(0).get<double>();
  p.alpha_max = j.at("alpha").at(1).get<double>();
  p.mix_step_min = j.at("mix_step").at(0).get<int>();
  p.mix_step_max = j.at("mix_step").at(1).get<int>();
  p.cfg_min = j.at("cfg").at(0).get<double>();
  p.cfg_max = j.at("cfg").at(1).get<double>();
  p.ddim_steps = j.at("ddim_steps").get<int>();
  p.eta = j.at("eta").get<double>();
  p.noise_mode = noise_mode_from_string(j.at("noise_mode").get<std::string>());
  return p;
}

std::map<CellKey, std::vector<std::size_t>> SamplePool::cells() const {
  std::map<CellKey, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    out[{entries[i].domain_i, entries[i].domain_j, entries[i].class_id}].push_back(i);
  return out;
}

std::vector<MixRequest> plan_pool(std::span<const int> domains, std::span<const int> classes, int per_cell_target,
                                  const MixPolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (per_cell_target < 1) throw std::invalid_argument("generate_pool: per_cell_target must be >= 1");
  if (classes.empty()) throw std::invalid_argument("generate_pool: no classes");
  std::vector<std::pair<int, int>> pairs;
  if (policy.strategy == Strategy::pure) {
    if (domains.empty()) throw std::invalid_argument("generate_pool: no domains");
    for (int d : domains) pairs.emplace_back(d, d);
  } else {
    if (domains.size() < 2) throw std::invalid_argument("generate_pool: mixing needs at least two domains");
    std::vector<int> sorted(domains.begin(), domains.end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t a = 0; a < sorted.size(); ++a)
      for (std::size_t b = a + 1; b < sorted.size(); ++b) pairs.emplace_back(sorted[a], sorted[b]);
  }
  Rng rng(derive_seed(seed, 0x9001));
  std::uniform_real_distribution<double> alpha(policy.alpha_min, policy.alpha_max);
  std::uniform_real_distribution<double> cfg(policy.cfg_min, policy.cfg_max);
  std::uniform_int_distribution<int> step(std::min(policy.mix_step_min, policy.mix_step_max), policy.mix_step_max);
  std::set<std::uint64_t> seen;
  std::vector<MixRequest> reqs;
  for (const auto& [i, j] : pairs) {
    for (int k : classes) {
      for (int r = 0; r < per_cell_target; ++r) {
        MixRequest q;
        q.class_id = k;
        q.domain_i = i;
        q.domain_j = j;
        q.strategy = policy.strategy;
        q.noise_mode = policy.noise_mode;
        std::uint64_t s;
        do s = rng();
        while (!seen.insert(s).second);
        q.alpha = policy.strategy == Strategy::pure ? 1.0 : (policy.alpha_min == policy.alpha_max ? policy.alpha_min : alpha(rng));
        q.mix_step = is_dual(policy.strategy) ? step(rng) : 1;
        const double scale = policy.cfg_min == policy.cfg_max ? policy.cfg_min : cfg(rng);
        q.sampler = SamplerConfig{.ddim_steps = policy.ddim_steps, .eta = policy.eta, .cfg_min = scale, .cfg_max = scale, .seed = s};
        reqs.push_back(q);
      }
    }
  }
  return reqs;
}

SamplePool generate_pool(const DiffusionModel& model, std::span<const int> domains, std::span<const int> classes,
                         int per_cell_target, const MixPolicy& policy, std::uint64_t seed) {
  const auto reqs = plan_pool(domains, classes, per_cell_target, policy, seed);
  SamplePool pool;
  pool.per_cell_target = per_cell_target;
  pool.policy = policy;
  pool.seed = seed;
  pool.model_hash = model.content_hash();
  pool.entries = sample_requests(model, reqs, &pool.decode_stats);
  for (std::size_t i = 0; i < pool.entries.size(); ++i) pool.entries[i].generation_id = i;
  return pool;
}

void SamplePool::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json meta{{"version", kPoolFormat},
            {"policy", policy.to_json()},
            {"model_hash", model_hash},
            {"seed", seed},
            {"per_cell_target", per_cell_target},
            {"count", entries.size()},
            {"payload_dim", payload_dim()},
            {"clamped_fraction", decode_stats.fraction()},
            {"clamped", decode_stats.clamped},
            {"decoded_values", decode_stats.total}};
  write_file_atomic(dir / "pool_meta.json", meta.dump(2) + "\n");
  std::ostringstream lines;
  std::vector<float> flat;
  for (const auto& e : entries) {
    json rec{{"generation_id", e.generation_id}, {"class_id", e.class_id}, {"domain_i", e.domain_i},
             {"domain_j", e.domain_j},           {"alpha", e.alpha},       {"strategy", to_string(e.strategy)},
             {"mix_step", e.mix_step ? json(*e.mix_step) : json(nullptr)},
             {"seed", e.seed},                   {"cfg_scale", e.cfg_scale}, {"payload_hash", e.payload_hash}};
    lines << rec.dump() << '\n';
    flat.insert(flat.end(), e.payload.begin(), e.payload.end());
  }
  write_file_atomic(dir / "entries.jsonl", lines.str());
  write_file_atomic(dir / "payloads.bin", encode_f32_le(flat));
}

SamplePool SamplePool::load(const std::filesystem::path& dir) {
  const auto meta = json::parse(read_text_file(dir / "pool_meta.json"));
  if (meta.at("version").get<std::string>() != kPoolFormat) throw IntegrityError("unsupported pool version in " + dir.string());
  SamplePool pool;
  pool.policy = MixPolicy::from_json(meta.at("policy"));
  pool.model_hash = meta.at("model_hash").get<std::string>();
  pool.seed = meta.at("seed").get<std::uint64_t>();
  pool.per_cell_target = meta.at("per_cell_target").get<int>();
  pool.decode_stats.clamped = meta.value("clamped", std::size_t{0});
  pool.decode_stats.total = meta.value("decoded_values", std::size_t{0});
  const auto dim = meta.at("payload_dim").get<std::size_t>();
  const auto flat = decode_f32_le(read_binary_file(dir / "payloads.bin"));
  std::istringstream in(read_text_file(dir / "entries.jsonl"));
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = json::parse(line);
    SyntheticSample s;
    s.generation_id = rec.at("generation_id").get<std::uint64_t>();
    s.class_id = rec.at("class_id").get<int>();
    s.domain_i = rec.at("domain_i").get<int>();
    s.domain_j = rec.at("domain_j").get<int>();
    s.alpha = rec.at("alpha").get<double>();
    s.strategy = strategy_from_string(rec.at("strategy").get<std::string>());
    if (!rec.at("mix_step").is_null()) s.mix_step = rec.at("mix_step").get<int>();
    s.seed = rec.at("seed").get<std::uint64_t>();
    s.cfg_scale = rec.at("cfg_scale").get<double>();
    s.payload_hash = rec.at("payload_hash").get<std::string>();
    if ((row + 1) * dim > flat.size()) throw IntegrityError("pool payloads.bin is shorter than entries.jsonl in " + dir.string());
    s.payload.assign(flat.begin() + static_cast<std::ptrdiff_t>(row * dim), flat.begin() + static_cast<std::ptrdiff_t>((row + 1) * dim));
    if (payload_hash(s.payload) != s.payload_hash)
      throw IntegrityError("payload hash mismatch for generation " + std::to_string(s.generation_id) + " in " +
                           (dir / "payloads.bin").string());
    pool.entries.push_back(std::move(s));
    ++row;
  }
  if (row * dim != flat.size()) throw IntegrityError("pool payloads.bin size mismatch in " + dir.string());
  return pool;
}

}  // namespace fds::mixing
