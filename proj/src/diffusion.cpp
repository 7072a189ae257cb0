#include "fds/diffusion.hpp"

#include <algorithm>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace fds::diffusion {

using nlohmann::json;

// --- schedule ------------------------------------------------------------

void NoiseSchedule::validate() const {
  if (train_timesteps < 1 || betas.size() != static_cast<std::size_t>(train_timesteps))
    throw std::invalid_argument("schedule: betas length must equal T");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw std::invalid_argument("schedule: beta outside (0,1)");
    if (i > 0 && betas[i] < betas[i - 1]) throw std::invalid_argument("schedule: betas must be non-decreasing");
    if (i > 0 && !(alpha_bars[i] < alpha_bars[i - 1])) throw std::invalid_argument("schedule: alpha_bar must decrease");
  }
  if (!(alpha_bars.back() < 0.01)) throw std::invalid_argument("schedule: final alpha_bar must be < 0.01");
}

NoiseSchedule NoiseSchedule::from_betas(std::string kind, std::vector<double> betas) {
  NoiseSchedule s;
  s.kind = std::move(kind);
  s.train_timesteps = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  double prod = 1.0;
  for (double b : s.betas) {
    s.alphas.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bars.push_back(prod);
  }
  s.validate();
  return s;
}

NoiseSchedule make_schedule(int T, const std::string& kind) {
  if (T < 10) throw std::invalid_argument("make_schedule: T_train must be >= 10");
  std::vector<double> betas(static_cast<std::size_t>(T));
  if (kind == "linear") {
    // Range given for T = 1000, rescaled so every length ends near pure noise.
    const double scale = 1000.0 / T;
    const double lo = std::min(1e-4 * scale, 0.5), hi = std::min(2e-2 * scale, 0.999);
    for (int t = 0; t < T; ++t) betas[t] = lo + (hi - lo) * t / (T - 1);
  } else if (kind == "cosine") {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= T; ++t) betas[t - 1] = std::min(1.0 - f(t) / f(t - 1), 0.999);
    // The raw profile starts below 1e-4 and is not monotone at the clip.
    for (int t = 1; t < T; ++t) betas[t] = std::max(betas[t], betas[t - 1]);
  } else {
    throw std::invalid_argument("make_schedule: unknown kind '" + kind + "'");
  }
  return NoiseSchedule::from_betas(kind, std::move(betas));
}

// --- configs -------------------------------------------------------------

json DenoiserConfig::to_json() const {
  return json{{"data_dim", data_dim}, {"embed_dim", embed_dim}, {"time_dim", time_dim},
              {"cond_width", cond_width}, {"hidden", hidden},     {"depth", depth}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
  DenoiserConfig c;
  c.data_dim = j.value("data_dim", c.data_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.time_dim = j.value("time_dim", c.time_dim);
  c.cond_width = j.value("cond_width", c.cond_width);
  c.hidden = j.value("hidden", c.hidden);
  c.depth = j.value("depth", c.depth);
  return c;
}

json DiffusionTrainConfig::to_json() const {
  return json{{"schedule", schedule},   {"train_timesteps", train_timesteps}, {"denoiser", denoiser.to_json()},
              {"steps", steps},         {"batch_size", batch_size},           {"lr", lr},
              {"p_uncond", p_uncond},   {"grad_clip", grad_clip},             {"ema_decay", ema_decay},
              {"checkpoint_every", checkpoint_every}, {"seed", seed}, {"codec", codec}, {"latent_dim", latent_dim}};
}

DiffusionTrainConfig DiffusionTrainConfig::from_json(const json& j) {
  DiffusionTrainConfig c;
  c.schedule = j.value("schedule", c.schedule);
  c.train_timesteps = j.value("train_timesteps", c.train_timesteps);
  if (j.contains("denoiser")) c.denoiser = DenoiserConfig::from_json(j["denoiser"]);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.p_uncond = j.value("p_uncond", c.p_uncond);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.codec = j.value("codec", c.codec);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

// --- model ---------------------------------------------------------------

std::string to_string(ConditionEmbedding::Kind kind) {
  switch (kind) {
    case ConditionEmbedding::Kind::pure: return "pure";
    case ConditionEmbedding::Kind::mixed: return "mixed";
    case ConditionEmbedding::Kind::null: return "null";
  }
  return "unknown";
}

DiffusionModel::DiffusionModel(int n_domains, int n_classes, data::PayloadMode mode, std::vector<int> shape,
                               const DenoiserConfig& cfg, NoiseSchedule schedule, std::uint64_t seed,
                               std::optional<LinearCodec> codec)
    : n_domains_(n_domains), n_classes_(n_classes), mode_(mode), shape_(std::move(shape)), schedule_(std::move(schedule)),
      pca_(std::move(codec)) {
  require(n_domains >= 1 && n_classes >= 1, "diffusion model needs at least one domain and class");
  int dim = 1;
  for (int s : shape_) dim *= s;
  if (pca_) {
    codec_ = "pca";
    require(pca_->payload_dim() == dim, "codec payload width must match payload shape");
    require(pca_->latent_dim() == cfg.data_dim, "denoiser data_dim must match codec latent width");
  } else {
    require(dim == cfg.data_dim, "denoiser data_dim must match payload shape");
  }
  Rng rng(seed);
  net_ = DiffusionNet<float>(n_domains, n_classes, cfg, rng);
}

ConditionEmbedding DiffusionModel::encode_condition(int class_id, int domain_id) const {
  const int row = net_.conditions.row(class_id, domain_id);
  ConditionEmbedding e;
  const auto r = net_.conditions.table.value.row(row);
  e.vector.assign(r.data(), r.data() + r.size());
  e.kind = ConditionEmbedding::Kind::pure;
  e.class_id = class_id;
  e.domain_i = domain_id;
  e.domain_j = domain_id;
  e.alpha = 1.0;
  return e;
}

ConditionEmbedding DiffusionModel::encode_null() const {
  ConditionEmbedding e;
  const auto r = net_.conditions.table.value.row(net_.conditions.null_row());
  e.vector.assign(r.data(), r.data() + r.size());
  e.kind = ConditionEmbedding::Kind::null;
  return e;
}

Mat<float> LinearCodec::encode(const Mat<float>& x) const {
  if (x.cols() != payload_dim()) throw std::invalid_argument("codec: payload width mismatch");
  const Eigen::Map<const Eigen::RowVectorXf> mu(mean.data(), payload_dim());
  const Eigen::Map<const Eigen::RowVectorXf> sc(scale.data(), latent_dim());
  Mat<float> z = (x.rowwise() - mu) * basis;
  return z.array().rowwise() / sc.array();
}

Mat<float> LinearCodec::decode(const Mat<float>& z) const {
  if (z.cols() != latent_dim()) throw std::invalid_argument("codec: latent width mismatch");
  const Eigen::Map<const Eigen::RowVectorXf> mu(mean.data(), payload_dim());
  const Eigen::Map<const Eigen::RowVectorXf> sc(scale.data(), latent_dim());
  const Mat<float> zs = z.array().rowwise() * sc.array();
  Mat<float> x(z.rows(), payload_dim());
  for (Eigen::Index r = 0; r < z.rows(); ++r) x.row(r) = zs.row(r) * basis.transpose() + mu;
  return x;
}

LinearCodec fit_pca_codec(const Mat<float>& x, int k) {
  require(x.rows() >= 2, "pca codec: needs at least two rows");
  require(k >= 1 && k <= x.cols(), "pca codec: latent width must lie in [1, payload width]");
  const Eigen::MatrixXd xd = x.cast<double>();
  const Eigen::RowVectorXd mu = xd.colwise().mean();
  const Eigen::MatrixXd xc = xd.rowwise() - mu;
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  LinearCodec c;
  c.mean.assign(mu.data(), mu.data() + mu.size());
  c.basis.resize(x.cols(), k);
  c.scale.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const Eigen::Index src = x.cols() - 1 - i;  // eigenvalues ascend
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    c.basis.col(i) = v.cast<float>();
    c.scale[static_cast<std::size_t>(i)] = static_cast<float>(std::sqrt(std::max(eig.eigenvalues()(src), 1e-8)));
  }
  return c;
}

int DiffusionModel::payload_dim() const {
  int dim = 1;
  for (int s : shape_) dim *= s;
  return dim;
}

Mat<float> DiffusionModel::encode(const Mat<float>& payloads) const {
  if (pca_) return pca_->encode(payloads);
  if (payloads.cols() != data_dim()) throw std::invalid_argument("encode: payload width mismatch");
  return payloads;
}

std::optional<std::pair<float, float>> DiffusionModel::x0_range() const {
  if (mode_ == data::PayloadMode::image && !pca_) return std::pair<float, float>{0.0f, 1.0f};
  return std::nullopt;
}

std::vector<float> DiffusionModel::decode(std::span<const float> latent, DecodeStats* stats) const {
  if (static_cast<int>(latent.size()) != data_dim()) throw std::invalid_argument("decode: latent width mismatch");
  std::vector<float> out;
  if (pca_) {
    const Eigen::Map<const Mat<float>> z(latent.data(), 1, static_cast<Eigen::Index>(latent.size()));
    const Mat<float> x = pca_->decode(z);
    out.assign(x.data(), x.data() + x.size());
  } else {
    out.assign(latent.begin(), latent.end());
  }
  if (mode_ == data::PayloadMode::image) {
    std::size_t clamped = 0;
    for (float& v : out) {
      if (v < 0.0f || v > 1.0f) {
        ++clamped;
        v = std::clamp(v, 0.0f, 1.0f);
      }
    }
    if (stats) {
      stats->clamped += clamped;
      stats->total += out.size();
    }
  } else if (stats) {
    stats->total += out.size();
  }
  return out;
}

Checkpoint DiffusionModel::to_checkpoint() const {
  Checkpoint ck;
  ck.header = json{{"kind", "diffusion"},
                   {"n_domains", n_domains_},
                   {"n_classes", n_classes_},
                   {"mode", data::to_string(mode_)},
                   {"shape", shape_},
                   {"codec", codec_},
                   {"denoiser", net_.denoiser.config().to_json()},
                   {"schedule", json{{"kind", schedule_.kind}, {"train_timesteps", schedule_.train_timesteps}, {"betas", schedule_.betas}}},
                   {"train_config", train_config_echo}};
  auto& net = const_cast<DiffusionNet<float>&>(net_);
  for (auto* p : net.params()) ck.add(p->name, std::vector<float>(p->value.data(), p->value.data() + p->value.size()));
  if (pca_) {
    ck.header["latent_dim"] = pca_->latent_dim();
    ck.add("codec.mean", pca_->mean);
    ck.add("codec.basis", std::vector<float>(pca_->basis.data(), pca_->basis.data() + pca_->basis.size()));
    ck.add("codec.scale", pca_->scale);
  }
  return ck;
}

DiffusionModel DiffusionModel::from_checkpoint(const Checkpoint& ck) {
  const auto& h = ck.header;
  if (h.value("kind", std::string()) != "diffusion") throw IntegrityError("checkpoint is not a diffusion model");
  const auto& sj = h.at("schedule");
  auto schedule = NoiseSchedule::from_betas(sj.at("kind").get<std::string>(), sj.at("betas").get<std::vector<double>>());
  const auto codec = h.value("codec", std::string("identity"));
  if (codec != "identity" && codec != "pca") throw IntegrityError("unsupported payload codec: " + codec);
  const auto shape = h.at("shape").get<std::vector<int>>();
  std::optional<LinearCodec> lc;
  if (codec == "pca") {
    LinearCodec c;
    c.mean = ck.tensor("codec.mean");
    c.scale = ck.tensor("codec.scale");
    const auto& b = ck.tensor("codec.basis");
    const auto k = static_cast<Eigen::Index>(c.scale.size()), d = static_cast<Eigen::Index>(c.mean.size());
    if (static_cast<Eigen::Index>(b.size()) != k * d) throw IntegrityError("codec basis size mismatch");
    c.basis = Eigen::Map<const Mat<float>>(b.data(), d, k);
    lc = std::move(c);
  }
  DiffusionModel m(h.at("n_domains").get<int>(), h.at("n_classes").get<int>(),
                   data::payload_mode_from_string(h.at("mode").get<std::string>()), shape,
                   DenoiserConfig::from_json(h.at("denoiser")), std::move(schedule), 0, std::move(lc));
  m.train_config_echo = h.value("train_config", json::object());
  for (auto* p : m.net_.params()) {
    const auto& v = ck.tensor(p->name);
    if (static_cast<Eigen::Index>(v.size()) != p->value.size()) throw IntegrityError("tensor size mismatch: " + p->name);
    std::copy(v.begin(), v.end(), p->value.data());
  }
  return m;
}

std::string DiffusionModel::content_hash() const { return sha256_hex(to_checkpoint().encode()); }

// --- training ------------------------------------------------------------

DiffusionTrainResult train_diffusion(const data::MultiDomainDataset& dataset, const data::SplitPlan& split,
                                     const DiffusionTrainConfig& cfg, const StepCallback& on_step) {
  // Oracle splits validate on the target domain, so only train ids are used there.
  std::vector<SampleId> stream = split.train_ids;
  if (split.mode != "oracle") stream.insert(stream.end(), split.val_ids.begin(), split.val_ids.end());
  data::assert_no_domain(dataset, stream, split.target_domain, "train_diffusion");
  if (stream.empty() && cfg.steps > 0) throw std::invalid_argument("train_diffusion: empty training stream");
  require(cfg.batch_size >= 1, "train_diffusion: batch_size must be >= 1");
  require(cfg.p_uncond >= 0.0 && cfg.p_uncond < 1.0, "train_diffusion: p_uncond must lie in [0,1)");

  if (cfg.codec != "identity" && cfg.codec != "pca") throw std::invalid_argument("train_diffusion: codec must be identity or pca");
  DenoiserConfig dcfg = cfg.denoiser;
  dcfg.data_dim = dataset.payload_dim();
  const Mat<float> payloads = stream.empty() ? Mat<float>(0, dataset.payload_dim()) : dataset.gather(stream);
  std::optional<LinearCodec> codec;
  if (cfg.codec == "pca") {
    codec = fit_pca_codec(payloads, cfg.latent_dim);
    dcfg.data_dim = cfg.latent_dim;
  }
  DiffusionTrainResult result;
  result.model = DiffusionModel(dataset.n_domains(), dataset.n_classes(), dataset.mode(), dataset.shape(), dcfg,
                                make_schedule(cfg.train_timesteps, cfg.schedule), derive_seed(cfg.seed, 0xD1FF), codec);
  result.model.train_config_echo = cfg.to_json();
  if (cfg.steps <= 0) return result;

  auto& net = result.model.net();
  const auto& schedule = result.model.schedule();
  const Mat<float> all = result.model.encode(payloads);
  std::vector<int> all_rows;
  for (SampleId id : stream) all_rows.push_back(net.conditions.row(dataset.class_of(id), dataset.domain_of(id)));

  auto params = net.params();
  nn::Adam<float> opt(params, nn::AdamConfig{.lr = cfg.lr, .grad_clip = cfg.grad_clip});
  std::vector<float> ema;
  if (cfg.ema_decay > 0.0) ema = nn::flatten_values(params);

  Rng rng(derive_seed(cfg.seed, 0x7A11));
  std::uniform_int_distribution<std::size_t> pick(0, stream.size() - 1);
  Mat<float> x0(cfg.batch_size, all.cols());
  std::vector<int> rows(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 1; step <= cfg.steps; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto i = pick(rng);
      x0.row(b) = all.row(static_cast<Eigen::Index>(i));
      rows[static_cast<std::size_t>(b)] = all_rows[i];
    }
    const auto draw = draw_noise<float>(cfg.batch_size, static_cast<int>(all.cols()), schedule.train_timesteps, cfg.p_uncond, rng);
    opt.zero_grad();
    const double loss = diffusion_loss(net, schedule, x0, rows, draw, true);
    opt.step();
    if (!ema.empty()) {
      const float d = static_cast<float>(cfg.ema_decay);
      std::size_t off = 0;
      for (const auto* p : params)
        for (Eigen::Index k = 0; k < p->value.size(); ++k, ++off) ema[off] = d * ema[off] + (1.0f - d) * p->value.data()[k];
    }
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty()) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
      result.model.to_checkpoint().save(cfg.checkpoint_dir / name.str());
      ++result.checkpoints_written;
    }
  }
  if (!ema.empty()) nn::assign_values(params, ema);
  return result;
}

// --- sampling ------------------------------------------------------------

void SamplerConfig::validate(int train_timesteps) const {
  if (ddim_steps < 1 || ddim_steps > train_timesteps) throw std::invalid_argument("sampler: ddim_steps must lie in [1, T_train]");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("sampler: eta must lie in [0,1]");
  if (!(cfg_min >= 1.0) || !(cfg_max >= cfg_min)) throw std::invalid_argument("sampler: cfg scale range must satisfy 1 <= min <= max");
}

double SamplerConfig::resolved_cfg() const {
  if (cfg_min == cfg_max) return cfg_min;
  Rng rng(derive_seed(seed, 0xCF6));
  return std::uniform_real_distribution<double>(cfg_min, cfg_max)(rng);
}

Mat<float> cfg_combine(const Mat<float>& eps_cond, const Mat<float>& eps_uncond, double scale) {
  if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols())
    throw std::invalid_argument("cfg_combine: shape mismatch");
  if (scale == 1.0) return eps_cond;
  const float s = static_cast<float>(scale);
  return eps_uncond + s * (eps_cond - eps_uncond);
}

std::vector<int> ddim_timesteps(int T, int S) {
  if (S < 1 || S > T) throw std::invalid_argument("ddim_timesteps: steps must lie in [1, T]");
  std::vector<int> ts;
  for (int s = S; s >= 1; --s) ts.push_back(static_cast<int>(std::lround(static_cast<double>(s) * T / S)));
  return ts;
}

Mat<float> initial_noise(int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Mat<float> z(1, dim);
  for (int c = 0; c < dim; ++c) z(0, c) = normal(rng);
  return z;
}

Mat<float> guided_epsilon(const DiffusionModel& model, const Mat<float>& z, int t, const Mat<float>& embeddings,
                          std::span<const double> scales, int step, const SamplerHooks* hooks) {
  const Eigen::Index B = z.rows();
  if (static_cast<Eigen::Index>(scales.size()) != B || embeddings.rows() != B)
    throw std::invalid_argument("guided_epsilon: batch size mismatch");
  const bool need_uncond = std::any_of(scales.begin(), scales.end(), [](double s) { return s != 1.0; });
  const std::vector<int> ts(static_cast<std::size_t>(need_uncond ? 2 * B : B), t);
  Mat<float> zz = z, ee = embeddings;
  if (need_uncond) {
    const auto null = model.encode_null();
    const Eigen::Map<const Mat<float>> null_row(null.vector.data(), 1, static_cast<Eigen::Index>(null.vector.size()));
    zz.resize(2 * B, z.cols());
    zz << z, z;
    ee.resize(2 * B, embeddings.cols());
    ee.topRows(B) = embeddings;
    ee.bottomRows(B) = null_row.replicate(B, 1);
  }
  if (hooks && hooks->on_denoiser_call) {
    hooks->on_denoiser_call(step, true);
    if (need_uncond) hooks->on_denoiser_call(step, false);
  }
  const Mat<float> out = model.predict(zz, ts, ee);
  if (!need_uncond) return out;
  Mat<float> eps(B, z.cols());
  for (Eigen::Index r = 0; r < B; ++r)
    eps.row(r) = cfg_combine(out.row(r), out.row(B + r), scales[static_cast<std::size_t>(r)]);
  return eps;
}

Mat<float> ddim_update(const Mat<float>& z, const Mat<float>& eps_in, int t, int t_prev, const NoiseSchedule& schedule,
                       double eta, const Mat<float>* noise, const std::optional<std::pair<float, float>>& x0_range) {
  const double ab = schedule.alpha_bar(t), abp = schedule.alpha_bar(t_prev);
  const double sigma = eta > 0.0 ? eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp) : 0.0;
  const float c_x0 = static_cast<float>(std::sqrt(abp) / std::sqrt(ab));
  const float c_eps_in = static_cast<float>(std::sqrt(1.0 - ab));
  const float c_dir = static_cast<float>(std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma)));
  Mat<float> x0 = z - c_eps_in * eps_in;
  Mat<float> eps = eps_in;
  if (x0_range) {
    const float sa = static_cast<float>(std::sqrt(ab));
    x0 = (x0 / sa).cwiseMax(x0_range->first).cwiseMin(x0_range->second) * sa;
    eps = (z - x0) / c_eps_in;
  }
  Mat<float> out = c_x0 * x0 + c_dir * eps;
  if (sigma > 0.0) {
    if (!noise) throw std::invalid_argument("ddim_update: eta > 0 requires noise");
    out += static_cast<float>(sigma) * (*noise);
  }
  return out;
}

std::vector<Rng> step_rngs(std::span<const SamplerConfig> configs) {
  std::vector<Rng> out;
  for (const auto& c : configs) out.emplace_back(derive_seed(c.seed, 0x57E9));
  return out;
}

Mat<float> step_noise(std::vector<Rng>& rngs, int dim) {
  Mat<float> n(static_cast<Eigen::Index>(rngs.size()), dim);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (std::size_t r = 0; r < rngs.size(); ++r)
    for (int c = 0; c < dim; ++c) n(static_cast<Eigen::Index>(r), c) = normal(rngs[r]);
  return n;
}

Mat<float> embeddings_matrix(std::span<const ConditionEmbedding> embeddings) {
  require(!embeddings.empty(), "embeddings_matrix: empty input");
  const auto d = static_cast<Eigen::Index>(embeddings.front().vector.size());
  Mat<float> out(static_cast<Eigen::Index>(embeddings.size()), d);
  for (std::size_t r = 0; r < embeddings.size(); ++r) {
    if (static_cast<Eigen::Index>(embeddings[r].vector.size()) != d) throw std::invalid_argument("embedding dimension mismatch");
    for (Eigen::Index c = 0; c < d; ++c) {
      if (!std::isfinite(embeddings[r].vector[static_cast<std::size_t>(c)])) throw std::invalid_argument("non-finite embedding");
      out(static_cast<Eigen::Index>(r), c) = embeddings[r].vector[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

Mat<float> ddim_sample_latents(const DiffusionModel& model, const Mat<float>& embeddings, std::span<const SamplerConfig> configs,
                               const SamplerHooks* hooks) {
  require(!configs.empty(), "ddim_sample: empty batch");
  require(static_cast<Eigen::Index>(configs.size()) == embeddings.rows(), "ddim_sample: one config per embedding");
  if (embeddings.cols() != model.embed_dim()) throw std::invalid_argument("ddim_sample: embedding dimension mismatch");
  const int T = model.schedule().train_timesteps;
  for (const auto& c : configs) {
    c.validate(T);
    if (c.ddim_steps != configs.front().ddim_steps || c.eta != configs.front().eta)
      throw std::invalid_argument("ddim_sample: batched requests must share ddim_steps and eta");
  }
  const int dim = model.data_dim();
  const auto B = static_cast<Eigen::Index>(configs.size());
  Mat<float> z(B, dim);
  std::vector<double> scales;
  for (Eigen::Index r = 0; r < B; ++r) {
    z.row(r) = initial_noise(dim, configs[static_cast<std::size_t>(r)].seed);
    scales.push_back(configs[static_cast<std::size_t>(r)].resolved_cfg());
  }
  const double eta = configs.front().eta;
  auto rngs = step_rngs(configs);
  const auto ts = ddim_timesteps(T, configs.front().ddim_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Mat<float> eps = guided_epsilon(model, z, ts[i], embeddings, scales, static_cast<int>(i) + 1, hooks);
    Mat<float> noise;
    if (eta > 0.0) noise = step_noise(rngs, dim);
    z = ddim_update(z, eps, ts[i], t_prev, model.schedule(), eta, eta > 0.0 ? &noise : nullptr, model.x0_range());
  }
  return z;
}

std::vector<float> ddim_sample(const DiffusionModel& model, const ConditionEmbedding& embedding, const SamplerConfig& config,
                               const SamplerHooks* hooks, DecodeStats* stats) {
  const std::vector<ConditionEmbedding> one{embedding};
  const std::vector<SamplerConfig> cfgs{config};
  const Mat<float> z = ddim_sample_latents(model, embeddings_matrix(one), cfgs, hooks);
  return model.decode(std::span<const float>(z.data(), static_cast<std::size_t>(z.size())), stats);
}

}  // namespace fds::diffusion
