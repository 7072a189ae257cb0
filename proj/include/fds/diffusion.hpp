#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fds/checkpoint.hpp"
#include "fds/common.hpp"
#include "fds/dataset.hpp"
#include "fds/nn/adam.hpp"
#include "fds/nn/layers.hpp"

namespace fds::diffusion {

using nn::Mat;

// --- noise schedule ------------------------------------------------------

// Arrays are 0-based storage for timesteps t = 1..T.
struct NoiseSchedule {
  int train_timesteps = 0;
  std::string kind;
  std::vector<double> betas, alphas, alpha_bars;

  // alpha_bar(0) == 1 by convention (clean data).
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }
  void validate() const;
  static NoiseSchedule from_betas(std::string kind, std::vector<double> betas);
};

NoiseSchedule make_schedule(int train_timesteps, const std::string& kind);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with one timestep per row.
template <typename T>
Mat<T> forward_noise(const Mat<T>& x0, std::span<const int> t, const Mat<T>& eps, const NoiseSchedule& schedule) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw std::invalid_argument("forward_noise: shape mismatch");
  if (static_cast<Eigen::Index>(t.size()) != x0.rows()) throw std::invalid_argument("forward_noise: one timestep per row");
  Mat<T> out(x0.rows(), x0.cols());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const int tr = t[static_cast<std::size_t>(r)];
    if (tr < 1 || tr > schedule.train_timesteps) throw std::invalid_argument("forward_noise: timestep out of range");
    const double ab = schedule.alpha_bar(tr);
    const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
    out.row(r) = a * x0.row(r) + b * eps.row(r);
  }
  return out;
}

// --- denoiser ------------------------------------------------------------

struct DenoiserConfig {
  int data_dim = 2;
  int embed_dim = 16;
  int time_dim = 32;
  int cond_width = 64;
  int hidden = 128;
  int depth = 3;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

template <typename T>
Mat<T> timestep_features(std::span<const int> t, int time_dim) {
  const int half = time_dim / 2;
  Mat<T> out(static_cast<Eigen::Index>(t.size()), time_dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
      const double arg = static_cast<double>(t[r]) * freq;
      out(static_cast<Eigen::Index>(r), i) = static_cast<T>(std::sin(arg));
      out(static_cast<Eigen::Index>(r), half + i) = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

// MLP epsilon-predictor. Time features and the condition embedding form a
// context vector that modulates every hidden block feature-wise
// (h <- silu(W h (1 + gamma) + beta)); blocks after the first are residual.
template <typename T>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    require(cfg.data_dim > 0 && cfg.embed_dim > 0 && cfg.hidden > 0 && cfg.depth >= 1 && cfg.cond_width > 0,
            "invalid denoiser config");
    require(cfg.time_dim >= 2 && cfg.time_dim % 2 == 0, "time_dim must be even and >= 2");
    context_ = nn::Linear<T>(cfg.time_dim + cfg.embed_dim, cfg.cond_width, rng, "context");
    for (int l = 0; l < cfg.depth; ++l) {
      blocks_.emplace_back(l == 0 ? cfg.data_dim : cfg.hidden, cfg.hidden, rng, "block" + std::to_string(l));
      films_.emplace_back(cfg.cond_width, 2 * cfg.hidden, rng, "film" + std::to_string(l));
    }
    out_ = nn::Linear<T>(cfg.hidden, cfg.data_dim, rng, "out");
  }

  const DenoiserConfig& config() const { return cfg_; }

  Mat<T> forward(const Mat<T>& z, std::span<const int> t, const Mat<T>& e) {
    check_inputs(z, t, e);
    const int H = cfg_.hidden;
    Mat<T> cin(z.rows(), cfg_.time_dim + cfg_.embed_dim);
    cin << timestep_features<T>(t, cfg_.time_dim), e;
    ctx_pre_ = context_.forward(cin);
    const Mat<T> ctx = nn::silu(ctx_pre_);
    pre_.resize(blocks_.size());
    gamma_.resize(blocks_.size());
    act_.resize(blocks_.size());
    Mat<T> h = z;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      act_[l] = blocks_[l].forward(h);
      const Mat<T> f = films_[l].forward(ctx);
      gamma_[l] = f.leftCols(H);
      pre_[l] = act_[l].cwiseProduct((gamma_[l].array() + T(1)).matrix()) + f.rightCols(H);
      const Mat<T> s = nn::silu(pre_[l]);
      h = l == 0 ? s : Mat<T>(h + s);
    }
    return out_.forward(h);
  }

  // Accumulates parameter gradients; returns d loss / d embedding.
  Mat<T> backward(const Mat<T>& d_out) {
    const int H = cfg_.hidden;
    Mat<T> dh = out_.backward(d_out);
    Mat<T> dctx = Mat<T>::Zero(d_out.rows(), cfg_.cond_width);
    for (std::size_t li = blocks_.size(); li-- > 0;) {
      const Mat<T> du = dh.cwiseProduct(pre_[li].unaryExpr([](T v) { return nn::silu_grad(v); }));
      const Mat<T> da = du.cwiseProduct((gamma_[li].array() + T(1)).matrix());
      Mat<T> df(du.rows(), 2 * H);
      df << du.cwiseProduct(act_[li]), du;
      dctx += films_[li].backward(df);
      Mat<T> dprev = blocks_[li].backward(da);
      if (li > 0) dprev += dh;
      dh = std::move(dprev);
    }
    const Mat<T> dpre = dctx.cwiseProduct(ctx_pre_.unaryExpr([](T v) { return nn::silu_grad(v); }));
    const Mat<T> dcin = context_.backward(dpre);
    return dcin.rightCols(cfg_.embed_dim);
  }

  // Row-independent evaluation.
  Mat<T> infer(const Mat<T>& z, std::span<const int> t, const Mat<T>& e) const {
    check_inputs(z, t, e);
    const int H = cfg_.hidden;
    Mat<T> cin(z.rows(), cfg_.time_dim + cfg_.embed_dim);
    cin << timestep_features<T>(t, cfg_.time_dim), e;
    const Mat<T> ctx = nn::silu(context_.infer(cin));
    Mat<T> h = z;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Mat<T> a = blocks_[l].infer(h);
      const Mat<T> f = films_[l].infer(ctx);
      const Mat<T> u = a.cwiseProduct((f.leftCols(H).array() + T(1)).matrix()) + f.rightCols(H);
      const Mat<T> s = nn::silu(u);
      h = l == 0 ? s : Mat<T>(h + s);
    }
    return out_.infer(h);
  }

  nn::ParamRefs<T> params() {
    nn::ParamRefs<T> out;
    context_.collect(out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      blocks_[l].collect(out);
      films_[l].collect(out);
    }
    out_.collect(out);
    return out;
  }

 private:
  void check_inputs(const Mat<T>& z, std::span<const int> t, const Mat<T>& e) const {
    if (z.cols() != cfg_.data_dim || e.cols() != cfg_.embed_dim || e.rows() != z.rows() ||
        static_cast<Eigen::Index>(t.size()) != z.rows())
      throw std::invalid_argument("denoiser input shape mismatch");
  }

  DenoiserConfig cfg_;
  nn::Linear<T> context_;
  std::vector<nn::Linear<T>> blocks_, films_;
  nn::Linear<T> out_;
  Mat<T> ctx_pre_;
  std::vector<Mat<T>> pre_, gamma_, act_;
};

// Learned condition table: one row per (class, domain) plus a null row.
template <typename T>
class ConditionTable {
 public:
  ConditionTable() = default;
  ConditionTable(int n_domains, int n_classes, int embed_dim, Rng& rng) : n_domains_(n_domains), n_classes_(n_classes) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Mat<T> v(n_domains * n_classes + 1, embed_dim);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(normal(rng));
    table = nn::Param<T>("condition_table", std::move(v));
  }

  int rows() const { return static_cast<int>(table.value.rows()); }
  int embed_dim() const { return static_cast<int>(table.value.cols()); }
  int null_row() const { return n_domains_ * n_classes_; }
  int row(int class_id, int domain_id) const {
    if (class_id < 0 || class_id >= n_classes_ || domain_id < 0 || domain_id >= n_domains_)
      throw std::out_of_range("condition ids out of range");
    return domain_id * n_classes_ + class_id;
  }

  Mat<T> lookup(std::span<const int> rows) const {
    Mat<T> out(static_cast<Eigen::Index>(rows.size()), embed_dim());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = table.value.row(rows[r]);
    return out;
  }

  void accumulate(std::span<const int> rows, const Mat<T>& d_embed) {
    for (std::size_t r = 0; r < rows.size(); ++r) table.grad.row(rows[r]) += d_embed.row(static_cast<Eigen::Index>(r));
  }

  nn::Param<T> table;

 private:
  int n_domains_ = 0, n_classes_ = 0;
};

// Trainable part of a diffusion model: epsilon-predictor plus condition table.
template <typename T>
struct DiffusionNet {
  Denoiser<T> denoiser;
  ConditionTable<T> conditions;

  DiffusionNet() = default;
  DiffusionNet(int n_domains, int n_classes, const DenoiserConfig& cfg, Rng& rng)
      : denoiser(cfg, rng), conditions(n_domains, n_classes, cfg.embed_dim, rng) {}

  nn::ParamRefs<T> params() {
    auto p = denoiser.params();
    p.push_back(&conditions.table);
    return p;
  }
};

// --- loss ----------------------------------------------------------------

// Random quantities of one loss evaluation, drawn up front so the loss is a
// deterministic function of the parameters (needed for gradient checks).
template <typename T>
struct NoiseDraw {
  std::vector<int> t;
  Mat<T> eps;
  std::vector<char> drop_condition;
};

template <typename T>
NoiseDraw<T> draw_noise(int batch, int dim, int train_timesteps, double p_uncond, Rng& rng) {
  NoiseDraw<T> d;
  std::uniform_int_distribution<int> tdist(1, train_timesteps);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution drop(p_uncond);
  d.eps.resize(batch, dim);
  for (int r = 0; r < batch; ++r) {
    d.t.push_back(tdist(rng));
    for (int c = 0; c < dim; ++c) d.eps(r, c) = static_cast<T>(normal(rng));
    d.drop_condition.push_back(p_uncond > 0.0 && drop(rng) ? 1 : 0);
  }
  return d;
}

// Mean over rows and dimensions of (eps - prediction)^2, for any predictor
// callable as predict(z_t, t, condition_rows).
template <typename T, typename Predict>
double diffusion_loss_with(const Predict& predict, const NoiseSchedule& schedule, const Mat<T>& x0,
                           std::span<const int> condition_rows, const NoiseDraw<T>& draw) {
  const Mat<T> zt = forward_noise<T>(x0, draw.t, draw.eps, schedule);
  const Mat<T> pred = predict(zt, std::span<const int>(draw.t), condition_rows);
  if (pred.rows() != draw.eps.rows() || pred.cols() != draw.eps.cols())
    throw std::invalid_argument("diffusion_loss: prediction shape mismatch");
  return static_cast<double>((draw.eps - pred).squaredNorm()) / static_cast<double>(draw.eps.size());
}

// Loss of a DiffusionNet; when `backprop` is set, gradients are accumulated
// into the denoiser and condition table. Dropped conditions use the null row.
template <typename T>
double diffusion_loss(DiffusionNet<T>& net, const NoiseSchedule& schedule, const Mat<T>& x0,
                      std::span<const int> condition_rows, const NoiseDraw<T>& draw, bool backprop) {
  if (static_cast<Eigen::Index>(condition_rows.size()) != x0.rows())
    throw std::invalid_argument("diffusion_loss: one condition per row");
  std::vector<int> rows(condition_rows.begin(), condition_rows.end());
  for (std::size_t r = 0; r < rows.size(); ++r)
    if (draw.drop_condition[r]) rows[r] = net.conditions.null_row();
  const Mat<T> zt = forward_noise<T>(x0, draw.t, draw.eps, schedule);
  const Mat<T> e = net.conditions.lookup(rows);
  const Mat<T> pred = net.denoiser.forward(zt, draw.t, e);
  const Mat<T> diff = pred - draw.eps;
  const double n = static_cast<double>(diff.size());
  if (backprop) {
    const Mat<T> d_out = diff * static_cast<T>(2.0 / n);
    const Mat<T> de = net.denoiser.backward(d_out);
    net.conditions.accumulate(rows, de);
  }
  return static_cast<double>(diff.squaredNorm()) / n;
}

// --- model ---------------------------------------------------------------

struct ConditionEmbedding {
  enum class Kind { pure, mixed, null };
  std::vector<float> vector;
  Kind kind = Kind::pure;
  int class_id = -1;
  int domain_i = -1;
  int domain_j = -1;
  double alpha = 1.0;
};

std::string to_string(ConditionEmbedding::Kind kind);

struct DecodeStats {
  std::size_t clamped = 0;
  std::size_t total = 0;
  double fraction() const { return total ? static_cast<double>(clamped) / static_cast<double>(total) : 0.0; }
};

// Whitened PCA codec: latent = ((x - mean) basis) / scale, basis D x k.
struct LinearCodec {
  std::vector<float> mean;
  Mat<float> basis;
  std::vector<float> scale;

  int payload_dim() const { return static_cast<int>(mean.size()); }
  int latent_dim() const { return static_cast<int>(basis.cols()); }
  Mat<float> encode(const Mat<float>& x) const;
  Mat<float> decode(const Mat<float>& z) const;
};

// Top-k principal directions of the rows of x, sign-fixed so the largest
// loading of each direction is positive.
LinearCodec fit_pca_codec(const Mat<float>& x, int k);

class DiffusionModel {
 public:
  DiffusionModel() = default;
  DiffusionModel(int n_domains, int n_classes, data::PayloadMode mode, std::vector<int> shape, const DenoiserConfig& cfg,
                 NoiseSchedule schedule, std::uint64_t seed, std::optional<LinearCodec> codec = std::nullopt);

  int n_domains() const { return n_domains_; }
  int n_classes() const { return n_classes_; }
  data::PayloadMode mode() const { return mode_; }
  const std::vector<int>& shape() const { return shape_; }
  int data_dim() const { return net_.denoiser.config().data_dim; }  // latent width
  int payload_dim() const;
  int embed_dim() const { return net_.denoiser.config().embed_dim; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::string& codec() const { return codec_; }

  DiffusionNet<float>& net() { return net_; }
  const DiffusionNet<float>& net() const { return net_; }

  ConditionEmbedding encode_condition(int class_id, int domain_id) const;
  ConditionEmbedding encode_null() const;

  // Row-independent epsilon prediction.
  Mat<float> predict(const Mat<float>& z, std::span<const int> t, const Mat<float>& embeddings) const {
    return net_.denoiser.infer(z, t, embeddings);
  }

  // Payload codec: identity or whitened PCA. Image payloads are clamped to
  // [0,1] on decode.
  Mat<float> encode(const Mat<float>& payloads) const;
  std::vector<float> decode(std::span<const float> latent, DecodeStats* stats = nullptr) const;
  const std::optional<LinearCodec>& linear_codec() const { return pca_; }

  // Range the sampler clips x0 predictions to: [0,1] for identity-coded images.
  std::optional<std::pair<float, float>> x0_range() const;

  nlohmann::json train_config_echo = nlohmann::json::object();

  Checkpoint to_checkpoint() const;
  static DiffusionModel from_checkpoint(const Checkpoint& ck);
  std::string content_hash() const;

 private:
  int n_domains_ = 0, n_classes_ = 0;
  data::PayloadMode mode_ = data::PayloadMode::point;
  std::vector<int> shape_;
  NoiseSchedule schedule_;
  std::string codec_ = "identity";
  std::optional<LinearCodec> pca_;
  DiffusionNet<float> net_;
};

// --- training ------------------------------------------------------------

struct DiffusionTrainConfig {
  std::string schedule = "linear";
  int train_timesteps = 1000;
  DenoiserConfig denoiser;  // data_dim is taken from the dataset or the codec
  std::string codec = "identity";  // identity | pca
  int latent_dim = 32;             // pca components
  int steps = 10000;
  int batch_size = 64;
  double lr = 1e-4;
  double p_uncond = 0.1;
  double grad_clip = 1.0;
  double ema_decay = 0.0;  // 0 disables weight EMA
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DiffusionTrainConfig from_json(const nlohmann::json& j);
};

using StepCallback = std::function<void(int step, double loss)>;

struct DiffusionTrainResult {
  DiffusionModel model;
  std::vector<double> losses;
  int checkpoints_written = 0;
};

// Trains on train_ids and val_ids of the split; target-domain ids abort the run.
DiffusionTrainResult train_diffusion(const data::MultiDomainDataset& dataset, const data::SplitPlan& split,
                                     const DiffusionTrainConfig& config, const StepCallback& on_step = {});

// --- sampling ------------------------------------------------------------

struct SamplerConfig {
  int ddim_steps = 50;
  double eta = 0.0;
  double cfg_min = 5.0;
  double cfg_max = 6.0;
  std::uint64_t seed = 0;

  void validate(int train_timesteps) const;
  // cfg_min when the range is degenerate, otherwise a seed-derived uniform draw.
  double resolved_cfg() const;
};

// eps_uncond + scale * (eps_cond - eps_uncond); scale == 1 returns eps_cond.
Mat<float> cfg_combine(const Mat<float>& eps_cond, const Mat<float>& eps_uncond, double scale);

struct SamplerHooks {
  // Called once per batched denoiser evaluation and branch.
  std::function<void(int step, bool conditional)> on_denoiser_call;
};

// DDIM timesteps from the noise end: round(s*T/S) for s = S..1.
std::vector<int> ddim_timesteps(int train_timesteps, int ddim_steps);

Mat<float> initial_noise(int dim, std::uint64_t seed);

// Classifier-free-guided epsilon for a batch. scales.size() == z.rows().
Mat<float> guided_epsilon(const DiffusionModel& model, const Mat<float>& z, int t, const Mat<float>& embeddings,
                          std::span<const double> scales, int step, const SamplerHooks* hooks);

// One DDIM update from t to t_prev (t_prev == 0 yields the clean estimate).
// `noise` is required when eta > 0. With `x0_range` the clean estimate is
// clipped and epsilon re-derived from it.
Mat<float> ddim_update(const Mat<float>& z, const Mat<float>& eps, int t, int t_prev, const NoiseSchedule& schedule,
                       double eta, const Mat<float>* noise,
                       const std::optional<std::pair<float, float>>& x0_range = std::nullopt);

// Per-row step noise for eta > 0, drawn from per-row generators.
Mat<float> step_noise(std::vector<Rng>& rngs, int dim);
std::vector<Rng> step_rngs(std::span<const SamplerConfig> configs);

// Latents (before decode) for a batch of independent requests.
Mat<float> ddim_sample_latents(const DiffusionModel& model, const Mat<float>& embeddings,
                               std::span<const SamplerConfig> configs, const SamplerHooks* hooks = nullptr);

std::vector<float> ddim_sample(const DiffusionModel& model, const ConditionEmbedding& embedding, const SamplerConfig& config,
                               const SamplerHooks* hooks = nullptr, DecodeStats* stats = nullptr);

Mat<float> embeddings_matrix(std::span<const ConditionEmbedding> embeddings);

}  // namespace fds::diffusion
