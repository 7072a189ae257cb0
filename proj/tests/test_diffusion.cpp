#include <doctest.h>

#include <numeric>

#include "fds/diffusion.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace fds;
using namespace fds::diffusion;

namespace {

NoiseSchedule halving_schedule() { return NoiseSchedule::from_betas("test", std::vector<double>(7, 0.5)); }

Mat<double> normal_mat(int r, int c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

DiffusionTrainConfig point_train_config(int steps) {
  DiffusionTrainConfig c;
  c.train_timesteps = 1000;
  c.denoiser = {2, 8, 16, 32, 64, 3};
  c.steps = steps;
  c.batch_size = 128;
  c.lr = 1e-3;
  return c;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("linear schedule constants") {
  const auto s = make_schedule(1000, "linear");
  CHECK(s.betas.front() == 1e-4);
  CHECK(s.betas.back() == doctest::Approx(2e-2).epsilon(1e-12));
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1000) < 0.01);
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.0358e-5).epsilon(1e-3));
  for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bar(t + 1) < s.alpha_bar(t));
}

TEST_CASE("cosine schedule is monotone") {
  for (int T : {10, 100, 1000}) {
    const auto s = make_schedule(T, "cosine");
    CHECK_NOTHROW(s.validate());
    for (int t = 1; t < T; ++t) {
      CHECK(s.betas[t] >= s.betas[t - 1]);
      CHECK(s.alpha_bar(t + 1) < s.alpha_bar(t));
    }
    CHECK(s.alpha_bar(T) < 0.01);
  }
}

TEST_CASE("schedule argument errors") {
  CHECK_THROWS(make_schedule(9, "linear"));
  CHECK_THROWS(make_schedule(100, "sigmoid"));
  CHECK_THROWS(NoiseSchedule::from_betas("x", {0.5, 0.4, 0.99}));
  CHECK_THROWS(NoiseSchedule::from_betas("x", {0.1, 0.2}));
}

TEST_CASE("forward noise closed form") {
  const auto s = halving_schedule();
  CHECK(s.alpha_bar(2) == 0.25);
  Rng rng(1);
  const Mat<float> x0 = normal_mat(4, 3, rng).cast<float>(), eps = normal_mat(4, 3, rng).cast<float>();
  const std::vector<int> t(4, 2);
  const Mat<float> xt = forward_noise<float>(x0, t, eps, s);
  const Mat<float> want = 0.5f * x0 + static_cast<float>(std::sqrt(0.75)) * eps;
  CHECK(xt == want);
  const Mat<float> zero = Mat<float>::Zero(4, 3);
  CHECK(forward_noise<float>(x0, t, zero, s) == Mat<float>(0.5f * x0));
  CHECK_THROWS(forward_noise<float>(x0, t, Mat<float>::Zero(4, 2), s));
  CHECK_THROWS(forward_noise<float>(x0, std::vector<int>{2, 2, 2}, eps, s));
  CHECK_THROWS(forward_noise<float>(x0, std::vector<int>{0, 1, 2, 3}, eps, s));
}

TEST_CASE("forward noise is linear in x0 and eps") {
  const auto s = make_schedule(1000, "linear");
  Rng rng(2);
  const Mat<double> a = normal_mat(6, 5, rng), b = normal_mat(6, 5, rng), e1 = normal_mat(6, 5, rng),
                    e2 = normal_mat(6, 5, rng);
  const std::vector<int> t{1, 10, 100, 500, 900, 1000};
  const Mat<double> lhs = forward_noise<double>(Mat<double>(2.0 * a + b), t, Mat<double>(2.0 * e1 + e2), s);
  const Mat<double> rhs = 2.0 * forward_noise<double>(a, t, e1, s) + forward_noise<double>(b, t, e2, s);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward noise preserves unit variance") {
  const auto s = make_schedule(1000, "linear");
  Rng rng(3);
  const int n = 100000;
  const Mat<double> x0 = normal_mat(n, 1, rng), eps = normal_mat(n, 1, rng);
  for (int tt : {1, 300, 1000}) {
    const std::vector<int> t(n, tt);
    const Mat<double> xt = forward_noise<double>(x0, t, eps, s);
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / (n - 1);
    CHECK(std::abs(var - 1.0) < 0.02);
  }
}

TEST_CASE("diffusion loss oracles") {
  const auto s = make_schedule(100, "linear");
  Rng rng(4);
  const Mat<float> x0 = normal_mat(2000, 3, rng).cast<float>();
  const std::vector<int> rows(2000, 0);
  const auto draw = draw_noise<float>(2000, 3, 100, 0.0, rng);
  auto exact = [&](const Mat<float>&, std::span<const int>, std::span<const int>) { return draw.eps; };
  auto negated = [&](const Mat<float>&, std::span<const int>, std::span<const int>) { return Mat<float>(-draw.eps); };
  CHECK(diffusion_loss_with<float>(exact, s, x0, rows, draw) == 0.0);
  const double four = diffusion_loss_with<float>(negated, s, x0, rows, draw);
  CHECK(four == doctest::Approx(4.0 * draw.eps.squaredNorm() / draw.eps.size()).epsilon(1e-5));
  CHECK(std::abs(four - 4.0) < 0.15);
}

TEST_CASE("diffusion loss gradient matches finite differences") {
  DenoiserConfig cfg{2, 2, 2, 2, 3, 1};
  Rng rng(5);
  DiffusionNet<double> net(1, 1, cfg, rng);
  auto params = net.params();
  CHECK(nn::parameter_count(params) <= 100);
  CHECK(nn::parameter_count(params) >= 40);
  const auto s = make_schedule(50, "linear");
  const Mat<double> x0 = normal_mat(6, 2, rng);
  const std::vector<int> rows(6, 0);
  const auto draw = draw_noise<double>(6, 2, 50, 0.5, rng);
  const auto r = testing::check_gradients(
      params, [&](bool bp) { return diffusion_loss(net, s, x0, rows, draw, bp); }, 1e-4);
  CHECK(r.max_rel_error < 1e-3);

  DenoiserConfig deep{2, 2, 2, 2, 3, 2};
  DiffusionNet<double> net2(1, 2, deep, rng);
  const std::vector<int> rows2{0, 1, 0, 1, 1, 0};
  const auto r2 = testing::check_gradients(
      net2.params(), [&](bool bp) { return diffusion_loss(net2, s, x0, rows2, draw, bp); }, 1e-4);
  CHECK(r2.max_rel_error < 1e-3);
}

TEST_CASE("condition table layout") {
  DiffusionModel m(3, 2, data::PayloadMode::point, {2}, {2, 4, 4, 8, 8, 1}, make_schedule(10, "linear"), 0);
  CHECK(m.net().conditions.rows() == 3 * 2 + 1);
  const auto a = m.encode_condition(1, 2), b = m.encode_condition(1, 2);
  CHECK(a.vector == b.vector);
  CHECK(a.kind == ConditionEmbedding::Kind::pure);
  const auto n = m.encode_null();
  CHECK(n.kind == ConditionEmbedding::Kind::null);
  const auto& tab = m.net().conditions.table.value;
  for (int c = 0; c < 4; ++c) CHECK(n.vector[static_cast<std::size_t>(c)] == tab(6, c));
  CHECK_THROWS(m.encode_condition(2, 0));
  CHECK_THROWS(m.encode_condition(0, 3));
}

TEST_CASE("training reduces the loss and separates embeddings") {
  const auto ds = data::make_gaussian_domains(2, 2, 200, {}, 6);
  data::SplitPlan all;
  all.target_domain = -1;
  for (std::size_t i = 0; i < ds.size(); ++i) all.train_ids.push_back(ds.sample_id(i));
  const auto res = train_diffusion(ds, all, point_train_config(5000));
  REQUIRE(res.losses.size() == 5000);
  const double first = std::accumulate(res.losses.begin(), res.losses.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(res.losses.end() - 500, res.losses.end(), 0.0) / 500;
  CHECK(last < 0.5 * first);
  for (int k = 0; k < 2; ++k)
    CHECK(cosine(res.model.encode_condition(k, 0).vector, res.model.encode_condition(k, 1).vector) < 0.999);
}

TEST_CASE("zero steps and checkpoint cadence") {
  testing::TempDir dir;
  const auto ds = data::make_gaussian_domains(2, 2, 20, {}, 7);
  const auto split = data::leave_one_out_split(ds, 1, 0.2, 0);
  auto cfg = point_train_config(0);
  const auto none = train_diffusion(ds, split, cfg);
  CHECK(none.losses.empty());
  CHECK(none.checkpoints_written == 0);
  cfg.steps = 20;
  cfg.checkpoint_every = 10;
  cfg.checkpoint_dir = dir.path();
  const auto some = train_diffusion(ds, split, cfg);
  CHECK(some.checkpoints_written == 2);
  CHECK(std::filesystem::exists(dir / "step_000010.ckpt"));
  CHECK(std::filesystem::exists(dir / "step_000020.ckpt"));
}

TEST_CASE("leakage guard fires before any step") {
  const auto ds = data::make_gaussian_domains(2, 2, 20, {}, 7);
  auto split = data::leave_one_out_split(ds, 1, 0.2, 0);
  split.train_ids.push_back(split.test_ids.front());
  int calls = 0;
  CHECK_THROWS_AS(train_diffusion(ds, split, point_train_config(10), [&](int, double) { ++calls; }), LeakageError);
  CHECK(calls == 0);
}

TEST_CASE("cfg combine algebra") {
  Rng rng(8);
  const Mat<float> c = normal_mat(3, 4, rng).cast<float>(), u = normal_mat(3, 4, rng).cast<float>();
  CHECK(cfg_combine(c, u, 1.0) == c);
  CHECK(cfg_combine(c, c, 5.5) == c);
  CHECK(cfg_combine(c, Mat<float>::Zero(3, 4), 5.0) == Mat<float>(5.0f * c));
  CHECK_THROWS(cfg_combine(c, Mat<float>::Zero(3, 3), 2.0));
}

TEST_CASE("ddim timesteps and sampler config") {
  CHECK(ddim_timesteps(1000, 50).front() == 1000);
  CHECK(ddim_timesteps(1000, 50).back() == 20);
  CHECK(ddim_timesteps(1000, 50).size() == 50);
  CHECK(ddim_timesteps(10, 1) == std::vector<int>{10});
  CHECK_THROWS(ddim_timesteps(10, 11));
  SamplerConfig sc;
  CHECK_THROWS(SamplerConfig{.ddim_steps = 0}.validate(100));
  CHECK_THROWS(SamplerConfig{.eta = 1.5}.validate(100));
  CHECK_THROWS(SamplerConfig{.cfg_min = 0.5, .cfg_max = 2.0}.validate(100));
  sc.cfg_min = sc.cfg_max = 3.0;
  CHECK(sc.resolved_cfg() == 3.0);
  sc.cfg_min = 5.0;
  sc.cfg_max = 6.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    sc.seed = s;
    CHECK(sc.resolved_cfg() >= 5.0);
    CHECK(sc.resolved_cfg() <= 6.0);
    CHECK(sc.resolved_cfg() == sc.resolved_cfg());
  }
}

TEST_CASE("ddim update at the final step returns the clean estimate") {
  const auto s = make_schedule(100, "linear");
  Rng rng(9);
  const Mat<float> x0 = normal_mat(2, 3, rng).cast<float>(), eps = normal_mat(2, 3, rng).cast<float>();
  const std::vector<int> t(2, 60);
  const Mat<float> z = forward_noise<float>(x0, t, eps, s);
  const Mat<float> out = ddim_update(z, eps, 60, 0, s, 0.0, nullptr);
  CHECK((out - x0).cwiseAbs().maxCoeff() < 1e-4f);
  const Mat<float> clipped = ddim_update(z, eps, 60, 0, s, 0.0, nullptr, std::pair{0.0f, 1.0f});
  CHECK(clipped.minCoeff() >= 0.0f);
  CHECK(clipped.maxCoeff() <= 1.0f + 1e-6f);
  for (Eigen::Index i = 0; i < x0.size(); ++i)
    CHECK(clipped.data()[i] == doctest::Approx(std::clamp(x0.data()[i], 0.0f, 1.0f)).epsilon(1e-4));
  CHECK_THROWS(ddim_update(z, eps, 60, 30, s, 0.5, nullptr));
}

TEST_CASE("ddim update with eta zero keeps the clean estimate and noise direction") {
  const auto s = make_schedule(100, "linear");
  Rng rng(10);
  const Mat<float> x0 = normal_mat(1, 4, rng).cast<float>(), eps = normal_mat(1, 4, rng).cast<float>();
  const std::vector<int> t{80};
  const Mat<float> z = forward_noise<float>(x0, t, eps, s);
  const Mat<float> next = ddim_update(z, eps, 80, 40, s, 0.0, nullptr);
  const Mat<float> want = forward_noise<float>(x0, std::vector<int>{40}, eps, s);
  CHECK((next - want).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("sampling is deterministic and row independent") {
  DiffusionModel m(2, 2, data::PayloadMode::point, {2}, {2, 4, 8, 8, 16, 2}, make_schedule(100, "linear"), 3);
  SamplerConfig sc{.ddim_steps = 10, .cfg_min = 2.0, .cfg_max = 3.0, .seed = 77};
  const auto e = m.encode_condition(1, 0);
  CHECK(ddim_sample(m, e, sc) == ddim_sample(m, e, sc));
  std::vector<SamplerConfig> cfgs{sc, sc};
  cfgs[1].seed = 78;
  const std::vector<ConditionEmbedding> es{e, m.encode_condition(0, 1)};
  const Mat<float> both = ddim_sample_latents(m, embeddings_matrix(es), cfgs);
  const Mat<float> first = ddim_sample_latents(m, embeddings_matrix(std::span(es).first(1)), std::span(cfgs).first(1));
  const Mat<float> second = ddim_sample_latents(m, embeddings_matrix(std::span(es).last(1)), std::span(cfgs).last(1));
  CHECK(both.row(0) == first.row(0));
  CHECK(both.row(1) == second.row(0));
  sc.seed = 78;
  CHECK(ddim_sample(m, e, sc) != ddim_sample(m, e, cfgs[0]));
}

TEST_CASE("one ddim step calls each branch once") {
  DiffusionModel m(1, 1, data::PayloadMode::point, {2}, {2, 4, 8, 8, 16, 2}, make_schedule(100, "linear"), 3);
  int cond = 0, uncond = 0;
  SamplerHooks hooks{[&](int, bool c) { ++(c ? cond : uncond); }};
  ddim_sample(m, m.encode_condition(0, 0), {.ddim_steps = 1, .cfg_min = 5.0, .cfg_max = 6.0}, &hooks);
  CHECK(cond == 1);
  CHECK(uncond == 1);
  cond = uncond = 0;
  ddim_sample(m, m.encode_condition(0, 0), {.ddim_steps = 4, .cfg_min = 1.0, .cfg_max = 1.0}, &hooks);
  CHECK(cond == 4);
  CHECK(uncond == 0);
}

TEST_CASE("sampler validates embeddings") {
  DiffusionModel m(1, 1, data::PayloadMode::point, {2}, {2, 4, 8, 8, 16, 2}, make_schedule(100, "linear"), 3);
  ConditionEmbedding bad;
  bad.vector = {1.0f, 2.0f};
  CHECK_THROWS(ddim_sample(m, bad, {}));
  bad.vector = {1.0f, 2.0f, NAN, 0.0f};
  CHECK_THROWS(ddim_sample(m, bad, {}));
  CHECK_THROWS(ddim_sample(m, m.encode_null(), {.ddim_steps = 101}));
}

TEST_CASE("pca codec reconstructs low-rank data") {
  Rng rng(11);
  const Mat<double> factors = normal_mat(200, 3, rng), mix = normal_mat(3, 10, rng);
  const Mat<float> x = ((factors * mix).array() + 0.5).matrix().cast<float>();
  const auto c = fit_pca_codec(x, 3);
  CHECK(c.payload_dim() == 10);
  CHECK(c.latent_dim() == 3);
  const Mat<float> z = c.encode(x);
  CHECK((c.decode(z) - x).cwiseAbs().maxCoeff() < 1e-3f);
  for (int k = 0; k < 3; ++k) {
    const double mean = z.col(k).cast<double>().mean();
    const double var = (z.col(k).cast<double>().array() - mean).square().sum() / 199.0;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    Eigen::Index arg = 0;
    c.basis.col(k).cwiseAbs().maxCoeff(&arg);
    CHECK(c.basis(arg, k) > 0.0f);
  }
  CHECK(c.scale[0] >= c.scale[1]);
  CHECK(c.scale[1] >= c.scale[2]);
  CHECK_THROWS(fit_pca_codec(x, 11));
  CHECK_THROWS(c.encode(Mat<float>::Zero(1, 9)));
  CHECK_THROWS(c.decode(Mat<float>::Zero(1, 4)));
}

TEST_CASE("checkpoint round trip with and without codec") {
  const auto ds = data::make_styled_shapes(2, {"filled", "outline"}, 10, 16, 1);
  const auto split = data::leave_one_out_split(ds, 1, 0.2, 0);
  DiffusionTrainConfig cfg;
  cfg.train_timesteps = 50;
  cfg.denoiser = {0, 4, 8, 8, 16, 2};
  cfg.steps = 5;
  cfg.batch_size = 4;
  for (const std::string codec : {"identity", "pca"}) {
    cfg.codec = codec;
    cfg.latent_dim = 6;
    const auto res = train_diffusion(ds, split, cfg);
    const auto& m = res.model;
    CHECK(m.codec() == codec);
    CHECK(m.data_dim() == (codec == "pca" ? 6 : 256));
    CHECK(m.payload_dim() == 256);
    CHECK(m.x0_range().has_value() == (codec == "identity"));
    const auto back = DiffusionModel::from_checkpoint(Checkpoint::decode(m.to_checkpoint().encode()));
    CHECK(back.content_hash() == m.content_hash());
    CHECK(back.codec() == codec);
    const SamplerConfig sc{.ddim_steps = 5, .cfg_min = 2.0, .cfg_max = 2.0, .seed = 4};
    DecodeStats stats;
    const auto a = ddim_sample(m, m.encode_condition(0, 0), sc, nullptr, &stats);
    CHECK(a == ddim_sample(back, back.encode_condition(0, 0), sc));
    CHECK(a.size() == 256);
    CHECK(stats.total == 256);
    for (float v : a) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  Checkpoint wrong;
  wrong.header = {{"kind", "classifier"}};
  CHECK_THROWS_AS(DiffusionModel::from_checkpoint(wrong), IntegrityError);
}

TEST_CASE("decode reports clamped pixels") {
  DiffusionModel m(1, 1, data::PayloadMode::image, {1, 2, 2}, {4, 2, 2, 2, 2, 1}, make_schedule(10, "linear"), 0);
  DecodeStats st;
  const std::vector<float> z{-0.5f, 0.25f, 1.5f, 1.0f};
  const auto out = m.decode(z, &st);
  CHECK(out == std::vector<float>{0.0f, 0.25f, 1.0f, 1.0f});
  CHECK(st.clamped == 2);
  CHECK(st.fraction() == 0.5);
  CHECK_THROWS(m.decode(std::vector<float>{0.0f}));
}
