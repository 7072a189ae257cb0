#include "fds/config.hpp"

#include <algorithm>
#include <set>

namespace fds {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config block '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in config block '" + where + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_range(const json& j, const char* key, double& lo, double& hi) {
  if (!j.contains(key)) return;
  const auto& r = j.at(key);
  if (!r.is_array() || r.size() != 2) throw ConfigError(std::string("'") + key + "' must be a [min, max] pair");
  lo = r.at(0).get<double>();
  hi = r.at(1).get<double>();
}

void validate(const RunConfig& c) {
  const auto& d = c.dataset;
  if (d.kind != "gaussian" && d.kind != "shapes" && d.kind != "folder" && d.kind != "saved")
    throw ConfigError("dataset.kind must be gaussian, shapes, folder or saved");
  if (d.kind == "gaussian" && (d.n_domains < 2 || d.n_classes < 2 || d.per_cell < 1))
    throw ConfigError("gaussian dataset needs n_domains >= 2, n_classes >= 2, per_cell >= 1");
  if (d.kind == "shapes") {
    if (d.n_classes < 2 || d.styles.size() < 2 || d.per_cell < 1) throw ConfigError("shapes dataset needs >= 2 classes and >= 2 styles");
    if (d.image_size < 16) throw ConfigError("dataset.image_size must be >= 16");
    for (const auto& s : d.styles)
      if (std::find(data::style_vocabulary().begin(), data::style_vocabulary().end(), s) == data::style_vocabulary().end())
        throw ConfigError("unknown style: " + s);
  }
  if ((d.kind == "folder" || d.kind == "saved") && d.path.empty()) throw ConfigError("dataset.path is required for kind " + d.kind);
  if (!(d.geometry.sigma > 0.0)) throw ConfigError("dataset.sigma must be > 0");
  if (c.protocol != "leave_one_out" && c.protocol != "in_domain") throw ConfigError("split.protocol must be leave_one_out or in_domain");
  const auto& df = c.experiment.diffusion;
  if (df.schedule != "linear" && df.schedule != "cosine") throw ConfigError("diffusion.schedule must be linear or cosine");
  if (df.codec != "identity" && df.codec != "pca") throw ConfigError("diffusion.codec must be identity or pca");
  if (df.codec == "pca" && df.latent_dim < 1) throw ConfigError("diffusion.latent_dim must be >= 1");
  if (df.train_timesteps < 10) throw ConfigError("diffusion.train_timesteps must be >= 10");
  if (df.steps < 0 || df.batch_size < 1) throw ConfigError("diffusion.steps must be >= 0 and batch_size >= 1");
  if (!(df.lr > 0.0)) throw ConfigError("diffusion.lr must be > 0");
  if (!(df.p_uncond >= 0.0 && df.p_uncond < 1.0)) throw ConfigError("diffusion.p_uncond must lie in [0,1)");
  if (!(df.ema_decay >= 0.0 && df.ema_decay < 1.0)) throw ConfigError("diffusion.ema_decay must lie in [0,1)");
  const auto& dn = df.denoiser;
  if (dn.embed_dim < 1 || dn.hidden < 1 || dn.depth < 1 || dn.cond_width < 1 || dn.time_dim < 2 || dn.time_dim % 2)
    throw ConfigError("diffusion.denoiser widths are invalid");
  if (c.experiment.mix.ddim_steps > df.train_timesteps) throw ConfigError("mix.ddim_steps must be <= diffusion.train_timesteps");
  for (double s : c.sweep_scales)
    if (!(s > 0.0)) throw ConfigError("sweep.scales must be positive");
  for (const auto& m : c.methods) experiment::standard_method(m, c.experiment);
  for (const auto& m : c.ablation_grid) experiment::standard_method(m, c.experiment);
  auto e = c.experiment;
  e.methods = experiment::standard_methods(c.methods, c.experiment);
  for (const auto& m : c.custom_methods) e.methods.push_back(m);
  e.validate();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    check_keys(j, {"dataset", "split", "diffusion", "mix", "filter", "trainer", "ablation", "sweep", "metrics", "output"}, "root");
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, {"kind", "n_domains", "n_classes", "per_cell", "sigma", "class_radius", "domain_rotation", "domain_shift",
                     "styles", "image_size", "channels", "pixel_noise", "path", "seed"},
                 "dataset");
      auto& b = c.dataset;
      read(d, "kind", b.kind);
      read(d, "n_domains", b.n_domains);
      read(d, "n_classes", b.n_classes);
      read(d, "per_cell", b.per_cell);
      read(d, "sigma", b.geometry.sigma);
      read(d, "class_radius", b.geometry.class_radius);
      read(d, "domain_rotation", b.geometry.domain_rotation);
      read(d, "domain_shift", b.geometry.domain_shift);
      read(d, "styles", b.styles);
      read(d, "image_size", b.image_size);
      read(d, "channels", b.channels);
      read(d, "pixel_noise", b.pixel_noise);
      read(d, "path", b.path);
      read(d, "seed", b.seed);
    }
    auto& e = c.experiment;
    if (j.contains("split")) {
      const auto& s = j.at("split");
      check_keys(s, {"protocol", "val_fraction", "in_domain_test_fraction", "oracle", "targets"}, "split");
      read(s, "protocol", c.protocol);
      read(s, "val_fraction", e.val_fraction);
      read(s, "in_domain_test_fraction", e.in_domain_test_fraction);
      read(s, "oracle", e.oracle);
      read(s, "targets", c.targets);
    }
    if (j.contains("diffusion")) {
      const auto& s = j.at("diffusion");
      check_keys(s, {"schedule", "train_timesteps", "steps", "batch_size", "lr", "p_uncond", "grad_clip", "ema_decay", "denoiser",
                     "codec", "latent_dim"},
                 "diffusion");
      auto& df = e.diffusion;
      read(s, "schedule", df.schedule);
      read(s, "train_timesteps", df.train_timesteps);
      read(s, "steps", df.steps);
      read(s, "batch_size", df.batch_size);
      read(s, "lr", df.lr);
      read(s, "p_uncond", df.p_uncond);
      read(s, "grad_clip", df.grad_clip);
      read(s, "ema_decay", df.ema_decay);
      read(s, "codec", df.codec);
      read(s, "latent_dim", df.latent_dim);
      if (s.contains("denoiser")) {
        const auto& dn = s.at("denoiser");
        check_keys(dn, {"embed_dim", "time_dim", "cond_width", "hidden", "depth"}, "diffusion.denoiser");
        read(dn, "embed_dim", df.denoiser.embed_dim);
        read(dn, "time_dim", df.denoiser.time_dim);
        read(dn, "cond_width", df.denoiser.cond_width);
        read(dn, "hidden", df.denoiser.hidden);
        read(dn, "depth", df.denoiser.depth);
      }
    }
    if (j.contains("mix")) {
      const auto& s = j.at("mix");
      check_keys(s, {"strategy", "per_cell_target", "alpha", "mix_step", "cfg", "ddim_steps", "eta", "noise_mode"}, "mix");
      auto& m = e.mix;
      if (s.contains("strategy")) m.strategy = mixing::strategy_from_string(s.at("strategy").get<std::string>());
      if (s.contains("noise_mode")) m.noise_mode = mixing::noise_mode_from_string(s.at("noise_mode").get<std::string>());
      read(s, "per_cell_target", e.per_cell_target);
      read_range(s, "alpha", m.alpha_min, m.alpha_max);
      double lo = m.mix_step_min, hi = m.mix_step_max;
      read_range(s, "mix_step", lo, hi);
      m.mix_step_min = static_cast<int>(lo);
      m.mix_step_max = static_cast<int>(hi);
      read_range(s, "cfg", m.cfg_min, m.cfg_max);
      read(s, "ddim_steps", m.ddim_steps);
      read(s, "eta", m.eta);
    }
    if (j.contains("filter")) {
      const auto& s = j.at("filter");
      check_keys(s, {"mode", "n_l_scale", "n_l"}, "filter");
      if (s.contains("mode")) e.filter_mode = filter::filter_mode_from_string(s.at("mode").get<std::string>());
      read(s, "n_l_scale", e.n_l_scale);
      if (s.contains("n_l") && !s.at("n_l").is_null()) e.n_l = s.at("n_l").get<int>();
    }
    if (j.contains("trainer")) {
      const auto& s = j.at("trainer");
      check_keys(s, {"classifier", "steps", "batch_size", "lr", "weight_decay", "checkpoint_every", "ring_size", "methods",
                     "custom_methods", "tier", "seeds", "swad", "record_traces", "trace_target"},
                 "trainer");
      auto& t = e.trainer;
      if (s.contains("classifier")) {
        const auto& cl = s.at("classifier");
        check_keys(cl, {"architecture", "hidden", "penultimate", "conv1_channels", "conv2_channels"}, "trainer.classifier");
        t.classifier = classifier::ClassifierConfig::from_json(cl);
      }
      read(s, "steps", t.steps);
      read(s, "batch_size", t.batch_size);
      read(s, "lr", t.lr);
      read(s, "weight_decay", t.weight_decay);
      read(s, "checkpoint_every", t.checkpoint_every);
      read(s, "ring_size", t.ring_size);
      read(s, "methods", c.methods);
      if (s.contains("custom_methods"))
        for (const auto& m : s.at("custom_methods")) {
          check_keys(m, {"name", "base", "augment", "strategy", "filter", "n_l_scale", "pair_subset"}, "trainer.custom_methods");
          c.custom_methods.push_back(experiment::MethodSpec::from_json(m));
        }
      read(s, "tier", e.tier);
      read(s, "seeds", e.seeds);
      read(s, "record_traces", e.record_traces);
      read(s, "trace_target", c.trace_target);
      if (s.contains("swad")) {
        const auto& w = s.at("swad");
        check_keys(w, {"tol_start", "tol_end"}, "trainer.swad");
        read(w, "tol_start", e.swad.tol_start);
        read(w, "tol_end", e.swad.tol_end);
      }
    }
    if (j.contains("ablation")) {
      check_keys(j.at("ablation"), {"grid"}, "ablation");
      read(j.at("ablation"), "grid", c.ablation_grid);
    }
    if (j.contains("sweep")) {
      check_keys(j.at("sweep"), {"scales"}, "sweep");
      read(j.at("sweep"), "scales", c.sweep_scales);
    }
    if (j.contains("metrics")) {
      check_keys(j.at("metrics"), {"diversity", "tsne"}, "metrics");
      read(j.at("metrics"), "diversity", e.diversity);
      read(j.at("metrics"), "tsne", c.tsne);
    }
    if (j.contains("output")) {
      check_keys(j.at("output"), {"run_dir", "plots", "gallery"}, "output");
      read(j.at("output"), "run_dir", c.run_dir);
      read(j.at("output"), "plots", c.plots);
      read(j.at("output"), "gallery", c.gallery);
    }
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid config value: ") + ex.what());
  }
  validate(c);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& ex) {
    throw ConfigError("cannot parse " + path.string() + ": " + ex.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  const auto& d = dataset;
  const auto& e = experiment;
  json custom = json::array();
  for (const auto& m : custom_methods) custom.push_back(m.to_json());
  const auto& dn = e.diffusion.denoiser;
  return json{
      {"dataset", {{"kind", d.kind}, {"n_domains", d.n_domains}, {"n_classes", d.n_classes}, {"per_cell", d.per_cell},
                   {"sigma", d.geometry.sigma}, {"class_radius", d.geometry.class_radius},
                   {"domain_rotation", d.geometry.domain_rotation}, {"domain_shift", d.geometry.domain_shift},
                   {"styles", d.styles}, {"image_size", d.image_size}, {"channels", d.channels},
                   {"pixel_noise", d.pixel_noise}, {"path", d.path}, {"seed", d.seed}}},
      {"split", {{"protocol", protocol}, {"val_fraction", e.val_fraction}, {"in_domain_test_fraction", e.in_domain_test_fraction},
                 {"oracle", e.oracle}, {"targets", targets}}},
      {"diffusion", {{"schedule", e.diffusion.schedule}, {"train_timesteps", e.diffusion.train_timesteps},
                     {"steps", e.diffusion.steps}, {"batch_size", e.diffusion.batch_size}, {"lr", e.diffusion.lr},
                     {"p_uncond", e.diffusion.p_uncond}, {"grad_clip", e.diffusion.grad_clip},
                     {"ema_decay", e.diffusion.ema_decay}, {"codec", e.diffusion.codec},
                     {"latent_dim", e.diffusion.latent_dim},
                     {"denoiser", {{"embed_dim", dn.embed_dim}, {"time_dim", dn.time_dim}, {"cond_width", dn.cond_width},
                                   {"hidden", dn.hidden}, {"depth", dn.depth}}}}},
      {"mix", {{"strategy", mixing::to_string(e.mix.strategy)}, {"per_cell_target", e.per_cell_target},
               {"alpha", {e.mix.alpha_min, e.mix.alpha_max}}, {"mix_step", {e.mix.mix_step_min, e.mix.mix_step_max}},
               {"cfg", {e.mix.cfg_min, e.mix.cfg_max}}, {"ddim_steps", e.mix.ddim_steps}, {"eta", e.mix.eta},
               {"noise_mode", mixing::to_string(e.mix.noise_mode)}}},
      {"filter", {{"mode", filter::to_string(e.filter_mode)}, {"n_l_scale", e.n_l_scale},
                  {"n_l", e.n_l ? json(*e.n_l) : json(nullptr)}}},
      {"trainer", {{"classifier", e.trainer.classifier.to_json()}, {"steps", e.trainer.steps},
                   {"batch_size", e.trainer.batch_size}, {"lr", e.trainer.lr}, {"weight_decay", e.trainer.weight_decay},
                   {"checkpoint_every", e.trainer.checkpoint_every}, {"ring_size", e.trainer.ring_size},
                   {"methods", methods}, {"custom_methods", custom}, {"tier", e.tier}, {"seeds", e.seeds},
                   {"swad", {{"tol_start", e.swad.tol_start}, {"tol_end", e.swad.tol_end}}},
                   {"record_traces", e.record_traces}, {"trace_target", trace_target}}},
      {"ablation", {{"grid", ablation_grid}}},
      {"sweep", {{"scales", sweep_scales}}},
      {"metrics", {{"diversity", e.diversity}, {"tsne", tsne}}},
      {"output", {{"run_dir", run_dir}, {"plots", plots}, {"gallery", gallery}}}};
}

experiment::ExperimentConfig RunConfig::resolve(const data::MultiDomainDataset& ds) const {
  auto e = experiment;
  auto id_of = [&](const std::string& name) {
    const auto& names = ds.domain_names();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown domain name: " + name);
    return static_cast<int>(it - names.begin());
  };
  e.targets.clear();
  for (const auto& t : targets) e.targets.push_back(id_of(t));
  e.trace_target = trace_target.empty() ? -1 : id_of(trace_target);
  e.methods = experiment::standard_methods(methods, experiment);
  for (const auto& m : custom_methods) e.methods.push_back(m);
  e.validate();
  return e;
}

RunConfig default_point_config() {
  RunConfig c;
  c.dataset.kind = "gaussian";
  c.dataset.n_domains = 3;
  c.dataset.n_classes = 2;
  c.dataset.per_cell = 200;
  auto& e = c.experiment;
  e.diffusion.steps = 2000;
  e.diffusion.batch_size = 128;
  e.diffusion.lr = 1e-3;
  e.diffusion.ema_decay = 0.999;
  e.diffusion.denoiser = diffusion::DenoiserConfig{2, 8, 16, 32, 64, 3};
  e.mix.ddim_steps = 50;
  e.per_cell_target = 40;
  e.n_l_scale = 0.15;
  e.trainer.classifier.architecture = "mlp";
  e.trainer.classifier.hidden = 32;
  e.trainer.classifier.penultimate = 16;
  e.trainer.steps = 400;
  e.seeds = {0};
  return c;
}

RunConfig default_shapes_config() {
  RunConfig c;
  c.dataset.kind = "shapes";
  c.dataset.n_classes = 3;
  c.dataset.styles = {"filled", "outline", "textured", "faint"};
  c.dataset.per_cell = 120;
  c.dataset.image_size = 16;
  auto& e = c.experiment;
  e.diffusion.steps = 6000;
  e.diffusion.batch_size = 64;
  e.diffusion.lr = 1e-3;
  e.diffusion.ema_decay = 0.999;
  e.diffusion.denoiser = diffusion::DenoiserConfig{256, 16, 32, 64, 256, 3};
  e.diffusion.codec = "pca";
  e.diffusion.latent_dim = 32;
  e.mix.cfg_min = 1.0;
  e.mix.cfg_max = 2.0;
  e.per_cell_target = 120;
  e.n_l_scale = 0.5;
  e.trainer.classifier.architecture = "conv";
  e.trainer.steps = 1500;
  e.diversity = true;
  return c;
}

data::MultiDomainDataset build_dataset(const DatasetBlock& b) {
  if (b.kind == "gaussian") return data::make_gaussian_domains(b.n_domains, b.n_classes, b.per_cell, b.geometry, b.seed);
  if (b.kind == "shapes")
    return data::make_styled_shapes(b.n_classes, b.styles, b.per_cell, b.image_size, b.seed,
                                    data::ShapesOptions{b.channels, b.pixel_noise});
  if (b.kind == "folder") return data::ingest_image_folder(b.path, b.image_size);
  if (b.kind == "saved") return data::MultiDomainDataset::load(b.path);
  throw ConfigError("unknown dataset kind: " + b.kind);
}

}  // namespace fds
