#include "fds/experiment.hpp"

#include <algorithm>
#include <iostream>
#include <set>

#include "fds/metrics.hpp"

namespace fds::experiment {

using classifier::Classifier;
using nlohmann::json;
using trainer::LogEntry;

json MethodSpec::to_json() const {
  return json{{"name", name},
              {"base", base},
              {"augment", augment},
              {"strategy", mixing::to_string(strategy)},
              {"filter", filter::to_string(filter)},
              {"n_l_scale", n_l_scale},
              {"pair_subset", pair_subset}};
}

MethodSpec MethodSpec::from_json(const json& j) {
  MethodSpec m;
  m.name = j.at("name").get<std::string>();
  m.base = j.value("base", m.base);
  m.augment = j.value("augment", m.augment);
  if (j.contains("strategy")) m.strategy = mixing::strategy_from_string(j.at("strategy").get<std::string>());
  if (j.contains("filter")) m.filter = filter::filter_mode_from_string(j.at("filter").get<std::string>());
  m.n_l_scale = j.value("n_l_scale", m.n_l_scale);
  m.pair_subset = j.value("pair_subset", std::vector<int>{});
  if (m.base != "erm" && m.base != "swad") throw ConfigError("method " + m.name + ": base must be erm or swad");
  if (!(m.n_l_scale > 0.0)) throw ConfigError("method " + m.name + ": n_l_scale must be > 0");
  return m;
}

void ExperimentConfig::validate() const {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0,1)");
  if (!(in_domain_test_fraction > 0.0 && in_domain_test_fraction < 1.0)) throw ConfigError("in-domain test fraction must lie in (0,1)");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (per_cell_target < 1) throw ConfigError("per_cell_target must be >= 1");
  if (n_l && *n_l < 1) throw ConfigError("N_L must be >= 1");
  if (!(n_l_scale > 0.0)) throw ConfigError("N_L scale must be > 0");
  if (tier != "basic" && tier != "interpolation" && tier != "filtering") throw ConfigError("unknown ablation tier: " + tier);
  if (methods.empty()) throw ConfigError("no methods configured");
  std::set<std::string> names;
  for (const auto& m : methods)
    if (!names.insert(m.name).second) throw ConfigError("duplicate method name: " + m.name);
  mix.validate();
  trainer.validate();
}

MethodSpec standard_method(const std::string& name, const ExperimentConfig& cfg) {
  MethodSpec m;
  m.name = name;
  m.n_l_scale = cfg.n_l_scale;
  m.strategy = cfg.mix.strategy;
  m.filter = cfg.filter_mode;
  auto tiered = [&](const std::string& tier) {
    m.augment = true;
    if (tier == "basic") {
      m.strategy = mixing::Strategy::pure;
      m.filter = filter::FilterMode::none;
    } else if (tier == "interpolation") {
      m.filter = filter::FilterMode::none;
    }
  };
  if (name == "erm" || name == "baseline") {
  } else if (name == "swad") {
    m.base = "swad";
  } else if (name == "erm+fds") {
    tiered(cfg.tier);
  } else if (name == "swad+fds") {
    m.base = "swad";
    tiered(cfg.tier);
  } else if (name == "basic" || name == "interpolation" || name == "filtering") {
    tiered(name);
  } else if (name == "entropy_only") {
    tiered("filtering");
    m.filter = filter::FilterMode::entropy_only;
  } else if (name == "random_filter") {
    tiered("filtering");
    m.filter = filter::FilterMode::random;
  } else if (name == "noise_level" || name == "condition_level" || name == "both") {
    tiered("filtering");
    m.strategy = mixing::strategy_from_string(name);
  } else {
    throw ConfigError("unknown method: " + name);
  }
  return m;
}

std::vector<MethodSpec> standard_methods(const std::vector<std::string>& names, const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  for (const auto& n : names) out.push_back(standard_method(n, cfg));
  return out;
}

std::string source_set_label(const data::MultiDomainDataset& ds, int excluded) {
  auto initial = [](const std::string& name) {
    return name.empty() ? std::string("?") : std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(name[0]))));
  };
  std::set<std::string> distinct;
  for (const auto& name : ds.domain_names()) distinct.insert(initial(name));
  // Full names when initials would be ambiguous.
  const bool short_form = static_cast<int>(distinct.size()) == ds.n_domains();
  std::string out;
  for (int d = 0; d < ds.n_domains(); ++d) {
    if (d == excluded) continue;
    const auto& name = ds.domain_names()[static_cast<std::size_t>(d)];
    out += (out.empty() ? "" : ",") + (short_form ? initial(name) : name);
  }
  return out;
}

namespace {

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

std::string path_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

json log_json(const std::vector<LogEntry>& log) {
  trainer::TrainRun r;
  r.log = log;
  return r.log_json();
}

std::vector<LogEntry> log_from_json(const json& j) {
  std::vector<LogEntry> out;
  for (const auto& e : j) {
    LogEntry l;
    l.step = e.at("step").get<int>();
    l.train_loss = e.at("train_loss").get<double>();
    l.val_accuracy = e.at("val_accuracy").get<double>();
    if (!e.at("test_accuracy").is_null()) l.test_accuracy = e.at("test_accuracy").get<double>();
    out.push_back(l);
  }
  return out;
}

struct RunArtifacts {
  Classifier best, swad;
  std::vector<LogEntry> log;
  trainer::SwadWindow window;
};

template <typename T>
T obtain(RunDirectory* rd, const std::string& key, const std::string& inputs, const std::vector<std::string>& files,
         const std::function<T()>& make, const std::function<void(const T&)>& save, const std::function<T()>& load) {
  if (!rd) return make();
  return rd->cached<T>(key, inputs, files, make, save, load);
}

struct AugKey {
  mixing::Strategy strategy;
  filter::FilterMode filter;
  int n_l;
  std::vector<int> subset;

  std::string str() const {
    std::string s = mixing::to_string(strategy) + "-" + filter::to_string(filter) + "-nl" + std::to_string(n_l);
    if (subset.empty()) return s + "-all";
    s += "-ids";
    for (int i : subset) s += "_" + std::to_string(i);
    return s;
  }
  bool operator<(const AugKey& o) const { return str() < o.str(); }
};

class CellRunner {
 public:
  CellRunner(const data::MultiDomainDataset& ds, const std::string& ds_hash, const data::SplitPlan& split,
             const ExperimentConfig& cfg, int target, std::string label, std::uint64_t seed, RunDirectory* rd,
             const StageHooks& hooks)
      : ds_(ds), ds_hash_(ds_hash), split_(split), cfg_(cfg), target_(target), label_(std::move(label)), seed_(seed),
        rd_(rd), hooks_(hooks) {
    prefix_ = path_safe(split.mode) + "/" + path_safe(label_) + "/seed" + std::to_string(seed);
    tcfg_ = cfg.trainer;
    tcfg_.record_test_trace = cfg.record_traces && (cfg.trace_target < 0 || cfg.trace_target == target);
    for (int d = 0; d < ds.n_domains(); ++d)
      if (d != target) sources_.push_back(d);
  }

  CellResult run() {
    CellResult cell;
    cell.target = target_;
    cell.label = label_;
    cell.seed = seed_;
    cell.split_mode = split_.mode;
    stage("split");
    split_.check_disjoint();

    stage("feedback");
    const auto base = train_run("baseline", ds_, split_);
    cell.info["feedback_classifier_hash"] = base.best.content_hash();
    if (rd_) cell.info["feedback_classifier_path"] = "classifiers/" + prefix_ + "/baseline/best.ckpt";

    std::map<AugKey, RunArtifacts> aug_runs;
    std::map<AugKey, filter::Augmented> aug_sets;
    std::map<std::string, AugKey> method_key;
    for (const auto& m : cfg_.methods) {
      if (!m.augment) continue;
      AugKey k{m.strategy, m.filter, cfg_.n_l ? *cfg_.n_l : filter::default_n_l(ds_, split_, m.n_l_scale), m.pair_subset};
      method_key.emplace(m.name, k);
      if (aug_runs.count(k)) continue;
      auto [augmented, verdict_info] = augmented_set(k, base.best);
      cell.info["augmentations"][k.str()] = verdict_info;
      stage("train");
      aug_runs.emplace(k, train_run(k.str(), augmented.dataset, filter::augment_split(split_, augmented.synthetic_ids)));
      aug_sets.emplace(k, std::move(augmented));
    }
    if (model_) cell.info["diffusion_hash"] = model_hash_;

    stage("evaluate");
    for (const auto& m : cfg_.methods) {
      const RunArtifacts& r = m.augment ? aug_runs.at(method_key.at(m.name)) : base;
      const Classifier& c = m.base == "swad" ? r.swad : r.best;
      cell.accuracy[m.name] = trainer::evaluate(c, ds_, split_.test_ids);
      cell.logs[m.name] = r.log;
      cell.info["swad_windows"][m.name] = json{{"start_step", r.window.start_step}, {"end_step", r.window.end_step},
                                                {"fallback", r.window.fallback}};
    }

    if (cfg_.diversity && split_.mode != "in_domain") {
      stage("diversity");
      std::vector<SampleId> src = split_.train_ids;
      if (split_.mode != "oracle") src.insert(src.end(), split_.val_ids.begin(), split_.val_ids.end());
      const auto fsrc = metrics::features_for_metric(base.best, ds_, src);
      const auto ftgt = metrics::features_for_metric(base.best, ds_, split_.test_ids);
      const metrics::DiversityConfig dcfg{.seed = derive_seed(seed_, target_, 7)};
      const auto hash = base.best.content_hash();
      cell.diversity["original"] = metrics::diversity_shift(fsrc, ftgt, dcfg, hash).value;
      for (const auto& [name, k] : method_key) {
        const auto& a = aug_sets.at(k);
        const auto fsyn = metrics::features_for_metric(base.best, a.dataset, a.synthetic_ids);
        Mat fa(fsrc.rows() + fsyn.rows(), fsrc.cols());
        fa << fsrc, fsyn;
        cell.diversity[name] = metrics::diversity_shift(fa, ftgt, dcfg, hash).value;
      }
    }
    return cell;
  }

 private:
  using Mat = nn::Mat<float>;

  void stage(const std::string& s) {
    if (hooks_.on_stage) hooks_.on_stage(s, target_, seed_);
  }

  RunArtifacts train_run(const std::string& name, const data::MultiDomainDataset& ds, const data::SplitPlan& split) {
    const std::string dir = "classifiers/" + prefix_ + "/" + path_safe(name);
    const std::uint64_t tseed = derive_seed(seed_, target_, 2);
    const json inputs{{"dataset", ds.content_hash()}, {"split", split.to_json()}, {"trainer", tcfg_.to_json()},
                      {"seed", tseed}, {"swad", {cfg_.swad.tol_start, cfg_.swad.tol_end}}};
    return obtain<RunArtifacts>(
        rd_, dir, hash_json(inputs), {dir + "/best.ckpt", dir + "/swad.ckpt", dir + "/log.json"},
        [&] {
          auto res = trainer::train_erm(ds, split, tcfg_, tseed);
          RunArtifacts a;
          a.swad = trainer::swad_average(res.run, res.model, cfg_.swad, &a.window);
          a.best = std::move(res.model);
          a.log = std::move(res.run.log);
          return a;
        },
        [&](const RunArtifacts& a) {
          std::filesystem::create_directories(rd_->path(dir));
          a.best.to_checkpoint().save(rd_->path(dir + "/best.ckpt"));
          a.swad.to_checkpoint().save(rd_->path(dir + "/swad.ckpt"));
          const json j{{"log", log_json(a.log)},
                       {"swad_window", {{"start_step", a.window.start_step}, {"end_step", a.window.end_step},
                                        {"start_index", a.window.start_index}, {"end_index", a.window.end_index},
                                        {"fallback", a.window.fallback}}},
                       {"config", tcfg_.to_json()},
                       {"seed", tseed}};
          write_file_atomic(rd_->path(dir + "/log.json"), j.dump(1) + "\n");
        },
        [&] {
          RunArtifacts a;
          a.best = Classifier::from_checkpoint(Checkpoint::load(rd_->path(dir + "/best.ckpt")));
          a.swad = Classifier::from_checkpoint(Checkpoint::load(rd_->path(dir + "/swad.ckpt")));
          const auto j = json::parse(read_text_file(rd_->path(dir + "/log.json")));
          a.log = log_from_json(j.at("log"));
          const auto& w = j.at("swad_window");
          a.window.start_step = w.at("start_step").get<int>();
          a.window.end_step = w.at("end_step").get<int>();
          a.window.start_index = w.at("start_index").get<int>();
          a.window.end_index = w.at("end_index").get<int>();
          a.window.fallback = w.at("fallback").get<bool>();
          return a;
        });
  }

  const diffusion::DiffusionModel& model() {
    if (model_) return *model_;
    stage("diffusion");
    const std::string dir = "diffusion/" + prefix_;
    auto dcfg = cfg_.diffusion;
    dcfg.seed = derive_seed(seed_, target_, 3);
    dcfg.checkpoint_every = 0;
    const json inputs{{"dataset", ds_hash_}, {"split", split_.to_json()}, {"diffusion", dcfg.to_json()}};
    model_ = obtain<diffusion::DiffusionModel>(
        rd_, dir, hash_json(inputs), {dir + "/model.ckpt"},
        [&] { return diffusion::train_diffusion(ds_, split_, dcfg).model; },
        [&](const diffusion::DiffusionModel& m) {
          std::filesystem::create_directories(rd_->path(dir));
          m.to_checkpoint().save(rd_->path(dir + "/model.ckpt"));
        },
        [&] { return diffusion::DiffusionModel::from_checkpoint(Checkpoint::load(rd_->path(dir + "/model.ckpt"))); });
    model_hash_ = model_->content_hash();
    return *model_;
  }

  const mixing::SamplePool& pool(mixing::Strategy strategy) {
    const auto it = pools_.find(strategy);
    if (it != pools_.end()) return it->second;
    const auto& m = model();
    stage("pool");
    auto policy = cfg_.mix;
    policy.strategy = strategy;
    const std::string dir = "pools/" + prefix_ + "/" + mixing::to_string(strategy);
    std::vector<int> classes(static_cast<std::size_t>(ds_.n_classes()));
    for (int k = 0; k < ds_.n_classes(); ++k) classes[static_cast<std::size_t>(k)] = k;
    const std::uint64_t pseed = derive_seed(seed_, target_, 4, static_cast<int>(strategy));
    const json inputs{{"model", model_hash_}, {"policy", policy.to_json()}, {"per_cell", cfg_.per_cell_target},
                      {"seed", pseed}, {"domains", sources_}};
    auto p = obtain<mixing::SamplePool>(
        rd_, dir, hash_json(inputs), {dir + "/pool_meta.json", dir + "/entries.jsonl", dir + "/payloads.bin"},
        [&] { return mixing::generate_pool(m, sources_, classes, cfg_.per_cell_target, policy, pseed); },
        [&](const mixing::SamplePool& sp) { sp.save(rd_->path(dir)); },
        [&] { return mixing::SamplePool::load(rd_->path(dir)); });
    return pools_.emplace(strategy, std::move(p)).first->second;
  }

  std::pair<filter::Augmented, json> augmented_set(const AugKey& k, const Classifier& h) {
    const auto& p = pool(k.strategy);
    stage("filter");
    const auto records = filter::score_pool(p, h);
    auto verdict = filter::filter_ablation_mode(records, p, k.n_l, k.filter, derive_seed(seed_, target_, 5));
    verdict.classifier_hash = h.content_hash();
    if (!k.subset.empty()) {
      std::vector<std::pair<int, int>> pairs;
      for (const auto& [key, cv] : verdict.cells) {
        const std::pair<int, int> pr{std::get<0>(key), std::get<1>(key)};
        if (std::find(pairs.begin(), pairs.end(), pr) == pairs.end()) pairs.push_back(pr);
      }
      std::set<std::pair<int, int>> keep;
      for (int i : k.subset) {
        if (i < 0 || i >= static_cast<int>(pairs.size())) throw ConfigError("pair_subset index out of range");
        keep.insert(pairs[static_cast<std::size_t>(i)]);
      }
      for (auto it = verdict.cells.begin(); it != verdict.cells.end();)
        it = keep.count({std::get<0>(it->first), std::get<1>(it->first)}) ? std::next(it) : verdict.cells.erase(it);
    }
    if (rd_) {
      const std::string file = "verdicts/" + prefix_ + "/" + k.str() + ".json";
      verdict.save(rd_->path(file));
      rd_->record(file, verdict.classifier_hash, {file});
    }
    std::size_t correct = 0;
    for (const auto& r : records) correct += r.correct ? 1 : 0;
    json info{{"n_l", k.n_l},
              {"pool_size", p.entries.size()},
              {"pool_correct", correct},
              {"selected", verdict.selected_count()},
              {"shortfall_cells", verdict.shortfalls().size()},
              {"clamped_fraction", p.decode_stats.fraction()},
              {"strategy", mixing::to_string(k.strategy)}};
    if (rd_) info["pool_dir"] = "pools/" + prefix_ + "/" + mixing::to_string(k.strategy);
    return {filter::assemble_augmented(ds_, verdict, p, split_.mode == "in_domain" ? -1 : target_), info};
  }

  const data::MultiDomainDataset& ds_;
  std::string ds_hash_;
  data::SplitPlan split_;
  const ExperimentConfig& cfg_;
  int target_;
  std::string label_;
  std::uint64_t seed_;
  RunDirectory* rd_;
  const StageHooks& hooks_;
  std::string prefix_;
  trainer::TrainConfig tcfg_;
  std::vector<int> sources_;
  std::optional<diffusion::DiffusionModel> model_;
  std::string model_hash_;
  std::map<mixing::Strategy, mixing::SamplePool> pools_;
};

void add_records(ExperimentResult& out, const ExperimentConfig& cfg, const CellResult& cell) {
  for (const auto& m : cfg.methods) {
    trainer::ReportRecord r;
    r.method = m.name;
    r.target_domain = cell.label;
    r.seed = cell.seed;
    r.split_mode = cell.split_mode;
    if (cell.error.empty()) r.accuracy = cell.accuracy.at(m.name);
    r.error = cell.error;
    if (cell.info.contains("feedback_classifier_hash")) r.artifacts["feedback_classifier"] = cell.info["feedback_classifier_hash"];
    if (cell.info.contains("diffusion_hash")) r.artifacts["diffusion"] = cell.info["diffusion_hash"];
    out.report.add(std::move(r));
  }
}

template <typename MakeSplit>
ExperimentResult run_cells(const data::MultiDomainDataset& ds, const ExperimentConfig& cfg, RunDirectory* rd,
                           const StageHooks& hooks, const std::string& split_mode, MakeSplit make_split,
                           const std::function<std::string(int)>& label_of) {
  cfg.validate();
  ds.validate(false);
  if (ds.n_domains() < 2) throw ConfigError("experiment needs at least two domains");
  std::vector<int> targets = cfg.targets;
  if (targets.empty())
    for (int d = 0; d < ds.n_domains(); ++d) targets.push_back(d);
  for (int t : targets)
    if (t < 0 || t >= ds.n_domains()) throw ConfigError("target domain id out of range");
  const std::string ds_hash = ds.content_hash();
  ExperimentResult out;
  out.report.metadata["split_mode"] = split_mode;
  json mj = json::array();
  for (const auto& m : cfg.methods) mj.push_back(m.to_json());
  out.report.metadata["methods"] = mj;
  out.report.metadata["dataset_hash"] = ds_hash;
  for (int t : targets) {
    for (auto seed : cfg.seeds) {
      CellResult cell;
      try {
        const auto split = make_split(t, seed);
        CellRunner runner(ds, ds_hash, split, cfg, t, label_of(t), seed, rd, hooks);
        cell = runner.run();
      } catch (const IntegrityError&) {
        throw;
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        cell.target = t;
        cell.label = label_of(t);
        cell.seed = seed;
        cell.split_mode = split_mode;
        cell.error = e.what();
        std::cerr << "cell " << cell.label << " seed " << seed << " failed: " << e.what() << "\n";
      }
      add_records(out, cfg, cell);
      out.cells.push_back(std::move(cell));
    }
  }
  return out;
}

}  // namespace

ExperimentResult leave_one_out_experiment(const data::MultiDomainDataset& ds, const ExperimentConfig& cfg, RunDirectory* rd,
                                          const StageHooks& hooks) {
  const std::string mode = cfg.oracle ? "oracle" : "standard";
  return run_cells(
      ds, cfg, rd, hooks, mode,
      [&](int t, std::uint64_t seed) {
        const auto s = derive_seed(seed, t, 1);
        return cfg.oracle ? data::oracle_split(ds, t, cfg.val_fraction, s) : data::leave_one_out_split(ds, t, cfg.val_fraction, s);
      },
      [&](int t) { return ds.domain_names()[static_cast<std::size_t>(t)]; });
}

ExperimentResult in_domain_experiment(const data::MultiDomainDataset& ds, const ExperimentConfig& cfg, RunDirectory* rd,
                                      const StageHooks& hooks) {
  return run_cells(
      ds, cfg, rd, hooks, "in_domain",
      [&](int t, std::uint64_t seed) {
        return data::in_domain_split(ds, t, cfg.in_domain_test_fraction, cfg.val_fraction, derive_seed(seed, t, 1));
      },
      [&](int t) { return source_set_label(ds, t); });
}

}  // namespace fds::experiment
