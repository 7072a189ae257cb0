#include "fds/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "fds/metrics.hpp"
#include "fds/plot.hpp"

namespace fds::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Mat;

namespace {

constexpr const char* kDiversityNote =
    "crossfit-logistic-2fold two-sample discriminator on feedback-classifier-penultimate features; "
    "an approximation, not comparable to published diversity-shift values";

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

std::string fmt(double v, const char* format = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

RunDirectory open_verified(const fs::path& root, bool force) {
  auto rd = RunDirectory::open(root, force);
  if (!force) rd.verify_all();
  return rd;
}

std::vector<std::string> dataset_files() { return {"dataset/meta.json", "dataset/payloads.bin", "dataset/labels.csv"}; }

data::MultiDomainDataset obtain_dataset(RunDirectory& rd, const DatasetBlock& block) {
  json b{{"kind", block.kind}, {"n_domains", block.n_domains}, {"n_classes", block.n_classes}, {"per_cell", block.per_cell},
         {"geometry", {block.geometry.sigma, block.geometry.class_radius, block.geometry.domain_rotation, block.geometry.domain_shift}},
         {"styles", block.styles}, {"image_size", block.image_size}, {"channels", block.channels},
         {"pixel_noise", block.pixel_noise}, {"path", block.path}, {"seed", block.seed}};
  return rd.cached<data::MultiDomainDataset>(
      "dataset", hash_json(b), dataset_files(), [&] { return build_dataset(block); },
      [&](const data::MultiDomainDataset& ds) { ds.save(rd.path("dataset")); },
      [&] { return data::MultiDomainDataset::load(rd.path("dataset")); });
}

void echo_config(RunDirectory& rd, const RunConfig& config) {
  write_file_atomic(rd.path("config.json"), config.to_json().dump(2) + "\n");
  rd.record("config", sha256_file(rd.path("config.json")), {"config.json"});
}

json config_identity(const RunConfig& config) {
  json j = config.to_json();
  j.erase("output");
  return j;
}

const char* kStages[] = {"dataset", "split", "feedback", "diffusion", "pool", "filter", "train", "evaluate", "reports"};

experiment::StageHooks stage_hooks(RunDirectory& rd, const data::MultiDomainDataset& ds) {
  experiment::StageHooks h;
  h.on_stage = [&rd, &ds](const std::string& stage, int target, std::uint64_t seed) {
    rd.mark_stage(stage, "running", ds.domain_names()[static_cast<std::size_t>(target)] + " seed " + std::to_string(seed));
  };
  return h;
}

experiment::ExperimentResult run_experiment(const RunConfig& config, const data::MultiDomainDataset& ds,
                                            const experiment::ExperimentConfig& ecfg, RunDirectory& rd) {
  const auto hooks = stage_hooks(rd, ds);
  return config.protocol == "in_domain" ? experiment::in_domain_experiment(ds, ecfg, &rd, hooks)
                                        : experiment::leave_one_out_experiment(ds, ecfg, &rd, hooks);
}

int count_failed(const trainer::RunReport& r) {
  int n = 0;
  for (const auto& rec : r.records()) n += rec.accuracy ? 0 : 1;
  return n;
}

json traces_json(const std::vector<experiment::CellResult>& cells) {
  json out = json::array();
  for (const auto& c : cells) {
    for (const auto& [method, log] : c.logs) {
      json steps = json::array(), acc = json::array();
      for (const auto& e : log) {
        if (!e.test_accuracy) continue;
        steps.push_back(e.step);
        acc.push_back(*e.test_accuracy);
      }
      if (steps.empty()) continue;
      out.push_back({{"target", c.label}, {"seed", c.seed}, {"method", method}, {"step", steps}, {"test_accuracy", acc}});
    }
  }
  return out;
}

std::string diversity_csv(const std::vector<experiment::CellResult>& cells) {
  std::ostringstream os;
  os << "target_domain,seed,source_set,diversity_shift\n";
  for (const auto& c : cells)
    for (const auto& [set, v] : c.diversity) os << c.label << "," << c.seed << "," << set << "," << fmt(v) << "\n";
  return os.str();
}

void write_gallery(const RunDirectory& rd, const data::MultiDomainDataset& ds, const experiment::CellResult& cell,
                   std::vector<std::string>& files) {
  if (ds.mode() != data::PayloadMode::image || ds.shape().size() != 3) return;
  const int c = ds.shape()[0], h = ds.shape()[1], w = ds.shape()[2];
  const std::string ext = c == 1 ? ".pgm" : ".ppm";
  if (c != 1 && c != 3) return;
  std::vector<std::vector<float>> orig;
  for (int d = 0; d < ds.n_domains() && orig.size() < 64; ++d) {
    const auto ids = ds.ids_in_domain(d);
    for (std::size_t i = 0; i < ids.size() && i < 16; ++i) {
      const auto p = ds.payload(ds.index_of(ids[i]));
      orig.emplace_back(p.begin(), p.end());
    }
  }
  plot::write_image_grid(rd.path("plots/samples_original" + ext), orig, c, h, w, 16);
  files.push_back("plots/samples_original" + ext);
  if (!cell.info.contains("augmentations")) return;
  std::set<std::string> done;
  for (const auto& [key, a] : cell.info["augmentations"].items()) {
    if (!a.contains("pool_dir")) continue;
    const auto dir = a["pool_dir"].get<std::string>();
    const auto strategy = a["strategy"].get<std::string>();
    if (!done.insert(dir).second) continue;
    const auto pool = mixing::SamplePool::load(rd.path(dir));
    std::vector<std::vector<float>> imgs;
    for (const auto& [ck, idx] : pool.cells())
      for (std::size_t i = 0; i < idx.size() && i < 8; ++i) imgs.push_back(pool.entries[idx[i]].payload);
    if (imgs.size() > 128) imgs.resize(128);
    const std::string f = "plots/samples_" + strategy + ext;
    plot::write_image_grid(rd.path(f), imgs, c, h, w, 16);
    files.push_back(f);
  }
}

void write_projection(const RunDirectory& rd, const RunConfig& config, const data::MultiDomainDataset& ds,
                      const experiment::CellResult& cell, std::vector<std::string>& files) {
  if (!cell.info.contains("feedback_classifier_path") || !cell.info.contains("augmentations")) return;
  const auto h = classifier::Classifier::from_checkpoint(
      Checkpoint::load(rd.path(cell.info["feedback_classifier_path"].get<std::string>())));
  std::vector<SampleId> ids;
  std::vector<std::string> labels;
  for (int d = 0; d < ds.n_domains(); ++d) {
    if (d == cell.target && config.protocol != "in_domain") continue;
    const auto di = ds.ids_in_domain(d);
    const std::size_t stride = std::max<std::size_t>(1, di.size() / 100);
    for (std::size_t i = 0; i < di.size(); i += stride) {
      ids.push_back(di[i]);
      labels.push_back(ds.domain_names()[static_cast<std::size_t>(d)]);
    }
  }
  Mat<float> f_orig = metrics::features_for_metric(h, ds, ids);
  std::string pool_dir;
  for (const auto& [key, a] : cell.info["augmentations"].items())
    if (a.contains("pool_dir") && a["strategy"] != "pure") pool_dir = a["pool_dir"].get<std::string>();
  Mat<float> all = f_orig;
  if (!pool_dir.empty()) {
    const auto pool = mixing::SamplePool::load(rd.path(pool_dir));
    const std::size_t stride = std::max<std::size_t>(1, pool.entries.size() / 200);
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < pool.entries.size(); i += stride) pick.push_back(i);
    Mat<float> payloads(static_cast<Eigen::Index>(pick.size()), pool.payload_dim());
    for (std::size_t r = 0; r < pick.size(); ++r) {
      const auto& e = pool.entries[pick[r]];
      for (int k = 0; k < pool.payload_dim(); ++k) payloads(static_cast<Eigen::Index>(r), k) = e.payload[static_cast<std::size_t>(k)];
      labels.push_back(filter::pseudo_domain_name(ds, e.domain_i, e.domain_j));
    }
    const auto f_syn = metrics::features_for_metric(h, payloads);
    all.resize(f_orig.rows() + f_syn.rows(), f_orig.cols());
    all << f_orig, f_syn;
  }
  if (all.rows() < 10) return;
  metrics::TsneConfig tc;
  tc.seed = derive_seed(cell.seed, cell.target, 8);
  metrics::project_embeddings(all, labels, rd.path("plots/tsne_" + cell.label), tc, "t-SNE " + cell.label);
  files.push_back("plots/tsne_" + cell.label + ".csv");
  files.push_back("plots/tsne_" + cell.label + ".svg");
}

void write_accuracy_chart(const fs::path& path, const trainer::RunReport& report, const std::string& title) {
  const auto domains = report.domains();
  std::vector<plot::Series> series;
  for (const auto& m : report.methods()) {
    plot::Series s{m, {}, {}};
    for (std::size_t d = 0; d < domains.size(); ++d) {
      const auto a = report.cell(m, domains[d]);
      if (!a) continue;
      s.x.push_back(static_cast<double>(d));
      s.y.push_back(100.0 * a->mean);
    }
    series.push_back(std::move(s));
  }
  std::string xl = "target domain index (";
  for (std::size_t d = 0; d < domains.size(); ++d) xl += (d ? " " : "") + std::to_string(d) + "=" + domains[d];
  plot::write_line_chart(path, series, title, xl + ")", "accuracy (%)");
}

void write_stability_chart(const fs::path& path, const json& traces) {
  std::map<std::string, std::map<int, std::pair<double, int>>> by_method;
  for (const auto& t : traces) {
    auto& m = by_method[t["method"].get<std::string>()];
    for (std::size_t i = 0; i < t["step"].size(); ++i) {
      auto& [sum, n] = m[t["step"][i].get<int>()];
      sum += 100.0 * t["test_accuracy"][i].get<double>();
      ++n;
    }
  }
  std::vector<plot::Series> series;
  for (const auto& [name, steps] : by_method) {
    plot::Series s{name, {}, {}};
    for (const auto& [step, acc] : steps) {
      s.x.push_back(step);
      s.y.push_back(acc.first / acc.second);
    }
    series.push_back(std::move(s));
  }
  plot::write_line_chart(path, series, "test accuracy during training", "step", "accuracy (%)");
}

std::string table_header(const std::vector<std::string>& domains) {
  std::string s = "| method |";
  for (const auto& d : domains) s += " " + d + " |";
  s += " avg |\n|---|";
  for (std::size_t i = 0; i <= domains.size(); ++i) s += "---|";
  return s + "\n";
}

std::string pm(const trainer::Aggregate& a) {
  std::string s = fmt(100.0 * a.mean, "%.1f");
  if (a.std) s += " ± " + fmt(100.0 * *a.std, "%.1f");
  return s;
}

data::SplitPlan make_split(const RunConfig& config, const data::MultiDomainDataset& ds, int target, std::uint64_t seed) {
  const auto& e = config.experiment;
  const auto s = derive_seed(seed, target, 1);
  if (config.protocol == "in_domain") return data::in_domain_split(ds, target, e.in_domain_test_fraction, e.val_fraction, s);
  return e.oracle ? data::oracle_split(ds, target, e.val_fraction, s) : data::leave_one_out_split(ds, target, e.val_fraction, s);
}

int domain_id(const data::MultiDomainDataset& ds, const std::string& name) {
  if (name.empty()) return 0;
  const auto& names = ds.domain_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown domain name: " + name);
  return static_cast<int>(it - names.begin());
}

}  // namespace

double reference_per_class(const data::MultiDomainDataset& ds, const data::SplitPlan& split) {
  std::set<int> domains;
  for (auto id : split.train_ids) domains.insert(ds.domain_of(id));
  if (domains.empty()) throw std::invalid_argument("reference_per_class: empty training set");
  return static_cast<double>(split.train_ids.size()) / static_cast<double>(domains.size() * ds.n_classes());
}

std::string markdown_table(const trainer::RunReport& report) {
  const auto domains = report.domains();
  std::string s = table_header(domains);
  for (const auto& m : report.methods()) {
    s += "| " + m + " |";
    for (const auto& d : domains) {
      const auto a = report.cell(m, d);
      s += " " + (a ? pm(*a) : std::string("failed")) + " |";
    }
    const auto o = report.overall(m);
    s += " " + (o ? pm(*o) : std::string("failed")) + " |\n";
  }
  return s;
}

void write_summaries(const fs::path& run_dir) {
  const auto p = run_dir / "reports" / "report.json";
  if (!fs::exists(p)) throw StageError("no report at " + p.string() + "; run the pipeline first");
  const auto report = trainer::RunReport::from_json(json::parse(read_text_file(p)));
  std::string md = "# Accuracy (%)\n\nsplit mode: " + report.split_mode().value_or("?") + "\n\n" + markdown_table(report);
  const auto dp = run_dir / "reports" / "diversity.csv";
  if (fs::exists(dp)) md += "\nDiversity shift (" + std::string(kDiversityNote) + "): see diversity.csv\n";
  write_file_atomic(run_dir / "reports" / "summary.md", md);
}

void write_plots(const fs::path& run_dir) {
  const auto p = run_dir / "reports" / "report.json";
  if (!fs::exists(p)) throw StageError("no report at " + p.string() + "; run the pipeline first");
  fs::create_directories(run_dir / "plots");
  const auto report = trainer::RunReport::from_json(json::parse(read_text_file(p)));
  write_accuracy_chart(run_dir / "plots" / "accuracy.svg", report, "accuracy per target domain");
  const auto tp = run_dir / "reports" / "traces.json";
  if (fs::exists(tp)) {
    const auto traces = json::parse(read_text_file(tp));
    if (!traces.empty()) write_stability_chart(run_dir / "plots" / "stability.svg", traces);
  }
}

PipelineResult run_pipeline(const RunConfig& config, const fs::path& run_dir, bool force) {
  auto rd = open_verified(run_dir, force);
  echo_config(rd, config);
  PipelineResult out;

  rd.mark_stage("dataset", "running");
  const auto ds = obtain_dataset(rd, config.dataset);
  rd.mark_stage("dataset", "complete");
  const auto ecfg = config.resolve(ds);

  const std::string key = "reports";
  const std::string inputs = hash_json({{"config", config_identity(config)}, {"dataset", ds.content_hash()}});
  if (rd.fresh(key, inputs) && rd.stage_status("reports") == "complete") {
    out.report = trainer::RunReport::from_json(json::parse(read_text_file(rd.path("reports/report.json"))));
    out.skipped = true;
    out.failed_records = count_failed(out.report);
    return out;
  }

  auto result = run_experiment(config, ds, ecfg, rd);
  rd.mark_stage("reports", "running");
  auto& report = result.report;
  report.metadata["config_hash"] = inputs;
  report.metadata["accuracy_unit"] = "fraction";
  if (ecfg.diversity) report.metadata["diversity_estimator"] = kDiversityNote;
  report.save(rd.path("reports"));
  std::vector<std::string> files{"reports/report.csv", "reports/report.json"};

  const json traces = traces_json(result.cells);
  write_file_atomic(rd.path("reports/traces.json"), traces.dump(1) + "\n");
  files.push_back("reports/traces.json");
  bool any_div = false;
  for (const auto& c : result.cells) any_div |= !c.diversity.empty();
  if (any_div) {
    write_file_atomic(rd.path("reports/diversity.csv"), diversity_csv(result.cells));
    files.push_back("reports/diversity.csv");
  }
  json cells = json::array();
  for (const auto& c : result.cells)
    cells.push_back({{"target", c.label}, {"seed", c.seed}, {"info", c.info}, {"error", c.error}});
  write_file_atomic(rd.path("reports/cells.json"), cells.dump(1) + "\n");
  files.push_back("reports/cells.json");
  write_summaries(rd.root());
  files.push_back("reports/summary.md");

  if (config.plots) {
    write_plots(rd.root());
    files.push_back("plots/accuracy.svg");
    if (!traces.empty()) files.push_back("plots/stability.svg");
    const auto first = std::find_if(result.cells.begin(), result.cells.end(), [](const auto& c) { return c.error.empty(); });
    if (first != result.cells.end()) {
      if (config.gallery) write_gallery(rd, ds, *first, files);
      if (config.tsne) write_projection(rd, config, ds, *first, files);
    }
  }
  out.failed_records = count_failed(report);
  rd.record(key, inputs, files, json{{"failed_records", out.failed_records}});
  for (const char* s : kStages)
    if (rd.stage_status(s) != "" || std::string(s) == "reports") rd.mark_stage(s, "complete");
  if (out.failed_records) rd.mark_stage("evaluate", "failed", std::to_string(out.failed_records) + " report rows failed");

  out.report = std::move(report);
  out.cells = std::move(result.cells);
  out.computed = rd.computed();
  out.reused = rd.reused();
  return out;
}

SweepResult sweep_nl(const RunConfig& config, const fs::path& run_dir, std::span<const double> scales, bool force) {
  if (scales.empty()) throw ConfigError("sweep needs at least one scale");
  for (double s : scales)
    if (!(s > 0.0)) throw ConfigError("sweep scales must be positive");
  auto rd = open_verified(run_dir, force);
  echo_config(rd, config);
  const auto ds = obtain_dataset(rd, config.dataset);
  auto ecfg = config.resolve(ds);
  ecfg.n_l.reset();
  ecfg.methods.clear();
  ecfg.methods.push_back(experiment::standard_method("erm", ecfg));
  SweepResult out;
  out.scales.assign(scales.begin(), scales.end());
  std::vector<std::string> names;
  for (double s : scales) {
    auto m = experiment::standard_method("erm+fds", ecfg);
    m.n_l_scale = s;
    m.name = "nl_x" + fmt(s, "%g");
    names.push_back(m.name);
    ecfg.methods.push_back(m);
  }
  auto result = run_experiment(config, ds, ecfg, rd);

  std::set<std::string> pools;
  for (const auto& c : result.cells) {
    if (!c.info.contains("augmentations")) continue;
    for (const auto& [k, a] : c.info["augmentations"].items())
      if (a.contains("pool_dir")) {
        const auto dir = a["pool_dir"].get<std::string>();
        pools.insert(rd.file_hash(dir, dir + "/payloads.bin"));
      }
  }
  out.pool_hashes.assign(pools.begin(), pools.end());
  {
    const auto& c = result.cells.front();
    out.reference_per_class = reference_per_class(ds, make_split(config, ds, c.target, c.seed));
  }
  result.report.metadata["reference_per_class"] = out.reference_per_class;
  result.report.metadata["scales"] = out.scales;
  result.report.metadata["pool_hashes"] = out.pool_hashes;
  fs::create_directories(rd.path("reports/sweep_nl"));
  result.report.save(rd.path("reports/sweep_nl"));

  std::ostringstream csv;
  csv << "scale,n_l_reference,mean_accuracy,std_accuracy\n";
  plot::Series series{"erm+fds (" + ecfg.tier + ")", {}, {}};
  plot::Series base{"erm", {}, {}};
  const auto b = result.report.overall("erm");
  for (std::size_t i = 0; i < out.scales.size(); ++i) {
    const auto a = result.report.overall(names[i]);
    csv << fmt(out.scales[i], "%g") << "," << fmt(out.reference_per_class, "%.3f") << ","
        << (a ? fmt(a->mean) : "failed") << "," << (a && a->std ? fmt(*a->std) : "") << "\n";
    if (a) {
      series.x.push_back(out.scales[i]);
      series.y.push_back(100.0 * a->mean);
    }
    if (b) {
      base.x.push_back(out.scales[i]);
      base.y.push_back(100.0 * b->mean);
    }
  }
  write_file_atomic(rd.path("reports/sweep_nl/sweep.csv"), csv.str());
  plot::write_line_chart(rd.path("plots/sweep_nl.svg"), {series, base}, "accuracy vs N_L scale",
                         "N_L / average images per class (" + fmt(out.reference_per_class, "%.1f") + ")", "accuracy (%)");
  rd.record("reports/sweep_nl", hash_json({{"config", config_identity(config)}, {"scales", out.scales}}),
            {"reports/sweep_nl/report.csv", "reports/sweep_nl/report.json", "reports/sweep_nl/sweep.csv", "plots/sweep_nl.svg"});
  out.report = std::move(result.report);
  return out;
}

trainer::RunReport ablation_suite(const RunConfig& config, const fs::path& run_dir, bool force) {
  auto rd = open_verified(run_dir, force);
  echo_config(rd, config);
  const auto ds = obtain_dataset(rd, config.dataset);
  auto ecfg = config.resolve(ds);
  ecfg.methods = experiment::standard_methods(config.ablation_grid, ecfg);
  for (const auto& m : config.custom_methods) ecfg.methods.push_back(m);
  auto result = run_experiment(config, ds, ecfg, rd);
  auto& report = result.report;
  report.metadata["grid"] = config.ablation_grid;
  fs::create_directories(rd.path("reports/ablation"));
  report.save(rd.path("reports/ablation"));
  write_file_atomic(rd.path("reports/ablation/summary.md"), "# Ablation accuracy (%)\n\n" + markdown_table(report));
  std::vector<std::string> files{"reports/ablation/report.csv", "reports/ablation/report.json", "reports/ablation/summary.md"};
  if (config.plots) {
    write_accuracy_chart(rd.path("plots/ablation.svg"), report, "ablation accuracy per target domain");
    files.push_back("plots/ablation.svg");
  }
  rd.record("reports/ablation", hash_json({{"config", config_identity(config)}}), files);
  return std::move(report);
}

// --- single stages -----------------------------------------------------

namespace {

struct Stage {
  RunDirectory rd;
  data::MultiDomainDataset ds;
  int target = 0;
  data::SplitPlan split;
  std::string prefix;
};

Stage open_stage(const StageContext& ctx) {
  Stage s{open_verified(ctx.run_dir, ctx.force), {}, 0, {}, {}};
  if (!fs::exists(s.rd.path("dataset/meta.json")))
    throw StageError("no dataset in " + ctx.run_dir.string() + "; run gen-data or ingest first");
  s.ds = data::MultiDomainDataset::load(s.rd.path("dataset"));
  s.target = domain_id(s.ds, ctx.target);
  s.split = make_split(ctx.config, s.ds, s.target, ctx.seed);
  std::string label;
  for (char c : s.ds.domain_names()[static_cast<std::size_t>(s.target)])
    label += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  s.prefix = "manual/" + label + "/seed" + std::to_string(ctx.seed);
  return s;
}

std::vector<int> sources(const Stage& s) {
  std::vector<int> out;
  for (int d = 0; d < s.ds.n_domains(); ++d)
    if (d != s.target) out.push_back(d);
  return out;
}

void require_file(const RunDirectory& rd, const std::string& rel, const std::string& hint) {
  if (!fs::exists(rd.path(rel))) throw StageError("missing " + rd.path(rel).string() + "; run " + hint + " first");
}

}  // namespace

data::MultiDomainDataset stage_dataset(const StageContext& ctx) {
  auto rd = open_verified(ctx.run_dir, ctx.force);
  echo_config(rd, ctx.config);
  return obtain_dataset(rd, ctx.config.dataset);
}

void stage_ingest(const StageContext& ctx, const fs::path& folder, int image_size) {
  auto rd = open_verified(ctx.run_dir, ctx.force);
  const auto ds = data::ingest_image_folder(folder, image_size);
  ds.save(rd.path("dataset"));
  rd.record("dataset", hash_json({{"ingest", folder.string()}, {"image_size", image_size}, {"content", ds.content_hash()}}),
            dataset_files(), json{{"samples", ds.size()}, {"domains", ds.domain_names()}, {"classes", ds.class_names()}});
}

fs::path stage_train_diffusion(const StageContext& ctx) {
  auto s = open_stage(ctx);
  auto dcfg = ctx.config.experiment.diffusion;
  dcfg.seed = derive_seed(ctx.seed, s.target, 3);
  dcfg.checkpoint_every = 0;
  const std::string dir = "diffusion/" + s.prefix;
  const std::string file = dir + "/model.ckpt";
  const auto inputs = hash_json({{"dataset", s.ds.content_hash()}, {"split", s.split.to_json()}, {"diffusion", dcfg.to_json()}});
  if (!s.rd.fresh(dir, inputs)) {
    const auto res = diffusion::train_diffusion(s.ds, s.split, dcfg);
    fs::create_directories(s.rd.path(dir));
    res.model.to_checkpoint().save(s.rd.path(file));
    s.rd.record(dir, inputs, {file}, json{{"final_loss", res.losses.empty() ? 0.0 : res.losses.back()}});
  }
  return s.rd.path(file);
}

fs::path stage_generate_pool(const StageContext& ctx, mixing::Strategy strategy) {
  auto s = open_stage(ctx);
  const std::string model_file = "diffusion/" + s.prefix + "/model.ckpt";
  require_file(s.rd, model_file, "train-diffusion");
  const auto model = diffusion::DiffusionModel::from_checkpoint(Checkpoint::load(s.rd.path(model_file)));
  auto policy = ctx.config.experiment.mix;
  policy.strategy = strategy;
  const auto src = sources(s);
  std::vector<int> classes(static_cast<std::size_t>(s.ds.n_classes()));
  for (int k = 0; k < s.ds.n_classes(); ++k) classes[static_cast<std::size_t>(k)] = k;
  const auto pseed = derive_seed(ctx.seed, s.target, 4, static_cast<int>(strategy));
  const std::string dir = "pools/" + s.prefix + "/" + mixing::to_string(strategy);
  const auto inputs = hash_json({{"model", model.content_hash()}, {"policy", policy.to_json()},
                                 {"per_cell", ctx.config.experiment.per_cell_target}, {"seed", pseed}, {"domains", src}});
  if (!s.rd.fresh(dir, inputs)) {
    const auto pool = mixing::generate_pool(model, src, classes, ctx.config.experiment.per_cell_target, policy, pseed);
    pool.save(s.rd.path(dir));
    s.rd.record(dir, inputs, {dir + "/pool_meta.json", dir + "/entries.jsonl", dir + "/payloads.bin"},
                json{{"entries", pool.entries.size()}});
  }
  return s.rd.path(dir);
}

namespace {

void save_training(RunDirectory& rd, const std::string& dir, const trainer::TrainResult& res,
                   const experiment::ExperimentConfig& e, const std::string& inputs) {
  trainer::SwadWindow w;
  const auto swad = trainer::swad_average(res.run, res.model, e.swad, &w);
  fs::create_directories(rd.path(dir));
  res.model.to_checkpoint().save(rd.path(dir + "/best.ckpt"));
  swad.to_checkpoint().save(rd.path(dir + "/swad.ckpt"));
  write_file_atomic(rd.path(dir + "/log.json"),
                    json{{"log", res.run.log_json()}, {"swad_window", {{"start_step", w.start_step}, {"end_step", w.end_step},
                                                                       {"fallback", w.fallback}}}}
                            .dump(1) + "\n");
  rd.record(dir, inputs, {dir + "/best.ckpt", dir + "/swad.ckpt", dir + "/log.json"});
}

}  // namespace

fs::path stage_train_classifier(const StageContext& ctx, std::optional<mixing::Strategy> augmented) {
  auto s = open_stage(ctx);
  const auto& e = ctx.config.experiment;
  const auto tseed = derive_seed(ctx.seed, s.target, 2);
  if (!augmented) {
    const std::string dir = "classifiers/" + s.prefix + "/feedback";
    const auto inputs = hash_json({{"dataset", s.ds.content_hash()}, {"split", s.split.to_json()}, {"trainer", e.trainer.to_json()},
                                   {"seed", tseed}});
    if (!s.rd.fresh(dir, inputs)) save_training(s.rd, dir, filter::train_feedback_classifier(s.ds, s.split, e.trainer, tseed), e, inputs);
    return s.rd.path(dir);
  }
  const auto name = mixing::to_string(*augmented);
  const std::string pool_dir = "pools/" + s.prefix + "/" + name;
  const std::string verdict_file = "verdicts/" + s.prefix + "/" + name + ".json";
  require_file(s.rd, pool_dir + "/pool_meta.json", "generate-pool");
  require_file(s.rd, verdict_file, "filter");
  const auto pool = mixing::SamplePool::load(s.rd.path(pool_dir));
  const auto verdict = filter::FilterVerdict::load(s.rd.path(verdict_file));
  const auto aug = filter::assemble_augmented(s.ds, verdict, pool, ctx.config.protocol == "in_domain" ? -1 : s.target);
  const auto split = filter::augment_split(s.split, aug.synthetic_ids);
  const std::string dir = "classifiers/" + s.prefix + "/" + name;
  const auto inputs = hash_json({{"dataset", aug.dataset.content_hash()}, {"split", split.to_json()}, {"trainer", e.trainer.to_json()},
                                 {"seed", tseed}});
  if (!s.rd.fresh(dir, inputs)) save_training(s.rd, dir, trainer::train_erm(aug.dataset, split, e.trainer, tseed), e, inputs);
  return s.rd.path(dir);
}

fs::path stage_filter(const StageContext& ctx, mixing::Strategy strategy) {
  auto s = open_stage(ctx);
  const auto& e = ctx.config.experiment;
  const auto name = mixing::to_string(strategy);
  const std::string pool_dir = "pools/" + s.prefix + "/" + name;
  const std::string h_file = "classifiers/" + s.prefix + "/feedback/best.ckpt";
  require_file(s.rd, pool_dir + "/pool_meta.json", "generate-pool");
  require_file(s.rd, h_file, "train-classifier");
  const auto pool = mixing::SamplePool::load(s.rd.path(pool_dir));
  const auto h = classifier::Classifier::from_checkpoint(Checkpoint::load(s.rd.path(h_file)));
  const int n_l = e.n_l ? *e.n_l : filter::default_n_l(s.ds, s.split, e.n_l_scale);
  const auto records = filter::score_pool(pool, h);
  auto verdict = filter::filter_ablation_mode(records, pool, n_l, e.filter_mode, derive_seed(ctx.seed, s.target, 5));
  verdict.classifier_hash = h.content_hash();
  const std::string file = "verdicts/" + s.prefix + "/" + name + ".json";
  verdict.save(s.rd.path(file));
  s.rd.record(file, verdict.classifier_hash, {file}, json{{"selected", verdict.selected_count()}, {"n_l", n_l}});
  return s.rd.path(file);
}

json stage_evaluate(const StageContext& ctx) {
  auto s = open_stage(ctx);
  const fs::path root = s.rd.path("classifiers/" + s.prefix);
  if (!fs::exists(root)) throw StageError("no classifiers under " + root.string() + "; run train-classifier first");
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) dirs.push_back(d.path());
  std::sort(dirs.begin(), dirs.end());
  json out{{"target", s.ds.domain_names()[static_cast<std::size_t>(s.target)]}, {"seed", ctx.seed},
           {"split_mode", s.split.mode}, {"accuracy", json::object()}};
  for (const auto& d : dirs) {
    for (const char* which : {"best", "swad"}) {
      const auto ck = d / (std::string(which) + ".ckpt");
      if (!fs::exists(ck)) continue;
      const auto c = classifier::Classifier::from_checkpoint(Checkpoint::load(ck));
      out["accuracy"][d.filename().string() + "/" + which] = trainer::evaluate(c, s.ds, s.split.test_ids);
    }
  }
  const std::string file = "reports/" + s.prefix + "/evaluate.json";
  fs::create_directories(s.rd.path("reports/" + s.prefix));
  write_file_atomic(s.rd.path(file), out.dump(2) + "\n");
  s.rd.record(file, hash_json(out), {file});
  return out;
}

}  // namespace fds::pipeline
