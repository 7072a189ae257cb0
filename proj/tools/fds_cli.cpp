// fds: command-line front end for the feedback-guided domain synthesis pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 integrity failure.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "fds/pipeline.hpp"

namespace {

using namespace fds;

struct Common {
  std::string config_path;
  std::string preset = "point";
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool oracle = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file");
  sub->add_option("--preset", c.preset, "built-in config when --config is absent")->check(CLI::IsMember({"point", "shapes"}));
  sub->add_option("--run-dir", c.run_dir, "run directory (default: $FDS_RUN_DIR, then output.run_dir)");
  sub->add_option("--seed", c.seed, "run a single seed");
  sub->add_flag("--force", c.force, "recompute stages even when the manifest says they are complete");
  sub->add_flag("--oracle", c.oracle, "select models on a validation split of the target domain");
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? (c.preset == "shapes" ? default_shapes_config() : default_point_config())
                                        : RunConfig::load(c.config_path);
  if (c.seed) cfg.experiment.seeds = {*c.seed};
  if (c.oracle) cfg.experiment.oracle = true;
  return cfg;
}

std::filesystem::path run_dir(const Common& c, const RunConfig& cfg) {
  if (!c.run_dir.empty()) return c.run_dir;
  if (const char* env = std::getenv("FDS_RUN_DIR"); env && *env) return env;
  if (!cfg.run_dir.empty()) return cfg.run_dir;
  throw ConfigError("run directory not set (use --run-dir, FDS_RUN_DIR or output.run_dir)");
}

pipeline::StageContext context(const Common& c, const std::string& target) {
  pipeline::StageContext ctx;
  ctx.config = load_config(c);
  ctx.run_dir = run_dir(c, ctx.config);
  ctx.target = target;
  ctx.seed = c.seed.value_or(ctx.config.experiment.seeds.front());
  ctx.force = c.force;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback-guided domain synthesis"};
  app.require_subcommand(1);
  Common common;
  std::string target, strategy = "condition_level", augmented, ingest_path;
  int image_size = 32;
  std::vector<double> scales;

  auto* gen = app.add_subcommand("gen-data", "build the configured dataset into the run directory");
  auto* ingest = app.add_subcommand("ingest", "import an image folder laid out as <domain>/<class>/<image>");
  ingest->add_option("--path", ingest_path, "dataset root")->required();
  ingest->add_option("--image-size", image_size, "square resize target");
  auto* tdiff = app.add_subcommand("train-diffusion", "train the conditional diffusion model on the sources");
  auto* gpool = app.add_subcommand("generate-pool", "sample a synthetic pool");
  auto* filt = app.add_subcommand("filter", "score a pool with the feedback classifier and select samples");
  auto* tcls = app.add_subcommand("train-classifier", "train the feedback classifier or an augmented classifier");
  tcls->add_option("--augmented", augmented, "train on sources plus the filtered pool of this strategy");
  auto* eval = app.add_subcommand("evaluate", "evaluate trained classifiers on the held-out split");
  auto* run = app.add_subcommand("run", "full pipeline");
  auto* ablate = app.add_subcommand("ablate", "method grid over shared artifacts");
  auto* sweep = app.add_subcommand("sweep-nl", "accuracy against the N_L scale");
  sweep->add_option("--scales", scales, "N_L scales")->delimiter(',');
  auto* report = app.add_subcommand("report", "rewrite and print the summary tables");
  auto* plot = app.add_subcommand("plot", "rewrite the plots from the saved report");
  auto* show = app.add_subcommand("config", "print the effective config");

  for (auto* s : {gen, ingest, tdiff, gpool, filt, tcls, eval, run, ablate, sweep, report, plot, show}) add_common(s, common);
  for (auto* s : {tdiff, gpool, filt, tcls, eval}) s->add_option("--target", target, "target domain name");
  for (auto* s : {gpool, filt}) s->add_option("--strategy", strategy, "pure, noise_level, condition_level or both");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto ds = pipeline::stage_dataset(context(common, target));
      std::cout << "dataset: " << ds.size() << " samples, " << ds.n_domains() << " domains, " << ds.n_classes()
                << " classes\n";
    } else if (ingest->parsed()) {
      pipeline::stage_ingest(context(common, target), ingest_path, image_size);
      std::cout << "ingested " << ingest_path << "\n";
    } else if (tdiff->parsed()) {
      std::cout << pipeline::stage_train_diffusion(context(common, target)).string() << "\n";
    } else if (gpool->parsed()) {
      std::cout << pipeline::stage_generate_pool(context(common, target), mixing::strategy_from_string(strategy)).string() << "\n";
    } else if (filt->parsed()) {
      std::cout << pipeline::stage_filter(context(common, target), mixing::strategy_from_string(strategy)).string() << "\n";
    } else if (tcls->parsed()) {
      std::optional<mixing::Strategy> a;
      if (!augmented.empty()) a = mixing::strategy_from_string(augmented);
      std::cout << pipeline::stage_train_classifier(context(common, target), a).string() << "\n";
    } else if (eval->parsed()) {
      std::cout << pipeline::stage_evaluate(context(common, target)).dump(2) << "\n";
    } else if (run->parsed()) {
      const auto cfg = load_config(common);
      const auto res = pipeline::run_pipeline(cfg, run_dir(common, cfg), common.force);
      if (res.skipped) std::cout << "all stages complete; nothing to do\n";
      std::cout << pipeline::markdown_table(res.report);
      if (res.failed_records) {
        std::cerr << res.failed_records << " report rows failed\n";
        return 3;
      }
    } else if (ablate->parsed()) {
      const auto cfg = load_config(common);
      std::cout << pipeline::markdown_table(pipeline::ablation_suite(cfg, run_dir(common, cfg), common.force));
    } else if (sweep->parsed()) {
      const auto cfg = load_config(common);
      if (scales.empty()) scales = cfg.sweep_scales;
      const auto res = pipeline::sweep_nl(cfg, run_dir(common, cfg), scales, common.force);
      std::cout << "reference images per class: " << res.reference_per_class << "\n" << pipeline::markdown_table(res.report);
    } else if (report->parsed()) {
      const auto cfg = load_config(common);
      const auto dir = run_dir(common, cfg);
      pipeline::write_summaries(dir);
      std::cout << read_text_file(dir / "reports" / "summary.md");
    } else if (plot->parsed()) {
      const auto cfg = load_config(common);
      pipeline::write_plots(run_dir(common, cfg));
    } else if (show->parsed()) {
      std::cout << load_config(common).to_json().dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
