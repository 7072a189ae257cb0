#include <doctest.h>

#include <cmath>

#include "fds/experiment.hpp"
#include "test_util.hpp"

using namespace fds;
using namespace fds::trainer;

namespace {

TrainRun ring_of(std::vector<double> val) {
  TrainRun run;
  for (std::size_t i = 0; i < val.size(); ++i)
    run.ring.push_back(RingCheckpoint{static_cast<int>(10 * (i + 1)), val[i], {static_cast<float>(i)}});
  return run;
}

ReportRecord rec(const std::string& method, const std::string& domain, std::uint64_t seed, std::optional<double> acc) {
  ReportRecord r;
  r.method = method;
  r.target_domain = domain;
  r.seed = seed;
  r.accuracy = acc;
  return r;
}

experiment::ExperimentConfig small_config() {
  experiment::ExperimentConfig c;
  c.seeds = {0};
  c.targets = {2};
  c.diffusion.steps = 300;
  c.diffusion.batch_size = 64;
  c.diffusion.denoiser = diffusion::DenoiserConfig{2, 8, 8, 16, 32, 1};
  c.mix.ddim_steps = 8;
  c.per_cell_target = 12;
  c.trainer.steps = 150;
  c.trainer.checkpoint_every = 25;
  c.methods = experiment::standard_methods({"erm", "erm+fds", "swad", "swad+fds", "basic", "interpolation"}, c);
  return c;
}

}  // namespace

TEST_CASE("swad window bounds") {
  const WindowPolicy p{0.005, 0.005};
  auto w = swad_window(ring_of({0.5, 0.7, 0.808, 0.81, 0.807, 0.6, 0.81}), p);
  CHECK(w.start_index == 2);
  CHECK(w.end_index == 4);
  CHECK(w.start_step == 30);
  CHECK(w.end_step == 50);
  CHECK_FALSE(w.fallback);
  w = swad_window(ring_of({0.9}), p);
  CHECK(w.start_index == 0);
  CHECK(w.end_index == 0);
  CHECK(swad_window(TrainRun{}, p).fallback);
}

TEST_CASE("averaging equal checkpoints is the identity") {
  Classifier h(ClassifierConfig{}, data::PayloadMode::point, {2}, 3, 4);
  const auto w = h.weights();
  TrainRun run;
  for (int i = 0; i < 5; ++i) run.ring.push_back(RingCheckpoint{i, 0.5, w});
  const auto avg = average_weights(std::vector<std::vector<float>>(4, w));
  CHECK(avg == w);
  Classifier out = swad_average(run, h, WindowPolicy{});
  CHECK(out.weights() == w);
  CHECK(average_weights(std::vector<std::vector<float>>{{1.0f, 2.0f}, {3.0f, 6.0f}}) == std::vector<float>{2.0f, 4.0f});
  CHECK_THROWS(average_weights(std::vector<std::vector<float>>{{1.0f}, {1.0f, 2.0f}}));
  CHECK_THROWS(average_weights(std::vector<std::vector<float>>{}));
}

TEST_CASE("report aggregates and csv") {
  RunReport r;
  r.add(rec("erm", "a", 0, 0.5));
  r.add(rec("erm", "a", 1, 0.7));
  r.add(rec("erm", "b", 0, 0.9));
  r.add(rec("erm", "b", 1, 0.9));
  r.add(rec("x,y", "\"q\"", 0, std::nullopt));
  const auto a = r.cell("erm", "a");
  REQUIRE(a);
  CHECK(a->mean == doctest::Approx(0.6));
  CHECK(a->count == 2);
  CHECK(*a->std == doctest::Approx(std::sqrt(0.02)));
  const auto o = r.overall("erm");
  REQUIRE(o);
  CHECK(o->mean == doctest::Approx(0.75));
  CHECK(*o->std == doctest::Approx(std::sqrt(0.005)));
  CHECK_FALSE(r.cell("x,y", "\"q\""));
  const auto csv = r.to_csv();
  CHECK(csv.rfind("method,target_domain,seed,split_mode,accuracy\n", 0) == 0);
  CHECK(csv.find("erm,a,1,standard,0.700000\n") != std::string::npos);
  CHECK(csv.find("\"x,y\",\"\"\"q\"\"\",0,standard,failed\n") != std::string::npos);
  CHECK(RunReport::from_json(r.to_json()).to_csv() == csv);
  auto other = rec("erm", "a", 2, 0.1);
  other.split_mode = "oracle";
  CHECK_THROWS(r.add(other));
  const auto single = mean_std(std::vector<double>{0.4});
  CHECK_FALSE(single.std);
}

TEST_CASE("standard method mapping") {
  experiment::ExperimentConfig c;
  using experiment::standard_method;
  CHECK_FALSE(standard_method("erm", c).augment);
  CHECK(standard_method("swad", c).base == "swad");
  const auto f = standard_method("erm+fds", c);
  CHECK(f.augment);
  CHECK(f.filter == filter::FilterMode::entropy_plus_reject);
  CHECK(f.strategy == c.mix.strategy);
  const auto b = standard_method("basic", c);
  CHECK(b.strategy == mixing::Strategy::pure);
  CHECK(b.filter == filter::FilterMode::none);
  CHECK(standard_method("interpolation", c).filter == filter::FilterMode::none);
  CHECK(standard_method("entropy_only", c).filter == filter::FilterMode::entropy_only);
  CHECK(standard_method("noise_level", c).strategy == mixing::Strategy::noise_level);
  c.tier = "basic";
  CHECK(standard_method("swad+fds", c).strategy == mixing::Strategy::pure);
  CHECK_THROWS_AS(standard_method("mixup", c), ConfigError);
  const auto round = experiment::MethodSpec::from_json(f.to_json());
  CHECK(round.to_json() == f.to_json());
}

TEST_CASE("leave-one-out experiment on the point benchmark") {
  const auto ds = data::make_gaussian_domains(3, 2, 60, {}, 1);
  const auto cfg = small_config();
  std::vector<std::string> stages;
  experiment::StageHooks hooks;
  hooks.on_stage = [&](const std::string& s, int target, std::uint64_t) {
    CHECK(target == 2);
    stages.push_back(s);
  };
  const auto res = experiment::leave_one_out_experiment(ds, cfg, nullptr, hooks);
  REQUIRE(res.cells.size() == 1);
  CHECK(res.cells[0].error.empty());
  CHECK(res.cells[0].accuracy.size() == 6);
  CHECK(res.report.records().size() == 6);
  for (const auto& r : res.report.records()) {
    REQUIRE(r.accuracy);
    CHECK(*r.accuracy >= 0.0);
    CHECK(*r.accuracy <= 1.0);
    CHECK(r.target_domain == "domain2");
  }
  CHECK_FALSE(stages.empty());

  testing::TempDir dir;
  auto rd = RunDirectory::open(dir.path());
  const auto a = experiment::leave_one_out_experiment(ds, cfg, &rd);
  const auto b = experiment::leave_one_out_experiment(ds, cfg, &rd);
  CHECK(a.report.to_csv() == b.report.to_csv());
  CHECK(a.report.to_csv() == res.report.to_csv());
}

TEST_CASE("in-domain experiment labels cells by source set") {
  const auto ds = data::make_gaussian_domains(3, 2, 40, {}, 2);
  auto cfg = small_config();
  cfg.methods = experiment::standard_methods({"erm", "erm+fds"}, cfg);
  CHECK(experiment::source_set_label(ds, 2) == "domain0,domain1");
  auto named = data::MultiDomainDataset(data::PayloadMode::point, {2}, {"cartoon", "photo", "sketch"}, {"a", "b"});
  CHECK(experiment::source_set_label(named, 1) == "C,S");
  const auto res = experiment::in_domain_experiment(ds, cfg);
  REQUIRE(res.cells.size() == 1);
  CHECK(res.cells[0].split_mode == "in_domain");
  CHECK(res.report.split_mode() == "in_domain");
}

TEST_CASE("experiment config validation") {
  auto c = small_config();
  c.val_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
