#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "fds/pipeline.hpp"
#include "test_util.hpp"

using namespace fds;

namespace {

struct Invocation {
  int code = -1;
  std::string output;
};

Invocation cli(const std::string& args) {
  const std::string cmd = std::string(FDS_CLI_PATH) + " " + args + " 2>&1";
  Invocation r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const char* kSmallConfig = R"({
  "dataset": {"kind": "gaussian", "per_cell": 60},
  "diffusion": {"steps": 300, "batch_size": 64,
                "denoiser": {"embed_dim": 4, "time_dim": 8, "cond_width": 8, "hidden": 16, "depth": 1}},
  "mix": {"ddim_steps": 10, "mix_step": [3, 8], "per_cell_target": 10},
  "filter": {"n_l_scale": 0.1},
  "split": {"targets": ["domain2"]},
  "trainer": {"steps": 200, "checkpoint_every": 25, "seeds": [0],
              "classifier": {"architecture": "mlp", "hidden": 16, "penultimate": 8}}
})";

std::filesystem::path write_config(const testing::TempDir& dir, const std::string& text, const std::string& name = "cfg.json") {
  const auto p = dir / name;
  write_file_atomic(p, text);
  return p;
}

void flip_byte(const std::filesystem::path& p, std::size_t at) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  REQUIRE(f);
  f.seekg(static_cast<std::streamoff>(at));
  char c = 0;
  f.get(c);
  f.seekp(static_cast<std::streamoff>(at));
  f.put(static_cast<char>(c ^ 0x01));
}

}  // namespace

TEST_CASE("cli rejects bad invocations with exit code 2") {
  testing::TempDir dir;
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("config --preset point").code == 0);
  CHECK(cli("config --preset galaxy").code == 2);

  const auto unknown = write_config(dir, R"({"dataset": {"kind": "gaussian", "colour": 3}})");
  const auto r = cli("config --config " + unknown.string());
  CHECK(r.code == 2);
  CHECK(r.output.find("colour") != std::string::npos);

  const auto range = write_config(dir, R"({"split": {"val_fraction": 1.5}})", "range.json");
  CHECK(cli("config --config " + range.string()).code == 2);
  const auto broken = write_config(dir, "{\"dataset\": ", "broken.json");
  CHECK(cli("config --config " + broken.string()).code == 2);
  CHECK(cli("run --config " + write_config(dir, kSmallConfig).string()).code == 2);  // no run directory
}

TEST_CASE("config parsing is strict and round trips") {
  const auto cfg = RunConfig::from_json(nlohmann::json::parse(kSmallConfig));
  CHECK(RunConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK(cfg.experiment.trainer.steps == 200);
  auto j = cfg.to_json();
  j["trainer"]["methods"] = {"erm", "dropout"};
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j = cfg.to_json();
  j["extra"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
}

TEST_CASE("run, rerun and integrity") {
  testing::TempDir dir;
  const auto cfg = write_config(dir, kSmallConfig);
  const auto run = dir / "run";
  const std::string args = "run --config " + cfg.string() + " --run-dir " + run.string();

  const auto first = cli(args);
  REQUIRE(first.code == 0);
  const auto csv = read_text_file(run / "reports/report.csv");
  CHECK(csv.rfind("method,target_domain,seed,split_mode,accuracy\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(std::filesystem::exists(run / "reports/summary.md"));
  CHECK(std::filesystem::exists(run / "manifest.json"));

  const auto again = cli(args);
  CHECK(again.code == 0);
  CHECK(again.output.find("nothing to do") != std::string::npos);
  CHECK(read_text_file(run / "reports/report.csv") == csv);

  const auto other = dir / "other";
  CHECK(cli("run --config " + cfg.string() + " --run-dir " + other.string()).code == 0);
  CHECK(read_text_file(other / "reports/report.csv") == csv);

  flip_byte(run / "diffusion/standard/domain2/seed0/model.ckpt", 100);
  const auto tampered = cli(args);
  CHECK(tampered.code == 4);
  CHECK(tampered.output.find("model.ckpt") != std::string::npos);

  const auto forced = cli(args + " --force");
  CHECK(forced.code == 0);
  CHECK(read_text_file(run / "reports/report.csv") == csv);
  CHECK(cli(args).code == 0);
}

TEST_CASE("single stages through the cli") {
  testing::TempDir dir;
  const auto cfg = write_config(dir, kSmallConfig);
  const std::string common = " --config " + cfg.string() + " --run-dir " + (dir / "run").string();
  const auto g = cli("gen-data" + common);
  CHECK(g.code == 0);
  CHECK(g.output.find("360 samples, 3 domains, 2 classes") != std::string::npos);
  CHECK(cli("train-diffusion --target domain2" + common).code == 0);
  CHECK(cli("generate-pool --target domain2 --strategy noise_level" + common).code == 0);
  const auto early = cli("filter --target domain2 --strategy noise_level" + common);
  CHECK(early.code == 3);
  CHECK(early.output.find("train-classifier") != std::string::npos);
  CHECK(cli("train-classifier --target domain2" + common).code == 0);
  CHECK(cli("filter --target domain2 --strategy noise_level" + common).code == 0);
  CHECK(cli("train-classifier --target domain2 --augmented noise_level" + common).code == 0);
  const auto e = cli("evaluate --target domain2" + common);
  CHECK(e.code == 0);
  CHECK(e.output.find("accuracy") != std::string::npos);
  CHECK(cli("train-diffusion --target nowhere" + common).code == 2);
  CHECK(cli("generate-pool --target domain2 --strategy sideways" + common).code == 2);
}

TEST_CASE("reference count per class") {
  const auto ds = data::make_gaussian_domains(3, 2, 50, {}, 1);
  const auto split = data::leave_one_out_split(ds, 0, 0.2, 0);
  CHECK(pipeline::reference_per_class(ds, split) == doctest::Approx(40.0));
}
