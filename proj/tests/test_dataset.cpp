#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "fds/classifier.hpp"
#include "fds/dataset.hpp"
#include "fds/trainer.hpp"
#include "test_util.hpp"

using namespace fds;
using namespace fds::data;

namespace {

void write_png(const std::filesystem::path& p, int value, bool gray = false) {
  std::filesystem::create_directories(p.parent_path());
  cv::Mat m = gray ? cv::Mat(5, 7, CV_8UC1, cv::Scalar(value)) : cv::Mat(5, 7, CV_8UC3, cv::Scalar(value, 0, 255 - value));
  REQUIRE(cv::imwrite(p.string(), m));
}

void make_tree(const std::filesystem::path& root) {
  for (const char* d : {"beta", "alpha"})
    for (const char* c : {"dog", "cat"})
      for (int i = 0; i < 3; ++i) write_png(root / d / c / ("img" + std::to_string(i) + ".png"), 40 * i, i == 2);
}

std::set<SampleId> as_set(const std::vector<SampleId>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("styled shapes counts and pixel range") {
  const auto ds = make_styled_shapes(3, {"filled", "outline", "inverted"}, 20, 32, 1);
  CHECK(ds.size() == 3 * 3 * 20);
  CHECK(ds.shape() == std::vector<int>{1, 32, 32});
  CHECK(ds.mode() == PayloadMode::image);
  float lo = 1.0f, hi = 0.0f;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (float v : ds.payload(i)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);
  CHECK_NOTHROW(ds.validate());
  for (int d = 0; d < 3; ++d)
    for (int k = 0; k < 3; ++k) CHECK(ds.cell_count(d, k) == 20);
}

TEST_CASE("styled shapes rgb option replicates channels") {
  const auto ds = make_styled_shapes(2, {"filled", "textured"}, 2, 16, 3, {.channels = 3});
  CHECK(ds.payload_dim() == 3 * 16 * 16);
  const auto p = ds.payload(0);
  for (int i = 0; i < 256; ++i) CHECK(p[static_cast<std::size_t>(i)] == p[static_cast<std::size_t>(256 + i)]);
}

TEST_CASE("generators are pure functions of their seed") {
  CHECK(make_styled_shapes(2, {"filled", "outline"}, 5, 16, 9).content_hash() ==
        make_styled_shapes(2, {"filled", "outline"}, 5, 16, 9).content_hash());
  CHECK(make_styled_shapes(2, {"filled", "outline"}, 5, 16, 9).content_hash() !=
        make_styled_shapes(2, {"filled", "outline"}, 5, 16, 10).content_hash());
  CHECK(make_gaussian_domains(3, 2, 10, {}, 4).content_hash() == make_gaussian_domains(3, 2, 10, {}, 4).content_hash());
}

TEST_CASE("generator argument errors") {
  CHECK_THROWS(make_styled_shapes(2, {"sparkly"}, 5, 16, 0));
  CHECK_THROWS(make_styled_shapes(9, {"filled"}, 5, 16, 0));
  CHECK_THROWS(make_styled_shapes(2, {"filled"}, 5, 8, 0));
  CHECK_THROWS(make_gaussian_domains(1, 2, 10, {}, 0));
  DomainGeometry flat;
  flat.class_radius = 0.0;
  flat.domain_shift = {0.0, 0.0};
  flat.domain_rotation = 0.0;
  CHECK_THROWS(make_gaussian_domains(2, 2, 10, flat, 0));
}

TEST_CASE("gaussian cells match their means and covariance") {
  DomainGeometry g;
  const auto ds = make_gaussian_domains(3, 2, 600, g, 11);
  for (int d = 0; d < 3; ++d) {
    for (int k = 0; k < 2; ++k) {
      const auto mu = g.mean(d, k, 2);
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      int n = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.domain_id(i) != d || ds.class_id(i) != k) continue;
        const auto p = ds.payload(i);
        sx += p[0];
        sy += p[1];
        ++n;
      }
      const double mx = sx / n, my = sy / n;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.domain_id(i) != d || ds.class_id(i) != k) continue;
        const auto p = ds.payload(i);
        sxx += (p[0] - mx) * (p[0] - mx);
        syy += (p[1] - my) * (p[1] - my);
        sxy += (p[0] - mx) * (p[1] - my);
      }
      const double s2 = g.sigma * g.sigma;
      const double cxx = sxx / (n - 1), cyy = syy / (n - 1), cxy = sxy / (n - 1);
      const double frob = std::sqrt((cxx - s2) * (cxx - s2) + (cyy - s2) * (cyy - s2) + 2 * cxy * cxy);
      CHECK(frob / (s2 * std::sqrt(2.0)) < 0.25);
      CHECK(std::abs(mx - mu[0]) < 0.05);
      CHECK(std::abs(my - mu[1]) < 0.05);
    }
  }
}

TEST_CASE("dataset save and load round trip") {
  testing::TempDir dir;
  const auto ds = make_styled_shapes(2, {"filled", "outline"}, 4, 16, 2);
  ds.save(dir / "ds");
  const auto back = MultiDomainDataset::load(dir / "ds");
  CHECK(back.content_hash() == ds.content_hash());
  CHECK(back.domain_names() == ds.domain_names());
  CHECK(back.class_names() == ds.class_names());
  const auto meta = nlohmann::json::parse(read_text_file(dir / "ds/meta.json"));
  CHECK(meta.at("version") == "fds-dataset-v1");
  CHECK(std::filesystem::file_size(dir / "ds/payloads.bin") == ds.size() * 256 * 4);

  std::filesystem::resize_file(dir / "ds/payloads.bin", ds.size() * 256 * 4 - 4);
  CHECK_THROWS_AS(MultiDomainDataset::load(dir / "ds"), IntegrityError);
}

TEST_CASE("dataset rejects malformed samples") {
  MultiDomainDataset ds(PayloadMode::point, {2}, {"a", "b"}, {"x", "y"});
  const float p[2] = {0, 1};
  ds.add(p, 0, 0, 5);
  CHECK_THROWS(ds.add(p, 0, 0, 5));
  CHECK_THROWS(ds.add(p, 2, 0, 6));
  CHECK_THROWS(ds.add(p, 0, 3, 6));
  const float q[3] = {0, 1, 2};
  CHECK_THROWS(ds.add(q, 0, 0, 7));
  CHECK_THROWS(ds.validate());
  CHECK_NOTHROW(ds.validate(false));
}

TEST_CASE("ingest image folder") {
  testing::TempDir dir;
  make_tree(dir / "tree");
  const auto ds = ingest_image_folder(dir / "tree", 8);
  CHECK(ds.n_domains() == 2);
  CHECK(ds.n_classes() == 2);
  CHECK(ds.size() == 12);
  CHECK(ds.domain_names() == std::vector<std::string>{"alpha", "beta"});
  CHECK(ds.class_names() == std::vector<std::string>{"cat", "dog"});
  CHECK(ds.shape() == std::vector<int>{3, 8, 8});
  // img1: BGR (40, 0, 215) -> R channel first.
  const auto p = ds.payload(1);
  CHECK(p[0] == doctest::Approx(215.0 / 255.0).epsilon(1e-6));
  CHECK(p[64] == doctest::Approx(0.0));
  CHECK(p[128] == doctest::Approx(40.0 / 255.0).epsilon(1e-6));
  // img2 is grayscale and is promoted to three equal channels.
  const auto g = ds.payload(2);
  CHECK(g[0] == g[64]);
  CHECK(g[0] == g[128]);
  CHECK(ingest_image_folder(dir / "tree", 8).content_hash() == ds.content_hash());
}

TEST_CASE("ingest rejects mismatched class sets and unreadable files") {
  testing::TempDir dir;
  write_png(dir / "t/d1/a/0.png", 1);
  write_png(dir / "t/d1/b/0.png", 1);
  write_png(dir / "t/d2/a/0.png", 1);
  write_png(dir / "t/d2/c/0.png", 1);
  try {
    ingest_image_folder(dir / "t", 8);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("d2") != std::string::npos);
  }
  std::filesystem::remove_all(dir / "t/d2/c");
  write_png(dir / "t/d2/b/0.png", 1);
  { std::ofstream(dir / "t/d2/b/1.png") << "not an image"; }
  try {
    ingest_image_folder(dir / "t", 8);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("1.png") != std::string::npos);
  }
}

TEST_CASE("leave-one-out split") {
  MultiDomainDataset ds(PayloadMode::point, {2}, {"Art", "Cartoon", "Photo", "Sketch"}, {"a", "b"});
  SampleId id = 0;
  const float p[2] = {0, 0};
  for (int d = 0; d < 4; ++d)
    for (int k = 0; k < 2; ++k)
      for (int r = 0; r < 167; ++r) ds.add(p, k, d, id++);
  const auto s = leave_one_out_split(ds, 3, 0.2, 5);
  CHECK(s.test_ids == ds.ids_in_domain(3));
  for (auto i : s.train_ids) CHECK(ds.domain_of(i) != 3);
  for (auto i : s.val_ids) CHECK(ds.domain_of(i) != 3);
  const double non_target = 3 * 2 * 167;
  CHECK(std::abs(static_cast<double>(s.val_ids.size()) - 0.2 * non_target) <= 6);
  std::set<SampleId> all = as_set(s.train_ids);
  for (auto i : s.val_ids) CHECK(all.insert(i).second);
  for (auto i : s.test_ids) CHECK(all.insert(i).second);
  CHECK(all.size() == ds.size());
  CHECK(leave_one_out_split(ds, 3, 0.2, 5).val_ids == s.val_ids);
  CHECK(leave_one_out_split(ds, 3, 0.2, 6).val_ids != s.val_ids);
  CHECK_THROWS(leave_one_out_split(ds, 4, 0.2, 5));
  CHECK_THROWS(leave_one_out_split(ds, 0, 1.0, 5));

  MultiDomainDataset single(PayloadMode::point, {2}, {"only"}, {"a"});
  single.add(p, 0, 0, 0);
  CHECK_THROWS(leave_one_out_split(single, 0, 0.2, 0));
}

TEST_CASE("oracle and in-domain splits") {
  const auto ds = make_gaussian_domains(3, 2, 50, {}, 3);
  const auto o = oracle_split(ds, 1, 0.2, 0);
  for (auto i : o.val_ids) CHECK(ds.domain_of(i) == 1);
  for (auto i : o.test_ids) CHECK(ds.domain_of(i) == 1);
  for (auto i : o.train_ids) CHECK(ds.domain_of(i) != 1);
  CHECK(o.val_ids.size() == 20);
  CHECK(o.mode == "oracle");

  const auto in = in_domain_split(ds, 2, 0.2, 0.2, 0);
  CHECK(in.mode == "in_domain");
  CHECK(in.test_ids.size() == 40);
  for (const auto* v : {&in.train_ids, &in.val_ids, &in.test_ids})
    for (auto i : *v) CHECK(ds.domain_of(i) != 2);
  CHECK_NOTHROW(in.check_disjoint());
}

TEST_CASE("split json round trip and leakage guard") {
  const auto ds = make_gaussian_domains(2, 2, 10, {}, 3);
  const auto s = leave_one_out_split(ds, 0, 0.3, 1);
  CHECK(SplitPlan::from_json(s.to_json()).to_json() == s.to_json());
  CHECK_THROWS_AS(assert_no_domain(ds, s.test_ids, 0, "train"), LeakageError);
  CHECK_NOTHROW(assert_no_domain(ds, s.train_ids, 0, "train"));
  SplitPlan bad = s;
  bad.val_ids.push_back(bad.train_ids.front());
  CHECK_THROWS_AS(bad.check_disjoint(), LeakageError);
}

TEST_CASE("without_domain keeps ids and the domain list") {
  const auto ds = make_gaussian_domains(3, 2, 5, {}, 3);
  const auto w = ds.without_domain(1);
  CHECK(w.n_domains() == 3);
  CHECK(w.size() == 20);
  CHECK(w.ids_in_domain(1).empty());
  CHECK(w.ids_in_domain(2) == ds.ids_in_domain(2));
}

TEST_CASE("shapes are learnable in-domain") {
  const auto ds = make_styled_shapes(3, {"filled", "outline", "inverted"}, 60, 16, 1);
  SplitPlan plan;
  std::vector<std::vector<SampleId>> by_cell(9);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.domain_id(i) != 2) by_cell[ds.domain_id(i) * 3 + ds.class_id(i)].push_back(ds.sample_id(i));
  for (auto& c : by_cell)
    for (std::size_t r = 0; r < c.size(); ++r)
      (r % 5 == 0 ? plan.test_ids : r % 5 == 1 ? plan.val_ids : plan.train_ids).push_back(c[r]);
  plan.mode = "in_domain";
  plan.target_domain = 2;
  trainer::TrainConfig cfg;
  cfg.classifier.architecture = "conv";
  cfg.steps = 600;
  cfg.checkpoint_every = 100;
  const auto res = trainer::train_erm(ds, plan, cfg, 0);
  CHECK(trainer::evaluate(res.model, ds, plan.test_ids) >= 0.95);
}
