#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>

#include "fds/checkpoint.hpp"
#include "fds/common.hpp"
#include "fds/run_directory.hpp"
#include "test_util.hpp"

using namespace fds;

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("derive_seed separates streams") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (int t = 0; t < 4; ++t)
      for (int k = 1; k <= 8; ++k) seen.insert(derive_seed(s, t, k));
  CHECK(seen.size() == 4 * 4 * 8);
  CHECK(derive_seed(7, 1, 2) == derive_seed(7, 1, 2));
  CHECK(derive_seed(7, 1, 2) != derive_seed(7, 2, 1));
}

TEST_CASE("float32 little-endian round trip") {
  const std::vector<float> v{0.0f, -1.5f, 3.25e-7f, 1e30f, -0.0f};
  const auto bytes = encode_f32_le(v);
  REQUIRE(bytes.size() == v.size() * 4);
  CHECK(static_cast<unsigned char>(bytes[4]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[7]) == 0xbf);  // -1.5f = 0xbfc00000
  const auto back = decode_f32_le(bytes);
  REQUIRE(back.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::memcmp(&back[i], &v[i], 4) == 0);
  CHECK_THROWS(decode_f32_le(std::span(bytes).first(3)));
}

TEST_CASE("atomic writes leave no temp files") {
  testing::TempDir dir;
  write_file_atomic(dir / "a/b.txt", std::string_view("hello"));
  write_file_atomic(dir / "a/b.txt", std::string_view("world"));
  CHECK(read_text_file(dir / "a/b.txt") == "world");
  int n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir / "a")) ++n;
  CHECK(n == 1);
}

TEST_CASE("checkpoint encode and decode") {
  Checkpoint ck;
  ck.header = {{"kind", "test"}, {"n", 3}};
  ck.add("w", {1.0f, 2.0f, 3.0f});
  ck.add("b", {});
  const auto bytes = ck.encode();
  const auto back = Checkpoint::decode(bytes);
  CHECK(back.header == ck.header);
  CHECK(back.tensor("w") == std::vector<float>{1.0f, 2.0f, 3.0f});
  CHECK(back.has("b"));
  CHECK_FALSE(back.has("c"));
  CHECK(back.encode() == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 2);
  CHECK_THROWS(Checkpoint::decode(truncated));
  auto wrong = bytes;
  wrong[0] = std::byte{'x'};
  CHECK_THROWS(Checkpoint::decode(wrong));
}

TEST_CASE("run directory reuse and integrity") {
  testing::TempDir dir;
  {
    auto rd = RunDirectory::open(dir.path());
    int made = 0;
    auto make = [&] {
      ++made;
      return 42;
    };
    auto save = [&](const int& v) { write_file_atomic(rd.path("x/value.txt"), std::to_string(v)); };
    auto load = [&] { return std::stoi(read_text_file(rd.path("x/value.txt"))); };
    CHECK(rd.cached<int>("x", "h1", {"x/value.txt"}, make, save, load) == 42);
    CHECK(rd.cached<int>("x", "h1", {"x/value.txt"}, make, save, load) == 42);
    CHECK(made == 1);
    CHECK(rd.reused() == 1);
    CHECK_FALSE(rd.fresh("x", "h2"));
    rd.mark_stage("one", "complete");
    CHECK(rd.stage_status("one") == "complete");
  }
  {
    auto rd = RunDirectory::open(dir.path());
    CHECK(rd.fresh("x", "h1"));
    CHECK(rd.stage_status("one") == "complete");
  }
  {
    std::fstream f(dir / "x/value.txt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('7');
  }
  auto reopened = RunDirectory::open(dir.path());
  CHECK_THROWS_AS(reopened.verify_all(), IntegrityError);
  CHECK_THROWS_AS(reopened.fresh("x", "h1"), IntegrityError);
  try {
    reopened.verify_all();
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find("value.txt") != std::string::npos);
  }
  auto forced = RunDirectory::open(dir.path(), true);
  CHECK_FALSE(forced.fresh("x", "h1"));
}

TEST_CASE("missing artifact file is an integrity failure") {
  testing::TempDir dir;
  {
    auto rd = RunDirectory::open(dir.path());
    write_file_atomic(rd.path("y.txt"), std::string_view("y"));
    rd.record("y", "h", {"y.txt"});
  }
  std::filesystem::remove(dir / "y.txt");
  CHECK_THROWS_AS(RunDirectory::open(dir.path()).verify_all(), IntegrityError);
}
