#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dswp/checkpoint.hpp"
#include "dswp/rng.hpp"

using namespace dswp;

TEST_CASE("philox4x32-10 matches the published known-answer vectors") {
  // Random123 kat_vectors, philox4x32 with 10 rounds.
  auto r1 = Philox::block({0, 0, 0, 0}, {0, 0});
  CHECK(r1[0] == 0x6627e8d5u);
  CHECK(r1[1] == 0xe169c58du);
  CHECK(r1[2] == 0xbc57ac4cu);
  CHECK(r1[3] == 0x9b00dbd8u);

  auto r2 = Philox::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                          {0xffffffffu, 0xffffffffu});
  CHECK(r2[0] == 0x408f276du);
  CHECK(r2[1] == 0x41c83b0eu);
  CHECK(r2[2] == 0xa20bc7c6u);
  CHECK(r2[3] == 0x6d5451fdu);

  auto r3 = Philox::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                          {0xa4093822u, 0x299f31d0u});
  CHECK(r3[0] == 0xd16cfe09u);
  CHECK(r3[1] == 0x94fdccebu);
  CHECK(r3[2] == 0x5001e420u);
  CHECK(r3[3] == 0x24126ea1u);
}

TEST_CASE("streams are deterministic and independent") {
  Philox a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());

  Philox c(42, 1);
  Philox d(43);
  bool differs_stream = false, differs_seed = false;
  Philox a2(42);
  for (int i = 0; i < 16; ++i) {
    uint32_t base = a2.next_u32();
    differs_stream |= c.next_u32() != base;
    differs_seed |= d.next_u32() != base;
  }
  CHECK(differs_stream);
  CHECK(differs_seed);
}

TEST_CASE("uniform and normal draws look right") {
  Philox rng(7);
  double sum = 0, sumsq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sumsq += u * u;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean - 0.5) < 0.005);
  CHECK(std::abs(var - 1.0 / 12.0) < 0.003);

  Philox rng2(8);
  sum = sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double z = rng2.normal();
    sum += z;
    sumsq += z * z;
  }
  mean = sum / n;
  var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("derive_seed is deterministic and spreads") {
  CHECK(Philox::derive_seed(5, 0) == Philox::derive_seed(5, 0));
  CHECK(Philox::derive_seed(5, 0) != Philox::derive_seed(5, 1));
  CHECK(Philox::derive_seed(5, 0) != Philox::derive_seed(6, 0));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "dswp_ck_test.dswp").string();

  Philox rng(99);
  Checkpoint ck;
  Tensor a = Tensor::randn({3, 5, 7}, rng);
  Tensor b = Tensor::randn({2}, rng);
  Tensor c = Tensor::from({1}, {-0.0f});  // negative zero must survive
  ck.add("weights/conv.w", a);
  ck.add("weights/conv.b", b);
  ck.add("odd", c);
  ck.save(path);

  Checkpoint back = Checkpoint::load(path);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[0].first == "weights/conv.w");
  CHECK(back.fetch("weights/conv.w", {3, 5, 7}).vec() == a.vec());
  CHECK(back.fetch("weights/conv.b", {2}).vec() == b.vec());
  CHECK(std::signbit(back.fetch("odd", {1}).item()));

  CHECK_THROWS_AS(back.fetch("missing", {1}), Error);
  CHECK_THROWS_AS(back.fetch("odd", {2}), Error);
  fs::remove(path);
}

TEST_CASE("checkpoint rejects non-DSWP files") {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "dswp_bad.dswp").string();
  FILE* f = std::fopen(path.c_str(), "wb");
  std::fputs("PNG!not a checkpoint", f);
  std::fclose(f);
  CHECK_THROWS_WITH_AS(Checkpoint::load(path), doctest::Contains("not a DSWP file"), Error);
  CHECK_THROWS_AS(Checkpoint::load("/nonexistent/nope.dswp"), Error);
  fs::remove(path);
}
