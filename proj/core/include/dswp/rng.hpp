#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace dswp {

/// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
/// numbers: as easy as 1, 2, 3"). A stream is (seed, stream-id); draws consume
/// the 128-bit counter in increments of one block (4 x u32). Counter-based
/// means any draw is a pure function of (key, counter), so independent streams
/// never share state and replay is exact.
class Philox {
 public:
  explicit Philox(uint64_t seed, uint64_t stream = 0);

  uint32_t next_u32();
  /// Uniform on [0,1), 53-bit resolution internally, returned as double.
  double uniform();
  /// Standard normal via Box-Muller; pairs are generated together and the
  /// second value is cached, so draw order is documented and exact.
  float normal();
  void fill_normal(std::span<float> out);
  void fill_uniform(std::span<float> out);

  /// One raw 4-word block for key=(seed lo32, seed hi32) at a given counter.
  static std::array<uint32_t, 4> block(const std::array<uint32_t, 4>& counter,
                                       const std::array<uint32_t, 2>& key);

  /// Derive a child seed (e.g. per-pair or per-model) from a base seed and an
  /// index, itself a Philox draw so children are decorrelated.
  static uint64_t derive_seed(uint64_t base, uint64_t index);

 private:
  void refill();

  std::array<uint32_t, 2> key_;
  std::array<uint32_t, 4> ctr_;
  std::array<uint32_t, 4> buf_;
  int buf_pos_ = 4;
  bool has_cached_normal_ = false;
  float cached_normal_ = 0.0f;
};

}  // namespace dswp
