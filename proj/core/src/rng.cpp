#include "dswp/rng.hpp"

#include <cmath>

namespace dswp {

namespace {
constexpr uint32_t kMul0 = 0xD2511F53u;
constexpr uint32_t kMul1 = 0xCD9E8D57u;
constexpr uint32_t kWeyl0 = 0x9E3779B9u;
constexpr uint32_t kWeyl1 = 0xBB67AE85u;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

Philox::Philox(uint64_t seed, uint64_t stream) {
  key_ = {static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
  ctr_ = {0, 0, static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
}

std::array<uint32_t, 4> Philox::block(const std::array<uint32_t, 4>& counter,
                                      const std::array<uint32_t, 2>& key) {
  std::array<uint32_t, 4> c = counter;
  std::array<uint32_t, 2> k = key;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      k[0] += kWeyl0;
      k[1] += kWeyl1;
    }
    uint64_t p0 = static_cast<uint64_t>(kMul0) * c[0];
    uint64_t p1 = static_cast<uint64_t>(kMul1) * c[2];
    uint32_t lo0 = static_cast<uint32_t>(p0), hi0 = static_cast<uint32_t>(p0 >> 32);
    uint32_t lo1 = static_cast<uint32_t>(p1), hi1 = static_cast<uint32_t>(p1 >> 32);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
  return c;
}

void Philox::refill() {
  buf_ = block(ctr_, key_);
  buf_pos_ = 0;
  // 128-bit counter increment; words 2..3 carry the stream id and only move
  // on overflow, which cannot happen at desk scale but is handled anyway.
  for (int i = 0; i < 4; ++i) {
    if (++ctr_[i] != 0) break;
  }
}

uint32_t Philox::next_u32() {
  if (buf_pos_ >= 4) refill();
  return buf_[buf_pos_++];
}

double Philox::uniform() {
  return static_cast<double>(next_u32()) * 0x1.0p-32;
}

float Philox::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  // u1 in (0,1] so log() is finite; u2 in [0,1).
  double u1 = (static_cast<double>(next_u32()) + 1.0) * 0x1.0p-32;
  double u2 = static_cast<double>(next_u32()) * 0x1.0p-32;
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = kTwoPi * u2;
  cached_normal_ = static_cast<float>(r * std::sin(a));
  has_cached_normal_ = true;
  return static_cast<float>(r * std::cos(a));
}

void Philox::fill_normal(std::span<float> out) {
  for (float& v : out) v = normal();
}

void Philox::fill_uniform(std::span<float> out) {
  for (float& v : out) v = static_cast<float>(uniform());
}

uint64_t Philox::derive_seed(uint64_t base, uint64_t index) {
  std::array<uint32_t, 4> ctr = {static_cast<uint32_t>(index),
                                 static_cast<uint32_t>(index >> 32), 0x5eedu, 0};
  std::array<uint32_t, 2> key = {static_cast<uint32_t>(base),
                                 static_cast<uint32_t>(base >> 32)};
  auto b = block(ctr, key);
  return (static_cast<uint64_t>(b[1]) << 32) | b[0];
}

}  // namespace dswp
