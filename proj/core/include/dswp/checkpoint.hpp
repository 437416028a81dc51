#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dswp/tensor.hpp"

namespace dswp {

/// Named tensors in the "DSWP" container: magic "DSWP", version u32, count
/// u32, then per entry {name_len u32, name bytes, rank u32, dims u32 x rank,
/// payload little-endian f32}. Round-trips bit-exactly.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> entries;

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;
  /// Errors if the name is missing or the stored shape differs.
  Tensor fetch(const std::string& name, const Shape& expect) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace dswp
