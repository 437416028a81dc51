#include "dswp/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

namespace dswp {

namespace {
constexpr char kMagic[4] = {'D', 'S', 'W', 'P'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts need byte swaps");

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_bytes(FILE* f, const void* p, size_t n, const std::string& path) {
  require(std::fwrite(p, 1, n, f) == n, "checkpoint: short write to ", path);
}

void read_bytes(FILE* f, void* p, size_t n, const std::string& path) {
  require(std::fread(p, 1, n, f) == n, "checkpoint: unexpected end of file in ", path);
}

void write_u32(FILE* f, uint32_t v, const std::string& path) { write_bytes(f, &v, 4, path); }

uint32_t read_u32(FILE* f, const std::string& path) {
  uint32_t v = 0;
  read_bytes(f, &v, 4, path);
  return v;
}
}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
  require(t.defined(), "checkpoint: undefined tensor for entry '", name, "'");
  entries.emplace_back(name, t);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

Tensor Checkpoint::fetch(const std::string& name, const Shape& expect) const {
  const Tensor* t = find(name);
  require(t != nullptr, "checkpoint: missing entry '", name, "'");
  require(t->shape() == expect, "checkpoint: entry '", name, "' has shape ",
          shape_str(t->shape()), ", expected ", shape_str(expect));
  return *t;
}

void Checkpoint::save(const std::string& path) const {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, "checkpoint: cannot open ", path, " for writing");
  write_bytes(f.get(), kMagic, 4, path);
  write_u32(f.get(), kVersion, path);
  write_u32(f.get(), static_cast<uint32_t>(entries.size()), path);
  for (const auto& [name, t] : entries) {
    write_u32(f.get(), static_cast<uint32_t>(name.size()), path);
    write_bytes(f.get(), name.data(), name.size(), path);
    write_u32(f.get(), static_cast<uint32_t>(t.shape().size()), path);
    for (int d : t.shape()) write_u32(f.get(), static_cast<uint32_t>(d), path);
    write_bytes(f.get(), t.data(), t.vec().size() * sizeof(float), path);
  }
  require(std::fflush(f.get()) == 0, "checkpoint: flush failed for ", path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, "checkpoint: cannot open ", path);
  char magic[4];
  read_bytes(f.get(), magic, 4, path);
  require(std::memcmp(magic, kMagic, 4) == 0, "checkpoint: ", path, " is not a DSWP file");
  uint32_t version = read_u32(f.get(), path);
  require(version == kVersion, "checkpoint: ", path, " has format version ", version,
          ", expected ", kVersion);
  uint32_t count = read_u32(f.get(), path);
  Checkpoint ck;
  ck.entries.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    uint32_t name_len = read_u32(f.get(), path);
    std::string name(name_len, '\0');
    read_bytes(f.get(), name.data(), name_len, path);
    uint32_t rank = read_u32(f.get(), path);
    require(rank >= 1 && rank <= 8, "checkpoint: entry '", name, "' has implausible rank ", rank);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = read_u32(f.get(), path);
      require(d >= 1, "checkpoint: entry '", name, "' has zero dimension");
      shape[i] = static_cast<int>(d);
    }
    std::vector<float> payload(numel_of(shape));
    read_bytes(f.get(), payload.data(), payload.size() * sizeof(float), path);
    ck.entries.emplace_back(std::move(name), Tensor::from(shape, std::move(payload)));
  }
  return ck;
}

}  // namespace dswp
