#include "dswp/image.hpp"

#include <png.h>

#include <cmath>
#include <cstring>

namespace dswp {

namespace {
uint8_t quantize(float v) {
  float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

std::vector<uint8_t> read_rgb_bytes(const std::string& path, int& h, int& w) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&image, path.c_str()) != 0, "png: cannot read ", path,
          ": ", image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    fail("png: failed to decode ", path, ": ", msg);
  }
  h = static_cast<int>(image.height);
  w = static_cast<int>(image.width);
  return buf;
}

void write_rgb_bytes(const std::string& path, const std::vector<uint8_t>& rgb, int h, int w) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  require(png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr) != 0,
          "png: cannot write ", path, ": ", image.message);
}
}  // namespace

Tensor load_png_rgb(const std::string& path) {
  int h = 0, w = 0;
  auto buf = read_rgb_bytes(path, h, w);
  std::vector<float> out(static_cast<size_t>(3) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<size_t>(c) * h + y) * w + x] =
            buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0f;
  return Tensor::from({3, h, w}, std::move(out));
}

void save_png_rgb(const std::string& path, const Tensor& img) {
  require(img.shape().size() == 3 && img.shape()[0] == 3, "png: image must be [3,H,W], got ",
          shape_str(img.shape()));
  int h = img.shape()[1], w = img.shape()[2];
  std::vector<uint8_t> buf(static_cast<size_t>(3) * h * w);
  const float* p = img.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        buf[(static_cast<size_t>(y) * w + x) * 3 + c] =
            quantize(p[(static_cast<size_t>(c) * h + y) * w + x]);
  write_rgb_bytes(path, buf, h, w);
}

Tensor load_png_mask(const std::string& path) {
  int h = 0, w = 0;
  auto buf = read_rgb_bytes(path, h, w);
  std::vector<float> out(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < out.size(); ++i) out[i] = buf[i * 3] > 127 ? 1.0f : 0.0f;
  return Tensor::from({1, h, w}, std::move(out));
}

void save_png_mask(const std::string& path, const Tensor& mask) {
  require(mask.shape().size() == 3 && mask.shape()[0] == 1, "png: mask must be [1,H,W], got ",
          shape_str(mask.shape()));
  int h = mask.shape()[1], w = mask.shape()[2];
  // Round-trip through gray PNG must be exact, so only 0/255 is allowed.
  std::vector<uint8_t> buf(static_cast<size_t>(h) * w);
  const float* p = mask.data();
  for (size_t i = 0; i < buf.size(); ++i) {
    require(p[i] == 0.0f || p[i] == 1.0f, "png: mask is not binary at pixel ", i, " (value ",
            p[i], ")");
    buf[i] = p[i] == 1.0f ? 255 : 0;
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_GRAY;
  require(png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr) != 0,
          "png: cannot write ", path, ": ", image.message);
}

void save_png_indexed(const std::string& path, const LabelMap& map,
                      const std::vector<Rgb8>& palette) {
  require(!palette.empty() && palette.size() <= 256, "png: palette size ", palette.size(),
          " out of range");
  for (uint8_t l : map.labels)
    require(l < palette.size(), "png: label ", int(l), " has no palette entry");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(map.w);
  image.height = static_cast<png_uint_32>(map.h);
  image.format = PNG_FORMAT_RGB_COLORMAP;
  image.colormap_entries = static_cast<png_uint_32>(palette.size());
  std::vector<uint8_t> cmap(palette.size() * 3);
  for (size_t i = 0; i < palette.size(); ++i)
    for (int c = 0; c < 3; ++c) cmap[i * 3 + c] = palette[i][c];
  require(png_image_write_to_file(&image, path.c_str(), 0, map.labels.data(), 0, cmap.data()) != 0,
          "png: cannot write ", path, ": ", image.message);
}

LabelMap load_png_indexed(const std::string& path, const std::vector<Rgb8>& palette) {
  int h = 0, w = 0;
  auto buf = read_rgb_bytes(path, h, w);
  LabelMap map;
  map.h = h;
  map.w = w;
  map.labels.resize(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < map.labels.size(); ++i) {
    Rgb8 px = {buf[i * 3], buf[i * 3 + 1], buf[i * 3 + 2]};
    int found = -1;
    for (size_t c = 0; c < palette.size(); ++c)
      if (palette[c] == px) {
        found = static_cast<int>(c);
        break;
      }
    require(found >= 0, "png: pixel ", i, " of ", path, " has a color outside the palette");
    map.labels[i] = static_cast<uint8_t>(found);
  }
  return map;
}

Tensor compose_grid(const std::vector<Tensor>& images) {
  require(!images.empty(), "compose_grid: no images");
  int h = images[0].shape()[1], w = images[0].shape()[2];
  for (const Tensor& t : images)
    require(t.shape() == Shape({3, h, w}), "compose_grid: mixed image shapes");
  const int sep = 2;
  int gw = static_cast<int>(images.size()) * w + (static_cast<int>(images.size()) - 1) * sep;
  std::vector<float> out(static_cast<size_t>(3) * h * gw, 1.0f);
  for (size_t k = 0; k < images.size(); ++k) {
    int x0 = static_cast<int>(k) * (w + sep);
    const float* p = images[k].data();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        std::memcpy(&out[(static_cast<size_t>(c) * h + y) * gw + x0],
                    &p[(static_cast<size_t>(c) * h + y) * w], sizeof(float) * w);
  }
  return Tensor::from({3, h, gw}, std::move(out));
}

}  // namespace dswp
