#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dotlens/common.hpp"
#include "json.hpp"

namespace dotlens {

// H x W x 3 image with unit-interval intensities. Row-major, channel-last.
class Image {
 public:
  Image() = default;
  Image(int height, int width, float fill = 0.0f)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * width * 3, fill) {
    if (height < 8 || width < 8)
      throw ShapeError("Image: dimensions must be at least 8x8");
  }

  int height() const { return height_; }
  int width() const { return width_; }

  float& at(int i, int j, int c) {
    return data_[(static_cast<std::size_t>(i) * width_ + j) * 3 + c];
  }
  float at(int i, int j, int c) const {
    return data_[(static_cast<std::size_t>(i) * width_ + j) * 3 + c];
  }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  bool same_shape(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_;
  }

  void clamp() {
    for (auto& v : data_) v = clamp01(v);
  }

  bool in_unit_range() const {
    for (float v : data_)
      if (v < 0.0f || v > 1.0f) return false;
    return true;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(&height_, sizeof height_);
    h = fnv1a(&width_, sizeof width_, h);
    return fnv1a(data_.data(), data_.size() * sizeof(float), h);
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

inline void check_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("image dimensions do not match");
}

// Round-to-nearest 8-bit quantization, the on-disk representation.
inline std::uint8_t to_u8(float v) {
  const float q = clamp01(v) * 255.0f;
  return static_cast<std::uint8_t>(q + 0.5f);
}

inline Image quantize8(const Image& x) {
  Image out(x.height(), x.width());
  for (std::size_t k = 0; k < x.size(); ++k)
    out.data()[k] = static_cast<float>(to_u8(x.data()[k])) / 255.0f;
  return out;
}

inline void save_png(const Image& img, const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw ConfigError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw ConfigError("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width()) * 3);
  for (int i = 0; i < img.height(); ++i) {
    for (int j = 0; j < img.width(); ++j)
      for (int c = 0; c < 3; ++c) row[j * 3 + c] = to_u8(img.at(i, j, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw ConfigError("cannot open for reading: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw ConfigError("png read failed: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  Image img(h, w);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int i = 0; i < h; ++i) {
    png_read_row(png, row.data(), nullptr);
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img.at(i, j, c) = static_cast<float>(row[j * 3 + c]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// Raw little-endian f32 dump with a JSON sidecar ({"shape": [H,W,3]}).
inline void save_tensor(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(img.data().data()),
          static_cast<std::streamsize>(img.size() * sizeof(float)));
  nlohmann::json side;
  side["shape"] = {img.height(), img.width(), 3};
  std::ofstream s(path + ".json");
  s << side.dump() << "\n";
}

inline Image load_tensor(const std::string& path) {
  std::ifstream s(path + ".json");
  if (!s) throw ConfigError("missing tensor sidecar: " + path + ".json");
  nlohmann::json side;
  s >> side;
  const auto shape = side.at("shape");
  Image img(shape.at(0).get<int>(), shape.at(1).get<int>());
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open for reading: " + path);
  f.read(reinterpret_cast<char*>(img.data().data()),
         static_cast<std::streamsize>(img.size() * sizeof(float)));
  if (static_cast<std::size_t>(f.gcount()) != img.size() * sizeof(float))
    throw ShapeError("tensor file shorter than sidecar shape: " + path);
  return img;
}

}  // namespace dotlens
