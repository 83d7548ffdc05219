#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "protomil/tensor.hpp"

namespace protomil {

// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}
  std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * channels]; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return &pixels[(y * width + x) * channels]; }
};

void write_png(const std::filesystem::path& path, const Image8& image);
// Gray PNGs decode to one channel, anything else to RGB (alpha dropped).
Image8 read_png(const std::filesystem::path& path);

// Channel-first float tensor in [0,1] <-> 8-bit image.
Tensor<float> image_to_tensor(const Image8& image);
Image8 tensor_to_image(const Tensor<float>& chw);

}  // namespace protomil
