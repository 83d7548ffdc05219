#include "protomil/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <png.h>

#include "protomil/error.hpp"
#include "protomil/tensor_io.hpp"

namespace protomil {

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidInputError("write_png: channels must be 1 or 3");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(png, size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(path.string() + ": PNG encoding failed: " + png.message);
  }
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&png, bytes.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(path.string() + ": PNG encoding failed: " + png.message);
  }
  bytes.resize(size);
  write_file_bytes(path, bytes);
}

Image8 read_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw SchemaError(path.string() + ": not a readable PNG: " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 image(png.width, png.height, gray ? 1 : 3);
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw SchemaError(path.string() + ": PNG decoding failed: " + png.message);
  }
  return image;
}

Tensor<float> image_to_tensor(const Image8& image) {
  Tensor<float> t({image.channels, image.height, image.width});
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        t.at(c, y, x) = static_cast<float>(image.at(x, y)[c]) / 255.0f;
  return t;
}

Image8 tensor_to_image(const Tensor<float>& chw) {
  if (chw.rank() != 3) throw DimensionError("tensor_to_image: expected C x H x W, got " + shape_string(chw.shape()));
  Image8 image(chw.dim(2), chw.dim(1), chw.dim(0));
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) {
        const float v = std::clamp(chw.at(c, y, x), 0.0f, 1.0f);
        image.at(x, y)[c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return image;
}

}  // namespace protomil
