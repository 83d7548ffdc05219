#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "protomil/bag.hpp"
#include "protomil/model.hpp"
#include "protomil/rng.hpp"

namespace protomil::testing {

// small_conv on 20x20 single-channel images gives a 2x2 latent grid.
inline ModelConfig tiny_conv_config(std::size_t depth = 4, std::size_t per_class = 2, std::size_t hidden = 3,
                                    std::size_t proto_side = 1) {
  ModelConfig c;
  c.encoder.architecture = EncoderArch::small_conv;
  c.encoder.addon_depth = depth;
  c.encoder.input_channels = 1;
  c.encoder.input_height = 20;
  c.encoder.input_width = 20;
  c.prototypes_per_class = per_class;
  c.prototype_height = proto_side;
  c.prototype_width = proto_side;
  c.attention_hidden = hidden;
  return c;
}

inline ModelConfig embedding_config(std::size_t dim, std::size_t per_class = 2, std::size_t hidden = 4) {
  ModelConfig c;
  c.encoder.architecture = EncoderArch::identity_passthrough;
  c.encoder.input_channels = dim;
  c.encoder.input_height = 1;
  c.encoder.input_width = 1;
  c.prototypes_per_class = per_class;
  c.prototype_height = 1;
  c.prototype_width = 1;
  c.attention_hidden = hidden;
  return c;
}

inline Bag random_pixel_bag(Rng& rng, std::size_t k, std::size_t side, int label, std::string id = "bag") {
  Bag bag{std::move(id), label, {}};
  for (std::size_t i = 0; i < k; ++i) {
    Tensor<float> px({1, side, side});
    for (auto& v : px.values()) v = static_cast<float>(rng.uniform());
    bag.instances.push_back(Instance::from_pixels(std::move(px)));
  }
  return bag;
}

inline Bag random_embedding_bag(Rng& rng, std::size_t k, std::size_t dim, int label, std::string id = "bag") {
  Bag bag{std::move(id), label, {}};
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<float> e(dim);
    for (auto& v : e) v = static_cast<float>(rng.uniform());
    bag.instances.push_back(Instance::from_embedding(std::move(e)));
  }
  return bag;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("protomil_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / scale;
}

}  // namespace protomil::testing
