#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protomil/layers.hpp"

namespace protomil {

enum class EncoderArch { small_conv, resnet18_conv, identity_passthrough };

EncoderArch parse_encoder_arch(const std::string& name);
std::string to_string(EncoderArch arch);

// The feature extractor f_conv. The convolutional variants end with two 1x1
// add-on convolutions (ReLU, then sigmoid) so every latent value lies in [0,1].
struct EncoderConfig {
  EncoderArch architecture = EncoderArch::small_conv;
  std::size_t addon_depth = 64;
  std::size_t input_channels = 1;
  std::size_t input_height = 28;
  std::size_t input_width = 28;
  // Channels of the first residual stage (64 for a standard ResNet-18).
  std::size_t resnet_width = 64;

  void validate() const;
  // D x Hp x Wp for one instance.
  Shape latent_shape() const;
  Shape input_shape() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const noexcept { return config_; }

  // N x C x H x W -> N x D x Hp x Wp. For identity_passthrough the input is
  // N x D x 1 x 1 and is returned unchanged.
  Tensor<T> infer(const Tensor<T>& batch) const;
  Tensor<T> forward(const Tensor<T>& batch);
  void backward(const Tensor<T>& grad);

  std::vector<Param<T>*> parameters();
  std::vector<Param<T>*> buffers();

 private:
  void check_input(const Tensor<T>& batch) const;

  EncoderConfig config_;
  std::vector<AnyLayer<T>> layers_;
};

}  // namespace protomil
