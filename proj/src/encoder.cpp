#include "protomil/encoder.hpp"

namespace protomil {

EncoderArch parse_encoder_arch(const std::string& name) {
  if (name == "small_conv") return EncoderArch::small_conv;
  if (name == "resnet18_conv") return EncoderArch::resnet18_conv;
  if (name == "identity_passthrough") return EncoderArch::identity_passthrough;
  throw ConfigError("unknown encoder architecture '" + name + "'");
}

std::string to_string(EncoderArch arch) {
  switch (arch) {
    case EncoderArch::small_conv: return "small_conv";
    case EncoderArch::resnet18_conv: return "resnet18_conv";
    case EncoderArch::identity_passthrough: return "identity_passthrough";
  }
  return "unknown";
}

void EncoderConfig::validate() const {
  if (input_channels == 0 || input_height == 0 || input_width == 0) {
    throw ConfigError("encoder input dimensions must be positive");
  }
  if (architecture == EncoderArch::identity_passthrough) {
    if (input_height != 1 || input_width != 1) {
      throw ConfigError("identity_passthrough expects embeddings (input shape D x 1 x 1)");
    }
    return;
  }
  if (addon_depth == 0) throw ConfigError("addon_depth must be positive");
  if (architecture == EncoderArch::resnet18_conv && resnet_width == 0) {
    throw ConfigError("resnet_width must be positive");
  }
  latent_shape();
}

Shape EncoderConfig::input_shape() const {
  return {input_channels, input_height, input_width};
}

Shape EncoderConfig::latent_shape() const {
  switch (architecture) {
    case EncoderArch::identity_passthrough:
      return {input_channels, 1, 1};
    case EncoderArch::small_conv: {
      // conv5 -> pool2 -> conv5 -> pool2
      if (input_height < 16 || input_width < 16) throw ConfigError("small_conv needs inputs of at least 16x16");
      auto side = [](std::size_t s) { return ((s - 4) / 2 - 4) / 2; };
      return {addon_depth, side(input_height), side(input_width)};
    }
    case EncoderArch::resnet18_conv: {
      // stride-1 stem, then three stride-2 stages (padding 1, kernel 3)
      auto side = [](std::size_t s) {
        for (int i = 0; i < 3; ++i) s = (s - 1) / 2 + 1;
        return s;
      };
      return {addon_depth, side(input_height), side(input_width)};
    }
  }
  throw ConfigError("unknown encoder architecture");
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.addon_depth;
  std::size_t trunk_channels = 0;
  switch (config_.architecture) {
    case EncoderArch::identity_passthrough:
      return;
    case EncoderArch::small_conv:
      layers_.emplace_back(Conv2d<T>("features.conv1", config_.input_channels, 16, 5, 1, 0, true, rng));
      layers_.emplace_back(Relu<T>{});
      layers_.emplace_back(MaxPool2d<T>(2, 2));
      layers_.emplace_back(Conv2d<T>("features.conv2", 16, 32, 5, 1, 0, true, rng));
      layers_.emplace_back(Relu<T>{});
      layers_.emplace_back(MaxPool2d<T>(2, 2));
      trunk_channels = 32;
      break;
    case EncoderArch::resnet18_conv: {
      const std::size_t w = config_.resnet_width;
      layers_.emplace_back(Conv2d<T>("features.stem", config_.input_channels, w, 3, 1, 1, false, rng));
      layers_.emplace_back(BatchNorm2d<T>("features.stem_bn", w));
      layers_.emplace_back(Relu<T>{});
      std::size_t in = w;
      for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::size_t out = w << stage;
        for (std::size_t b = 0; b < 2; ++b) {
          const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
          const std::string name = "features.layer" + std::to_string(stage + 1) + "." + std::to_string(b);
          layers_.emplace_back(BasicBlock<T>(name, in, out, stride, rng));
          in = out;
        }
      }
      trunk_channels = in;
      break;
    }
  }
  layers_.emplace_back(Conv2d<T>("add_on.conv1", trunk_channels, d, 1, 1, 0, true, rng));
  layers_.emplace_back(Relu<T>{});
  layers_.emplace_back(Conv2d<T>("add_on.conv2", d, d, 1, 1, 0, true, rng));
  layers_.emplace_back(Sigmoid<T>{});
}

template <typename T>
void Encoder<T>::check_input(const Tensor<T>& batch) const {
  if (batch.rank() != 4) throw DimensionError("encoder expects an N x C x H x W batch");
  const Shape got{batch.dim(1), batch.dim(2), batch.dim(3)};
  if (got != config_.input_shape()) {
    throw ConfigError("instance shape " + shape_string(got) + " does not match encoder input " +
                      shape_string(config_.input_shape()));
  }
}

template <typename T>
Tensor<T> Encoder<T>::infer(const Tensor<T>& batch) const {
  check_input(batch);
  Tensor<T> x = batch;
  for (const auto& layer : layers_) {
    x = std::visit([&](const auto& l) { return l.infer(x); }, layer);
  }
  return x;
}

template <typename T>
Tensor<T> Encoder<T>::forward(const Tensor<T>& batch) {
  check_input(batch);
  Tensor<T> x = batch;
  for (auto& layer : layers_) {
    x = std::visit([&](auto& l) { return l.forward(x); }, layer);
  }
  return x;
}

template <typename T>
void Encoder<T>::backward(const Tensor<T>& grad) {
  Tensor<T> g = grad;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    // The first layer's input is the image itself; its gradient is never needed.
    const bool need_input = i > 0;
    g = std::visit([&](auto& l) { return l.backward(g, need_input); }, layers_[i]);
  }
}

template <typename T>
std::vector<Param<T>*> Encoder<T>::parameters() {
  std::vector<Param<T>*> out;
  for (auto& layer : layers_) std::visit([&](auto& l) { l.collect(out); }, layer);
  return out;
}

template <typename T>
std::vector<Param<T>*> Encoder<T>::buffers() {
  std::vector<Param<T>*> out;
  for (auto& layer : layers_) std::visit([&](auto& l) { l.collect_buffers(out); }, layer);
  return out;
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace protomil
