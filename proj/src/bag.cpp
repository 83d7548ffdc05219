#include "protomil/bag.hpp"

#include <algorithm>

namespace protomil {

Instance Instance::from_pixels(Tensor<float> pixels) {
  return from_pixels(std::make_shared<const Tensor<float>>(std::move(pixels)));
}

Instance Instance::from_pixels(std::shared_ptr<const Tensor<float>> pixels) {
  if (!pixels || pixels->rank() != 3 || pixels->empty()) {
    throw InvalidInputError("instance pixels must be a non-empty C x H x W tensor");
  }
  const auto v = pixels->values();
  if (std::any_of(v.begin(), v.end(), [](float x) { return !(x >= 0.0f && x <= 1.0f); })) {
    throw InvalidInputError("instance pixel values must lie in [0,1]");
  }
  Instance out;
  out.pixels_ = std::move(pixels);
  return out;
}

Instance Instance::from_embedding(std::vector<float> embedding) {
  if (embedding.empty()) throw InvalidInputError("instance embedding must be non-empty");
  Instance out;
  out.embedding_ = std::make_shared<const std::vector<float>>(std::move(embedding));
  return out;
}

const Tensor<float>& Instance::pixels() const {
  if (!pixels_) throw InvalidInputError("instance carries no pixels");
  return *pixels_;
}

std::span<const float> Instance::embedding() const {
  if (!embedding_) throw InvalidInputError("instance carries no embedding");
  return *embedding_;
}

Shape Instance::input_shape() const {
  if (pixels_) return pixels_->shape();
  if (embedding_) return {embedding_->size(), 1, 1};
  throw InvalidInputError("empty instance");
}

std::span<const float> Instance::values() const {
  if (pixels_) return pixels_->values();
  if (embedding_) return *embedding_;
  throw InvalidInputError("empty instance");
}

void Bag::validate() const {
  if (instances.empty()) throw InvalidInputError("bag '" + id + "' has no instances");
  if (label != 0 && label != 1) throw InvalidInputError("bag '" + id + "' label must be 0 or 1");
  const Shape first = instances.front().input_shape();
  const bool pixels = instances.front().has_pixels();
  for (const auto& inst : instances) {
    if (inst.has_pixels() != pixels || inst.input_shape() != first) {
      throw InvalidInputError("bag '" + id + "' mixes instance shapes or modalities");
    }
  }
}

int bag_label_from_instances(std::span<const int> instance_labels) {
  if (instance_labels.empty()) throw InvalidInputError("bag label needs at least one instance label");
  for (int y : instance_labels) {
    if (y != 0 && y != 1) throw InvalidInputError("instance labels must be 0 or 1");
  }
  return std::any_of(instance_labels.begin(), instance_labels.end(), [](int y) { return y == 1; }) ? 1 : 0;
}

template <typename T>
Tensor<T> stack_instances(const Bag& bag) {
  if (bag.instances.empty()) throw InvalidInputError("bag '" + bag.id + "' has no instances");
  const Shape item = bag.instances.front().input_shape();
  Shape shape{bag.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  Tensor<T> out(shape);
  const std::size_t stride = shape_size(item);
  for (std::size_t i = 0; i < bag.size(); ++i) {
    const auto v = bag.instances[i].values();
    if (v.size() != stride) throw DimensionError("bag '" + bag.id + "' has instances of different sizes");
    std::transform(v.begin(), v.end(), out.data() + i * stride, [](float x) { return static_cast<T>(x); });
  }
  return out;
}

template Tensor<float> stack_instances<float>(const Bag&);
template Tensor<double> stack_instances<double>(const Bag&);

}  // namespace protomil
