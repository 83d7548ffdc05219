#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protomil/tensor.hpp"

namespace protomil {

// One bag element. Pixels are stored channel-first (C x H x W) with values in
// [0,1]; an embedding is a flat vector. Exactly one of the two is set, and the
// payload is shared so that generated bags can reuse source images cheaply.
class Instance {
 public:
  static Instance from_pixels(Tensor<float> pixels);
  static Instance from_pixels(std::shared_ptr<const Tensor<float>> pixels);
  static Instance from_embedding(std::vector<float> embedding);

  bool has_pixels() const noexcept { return pixels_ != nullptr; }
  bool has_embedding() const noexcept { return embedding_ != nullptr; }
  const Tensor<float>& pixels() const;
  std::span<const float> embedding() const;
  // Shape the encoder sees: C x H x W for pixels, D x 1 x 1 for embeddings.
  Shape input_shape() const;
  std::span<const float> values() const;

 private:
  std::shared_ptr<const Tensor<float>> pixels_;
  std::shared_ptr<const std::vector<float>> embedding_;
};

struct Bag {
  std::string id;
  int label = 0;
  std::vector<Instance> instances;

  std::size_t size() const noexcept { return instances.size(); }
  // Throws InvalidInputError when empty, mixed-modality or mislabelled.
  void validate() const;
};

using BagSet = std::vector<Bag>;

// Standard MIL assumption: a bag is positive iff any instance is positive.
int bag_label_from_instances(std::span<const int> instance_labels);

// Stack bag instances into one N x C x H x W batch.
template <typename T>
Tensor<T> stack_instances(const Bag& bag);

// Location of one latent patch window in a dataset.
struct PatchRef {
  std::string bag_id;
  std::size_t bag_index = 0;  // position in the dataset the ref was built from
  std::size_t instance = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const PatchRef&, const PatchRef&) = default;
};

}  // namespace protomil
