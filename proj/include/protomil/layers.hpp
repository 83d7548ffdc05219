#pragma once

#include <string>
#include <variant>
#include <vector>

#include "protomil/rng.hpp"
#include "protomil/tensor.hpp"

namespace protomil {

enum class ParamGroup { encoder, prototypes, attention, head };

const char* to_string(ParamGroup group);

// A named parameter tensor and its gradient accumulator. Buffers (batch-norm
// running statistics) use the same type but are never handed to an optimizer.
template <typename T>
struct Param {
  std::string name;
  ParamGroup group = ParamGroup::encoder;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, ParamGroup g, Tensor<T> v) : name(std::move(n)), group(g), value(std::move(v)) {
    grad = Tensor<T>(value.shape());
  }
  void zero_grad() { grad.fill(T(0)); }
};

// Layers operate on N x C x H x W batches. forward() caches what backward()
// needs; infer() is const and caches nothing, so it is safe to call
// concurrently.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, bool bias, Rng& rng);

  Shape output_shape(const Shape& in) const;
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>& params);
  void collect_buffers(std::vector<Param<T>*>&) {}

 private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(std::size_t kernel, std::size_t stride) : kernel_(kernel), stride_(stride) {}

  Shape output_shape(const Shape& in) const;
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>&) {}
  void collect_buffers(std::vector<Param<T>*>&) {}

 private:
  Tensor<T> pool(const Tensor<T>& x, std::vector<std::size_t>* argmax) const;

  std::size_t kernel_ = 2, stride_ = 2;
  Shape input_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class Relu {
 public:
  Shape output_shape(const Shape& in) const { return in; }
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>&) {}
  void collect_buffers(std::vector<Param<T>*>&) {}

 private:
  Tensor<T> output_;
};

template <typename T>
class Sigmoid {
 public:
  Shape output_shape(const Shape& in) const { return in; }
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>&) {}
  void collect_buffers(std::vector<Param<T>*>&) {}

 private:
  Tensor<T> output_;
};

// Batch statistics are taken over N, H and W of the batch (one bag during
// training); running statistics are used by infer().
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels);

  Shape output_shape(const Shape& in) const { return in; }
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>& params);
  void collect_buffers(std::vector<Param<T>*>& buffers);

  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

 private:
  std::size_t channels_ = 0;
  Param<T> gamma_, beta_;
  Param<T> running_mean_, running_var_;
  Tensor<T> normalized_;
  std::vector<T> inv_std_;
};

// ResNet basic block: conv3x3-bn-relu-conv3x3-bn plus (projected) shortcut.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(const std::string& name, std::size_t in_channels, std::size_t out_channels, std::size_t stride,
             Rng& rng);

  Shape output_shape(const Shape& in) const;
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad);
  void collect(std::vector<Param<T>*>& params);
  void collect_buffers(std::vector<Param<T>*>& buffers);

 private:
  Conv2d<T> conv1_, conv2_, down_conv_;
  BatchNorm2d<T> bn1_, bn2_, down_bn_;
  Relu<T> relu1_, relu_out_;
  bool project_ = false;
};

template <typename T>
using AnyLayer = std::variant<Conv2d<T>, MaxPool2d<T>, Relu<T>, Sigmoid<T>, BatchNorm2d<T>, BasicBlock<T>>;

}  // namespace protomil
