#include "protomil/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace protomil {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::prototypes: return "prototypes";
    case ParamGroup::attention: return "attention";
    case ParamGroup::head: return "head";
  }
  return "unknown";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw DimensionError(std::string(what) + " expects an N x C x H x W batch, got " + shape_string(s));
}

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) throw DimensionError("convolution kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t padding, bool bias, Rng& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(padding), has_bias_(bias) {
  Tensor<T> w({out_channels, in_channels, kernel, kernel});
  // Kaiming-normal, fan-in, ReLU gain.
  const double std = std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel));
  for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, std));
  weight_ = Param<T>(name + ".weight", ParamGroup::encoder, std::move(w));
  if (has_bias_) bias_ = Param<T>(name + ".bias", ParamGroup::encoder, Tensor<T>({out_channels}));
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != in_) {
    throw DimensionError(weight_.name + ": expected " + std::to_string(in_) + " input channels, got shape " +
                         shape_string(in));
  }
  return {out_, conv_out(in[1], kernel_, stride_, pad_), conv_out(in[2], kernel_, stride_, pad_)};
}

namespace {

// Writes the (c*k*k) x (ho*wo) patch matrix of one image into `col`, whose
// rows are `ld` elements apart.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, T* col, std::size_t ld) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ci * k + ki) * k + kj) * ld;
        if (p == 0 && s == 1) {
          for (std::size_t oy = 0; oy < ho; ++oy) std::copy_n(x + (ci * h + oy + ki) * w + kj, wo, row + oy * wo);
          continue;
        }
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(p);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(p);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * wo + ox] = inside ? x[(ci * h + iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s, std::size_t p,
            std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ci * k + ki) * k + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(p);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(p);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(ci * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// Instances are processed in chunks whose im2col buffers are laid side by
// side, so each chunk costs one GEMM instead of one per instance.
namespace {

constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

std::size_t chunk_for(std::size_t rows, std::size_t cols_per_item, std::size_t n) {
  const std::size_t per = std::max<std::size_t>(1, rows * cols_per_item);
  return std::clamp<std::size_t>(kColumnBudget / per, 1, std::max<std::size_t>(n, 1));
}

// Gathers chunk [first, first + count) into a rows x (count * hw) column matrix.
template <typename T>
void gather_columns(const Tensor<T>& x, std::size_t first, std::size_t count, std::size_t c, std::size_t h,
                    std::size_t w, std::size_t k, std::size_t s, std::size_t p, std::size_t ho, std::size_t wo,
                    bool pointwise, std::vector<T>& col) {
  const std::size_t rows = c * k * k, hw = ho * wo, width = count * hw;
  col.resize(rows * width);
  for (std::size_t n = 0; n < count; ++n) {
    const T* xi = x.data() + (first + n) * c * h * w;
    if (pointwise) {
      for (std::size_t r = 0; r < rows; ++r) std::copy_n(xi + r * hw, hw, col.data() + r * width + n * hw);
    } else {
      im2col(xi, c, h, w, k, s, p, ho, wo, col.data() + n * hw, width);
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> Conv2d<T>::infer(const Tensor<T>& x) const {
  require_rank4(x.shape(), "Conv2d");
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Shape os = output_shape({x.dim(1), h, w});
  const std::size_t ho = os[1], wo = os[2], hw = ho * wo, ckk = in_ * kernel_ * kernel_;
  Tensor<T> y({n, out_, ho, wo});
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  ConstMapMat<T> wm(weight_.value.data(), out_, ckk);
  const std::size_t chunk = chunk_for(ckk + out_, hw, n);
  std::vector<T> col, out;
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t count = std::min(chunk, n - first), width = count * hw;
    gather_columns(x, first, count, in_, h, w, kernel_, stride_, pad_, ho, wo, pointwise, col);
    out.resize(out_ * width);
    MapMat<T> om(out.data(), out_, width);
    om.noalias() = wm * ConstMapMat<T>(col.data(), ckk, width);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t o = 0; o < out_; ++o) {
        T* dst = y.data() + ((first + i) * out_ + o) * hw;
        const T* src = out.data() + o * width + i * hw;
        const T b = has_bias_ ? bias_.value[o] : T(0);
        for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  input_ = x;
  return infer(x);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  const Tensor<T>& x = input_;
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = dy.dim(2), wo = dy.dim(3), hw = ho * wo, ckk = in_ * kernel_ * kernel_;
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  MapMat<T> dwm(weight_.grad.data(), out_, ckk);
  ConstMapMat<T> wm(weight_.value.data(), out_, ckk);
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(x.shape());
  const std::size_t chunk = chunk_for(2 * ckk + out_, hw, n);
  std::vector<T> col, dyc, dcol;
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t count = std::min(chunk, n - first), width = count * hw;
    gather_columns(x, first, count, in_, h, w, kernel_, stride_, pad_, ho, wo, pointwise, col);
    dyc.resize(out_ * width);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t o = 0; o < out_; ++o) {
        std::copy_n(dy.data() + ((first + i) * out_ + o) * hw, hw, dyc.data() + o * width + i * hw);
      }
    }
    ConstMapMat<T> dym(dyc.data(), out_, width);
    dwm.noalias() += dym * ConstMapMat<T>(col.data(), ckk, width).transpose();
    if (has_bias_) {
      // Sequential sum: Eigen's vectorized reduction order depends on buffer alignment.
      for (std::size_t o = 0; o < out_; ++o) {
        T acc = 0;
        for (std::size_t c = 0; c < width; ++c) acc += dyc[o * width + c];
        bias_.grad[o] += acc;
      }
    }
    if (!need_input_grad) continue;
    dcol.resize(ckk * width);
    MapMat<T>(dcol.data(), ckk, width).noalias() = wm.transpose() * dym;
    std::vector<T> item(ckk * hw);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t r = 0; r < ckk; ++r) std::copy_n(dcol.data() + r * width + i * hw, hw, item.data() + r * hw);
      T* dxi = dx.data() + (first + i) * in_ * h * w;
      if (pointwise) {
        std::copy(item.begin(), item.end(), dxi);
      } else {
        col2im(item.data(), in_, h, w, kernel_, stride_, pad_, ho, wo, dxi);
      }
    }
  }
  return dx;
}

template <typename T>
void Conv2d<T>::collect(std::vector<Param<T>*>& params) {
  params.push_back(&weight_);
  if (has_bias_) params.push_back(&bias_);
}

// ---------------------------------------------------------------- MaxPool2d

template <typename T>
Shape MaxPool2d<T>::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[1] < kernel_ || in[2] < kernel_) {
    throw DimensionError("MaxPool2d: input " + shape_string(in) + " smaller than the pooling window");
  }
  return {in[0], (in[1] - kernel_) / stride_ + 1, (in[2] - kernel_) / stride_ + 1};
}

template <typename T>
Tensor<T> MaxPool2d<T>::pool(const Tensor<T>& x, std::vector<std::size_t>* argmax) const {
  require_rank4(x.shape(), "MaxPool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Shape os = output_shape({c, h, w});
  const std::size_t ho = os[1], wo = os[2];
  Tensor<T> y({n, c, ho, wo});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t out = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++out) {
        std::size_t best = base + (oy * stride_) * w + ox * stride_;
        for (std::size_t ki = 0; ki < kernel_; ++ki) {
          for (std::size_t kj = 0; kj < kernel_; ++kj) {
            const std::size_t idx = base + (oy * stride_ + ki) * w + ox * stride_ + kj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        y[out] = x[best];
        if (argmax) (*argmax)[out] = best;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2d<T>::infer(const Tensor<T>& x) const {
  return pool(x, nullptr);
}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x) {
  input_shape_ = x.shape();
  return pool(x, &argmax_);
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (!need_input_grad) return {};
  Tensor<T> dx(input_shape_);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> Relu<T>::infer(const Tensor<T>& x) const {
  Tensor<T> y = x;
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x) {
  output_ = infer(x);
  return output_;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (!need_input_grad) return {};
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(output_[i] > T(0))) dx[i] = T(0);
  }
  return dx;
}

template <typename T>
Tensor<T> Sigmoid<T>::infer(const Tensor<T>& x) const {
  Tensor<T> y = x;
  for (auto& v : y.values()) v = T(1) / (T(1) + std::exp(-v));
  return y;
}

template <typename T>
Tensor<T> Sigmoid<T>::forward(const Tensor<T>& x) {
  output_ = infer(x);
  return output_;
}

template <typename T>
Tensor<T> Sigmoid<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  if (!need_input_grad) return {};
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= output_[i] * (T(1) - output_[i]);
  return dx;
}

// ---------------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels) : channels_(channels) {
  gamma_ = Param<T>(name + ".gamma", ParamGroup::encoder, Tensor<T>({channels}, T(1)));
  beta_ = Param<T>(name + ".beta", ParamGroup::encoder, Tensor<T>({channels}));
  running_mean_ = Param<T>(name + ".running_mean", ParamGroup::encoder, Tensor<T>({channels}));
  running_var_ = Param<T>(name + ".running_var", ParamGroup::encoder, Tensor<T>({channels}, T(1)));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::infer(const Tensor<T>& x) const {
  require_rank4(x.shape(), "BatchNorm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != channels_) throw DimensionError(gamma_.name + ": channel mismatch");
  Tensor<T> y = x;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T scale = gamma_.value[ch] / std::sqrt(running_var_.value[ch] + T(kEps));
    const T shift = beta_.value[ch] - running_mean_.value[ch] * scale;
    for (std::size_t i = 0; i < n; ++i) {
      T* p = y.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = p[j] * scale + shift;
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  require_rank4(x.shape(), "BatchNorm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != channels_) throw DimensionError(gamma_.name + ": channel mismatch");
  const std::size_t m = n * hw;
  normalized_ = Tensor<T>(x.shape());
  inv_std_.assign(c, T(0));
  Tensor<T> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) mean += p[j];
    }
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) var += (p[j] - mean) * (p[j] - mean);
    }
    var /= static_cast<double>(m);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
    inv_std_[ch] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const T xn = (x[off + j] - static_cast<T>(mean)) * inv;
        normalized_[off + j] = xn;
        y[off + j] = gamma_.value[ch] * xn + beta_.value[ch];
      }
    }
    const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
    running_mean_.value[ch] = static_cast<T>((1.0 - kMomentum) * running_mean_.value[ch] + kMomentum * mean);
    running_var_.value[ch] = static_cast<T>((1.0 - kMomentum) * running_var_.value[ch] + kMomentum * unbiased);
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const double m = static_cast<double>(n * hw);
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(dy.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xn = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_dy += dy[off + j];
        sum_dy_xn += dy[off + j] * normalized_[off + j];
      }
    }
    gamma_.grad[ch] += static_cast<T>(sum_dy_xn);
    beta_.grad[ch] += static_cast<T>(sum_dy);
    if (!need_input_grad) continue;
    const double k = gamma_.value[ch] * inv_std_[ch] / m;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        dx[off + j] = static_cast<T>(k * (m * dy[off + j] - sum_dy - normalized_[off + j] * sum_dy_xn));
      }
    }
  }
  return dx;
}

template <typename T>
void BatchNorm2d<T>::collect(std::vector<Param<T>*>& params) {
  params.push_back(&gamma_);
  params.push_back(&beta_);
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(std::vector<Param<T>*>& buffers) {
  buffers.push_back(&running_mean_);
  buffers.push_back(&running_var_);
}

// ---------------------------------------------------------------- BasicBlock

template <typename T>
BasicBlock<T>::BasicBlock(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                          std::size_t stride, Rng& rng)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, stride, 1, false, rng),
      conv2_(name + ".conv2", out_channels, out_channels, 3, 1, 1, false, rng),
      bn1_(name + ".bn1", out_channels),
      bn2_(name + ".bn2", out_channels),
      project_(stride != 1 || in_channels != out_channels) {
  if (project_) {
    down_conv_ = Conv2d<T>(name + ".downsample.conv", in_channels, out_channels, 1, stride, 0, false, rng);
    down_bn_ = BatchNorm2d<T>(name + ".downsample.bn", out_channels);
  }
}

template <typename T>
Shape BasicBlock<T>::output_shape(const Shape& in) const {
  return conv2_.output_shape(conv1_.output_shape(in));
}

template <typename T>
Tensor<T> BasicBlock<T>::infer(const Tensor<T>& x) const {
  Tensor<T> y = bn2_.infer(conv2_.infer(Relu<T>{}.infer(bn1_.infer(conv1_.infer(x)))));
  const Tensor<T> shortcut = project_ ? down_bn_.infer(down_conv_.infer(x)) : x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += shortcut[i];
  return Relu<T>{}.infer(y);
}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x)))));
  const Tensor<T> shortcut = project_ ? down_bn_.forward(down_conv_.forward(x)) : x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += shortcut[i];
  return relu_out_.forward(y);
}

template <typename T>
Tensor<T> BasicBlock<T>::backward(const Tensor<T>& dy, bool need_input_grad) {
  const Tensor<T> dsum = relu_out_.backward(dy, true);
  Tensor<T> dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dsum, true), true), true),
                                               true),
                                 need_input_grad);
  if (project_) {
    const Tensor<T> dshort = down_conv_.backward(down_bn_.backward(dsum, true), need_input_grad);
    if (need_input_grad) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dshort[i];
    }
  } else if (need_input_grad) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsum[i];
  }
  return dx;
}

template <typename T>
void BasicBlock<T>::collect(std::vector<Param<T>*>& params) {
  conv1_.collect(params);
  bn1_.collect(params);
  conv2_.collect(params);
  bn2_.collect(params);
  if (project_) {
    down_conv_.collect(params);
    down_bn_.collect(params);
  }
}

template <typename T>
void BasicBlock<T>::collect_buffers(std::vector<Param<T>*>& buffers) {
  bn1_.collect_buffers(buffers);
  bn2_.collect_buffers(buffers);
  if (project_) down_bn_.collect_buffers(buffers);
}

#define PROTOMIL_INSTANTIATE(T)   \
  template class Conv2d<T>;       \
  template class MaxPool2d<T>;    \
  template class Relu<T>;         \
  template class Sigmoid<T>;      \
  template class BatchNorm2d<T>;  \
  template class BasicBlock<T>;

PROTOMIL_INSTANTIATE(float)
PROTOMIL_INSTANTIATE(double)

}  // namespace protomil
