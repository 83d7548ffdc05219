#include "protomil/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace protomil {

void ModelConfig::validate() const {
  encoder.validate();
  if (prototypes_per_class == 0) throw ConfigError("prototypes_per_class must be positive");
  if (attention_hidden == 0) throw ConfigError("attention_hidden must be positive");
  if (!(similarity_epsilon > 0.0 && similarity_epsilon < 1.0)) {
    throw ConfigError("similarity_epsilon must lie in (0, 1)");
  }
  const Shape latent = encoder.latent_shape();
  if (prototype_height == 0 || prototype_width == 0 || prototype_height > latent[1] ||
      prototype_width > latent[2]) {
    throw ConfigError("prototype window " + std::to_string(prototype_height) + "x" +
                      std::to_string(prototype_width) + " does not fit the latent grid " + shape_string(latent));
  }
}

Shape ModelConfig::prototype_shape() const {
  return {encoder.latent_shape()[0], prototype_height, prototype_width};
}

std::array<std::size_t, 2> ModelConfig::map_shape() const {
  const Shape latent = encoder.latent_shape();
  return {latent[1] - prototype_height + 1, latent[2] - prototype_width + 1};
}

bool Trainable::includes(ParamGroup g) const {
  switch (g) {
    case ParamGroup::encoder: return encoder;
    case ParamGroup::prototypes: return prototypes;
    case ParamGroup::attention: return attention;
    case ParamGroup::head: return head;
  }
  return false;
}

// ---------------------------------------------------------------- bank

template <typename T>
std::size_t PrototypeBank<T>::active_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const auto& s) { return s.active; }));
}

template <typename T>
std::size_t PrototypeBank<T>::active_count(int label) const {
  return static_cast<std::size_t>(
      std::count_if(slots.begin(), slots.end(), [&](const auto& s) { return s.active && s.label == label; }));
}

template <typename T>
std::map<int, std::size_t> PrototypeBank<T>::per_class_count() const {
  std::map<int, std::size_t> out{{0, 0}, {1, 0}};
  for (const auto& s : slots) ++out[s.label];
  return out;
}

template <typename T>
void PrototypeBank<T>::check_invariants() const {
  for (int c = 0; c < static_cast<int>(kNumClasses); ++c) {
    if (active_count(c) == 0) {
      throw InvariantError("class " + std::to_string(c) + " has no active prototype");
    }
  }
}

template <typename T>
ClassifierHead<T> ClassifierHead<T>::initialized(std::span<const PrototypeSlot> slots) {
  Tensor<T> w({kNumClasses, slots.size()});
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t j = 0; j < slots.size(); ++j) {
      w.at(c, j) = static_cast<int>(c) == slots[j].label ? T(1) : T(-0.5);
    }
  }
  return ClassifierHead<T>{Param<T>("head.weight", ParamGroup::head, std::move(w))};
}

template <typename T>
T BagForwardTrace<T>::min_sq_distance(std::size_t i, std::size_t j) const {
  const std::size_t cells = sq_distance_maps.dim(2) * sq_distance_maps.dim(3);
  return sq_distance_maps.values()[(i * num_prototypes() + j) * cells + nearest_window[i * num_prototypes() + j]];
}

template <typename T>
T BagForwardTrace<T>::probability() const {
  const T m = std::max(logits[0], logits[1]);
  const T e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
  return e1 / (e0 + e1);
}

// ---------------------------------------------------------------- operations

template <typename T>
Tensor<T> encode_instance(const Instance& instance, const Encoder<T>& encoder) {
  const EncoderConfig& cfg = encoder.config();
  if (cfg.architecture == EncoderArch::identity_passthrough) {
    if (!instance.has_embedding()) {
      throw ConfigError("identity_passthrough requires instances with a precomputed embedding");
    }
  } else if (!instance.has_pixels()) {
    throw ConfigError(to_string(cfg.architecture) + " requires pixel instances");
  }
  Bag single{"", 0, {instance}};
  Tensor<T> grid = encoder.infer(stack_instances<T>(single));
  Shape s = grid.shape();
  grid.reshape({s[1], s[2], s[3]});
  return grid;
}

template <typename T>
SimilarityResult<T> prototype_similarities(std::span<const T> grid, const Shape& grid_shape,
                                           const PrototypeBank<T>& bank, double epsilon) {
  const Shape& ps = bank.vectors.value.shape();  // P x D x h x w
  if (grid_shape.size() != 3 || ps.size() != 4 || grid_shape[0] != ps[1] || ps[2] > grid_shape[1] ||
      ps[3] > grid_shape[2] || grid.size() != shape_size(grid_shape)) {
    throw DimensionError("prototype shape " + shape_string(ps) + " incompatible with patch grid " +
                         shape_string(grid_shape));
  }
  const std::size_t depth = ps[1], ph = ps[2], pw = ps[3];
  const std::size_t gh = grid_shape[1], gw = grid_shape[2];
  const std::size_t mh = gh - ph + 1, mw = gw - pw + 1, cells = mh * mw;
  const std::size_t m = bank.size();

  SimilarityResult<T> out;
  out.scores.assign(m, T(0));
  out.activation_maps = Tensor<T>({m, mh, mw});
  out.sq_distance_maps = Tensor<T>({m, mh, mw});
  out.best_window.assign(m, 0);
  out.nearest_window.assign(m, 0);
  // Distances to all active prototypes are accumulated side by side (the
  // prototype index is the vectorized axis), so each individual sum still runs
  // over the window elements in (d, a, b) order.
  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < m; ++j) {
    if (bank.slots[j].active) active.push_back(j);
  }
  const std::size_t na = active.size(), elems = depth * ph * pw;
  std::vector<T> protos_t(elems * na);
  for (std::size_t q = 0; q < na; ++q) {
    const std::span<const T> p = bank.vector(active[q]);
    for (std::size_t e = 0; e < elems; ++e) protos_t[e * na + q] = p[e];
  }
  std::vector<T> window(elems), acc(na);
  for (std::size_t r = 0; r < mh; ++r) {
    for (std::size_t c = 0; c < mw; ++c) {
      for (std::size_t d = 0; d < depth; ++d) {
        for (std::size_t a = 0; a < ph; ++a) {
          for (std::size_t b = 0; b < pw; ++b) window[(d * ph + a) * pw + b] = grid[(d * gh + r + a) * gw + c + b];
        }
      }
      std::fill(acc.begin(), acc.end(), T(0));
      for (std::size_t e = 0; e < elems; ++e) {
        const T z = window[e];
        const T* pe = protos_t.data() + e * na;
        for (std::size_t q = 0; q < na; ++q) {
          const T diff = z - pe[q];
          acc[q] += diff * diff;
        }
      }
      for (std::size_t q = 0; q < na; ++q) {
        const std::size_t j = active[q];
        out.sq_distance_maps[j * cells + r * mw + c] = acc[q];
        out.activation_maps[j * cells + r * mw + c] = similarity_from_sq_distance(acc[q], epsilon);
      }
    }
  }
  for (const std::size_t j : active) {
    const T* dmap = out.sq_distance_maps.data() + j * cells;
    const T* amap = out.activation_maps.data() + j * cells;
    std::size_t best = 0, nearest = 0;
    for (std::size_t cell = 1; cell < cells; ++cell) {
      if (amap[cell] > amap[best]) best = cell;
      if (dmap[cell] < dmap[nearest]) nearest = cell;
    }
    out.best_window[j] = best;
    out.nearest_window[j] = nearest;
    out.scores[j] = amap[best];
  }
  return out;
}

template <typename T>
AttentionResult<T> attention_pool(const Tensor<T>& H, const AttentionParams<T>& params) {
  if (H.rank() != 2 || H.dim(0) == 0) throw DimensionError("attention_pool needs a non-empty k x M matrix");
  const std::size_t k = H.dim(0), m = H.dim(1), l = params.hidden();
  if (params.inputs() != m) {
    throw DimensionError("attention expects vectors of length " + std::to_string(params.inputs()) + ", got " +
                         std::to_string(m));
  }
  AttentionResult<T> out;
  out.logits.assign(k, T(0));
  out.weights.assign(k, T(0));
  out.tanh_branch = Tensor<T>({k, l});
  out.gate_branch = Tensor<T>({k, l});
  const T* V = params.V.value.data();
  const T* U = params.U.value.data();
  const T* w = params.w.value.data();
  for (std::size_t i = 0; i < k; ++i) {
    const T* h = H.data() + i * m;
    T score = T(0);
    for (std::size_t r = 0; r < l; ++r) {
      T v = T(0), u = T(0);
      for (std::size_t c = 0; c < m; ++c) {
        v += V[r * m + c] * h[c];
        u += U[r * m + c] * h[c];
      }
      const T t = std::tanh(v);
      const T g = T(1) / (T(1) + std::exp(-u));
      out.tanh_branch.at(i, r) = t;
      out.gate_branch.at(i, r) = g;
      score += w[r] * t * g;
    }
    out.logits[i] = score;
  }
  const T top = *std::max_element(out.logits.begin(), out.logits.end());
  T total = T(0);
  for (std::size_t i = 0; i < k; ++i) {
    out.weights[i] = std::exp(out.logits[i] - top);
    total += out.weights[i];
  }
  for (auto& a : out.weights) a /= total;
  out.bag_embedding.assign(m, T(0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < m; ++c) out.bag_embedding[c] += out.weights[i] * H.at(i, c);
  }
  return out;
}

template <typename T>
std::array<T, kNumClasses> classify(std::span<const T> h_bag, const ClassifierHead<T>& head) {
  const Tensor<T>& w = head.weights.value;
  if (w.rank() != 2 || w.dim(0) != kNumClasses || w.dim(1) != h_bag.size()) {
    throw DimensionError("classifier head " + shape_string(w.shape()) + " does not match bag embedding of length " +
                         std::to_string(h_bag.size()));
  }
  std::array<T, kNumClasses> logits{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    T acc = T(0);
    for (std::size_t j = 0; j < h_bag.size(); ++j) acc += w.at(c, j) * h_bag[j];
    logits[c] = acc;
  }
  return logits;
}

// ---------------------------------------------------------------- model

template <typename T>
ProtoMilModel<T>::ProtoMilModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  encoder_ = Encoder<T>(config_.encoder, rng);

  const std::size_t m = config_.num_prototypes();
  Shape pshape{m};
  const Shape per = config_.prototype_shape();
  pshape.insert(pshape.end(), per.begin(), per.end());
  Tensor<T> protos(pshape);
  for (auto& v : protos.values()) v = static_cast<T>(rng.uniform());
  bank_.vectors = Param<T>("prototypes", ParamGroup::prototypes, std::move(protos));
  bank_.slots.resize(m);
  for (std::size_t j = 0; j < m; ++j) bank_.slots[j].label = j < config_.prototypes_per_class ? 0 : 1;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer default.
  const std::size_t l = config_.attention_hidden;
  auto uniform_tensor = [&](Shape s, std::size_t fan_in) {
    Tensor<T> t(std::move(s));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  };
  attention_.V = Param<T>("attention.V", ParamGroup::attention, uniform_tensor({l, m}, m));
  attention_.U = Param<T>("attention.U", ParamGroup::attention, uniform_tensor({l, m}, m));
  attention_.w = Param<T>("attention.w", ParamGroup::attention, uniform_tensor({l}, l));
  head_ = ClassifierHead<T>::initialized(bank_.slots);
}

template <typename T>
void ProtoMilModel<T>::check_modality(const Bag& bag) const {
  if (bag.instances.empty()) throw InvalidInputError("bag '" + bag.id + "' has no instances");
  const bool passthrough = config_.encoder.architecture == EncoderArch::identity_passthrough;
  for (const auto& inst : bag.instances) {
    if (passthrough ? !inst.has_embedding() : !inst.has_pixels()) {
      throw ConfigError(std::string("bag '") + bag.id + "': encoder " + to_string(config_.encoder.architecture) +
                        (passthrough ? " requires embedding instances" : " requires pixel instances"));
    }
  }
}

template <typename T>
Tensor<T> ProtoMilModel<T>::encode(const Bag& bag) const {
  check_modality(bag);
  return encoder_.infer(stack_instances<T>(bag));
}

template <typename T>
BagForwardTrace<T> ProtoMilModel<T>::forward_from_grids(Tensor<T> grids, std::string bag_id) const {
  const std::size_t k = grids.dim(0), m = bank_.size();
  const Shape gshape{grids.dim(1), grids.dim(2), grids.dim(3)};
  const std::size_t gsize = shape_size(gshape);
  BagForwardTrace<T> tr;
  tr.bag_id = std::move(bag_id);
  const auto [mh, mw] = config_.map_shape();
  tr.similarities = Tensor<T>({k, m});
  tr.activation_maps = Tensor<T>({k, m, mh, mw});
  tr.sq_distance_maps = Tensor<T>({k, m, mh, mw});
  tr.best_window.assign(k * m, 0);
  tr.nearest_window.assign(k * m, 0);
  for (std::size_t i = 0; i < k; ++i) {
    SimilarityResult<T> s = prototype_similarities<T>(std::span<const T>(grids.data() + i * gsize, gsize), gshape,
                                                      bank_, config_.similarity_epsilon);
    std::copy(s.scores.begin(), s.scores.end(), tr.similarities.data() + i * m);
    std::copy(s.activation_maps.values().begin(), s.activation_maps.values().end(),
              tr.activation_maps.data() + i * m * mh * mw);
    std::copy(s.sq_distance_maps.values().begin(), s.sq_distance_maps.values().end(),
              tr.sq_distance_maps.data() + i * m * mh * mw);
    std::copy(s.best_window.begin(), s.best_window.end(), tr.best_window.begin() + i * m);
    std::copy(s.nearest_window.begin(), s.nearest_window.end(), tr.nearest_window.begin() + i * m);
  }
  tr.patch_grids = std::move(grids);
  tr.attention = attention_pool(tr.similarities, attention_);
  tr.logits = classify<T>(tr.attention.bag_embedding, head_);
  return tr;
}

template <typename T>
BagForwardTrace<T> ProtoMilModel<T>::forward_from_similarities(Tensor<T> similarities, std::string bag_id) const {
  if (similarities.rank() != 2 || similarities.dim(1) != bank_.size()) {
    throw DimensionError("similarities must be k x " + std::to_string(bank_.size()) + ", got " +
                         shape_string(similarities.shape()));
  }
  BagForwardTrace<T> tr;
  tr.bag_id = std::move(bag_id);
  tr.patch_grids = Tensor<T>({similarities.dim(0), 0, 0, 0});
  tr.similarities = std::move(similarities);
  tr.attention = attention_pool(tr.similarities, attention_);
  tr.logits = classify<T>(tr.attention.bag_embedding, head_);
  return tr;
}

template <typename T>
BagForwardTrace<T> ProtoMilModel<T>::infer(const Bag& bag) const {
  return forward_from_grids(encode(bag), bag.id);
}

template <typename T>
BagForwardTrace<T> ProtoMilModel<T>::forward(const Bag& bag) {
  check_modality(bag);
  return forward_from_grids(encoder_.forward(stack_instances<T>(bag)), bag.id);
}

template <typename T>
void ProtoMilModel<T>::backward(const BagForwardTrace<T>& tr, const LossSeeds<T>& seeds, Trainable trainable) {
  const std::size_t k = tr.size(), m = tr.num_prototypes(), l = attention_.hidden();
  const auto& weights = tr.attention.weights;
  const std::span<const T> h_bag = tr.h_bag();

  // head
  std::vector<T> d_hbag(m, T(0));
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t j = 0; j < m; ++j) {
      if (trainable.head) head_.weights.grad.at(c, j) += seeds.d_logits[c] * h_bag[j];
      d_hbag[j] += head_.weights.value.at(c, j) * seeds.d_logits[c];
    }
  }

  // pooling: h_bag = sum_i a_i h_i
  Tensor<T> dH({k, m});
  std::vector<T> da(k, T(0));
  for (std::size_t i = 0; i < k; ++i) {
    T acc = seeds.d_attention.empty() ? T(0) : seeds.d_attention[i];
    for (std::size_t j = 0; j < m; ++j) {
      acc += tr.similarities.at(i, j) * d_hbag[j];
      dH.at(i, j) = weights[i] * d_hbag[j];
    }
    da[i] = acc;
  }
  // softmax
  T weighted = T(0);
  for (std::size_t i = 0; i < k; ++i) weighted += weights[i] * da[i];
  const T* V = attention_.V.value.data();
  const T* U = attention_.U.value.data();
  const T* w = attention_.w.value.data();
  std::vector<T> du(l), dv(l);
  for (std::size_t i = 0; i < k; ++i) {
    const T ds = weights[i] * (da[i] - weighted);
    for (std::size_t r = 0; r < l; ++r) {
      const T t = tr.attention.tanh_branch.at(i, r);
      const T g = tr.attention.gate_branch.at(i, r);
      if (trainable.attention) attention_.w.grad[r] += ds * t * g;
      du[r] = ds * w[r] * g * (T(1) - t * t);
      dv[r] = ds * w[r] * t * g * (T(1) - g);
    }
    const T* h = tr.similarities.data() + i * m;
    for (std::size_t r = 0; r < l; ++r) {
      for (std::size_t c = 0; c < m; ++c) {
        if (trainable.attention) {
          attention_.V.grad[r * m + c] += du[r] * h[c];
          attention_.U.grad[r * m + c] += dv[r] * h[c];
        }
        dH.at(i, c) += V[r * m + c] * du[r] + U[r * m + c] * dv[r];
      }
    }
  }
  if (!trainable.encoder && !trainable.prototypes) return;

  // prototype layer: distances to the selected windows
  const Shape& ps = bank_.vectors.value.shape();
  const std::size_t depth = ps[1], ph = ps[2], pw = ps[3];
  const std::size_t gh = tr.patch_grids.dim(2), gw = tr.patch_grids.dim(3);
  const std::size_t mw = gw - pw + 1, cells = (gh - ph + 1) * mw;
  const std::size_t gsize = depth * gh * gw;
  const T eps = static_cast<T>(config_.similarity_epsilon);
  Tensor<T> dZ;
  if (trainable.encoder) dZ = Tensor<T>(tr.patch_grids.shape());

  auto push_window = [&](std::size_t i, std::size_t j, std::size_t cell, T dd2) {
    if (dd2 == T(0)) return;
    const std::size_t r = cell / mw, c = cell % mw;
    const T* z = tr.patch_grids.data() + i * gsize;
    const std::span<const T> p = bank_.vector(j);
    T* dp = bank_.vectors.grad.data() + j * depth * ph * pw;
    for (std::size_t d = 0; d < depth; ++d) {
      for (std::size_t a = 0; a < ph; ++a) {
        for (std::size_t b = 0; b < pw; ++b) {
          const std::size_t zi = (d * gh + r + a) * gw + c + b;
          const std::size_t pi = (d * ph + a) * pw + b;
          const T diff = T(2) * (z[zi] - p[pi]);
          if (trainable.encoder) dZ[i * gsize + zi] += dd2 * diff;
          if (trainable.prototypes) dp[pi] -= dd2 * diff;
        }
      }
    }
  };

  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!bank_.slots[j].active) continue;
      const std::size_t best = tr.best_window[i * m + j];
      const T d2 = tr.sq_distance_maps.values()[(i * m + j) * cells + best];
      const T dscore = T(1) / (d2 + T(1)) - T(1) / (d2 + eps);
      push_window(i, j, best, dH.at(i, j) * dscore);
      if (!seeds.d_min_sq.empty()) push_window(i, j, tr.nearest_window[i * m + j], seeds.d_min_sq.at(i, j));
    }
  }
  if (trainable.encoder && !encoder_.parameters().empty()) encoder_.backward(dZ);
}

template <typename T>
std::vector<Param<T>*> ProtoMilModel<T>::parameters() {
  std::vector<Param<T>*> out = encoder_.parameters();
  out.push_back(&bank_.vectors);
  out.push_back(&attention_.w);
  out.push_back(&attention_.V);
  out.push_back(&attention_.U);
  out.push_back(&head_.weights);
  return out;
}

template <typename T>
std::vector<Param<T>*> ProtoMilModel<T>::buffers() {
  return encoder_.buffers();
}

template <typename T>
void ProtoMilModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

#define PROTOMIL_INSTANTIATE(T)                                                                                \
  template struct PrototypeBank<T>;                                                                            \
  template struct ClassifierHead<T>;                                                                           \
  template struct BagForwardTrace<T>;                                                                          \
  template class ProtoMilModel<T>;                                                                             \
  template Tensor<T> encode_instance<T>(const Instance&, const Encoder<T>&);                                   \
  template SimilarityResult<T> prototype_similarities<T>(std::span<const T>, const Shape&,                     \
                                                         const PrototypeBank<T>&, double);                     \
  template AttentionResult<T> attention_pool<T>(const Tensor<T>&, const AttentionParams<T>&);                  \
  template std::array<T, kNumClasses> classify<T>(std::span<const T>, const ClassifierHead<T>&);

PROTOMIL_INSTANTIATE(float)
PROTOMIL_INSTANTIATE(double)

}  // namespace protomil
