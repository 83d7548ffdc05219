#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "protomil/bag.hpp"
#include "protomil/encoder.hpp"

namespace protomil {

inline constexpr std::size_t kNumClasses = 2;  // logit 0 = negative, 1 = positive

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t prototypes_per_class = 10;
  std::size_t prototype_height = 2;
  std::size_t prototype_width = 2;
  std::size_t attention_hidden = 128;  // L
  double similarity_epsilon = 1e-4;

  void validate() const;
  std::size_t num_prototypes() const { return kNumClasses * prototypes_per_class; }
  // D x h x w
  Shape prototype_shape() const;
  // Size of the activation map: (Hp - h + 1) x (Wp - w + 1).
  std::array<std::size_t, 2> map_shape() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PrototypeSlot {
  int label = 0;
  bool active = true;
  std::optional<PatchRef> provenance;

  friend bool operator==(const PrototypeSlot&, const PrototypeSlot&) = default;
};

// f_proto: P x D x h x w prototype tensor plus per-prototype class, activity
// and provenance. Indices never change; pruning only clears `active`.
template <typename T>
struct PrototypeBank {
  Param<T> vectors;
  std::vector<PrototypeSlot> slots;

  std::size_t size() const noexcept { return slots.size(); }
  std::size_t vector_size() const noexcept { return vectors.value.size() / slots.size(); }
  std::span<const T> vector(std::size_t j) const { return vectors.value.slice(j); }
  std::span<T> vector(std::size_t j) { return vectors.value.slice(j); }
  std::size_t active_count() const;
  std::size_t active_count(int label) const;
  std::map<int, std::size_t> per_class_count() const;
  // Throws InvariantError unless both classes keep an active prototype.
  void check_invariants() const;
};

// Gated attention: a_i = softmax_i(w^T (tanh(V h_i) * sigm(U h_i))).
template <typename T>
struct AttentionParams {
  Param<T> w;  // L
  Param<T> V;  // L x M
  Param<T> U;  // L x M

  std::size_t hidden() const { return w.value.size(); }
  std::size_t inputs() const { return V.value.dim(1); }
};

// g: 2 x M weights, no bias.
template <typename T>
struct ClassifierHead {
  Param<T> weights;

  // +1 for a prototype's own class logit, -0.5 for the other class.
  static ClassifierHead initialized(std::span<const PrototypeSlot> slots);
};

template <typename T>
struct SimilarityResult {
  std::vector<T> scores;        // M; max over windows, 0 for inactive prototypes
  Tensor<T> activation_maps;    // M x Hm x Wm of log((d^2+1)/(d^2+eps))
  Tensor<T> sq_distance_maps;   // M x Hm x Wm
  std::vector<std::size_t> best_window;     // argmax of the activation map
  std::vector<std::size_t> nearest_window;  // argmin of the distance map
};

template <typename T>
struct AttentionResult {
  std::vector<T> weights;      // k
  std::vector<T> logits;       // k, pre-softmax scores
  Tensor<T> tanh_branch;       // k x L
  Tensor<T> gate_branch;       // k x L
  std::vector<T> bag_embedding;  // M
};

// Everything forward_bag computed for one bag; the losses and explanations
// read from it and the backward pass consumes it.
template <typename T>
struct BagForwardTrace {
  std::string bag_id;
  Tensor<T> patch_grids;        // k x D x Hp x Wp
  Tensor<T> similarities;       // k x M (h_i)
  Tensor<T> activation_maps;    // k x M x Hm x Wm
  Tensor<T> sq_distance_maps;   // k x M x Hm x Wm
  std::vector<std::size_t> best_window;     // k * M
  std::vector<std::size_t> nearest_window;  // k * M
  AttentionResult<T> attention;
  std::array<T, kNumClasses> logits{};

  std::size_t size() const { return patch_grids.dim(0); }
  std::size_t num_prototypes() const { return similarities.dim(1); }
  T attention_weight(std::size_t i) const { return attention.weights[i]; }
  std::span<const T> h(std::size_t i) const { return similarities.slice(i); }
  std::span<const T> h_bag() const { return attention.bag_embedding; }
  T min_sq_distance(std::size_t i, std::size_t j) const;
  // Positive-class probability.
  T probability() const;
};

// Gradient seeds produced by the loss for the backward pass.
template <typename T>
struct LossSeeds {
  std::array<T, kNumClasses> d_logits{};
  std::vector<T> d_attention;  // k, dLoss/da_i from the attention-weighted terms
  Tensor<T> d_min_sq;          // k x M, dLoss/d(min_z ||z - p_j||^2)
};

struct Trainable {
  bool encoder = true;
  bool prototypes = true;
  bool attention = true;
  bool head = true;

  static Trainable all() { return {}; }
  static Trainable warmup() { return {true, true, true, false}; }
  static Trainable last_layers() { return {false, false, true, true}; }
  bool includes(ParamGroup g) const;
};

// --- component operations -------------------------------------------------

template <typename T>
Tensor<T> encode_instance(const Instance& instance, const Encoder<T>& encoder);

template <typename T>
SimilarityResult<T> prototype_similarities(std::span<const T> grid, const Shape& grid_shape,
                                           const PrototypeBank<T>& bank, double epsilon);

// H is k x M.
template <typename T>
AttentionResult<T> attention_pool(const Tensor<T>& H, const AttentionParams<T>& params);

template <typename T>
std::array<T, kNumClasses> classify(std::span<const T> h_bag, const ClassifierHead<T>& head);

// log((d2 + 1) / (d2 + eps))
template <typename T>
T similarity_from_sq_distance(T d2, double epsilon) {
  return std::log((d2 + T(1)) / (d2 + static_cast<T>(epsilon)));
}

// --- model ----------------------------------------------------------------

template <typename T>
class ProtoMilModel {
 public:
  ProtoMilModel() = default;
  ProtoMilModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  Encoder<T>& encoder() noexcept { return encoder_; }
  const Encoder<T>& encoder() const noexcept { return encoder_; }
  PrototypeBank<T>& bank() noexcept { return bank_; }
  const PrototypeBank<T>& bank() const noexcept { return bank_; }
  AttentionParams<T>& attention() noexcept { return attention_; }
  const AttentionParams<T>& attention() const noexcept { return attention_; }
  ClassifierHead<T>& head() noexcept { return head_; }
  const ClassifierHead<T>& head() const noexcept { return head_; }

  // Evaluation-mode forward pass. Pure; safe to call concurrently.
  BagForwardTrace<T> infer(const Bag& bag) const;
  // Latent grids for a bag, evaluation mode.
  Tensor<T> encode(const Bag& bag) const;
  // Prototype layer, pooling and head applied to precomputed k x D x Hp x Wp grids.
  BagForwardTrace<T> forward_from_grids(Tensor<T> grids, std::string bag_id) const;
  // Attention pooling and head only, from precomputed k x M similarities. The
  // trace carries no grids or maps, so it only supports last-layer backward.
  BagForwardTrace<T> forward_from_similarities(Tensor<T> similarities, std::string bag_id) const;
  // Training-mode forward pass; caches encoder activations for backward().
  BagForwardTrace<T> forward(const Bag& bag);
  // Accumulates parameter gradients for the groups in `trainable`.
  void backward(const BagForwardTrace<T>& trace, const LossSeeds<T>& seeds, Trainable trainable);

  std::vector<Param<T>*> parameters();
  std::vector<Param<T>*> buffers();
  void zero_grad();

  // Copy every parameter and buffer (with rounding) and the prototype slots
  // from a model of another precision with the same configuration.
  template <typename U>
  void assign_from(ProtoMilModel<U>& other);

 private:
  void check_modality(const Bag& bag) const;

  ModelConfig config_;
  Encoder<T> encoder_;
  PrototypeBank<T> bank_;
  AttentionParams<T> attention_;
  ClassifierHead<T> head_;
};

template <typename T>
template <typename U>
void ProtoMilModel<T>::assign_from(ProtoMilModel<U>& other) {
  if (!(other.config() == config_)) throw ConfigError("assign_from: model configurations differ");
  auto dst = parameters();
  auto src = other.parameters();
  auto dst_buf = buffers();
  auto src_buf = other.buffers();
  dst.insert(dst.end(), dst_buf.begin(), dst_buf.end());
  src.insert(src.end(), src_buf.begin(), src_buf.end());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value.template cast<T>();
  bank_.slots = other.bank().slots;
}

}  // namespace protomil
