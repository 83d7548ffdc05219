#include "protomil/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace protomil {

void LossConfig::validate() const {
  if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || lambda1 < 0.0 || lambda2 < 0.0) {
    throw ConfigError("loss weights must be finite and non-negative");
  }
}

LossBreakdown combine_losses(double cross_entropy, double cluster, double separation, const LossConfig& config) {
  return {cross_entropy, cluster, separation,
          cross_entropy + config.lambda1 * cluster + config.lambda2 * separation};
}

namespace {

void check_label(int label) {
  if (label != 0 && label != 1) throw InvalidInputError("bag label must be 0 or 1");
}

// Per instance: the smallest min-distance over active prototypes with
// (label == own) == same_class, and which prototype attained it.
template <typename T>
void nearest_prototypes(const BagForwardTrace<T>& tr, int label, const PrototypeBank<T>& bank, bool same_class,
                        std::vector<T>& value, std::vector<std::size_t>& index) {
  const std::size_t k = tr.size(), m = tr.num_prototypes();
  bool any = false;
  for (std::size_t j = 0; j < m; ++j) {
    any |= bank.slots[j].active && ((bank.slots[j].label == label) == same_class);
  }
  if (!any) {
    throw InvariantError(std::string("no active ") + (same_class ? "same-class" : "other-class") +
                         " prototype for bag label " + std::to_string(label));
  }
  value.assign(k, std::numeric_limits<T>::infinity());
  index.assign(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!bank.slots[j].active || (bank.slots[j].label == label) != same_class) continue;
      const T d = tr.min_sq_distance(i, j);
      if (d < value[i]) {
        value[i] = d;
        index[i] = j;
      }
    }
  }
}

template <typename T>
T weighted_mean(const BagForwardTrace<T>& tr, const std::vector<T>& value) {
  T sum = T(0);
  for (std::size_t i = 0; i < tr.size(); ++i) sum += tr.attention.weights[i] * value[i];
  return sum / static_cast<T>(tr.size());
}

}  // namespace

template <typename T>
T cross_entropy(const std::array<T, kNumClasses>& logits, int label) {
  check_label(label);
  const T top = std::max(logits[0], logits[1]);
  const T lse = top + std::log(std::exp(logits[0] - top) + std::exp(logits[1] - top));
  return lse - logits[static_cast<std::size_t>(label)];
}

template <typename T>
T cluster_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank) {
  check_label(bag_label);
  std::vector<T> value;
  std::vector<std::size_t> index;
  nearest_prototypes(trace, bag_label, bank, true, value, index);
  return weighted_mean(trace, value);
}

template <typename T>
T separation_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank) {
  check_label(bag_label);
  std::vector<T> value;
  std::vector<std::size_t> index;
  nearest_prototypes(trace, bag_label, bank, false, value, index);
  return -weighted_mean(trace, value);
}

template <typename T>
LossBreakdown cross_entropy_loss(const BagForwardTrace<T>& trace, int bag_label, LossSeeds<T>* seeds) {
  LossBreakdown out;
  out.cross_entropy = static_cast<double>(cross_entropy(trace.logits, bag_label));
  out.total = out.cross_entropy;
  if (seeds) {
    const T p1 = trace.probability();
    seeds->d_logits = {T(1) - p1 - (bag_label == 0 ? T(1) : T(0)), p1 - (bag_label == 1 ? T(1) : T(0))};
    seeds->d_attention.assign(trace.size(), T(0));
    seeds->d_min_sq = Tensor<T>();
  }
  return out;
}

template <typename T>
LossBreakdown total_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank,
                         const LossConfig& config, LossSeeds<T>* seeds) {
  LossBreakdown out = cross_entropy_loss(trace, bag_label, seeds);
  std::vector<T> clst, sep;
  std::vector<std::size_t> clst_j, sep_j;
  nearest_prototypes(trace, bag_label, bank, true, clst, clst_j);
  nearest_prototypes(trace, bag_label, bank, false, sep, sep_j);
  out.cluster = static_cast<double>(weighted_mean(trace, clst));
  out.separation = static_cast<double>(-weighted_mean(trace, sep));
  out = combine_losses(out.cross_entropy, out.cluster, out.separation, config);
  if (seeds) {
    const std::size_t k = trace.size();
    const T inv_k = T(1) / static_cast<T>(k);
    const T l1 = static_cast<T>(config.lambda1), l2 = static_cast<T>(config.lambda2);
    seeds->d_min_sq = Tensor<T>({k, trace.num_prototypes()});
    for (std::size_t i = 0; i < k; ++i) {
      const T a = trace.attention.weights[i];
      seeds->d_min_sq.at(i, clst_j[i]) += l1 * a * inv_k;
      seeds->d_min_sq.at(i, sep_j[i]) -= l2 * a * inv_k;
      if (!config.attention_detached) seeds->d_attention[i] += (l1 * clst[i] - l2 * sep[i]) * inv_k;
    }
  }
  return out;
}

#define PROTOMIL_INSTANTIATE(T)                                                                                \
  template T cross_entropy<T>(const std::array<T, kNumClasses>&, int);                                         \
  template T cluster_loss<T>(const BagForwardTrace<T>&, int, const PrototypeBank<T>&);                         \
  template T separation_loss<T>(const BagForwardTrace<T>&, int, const PrototypeBank<T>&);                      \
  template LossBreakdown total_loss<T>(const BagForwardTrace<T>&, int, const PrototypeBank<T>&,                \
                                       const LossConfig&, LossSeeds<T>*);                                      \
  template LossBreakdown cross_entropy_loss<T>(const BagForwardTrace<T>&, int, LossSeeds<T>*);

PROTOMIL_INSTANTIATE(float)
PROTOMIL_INSTANTIATE(double)

}  // namespace protomil
