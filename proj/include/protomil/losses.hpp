#pragma once

#include "protomil/model.hpp"

namespace protomil {

struct LossConfig {
  double lambda1 = 0.8;   // cluster weight
  double lambda2 = 0.08;  // separation weight
  // Treat a_i as constants inside the cluster and separation terms.
  bool attention_detached = false;

  void validate() const;
};

struct LossBreakdown {
  double cross_entropy = 0.0;
  double cluster = 0.0;
  double separation = 0.0;
  double total = 0.0;
};

LossBreakdown combine_losses(double cross_entropy, double cluster, double separation, const LossConfig& config);

template <typename T>
T cross_entropy(const std::array<T, kNumClasses>& logits, int label);

// (1/k) sum_i a_i min_{j in P_y} min_z ||z - p_j||^2
template <typename T>
T cluster_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank);

// -(1/k) sum_i a_i min_{j not in P_y} min_z ||z - p_j||^2
template <typename T>
T separation_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank);

// Cross-entropy + lambda1 * cluster + lambda2 * separation. When `seeds` is
// given it receives the gradient of the total w.r.t. the logits, the attention
// weights and the per-(instance, prototype) minimum squared distances.
template <typename T>
LossBreakdown total_loss(const BagForwardTrace<T>& trace, int bag_label, const PrototypeBank<T>& bank,
                         const LossConfig& config, LossSeeds<T>* seeds = nullptr);

// Cross-entropy only, with its logit gradient.
template <typename T>
LossBreakdown cross_entropy_loss(const BagForwardTrace<T>& trace, int bag_label, LossSeeds<T>* seeds = nullptr);

}  // namespace protomil
