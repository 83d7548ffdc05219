#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/metrics.hpp"
#include "protomil/model.hpp"

namespace protomil {

// Copies the D x h x w window at (row, col) out of a D x Hp x Wp grid.
template <typename T>
std::vector<T> extract_window(std::span<const T> grid, const Shape& grid_shape, std::size_t ph, std::size_t pw,
                              std::size_t row, std::size_t col);

struct ProjectionChange {
  std::size_t prototype = 0;
  int label = 0;
  std::optional<PatchRef> previous;
  PatchRef target;
  double sq_distance = 0.0;  // distance moved
};

struct ProjectionReport {
  std::vector<ProjectionChange> changes;  // one per active prototype
};
nlohmann::json to_json(const ProjectionReport& report);

// Replaces every active prototype by its nearest latent patch among bags of
// the prototype's class. Candidates are scanned in (bag, instance, row, col)
// order and only a strictly smaller distance displaces the current best.
ProjectionReport project_prototypes(ProtoMilModel<float>& model, const BagSet& bags);

struct Neighbor {
  PatchRef patch;
  int label = 0;
  double sq_distance = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct PrototypeCensus {
  std::size_t prototype = 0;
  int label = 0;
  std::vector<Neighbor> neighbors;  // ascending
  std::size_t own_class_count() const;
};

// k nearest patches over all bags for each active prototype, ordered by
// (distance, bag id, instance, row, col). Inactive prototypes get no entry.
std::vector<PrototypeCensus> prototype_neighbor_census(const ProtoMilModel<float>& model, const BagSet& bags,
                                                       std::size_t k_neighbors);

struct PruneConfig {
  std::size_t k_neighbors = 6;
  double max_removal_fraction = 0.4;
  std::size_t finetune_epochs = 20;

  void validate() const;
};

struct PruneDecision {
  std::optional<std::size_t> threshold;  // chosen r, empty when infeasible
  std::vector<std::size_t> removed;
  std::size_t active_before = 0;
  std::size_t max_removals = 0;
};

// Largest r in [1, k] for which the prototypes with fewer than r own-class
// neighbours number at most floor(l * active) and every class keeps one.
PruneDecision choose_pruning(const std::vector<PrototypeCensus>& census, std::span<const PrototypeSlot> slots,
                             const PruneConfig& config);

struct PruneReport {
  PruneConfig config;
  std::vector<PrototypeCensus> census;
  PruneDecision decision;
  std::size_t active_after = 0;
  MetricReport before;
  MetricReport after;
};
nlohmann::json to_json(const PruneReport& report);

struct OptimizerConfig;

// Census, removal, then attention and head fine-tuning on `bags`. Metrics are
// measured on `evaluation` (defaults to `bags`).
PruneReport prune_prototypes(ProtoMilModel<float>& model, const BagSet& bags, const PruneConfig& config,
                             const OptimizerConfig& optimizer, std::uint64_t seed,
                             const BagSet* evaluation = nullptr);

}  // namespace protomil
