#include "protomil/proto_ops.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "protomil/checkpoint.hpp"
#include "protomil/error.hpp"
#include "protomil/parallel.hpp"
#include "protomil/train.hpp"

namespace protomil {

using nlohmann::json;

template <typename T>
std::vector<T> extract_window(std::span<const T> grid, const Shape& gs, std::size_t ph, std::size_t pw,
                              std::size_t row, std::size_t col) {
  const std::size_t depth = gs[0], gh = gs[1], gw = gs[2];
  if (row + ph > gh || col + pw > gw) throw DimensionError("window outside the patch grid");
  std::vector<T> out(depth * ph * pw);
  for (std::size_t d = 0; d < depth; ++d)
    for (std::size_t a = 0; a < ph; ++a)
      for (std::size_t b = 0; b < pw; ++b) out[(d * ph + a) * pw + b] = grid[(d * gh + row + a) * gw + col + b];
  return out;
}

template std::vector<float> extract_window<float>(std::span<const float>, const Shape&, std::size_t, std::size_t,
                                                  std::size_t, std::size_t);
template std::vector<double> extract_window<double>(std::span<const double>, const Shape&, std::size_t, std::size_t,
                                                    std::size_t, std::size_t);

namespace {

struct Candidate {
  float sq_distance = 0.0f;
  PatchRef patch;
  std::vector<float> window;
};

// Calls visit(instance, maps) with the M x Hm x Wm squared-distance maps for
// every instance of the bag.
template <typename Visit>
void scan_bag(const ProtoMilModel<float>& model, const Bag& bag, Visit&& visit) {
  const Tensor<float> grids = model.encode(bag);
  const Shape gs{grids.dim(1), grids.dim(2), grids.dim(3)};
  for (std::size_t i = 0; i < grids.dim(0); ++i) {
    const auto grid = grids.slice(i);
    const auto sim = prototype_similarities<float>(grid, gs, model.bank(), model.config().similarity_epsilon);
    visit(i, grid, gs, sim.sq_distance_maps);
  }
}

}  // namespace

json to_json(const ProjectionReport& report) {
  json out = json::array();
  for (const auto& c : report.changes) {
    out.push_back({{"prototype", c.prototype},
                   {"class", c.label},
                   {"previous", c.previous ? to_json(*c.previous) : json(nullptr)},
                   {"target", to_json(c.target)},
                   {"sq_distance", c.sq_distance}});
  }
  return out;
}

ProjectionReport project_prototypes(ProtoMilModel<float>& model, const BagSet& bags) {
  bool seen[kNumClasses] = {false, false};
  for (const auto& b : bags) {
    if (b.label == 0 || b.label == 1) seen[b.label] = true;
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!seen[c] && model.bank().active_count(static_cast<int>(c)) > 0) {
      throw InvalidInputError("projection needs at least one bag of class " + std::to_string(c));
    }
  }
  const std::size_t m = model.bank().size();
  const std::size_t ph = model.config().prototype_height, pw = model.config().prototype_width;

  // Best candidate per (bag, prototype), then reduced over bags in order.
  std::vector<std::vector<std::optional<Candidate>>> per_bag(bags.size());
  parallel_for(bags.size(), [&](std::size_t b) {
    auto& best = per_bag[b];
    best.assign(m, std::nullopt);
    scan_bag(model, bags[b], [&](std::size_t i, std::span<const float> grid, const Shape& gs, const Tensor<float>& maps) {
      const std::size_t mh = maps.dim(1), mw = maps.dim(2);
      for (std::size_t j = 0; j < m; ++j) {
        const auto& slot = model.bank().slots[j];
        if (!slot.active || slot.label != bags[b].label) continue;
        for (std::size_t r = 0; r < mh; ++r) {
          for (std::size_t c = 0; c < mw; ++c) {
            const float d2 = maps.at(j, r, c);
            if (!best[j] || d2 < best[j]->sq_distance) {
              best[j] = Candidate{d2, {bags[b].id, b, i, r, c}, {}};
              best[j]->window = extract_window<float>(grid, gs, ph, pw, r, c);
            }
          }
        }
      }
    });
  });

  ProjectionReport report;
  auto& bank = model.bank();
  for (std::size_t j = 0; j < m; ++j) {
    if (!bank.slots[j].active) continue;
    const Candidate* best = nullptr;
    for (const auto& bag_best : per_bag) {
      if (bag_best[j] && (!best || bag_best[j]->sq_distance < best->sq_distance)) best = &*bag_best[j];
    }
    if (!best) throw InvalidInputError("no patch available for prototype " + std::to_string(j));
    std::copy(best->window.begin(), best->window.end(), bank.vector(j).begin());
    report.changes.push_back({j, bank.slots[j].label, bank.slots[j].provenance, best->patch, best->sq_distance});
    bank.slots[j].provenance = best->patch;
  }
  return report;
}

std::size_t PrototypeCensus::own_class_count() const {
  return static_cast<std::size_t>(
      std::count_if(neighbors.begin(), neighbors.end(), [&](const Neighbor& n) { return n.label == label; }));
}

namespace {

bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  return std::tie(a.sq_distance, a.patch.bag_id, a.patch.instance, a.patch.row, a.patch.col) <
         std::tie(b.sq_distance, b.patch.bag_id, b.patch.instance, b.patch.row, b.patch.col);
}

void keep_best(std::vector<Neighbor>& list, Neighbor n, std::size_t k) {
  if (list.size() == k && !neighbor_less(n, list.back())) return;
  list.insert(std::upper_bound(list.begin(), list.end(), n, neighbor_less), std::move(n));
  if (list.size() > k) list.pop_back();
}

}  // namespace

std::vector<PrototypeCensus> prototype_neighbor_census(const ProtoMilModel<float>& model, const BagSet& bags,
                                                       std::size_t k_neighbors) {
  if (k_neighbors == 0) throw InvalidInputError("census needs k >= 1");
  if (bags.empty()) throw InvalidInputError("census needs a nonempty dataset");
  const auto [mh, mw] = model.config().map_shape();
  std::size_t patches = 0;
  for (const auto& b : bags) patches += b.size() * mh * mw;
  if (patches < k_neighbors) {
    throw InvalidInputError("dataset has " + std::to_string(patches) + " patches, fewer than k = " +
                            std::to_string(k_neighbors));
  }
  const std::size_t m = model.bank().size();
  std::vector<std::vector<std::vector<Neighbor>>> per_bag(bags.size());
  parallel_for(bags.size(), [&](std::size_t b) {
    auto& lists = per_bag[b];
    lists.assign(m, {});
    scan_bag(model, bags[b], [&](std::size_t i, std::span<const float>, const Shape&, const Tensor<float>& maps) {
      for (std::size_t j = 0; j < m; ++j) {
        if (!model.bank().slots[j].active) continue;
        for (std::size_t r = 0; r < maps.dim(1); ++r)
          for (std::size_t c = 0; c < maps.dim(2); ++c)
            keep_best(lists[j], {{bags[b].id, b, i, r, c}, bags[b].label, maps.at(j, r, c)}, k_neighbors);
      }
    });
  });

  std::vector<PrototypeCensus> out;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& slot = model.bank().slots[j];
    if (!slot.active) continue;
    PrototypeCensus census{j, slot.label, {}};
    for (auto& lists : per_bag)
      for (auto& n : lists[j]) keep_best(census.neighbors, n, k_neighbors);
    out.push_back(std::move(census));
  }
  return out;
}

void PruneConfig::validate() const {
  if (k_neighbors == 0) throw ConfigError("k_neighbors must be at least 1");
  if (!(max_removal_fraction > 0 && max_removal_fraction < 1)) {
    throw ConfigError("max_removal_fraction must lie in (0, 1)");
  }
}

PruneDecision choose_pruning(const std::vector<PrototypeCensus>& census, std::span<const PrototypeSlot> slots,
                             const PruneConfig& config) {
  config.validate();
  PruneDecision decision;
  std::size_t active[kNumClasses] = {0, 0};
  for (const auto& s : slots) {
    if (s.active) {
      ++decision.active_before;
      ++active[s.label];
    }
  }
  decision.max_removals = static_cast<std::size_t>(
      std::floor(config.max_removal_fraction * static_cast<double>(decision.active_before)));
  for (std::size_t r = config.k_neighbors; r >= 1; --r) {
    std::vector<std::size_t> failing;
    std::size_t removed[kNumClasses] = {0, 0};
    for (const auto& c : census) {
      if (c.own_class_count() < r) {
        failing.push_back(c.prototype);
        ++removed[c.label];
      }
    }
    const bool keeps_classes = removed[0] < active[0] && removed[1] < active[1];
    if (failing.size() <= decision.max_removals && keeps_classes) {
      decision.threshold = r;
      decision.removed = std::move(failing);
      break;
    }
  }
  return decision;
}

json to_json(const PruneReport& report) {
  json census = json::array();
  for (const auto& c : report.census) {
    json neighbors = json::array();
    for (const auto& n : c.neighbors) {
      neighbors.push_back({{"patch", to_json(n.patch)}, {"label", n.label}, {"sq_distance", n.sq_distance}});
    }
    census.push_back({{"prototype", c.prototype},
                      {"class", c.label},
                      {"own_class", c.own_class_count()},
                      {"other_class", c.neighbors.size() - c.own_class_count()},
                      {"neighbors", neighbors}});
  }
  return {{"k_neighbors", report.config.k_neighbors},
          {"max_removal_fraction", report.config.max_removal_fraction},
          {"finetune_epochs", report.config.finetune_epochs},
          {"threshold", report.decision.threshold ? json(*report.decision.threshold) : json(nullptr)},
          {"feasible", report.decision.threshold.has_value()},
          {"removed", report.decision.removed},
          {"active_before", report.decision.active_before},
          {"active_after", report.active_after},
          {"max_removals", report.decision.max_removals},
          {"before", to_json(report.before)},
          {"after", to_json(report.after)},
          {"census", census}};
}

PruneReport prune_prototypes(ProtoMilModel<float>& model, const BagSet& bags, const PruneConfig& config,
                             const OptimizerConfig& optimizer, std::uint64_t seed, const BagSet* evaluation) {
  config.validate();
  const BagSet& eval_bags = evaluation ? *evaluation : bags;
  PruneReport report;
  report.config = config;
  report.before = evaluate(model, eval_bags);
  report.census = prototype_neighbor_census(model, bags, config.k_neighbors);
  report.decision = choose_pruning(report.census, model.bank().slots, config);
  for (std::size_t j : report.decision.removed) model.bank().slots[j].active = false;
  model.bank().check_invariants();
  report.active_after = model.bank().active_count();
  if (!report.decision.removed.empty()) run_head_finetune(model, bags, config.finetune_epochs, optimizer, seed);
  report.after = evaluate(model, eval_bags);
  return report;
}

}  // namespace protomil
