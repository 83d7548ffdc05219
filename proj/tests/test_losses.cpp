#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "protomil/error.hpp"
#include "protomil/losses.hpp"
#include "test_support.hpp"

namespace protomil {
namespace {

// Triple-nested scan over (instance, prototype, window) in float arithmetic,
// summing each squared distance in (depth, row, col) order like the model.
float brute_force_term(const BagForwardTrace<float>& tr, const PrototypeBank<float>& bank, int label,
                       bool same_class) {
  const std::size_t k = tr.size();
  const std::size_t depth = tr.patch_grids.dim(1), gh = tr.patch_grids.dim(2), gw = tr.patch_grids.dim(3);
  const std::size_t ph = bank.vectors.value.dim(2), pw = bank.vectors.value.dim(3);
  float sum = 0.0f;
  for (std::size_t i = 0; i < k; ++i) {
    float best = std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < bank.size(); ++j) {
      if (!bank.slots[j].active || (bank.slots[j].label == label) != same_class) continue;
      for (std::size_t r = 0; r + ph <= gh; ++r)
        for (std::size_t c = 0; c + pw <= gw; ++c) {
          float d2 = 0.0f;
          for (std::size_t d = 0; d < depth; ++d)
            for (std::size_t a = 0; a < ph; ++a)
              for (std::size_t b = 0; b < pw; ++b) {
                const float diff = tr.patch_grids.at(i, d, r + a, c + b) - bank.vectors.value.at(j, d, a, b);
                d2 += diff * diff;
              }
          best = std::min(best, d2);
        }
    }
    sum += tr.attention.weights[i] * best;
  }
  return sum / static_cast<float>(k);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy<double>({0.0, 0.0}, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(cross_entropy<double>({-50.0, 50.0}, 1), 0.0, 1e-12);
  const double oracle = -std::log(std::exp(1.2) / (std::exp(1.2) + std::exp(-0.3)));
  EXPECT_NEAR(cross_entropy<double>({1.2, -0.3}, 0), oracle, 1e-12);
  EXPECT_GE(cross_entropy<float>({80.0f, -80.0f}, 0), 0.0f);
  EXPECT_THROW(cross_entropy<double>({0.0, 0.0}, 2), InvalidInputError);
}

TEST(TotalLoss, CombinesComponentsWithWeights) {
  const LossBreakdown b = combine_losses(0.7, 0.2, -0.1, LossConfig{});
  EXPECT_NEAR(b.total, 0.852, 1e-12);
  EXPECT_DOUBLE_EQ(combine_losses(0.7, 0.2, -0.1, LossConfig{0.0, 0.0, false}).total, 0.7);
}

TEST(TotalLoss, ConfigRejectsNegativeOrNonFiniteWeights) {
  EXPECT_THROW((LossConfig{-0.1, 0.08, false}.validate()), ConfigError);
  EXPECT_THROW((LossConfig{0.8, std::numeric_limits<double>::infinity(), false}.validate()), ConfigError);
}

TEST(ClusterLoss, SingleInstanceSinglePrototypeIsSquaredDistance) {
  ProtoMilModel<double> model(testing::embedding_config(3, 1), 1);
  auto& bank = model.bank();
  for (std::size_t d = 0; d < 3; ++d) {
    bank.vector(0)[d] = 0.0;  // class 0
    bank.vector(1)[d] = 1.0;  // class 1
  }
  const Bag bag{"b", 0, {Instance::from_embedding({0.5f, 0.0f, 0.0f})}};
  const auto tr = model.infer(bag);
  EXPECT_DOUBLE_EQ(cluster_loss(tr, 0, bank), 0.25);
  EXPECT_DOUBLE_EQ(separation_loss(tr, 0, bank), -(0.25 + 1.0 + 1.0));
}

TEST(ClusterLoss, ZeroWhenEveryInstanceHoldsAPrototype) {
  ProtoMilModel<float> model(testing::embedding_config(4, 2), 3);
  const auto& bank = model.bank();
  Bag bag{"b", 1, {}};
  for (std::size_t j : {2u, 3u, 2u}) {
    const auto v = bank.vector(j);
    bag.instances.push_back(Instance::from_embedding({v.begin(), v.end()}));
  }
  const auto tr = model.infer(bag);
  EXPECT_EQ(cluster_loss(tr, 1, bank), 0.0f);
  // The same instances are the other class's prototypes from class 0's view.
  EXPECT_EQ(separation_loss(tr, 0, bank), -0.0f);
}

TEST(Losses, MissingPrototypeClassIsInvariantViolation) {
  ProtoMilModel<float> model(testing::embedding_config(4, 1), 3);
  model.bank().slots[1].active = false;  // bypasses check_invariants on purpose
  Rng rng(2);
  const auto tr = model.infer(testing::random_embedding_bag(rng, 2, 4, 1));
  EXPECT_THROW(cluster_loss(tr, 1, model.bank()), InvariantError);
  EXPECT_THROW(separation_loss(tr, 0, model.bank()), InvariantError);
}

TEST(Losses, MatchBruteForceExactlyOnFiftyBags) {
  Rng rng(1234);
  for (int t = 0; t < 50; ++t) {
    const bool pixels = t % 2 == 0;
    const ModelConfig cfg = pixels ? testing::tiny_conv_config(3, 1 + t % 3, 4, 1 + t % 2)
                                   : testing::embedding_config(5, 1 + t % 3, 4);
    ProtoMilModel<float> model(cfg, 100 + t);
    if (t % 5 == 0 && cfg.prototypes_per_class > 1) model.bank().slots[0].active = false;
    const int label = static_cast<int>(rng.below(2));
    const std::size_t k = 1 + rng.below(6);
    const Bag bag = pixels ? testing::random_pixel_bag(rng, k, 20, label) : testing::random_embedding_bag(rng, k, 5, label);
    const auto tr = model.infer(bag);
    const float clst = cluster_loss(tr, label, model.bank());
    const float sep = separation_loss(tr, label, model.bank());
    EXPECT_EQ(clst, brute_force_term(tr, model.bank(), label, true)) << "bag " << t;
    EXPECT_EQ(sep, -brute_force_term(tr, model.bank(), label, false)) << "bag " << t;
    EXPECT_GE(clst, 0.0f);
    EXPECT_LE(sep, 0.0f);

    const LossConfig lc;
    const LossBreakdown total = total_loss(tr, label, model.bank(), lc);
    EXPECT_NEAR(total.total, total.cross_entropy + lc.lambda1 * total.cluster + lc.lambda2 * total.separation, 1e-6);
    EXPECT_EQ(total.cross_entropy, static_cast<double>(cross_entropy(tr.logits, label)));
    EXPECT_EQ(total_loss(tr, label, model.bank(), LossConfig{0, 0, false}).total, total.cross_entropy);
  }
}

TEST(Losses, BoundedByLargestInstanceMinimum) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    ProtoMilModel<double> model(testing::embedding_config(4, 2), 40 + t);
    const int label = t % 2;
    const auto tr = model.infer(testing::random_embedding_bag(rng, 1 + t % 7, 4, label));
    double worst_same = 0, worst_other = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      double same = 1e300, other = 1e300;
      for (std::size_t j = 0; j < model.bank().size(); ++j) {
        double& slot = model.bank().slots[j].label == label ? same : other;
        slot = std::min(slot, tr.min_sq_distance(i, j));
      }
      worst_same = std::max(worst_same, same);
      worst_other = std::max(worst_other, other);
    }
    EXPECT_LE(cluster_loss(tr, label, model.bank()), worst_same);
    EXPECT_LE(-separation_loss(tr, label, model.bank()), worst_other);
  }
}

TEST(Losses, PermutationInvariant) {
  Rng rng(77);
  for (int t = 0; t < 10; ++t) {
    ProtoMilModel<double> model(testing::embedding_config(6, 3), 9 + t);
    Bag bag = testing::random_embedding_bag(rng, 2 + t, 6, t % 2);
    const auto a = total_loss(model.infer(bag), bag.label, model.bank(), LossConfig{});
    std::reverse(bag.instances.begin(), bag.instances.end());
    const auto b = total_loss(model.infer(bag), bag.label, model.bank(), LossConfig{});
    EXPECT_NEAR(a.cluster, b.cluster, 1e-6);
    EXPECT_NEAR(a.separation, b.separation, 1e-6);
    EXPECT_NEAR(a.total, b.total, 1e-6);
  }
}

}  // namespace
}  // namespace protomil
