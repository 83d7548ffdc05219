#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

#include "protomil/checkpoint.hpp"
#include "protomil/error.hpp"
#include "protomil/tensor_io.hpp"
#include "protomil/train.hpp"
#include "test_support.hpp"

namespace protomil {
namespace {

using testing::TempDir;

BagSet toy_bags(std::uint64_t seed, std::size_t n = 10) {
  Rng rng(seed);
  BagSet bags;
  for (std::size_t b = 0; b < n; ++b)
    bags.push_back(testing::random_pixel_bag(rng, 2 + rng.below(3), 20, static_cast<int>(b % 2), "toy_" + std::to_string(b)));
  return bags;
}

// Embedding bags where positives carry one instance shifted along the first axis.
BagSet separable_bags(std::uint64_t seed, std::size_t n, std::size_t dim) {
  Rng rng(seed);
  BagSet bags;
  for (std::size_t b = 0; b < n; ++b) {
    const int label = static_cast<int>(b % 2);
    Bag bag = testing::random_embedding_bag(rng, 3, dim, label, "sep_" + std::to_string(b));
    if (label == 1) {
      std::vector<float> e(bag.instances[0].embedding().begin(), bag.instances[0].embedding().end());
      e[0] += 3.0f;
      bag.instances[0] = Instance::from_embedding(std::move(e));
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

std::vector<std::vector<float>> snapshot(ProtoMilModel<float>& model, std::optional<ParamGroup> group = {}) {
  std::vector<std::vector<float>> out;
  for (auto* p : model.parameters())
    if (!group || p->group == *group) out.push_back(p->value.storage());
  return out;
}

TEST(Schedule, PresetsAndValidation) {
  const TrainSchedule m = TrainSchedule::mnist();
  EXPECT_EQ(std::tie(m.warmup_epochs, m.finetune_epochs, m.joint_epochs), std::make_tuple(30u, 20u, 10u));
  const TrainSchedule h = TrainSchedule::histology();
  EXPECT_EQ(std::tie(h.warmup_epochs, h.finetune_epochs, h.joint_epochs), std::make_tuple(60u, 20u, 20u));
  EXPECT_THROW((TrainSchedule{0, 0, 0, 10, 0}.validate()), ConfigError);
  EXPECT_THROW((TrainSchedule{1, 0, 0, 0, 0}.validate()), ConfigError);
  ProtoMilModel<float> model(testing::tiny_conv_config(), 1);
  EXPECT_THROW(run_full_training(model, toy_bags(1), TrainSchedule{0, 0, 0, 10, 0}, OptimizerConfig{}), ConfigError);

  OptimizerConfig o;
  EXPECT_EQ(o.adam.beta1, 0.99);
  EXPECT_EQ(o.adam.beta2, 0.999);
  EXPECT_EQ(o.adam.weight_decay, 1e-3);
  o.batch_size = 2;
  EXPECT_THROW(o.validate(), ConfigError);
}

TEST(Schedule, LearningRates) {
  const OptimizerConfig o;
  EXPECT_DOUBLE_EQ(o.warmup.at(0), 1e-3);
  EXPECT_DOUBLE_EQ(o.warmup.at(2), 1e-3 * 0.95 * 0.95);
  EXPECT_DOUBLE_EQ(o.joint.at(4), 1e-4);
  EXPECT_DOUBLE_EQ(o.joint.at(5), 1e-5);
  EXPECT_DOUBLE_EQ(o.joint.at(10), 1e-6);
}

TEST(Warmup, ZeroEpochsLeavesModelUnchanged) {
  ProtoMilModel<float> model(testing::tiny_conv_config(), 3);
  const auto before = snapshot(model);
  TrainReport report;
  run_warmup(model, toy_bags(2), TrainSchedule{0, 1, 0, 10, 0}, OptimizerConfig{}, &report);
  run_head_finetune(model, toy_bags(2), 0, OptimizerConfig{}, 0, &report);
  EXPECT_EQ(snapshot(model), before);
  EXPECT_TRUE(report.epochs.empty());
}

TEST(Warmup, ZeroLearningRateLeavesParametersUnchanged) {
  ProtoMilModel<float> model(testing::tiny_conv_config(), 3);
  const auto before = snapshot(model);
  OptimizerConfig o;
  o.warmup.base = 0.0;
  run_warmup(model, toy_bags(2, 1), TrainSchedule{1, 0, 0, 10, 0}, o);
  EXPECT_EQ(snapshot(model), before);
}

TEST(Warmup, HeadFrozenOthersMove) {
  ProtoMilModel<float> model(testing::tiny_conv_config(), 3);
  const auto head = snapshot(model, ParamGroup::head);
  const auto enc = snapshot(model, ParamGroup::encoder);
  const auto protos = snapshot(model, ParamGroup::prototypes);
  const auto att = snapshot(model, ParamGroup::attention);
  run_warmup(model, toy_bags(4), TrainSchedule{1, 0, 0, 10, 0}, OptimizerConfig{});
  EXPECT_EQ(snapshot(model, ParamGroup::head), head);
  EXPECT_NE(snapshot(model, ParamGroup::encoder), enc);
  EXPECT_NE(snapshot(model, ParamGroup::prototypes), protos);
  EXPECT_NE(snapshot(model, ParamGroup::attention), att);
}

TEST(Finetune, OnlyAttentionAndHeadMoveAndCrossEntropyDrops) {
  ProtoMilModel<float> model(testing::embedding_config(6, 2), 5);
  const BagSet bags = separable_bags(7, 20, 6);
  const auto enc = snapshot(model, ParamGroup::encoder);
  const auto protos = snapshot(model, ParamGroup::prototypes);
  const auto head = snapshot(model, ParamGroup::head);
  OptimizerConfig o;
  o.lr_finetune = 1e-2;
  TrainReport report;
  run_head_finetune(model, bags, 30, o, 1, &report);
  EXPECT_EQ(snapshot(model, ParamGroup::encoder), enc);
  EXPECT_EQ(snapshot(model, ParamGroup::prototypes), protos);
  EXPECT_NE(snapshot(model, ParamGroup::head), head);
  ASSERT_EQ(report.epochs.size(), 30u);
  EXPECT_LT(report.epochs.back().loss.cross_entropy, report.epochs.front().loss.cross_entropy);
  for (const auto& e : report.epochs) {
    EXPECT_EQ(e.phase, "finetune");
    EXPECT_EQ(e.loss.cluster, 0.0);
  }
}

TEST(Warmup, NonFiniteLossAborts) {
  ProtoMilModel<float> model(testing::embedding_config(4, 1), 1);
  model.bank().vector(0)[0] = std::numeric_limits<float>::quiet_NaN();
  const BagSet bags = separable_bags(1, 2, 4);
  try {
    run_warmup(model, bags, TrainSchedule{1, 0, 0, 10, 0}, OptimizerConfig{});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.kind(), "numerical_abort");
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("sep_"), std::string::npos);
  }
}

// Recorded once from a verified build; regenerate with PROTOMIL_REGENERATE_FIXTURES=1.
TEST(Warmup, GoldenLossSequence) {
  ProtoMilModel<float> model(testing::tiny_conv_config(4, 2, 3, 1), 2024);
  TrainReport report;
  run_warmup(model, toy_bags(99), TrainSchedule{2, 0, 0, 10, 7}, OptimizerConfig{}, &report);
  ASSERT_EQ(report.epochs.size(), 2u);
  nlohmann::json observed = nlohmann::json::array();
  for (const auto& e : report.epochs)
    observed.push_back({{"cross_entropy", e.loss.cross_entropy},
                        {"cluster", e.loss.cluster},
                        {"separation", e.loss.separation},
                        {"total", e.loss.total}});

  const auto path = std::filesystem::path(PROTOMIL_FIXTURE_DIR) / "warmup_golden.json";
  if (std::getenv("PROTOMIL_REGENERATE_FIXTURES")) {
    write_text_file(path, observed.dump(2) + "\n");
    GTEST_SKIP() << "fixture regenerated";
  }
  const auto golden = nlohmann::json::parse(read_text_file(path));
  ASSERT_EQ(golden.size(), observed.size());
  for (std::size_t e = 0; e < golden.size(); ++e)
    for (const char* key : {"cross_entropy", "cluster", "separation", "total"})
      EXPECT_NEAR(observed[e][key].get<double>(), golden[e][key].get<double>(), 1e-5) << "epoch " << e << " " << key;
}

TEST(FullTraining, PhaseOrderProjectionsAndMonotoneEpochs) {
  ProtoMilModel<float> model(testing::tiny_conv_config(4, 2, 3, 1), 10);
  const BagSet bags = toy_bags(10, 6);
  const TrainSchedule schedule{2, 1, 7, 3, 3};
  const TrainReport report = run_full_training(model, bags, schedule, OptimizerConfig{});
  // warmup 2, then finetune 1, then 3 joint chunks (3, 3, 1) each followed by a 1-epoch finetune.
  std::vector<std::string> phases;
  for (const auto& e : report.epochs) phases.push_back(e.phase);
  EXPECT_EQ(phases, (std::vector<std::string>{"warmup", "warmup", "finetune", "joint", "joint", "joint", "finetune",
                                              "joint", "joint", "joint", "finetune", "joint", "finetune"}));
  for (std::size_t i = 0; i < report.epochs.size(); ++i) EXPECT_EQ(report.epochs[i].epoch, i + 1);
  ASSERT_EQ(report.projections.size(), 4u);
  EXPECT_EQ(report.projections[0].after_epoch, 2u);
  for (const auto& p : report.projections) EXPECT_EQ(p.report.changes.size(), 4u);

  // Joint learning rate steps every 5 joint epochs regardless of chunking.
  std::vector<double> joint_lr;
  for (const auto& e : report.epochs)
    if (e.phase == "joint") joint_lr.push_back(e.lr);
  EXPECT_EQ(joint_lr, (std::vector<double>{1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4 * 0.1, 1e-4 * 0.1}));

  // Every prototype sits exactly on a same-class training patch at the end.
  for (std::size_t j = 0; j < model.bank().size(); ++j) {
    const auto ref = *model.bank().slots[j].provenance;
    EXPECT_EQ(bags[ref.bag_index].label, model.bank().slots[j].label);
    const auto tr = model.infer(bags[ref.bag_index]);
    const Shape gs{tr.patch_grids.dim(1), tr.patch_grids.dim(2), tr.patch_grids.dim(3)};
    EXPECT_EQ(extract_window<float>(tr.patch_grids.slice(ref.instance), gs, 1, 1, ref.row, ref.col),
              std::vector<float>(model.bank().vector(j).begin(), model.bank().vector(j).end()));
  }
  const std::string jsonl = report.to_jsonl();
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'),
            static_cast<long>(report.epochs.size() + report.phases.size() + report.snapshots.size() +
                              report.projections.size() + report.checkpoints.size()));
}

TEST(FullTraining, DeterministicCheckpoints) {
  const BagSet bags = toy_bags(12, 6);
  const TrainSchedule schedule{2, 1, 2, 1, 42};
  TempDir a("det_a"), b("det_b");
  for (const auto* dir : {&a, &b}) {
    ProtoMilModel<float> model(testing::tiny_conv_config(4, 2, 3, 1), 77);
    TrainOptions options;
    options.checkpoint_dir = dir->path() / "ckpts";
    run_full_training(model, bags, schedule, OptimizerConfig{}, options);
    save_checkpoint(model, dir->path() / "final");
  }
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    EXPECT_EQ(read_file_bytes(entry.path()), read_file_bytes(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 20u);
}

}  // namespace
}  // namespace protomil
