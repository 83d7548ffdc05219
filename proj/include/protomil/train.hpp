#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/losses.hpp"
#include "protomil/metrics.hpp"
#include "protomil/optim.hpp"
#include "protomil/proto_ops.hpp"

namespace protomil {

struct TrainSchedule {
  std::size_t warmup_epochs = 30;
  std::size_t finetune_epochs = 20;
  std::size_t joint_epochs = 10;
  std::size_t projection_every = 10;
  std::uint64_t seed = 0;

  void validate() const;
  static TrainSchedule mnist() { return {30, 20, 10, 10, 0}; }
  static TrainSchedule histology() { return {60, 20, 20, 10, 0}; }
};

struct OptimizerConfig {
  AdamConfig adam;
  ExponentialLr warmup{1e-3, 0.95};
  double lr_finetune = 1e-3;
  StepLr joint{1e-4, 5, 0.1};
  std::size_t batch_size = 1;
  LossConfig loss;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, monotone over the whole run
  std::string phase;      // warmup | finetune | joint
  std::size_t phase_epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;     // mean over bags
  double train_accuracy = 0.0;
  double seconds = 0.0;
};

struct PhaseTiming {
  std::string phase;
  std::size_t first_epoch = 0;
  std::size_t epochs = 0;
  double seconds = 0.0;
};

struct MetricSnapshot {
  std::size_t after_epoch = 0;
  std::string phase;
  std::string split;  // train | validation
  MetricReport metrics;
};

struct ProjectionEvent {
  std::size_t after_epoch = 0;
  ProjectionReport report;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<PhaseTiming> phases;
  std::vector<MetricSnapshot> snapshots;
  std::vector<std::string> checkpoints;
  std::vector<ProjectionEvent> projections;

  std::size_t last_epoch() const { return epochs.empty() ? 0 : epochs.back().epoch; }
  // One JSON object per line: epochs, then phases, snapshots, projections, checkpoints.
  std::string to_jsonl() const;
};

nlohmann::json to_json(const EpochRecord& record);

struct TrainOptions {
  // Evaluated after every phase when non-null.
  const BagSet* validation = nullptr;
  // Checkpoints written to <dir>/epoch_NNNN after every phase when non-empty.
  std::filesystem::path checkpoint_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Warmup: every parameter except the classifier head, total loss,
// exponentially decaying learning rate.
void run_warmup(ProtoMilModel<float>& model, const BagSet& bags, const TrainSchedule& schedule,
                const OptimizerConfig& optimizer, TrainReport* report = nullptr, const TrainOptions& options = {});

// Attention and head only, cross-entropy, constant learning rate. The encoder
// and prototypes are frozen, so similarity vectors are computed once.
void run_head_finetune(ProtoMilModel<float>& model, const BagSet& bags, std::size_t epochs,
                       const OptimizerConfig& optimizer, std::uint64_t seed, TrainReport* report = nullptr,
                       const TrainOptions& options = {});

// All parameters, total loss, step-decayed learning rate; `first_joint_epoch`
// keeps the scheduler position across chunks.
void run_joint(ProtoMilModel<float>& model, const BagSet& bags, std::size_t epochs, std::size_t first_joint_epoch,
               Adam<float>& adam, const TrainSchedule& schedule, const OptimizerConfig& optimizer,
               TrainReport* report = nullptr, const TrainOptions& options = {});

// warmup -> project -> fine-tune, then joint epochs in chunks of
// projection_every, each chunk followed by project -> fine-tune.
TrainReport run_full_training(ProtoMilModel<float>& model, const BagSet& bags, const TrainSchedule& schedule,
                              const OptimizerConfig& optimizer, const TrainOptions& options = {});

}  // namespace protomil
