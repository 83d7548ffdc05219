#include "protomil/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "protomil/checkpoint.hpp"
#include "protomil/error.hpp"
#include "protomil/parallel.hpp"
#include "protomil/rng.hpp"

namespace protomil {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

void TrainSchedule::validate() const {
  if (warmup_epochs == 0 && finetune_epochs == 0 && joint_epochs == 0) {
    throw ConfigError("training schedule has no epochs in any phase");
  }
  if (projection_every == 0) throw ConfigError("projection_every must be positive");
}

void OptimizerConfig::validate() const {
  if (batch_size != 1) throw ConfigError("batch_size must be 1 (one bag per step)");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.weight_decay >= 0) || !(adam.eps > 0)) throw ConfigError("invalid Adam weight_decay or eps");
  if (!(warmup.base >= 0) || !(warmup.gamma > 0)) throw ConfigError("invalid warmup learning rate schedule");
  if (!(lr_finetune >= 0)) throw ConfigError("invalid fine-tune learning rate");
  if (!(joint.base >= 0) || !(joint.gamma > 0) || joint.step_size == 0) {
    throw ConfigError("invalid joint learning rate schedule");
  }
  loss.validate();
}

json to_json(const EpochRecord& r) {
  return {{"type", "epoch"},
          {"epoch", r.epoch},
          {"phase", r.phase},
          {"phase_epoch", r.phase_epoch},
          {"lr", r.lr},
          {"loss", {{"cross_entropy", r.loss.cross_entropy},
                    {"cluster", r.loss.cluster},
                    {"separation", r.loss.separation},
                    {"total", r.loss.total}}},
          {"train_accuracy", r.train_accuracy},
          {"seconds", r.seconds}};
}

std::string TrainReport::to_jsonl() const {
  std::string out;
  auto line = [&](const json& j) { out += j.dump() + "\n"; };
  for (const auto& e : epochs) line(to_json(e));
  for (const auto& p : phases) {
    line({{"type", "phase"}, {"phase", p.phase}, {"first_epoch", p.first_epoch}, {"epochs", p.epochs},
          {"seconds", p.seconds}});
  }
  for (const auto& s : snapshots) {
    line({{"type", "metrics"}, {"after_epoch", s.after_epoch}, {"phase", s.phase}, {"split", s.split},
          {"metrics", to_json(s.metrics)}});
  }
  for (const auto& p : projections) {
    line({{"type", "projection"}, {"after_epoch", p.after_epoch}, {"changes", to_json(p.report)}});
  }
  for (const auto& c : checkpoints) line({{"type", "checkpoint"}, {"path", c}});
  return out;
}

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(seed, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

void check_finite(const LossBreakdown& loss, const BagForwardTrace<float>& trace, std::size_t epoch,
                  const std::string& phase) {
  if (!std::isfinite(loss.total) || !std::isfinite(trace.logits[0]) || !std::isfinite(trace.logits[1])) {
    throw NumericalError("non-finite loss in " + phase + " epoch " + std::to_string(epoch) + " at bag " +
                         trace.bag_id);
  }
}

void check_params_finite(ProtoMilModel<float>& model, std::size_t epoch, const std::string& phase,
                         const std::string& bag_id) {
  for (auto* p : model.parameters()) {
    for (float v : p->value.values()) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite parameter " + p->name + " after " + phase + " epoch " +
                             std::to_string(epoch) + " at bag " + bag_id);
      }
    }
  }
}

std::vector<Param<float>*> trainable_params(ProtoMilModel<float>& model, Trainable t) {
  std::vector<Param<float>*> out;
  for (auto* p : model.parameters())
    if (t.includes(p->group)) out.push_back(p);
  return out;
}

struct EpochAccumulator {
  LossBreakdown sum;
  std::size_t correct = 0, count = 0;

  void add(const LossBreakdown& l, float probability, int label) {
    sum.cross_entropy += l.cross_entropy;
    sum.cluster += l.cluster;
    sum.separation += l.separation;
    sum.total += l.total;
    correct += (probability >= 0.5f) == (label == 1);
    ++count;
  }
  LossBreakdown mean() const {
    const double n = static_cast<double>(count);
    return {sum.cross_entropy / n, sum.cluster / n, sum.separation / n, sum.total / n};
  }
};

void finish_epoch(TrainReport* report, const TrainOptions& options, EpochRecord record, const EpochAccumulator& acc) {
  record.loss = acc.mean();
  record.train_accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.count);
  if (options.on_epoch) options.on_epoch(record);
  if (report) report->epochs.push_back(std::move(record));
}

std::size_t next_epoch(const TrainReport* report, std::size_t local) { return (report ? report->last_epoch() : local) + 1; }

// Shared loop for the phases that run the full forward and backward pass.
void run_full_epochs(ProtoMilModel<float>& model, const BagSet& bags, std::size_t epochs, const std::string& phase,
                     Trainable trainable, Adam<float>& adam, const std::function<double(std::size_t)>& lr_at,
                     std::size_t phase_offset, std::uint64_t seed, const OptimizerConfig& optimizer,
                     TrainReport* report, const TrainOptions& options) {
  std::size_t local = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto t0 = Clock::now();
    const std::size_t epoch = next_epoch(report, local++);
    const double lr = lr_at(phase_offset + e);
    EpochAccumulator acc;
    for (std::size_t b : epoch_order(bags.size(), seed, epoch)) {
      const Bag& bag = bags[b];
      adam.zero_grad();
      LossSeeds<float> seeds;
      const auto trace = model.forward(bag);
      const LossBreakdown loss = total_loss(trace, bag.label, model.bank(), optimizer.loss, &seeds);
      check_finite(loss, trace, epoch, phase);
      model.backward(trace, seeds, trainable);
      adam.step(lr);
      acc.add(loss, trace.probability(), bag.label);
    }
    check_params_finite(model, epoch, phase, "<end of epoch>");
    finish_epoch(report, options, {epoch, phase, phase_offset + e + 1, lr, {}, 0.0, seconds_since(t0)}, acc);
  }
}

void close_phase(ProtoMilModel<float>& model, const std::string& phase, std::size_t first_epoch, std::size_t epochs,
                 Clock::time_point t0, const BagSet& bags, TrainReport* report, const TrainOptions& options) {
  if (!report) return;
  report->phases.push_back({phase, first_epoch, epochs, seconds_since(t0)});
  if (epochs == 0) return;
  const std::size_t at = report->last_epoch();
  report->snapshots.push_back({at, phase, "train", evaluate(model, bags)});
  if (options.validation) report->snapshots.push_back({at, phase, "validation", evaluate(model, *options.validation)});
  if (!options.checkpoint_dir.empty()) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04zu", at);
    const auto dir = options.checkpoint_dir / name;
    save_checkpoint(model, dir, {{"after_epoch", at}, {"phase", phase}});
    report->checkpoints.push_back(dir.string());
  }
}

}  // namespace

void run_warmup(ProtoMilModel<float>& model, const BagSet& bags, const TrainSchedule& schedule,
                const OptimizerConfig& optimizer, TrainReport* report, const TrainOptions& options) {
  optimizer.validate();
  if (schedule.warmup_epochs == 0) return;
  if (bags.empty()) throw InvalidInputError("warmup needs at least one bag");
  const auto t0 = Clock::now();
  const std::size_t first = next_epoch(report, 0);
  Adam<float> adam(trainable_params(model, Trainable::warmup()), optimizer.adam);
  run_full_epochs(model, bags, schedule.warmup_epochs, "warmup", Trainable::warmup(), adam,
                  [&](std::size_t e) { return optimizer.warmup.at(e); }, 0, schedule.seed, optimizer, report, options);
  close_phase(model, "warmup", first, schedule.warmup_epochs, t0, bags, report, options);
}

void run_head_finetune(ProtoMilModel<float>& model, const BagSet& bags, std::size_t epochs,
                       const OptimizerConfig& optimizer, std::uint64_t seed, TrainReport* report,
                       const TrainOptions& options) {
  optimizer.validate();
  if (epochs == 0) return;
  if (bags.empty()) throw InvalidInputError("fine-tuning needs at least one bag");
  const auto t0 = Clock::now();
  const std::size_t first = next_epoch(report, 0);

  std::vector<Tensor<float>> cached(bags.size());
  parallel_for(bags.size(), [&](std::size_t b) { cached[b] = model.infer(bags[b]).similarities; });

  Adam<float> adam(trainable_params(model, Trainable::last_layers()), optimizer.adam);
  std::size_t local = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto te = Clock::now();
    const std::size_t epoch = next_epoch(report, local++);
    EpochAccumulator acc;
    for (std::size_t b : epoch_order(bags.size(), seed, epoch)) {
      adam.zero_grad();
      LossSeeds<float> seeds;
      const auto trace = model.forward_from_similarities(cached[b], bags[b].id);
      const LossBreakdown loss = cross_entropy_loss(trace, bags[b].label, &seeds);
      check_finite(loss, trace, epoch, "finetune");
      model.backward(trace, seeds, Trainable::last_layers());
      adam.step(optimizer.lr_finetune);
      acc.add(loss, trace.probability(), bags[b].label);
    }
    check_params_finite(model, epoch, "finetune", "<end of epoch>");
    finish_epoch(report, options, {epoch, "finetune", e + 1, optimizer.lr_finetune, {}, 0.0, seconds_since(te)}, acc);
  }
  close_phase(model, "finetune", first, epochs, t0, bags, report, options);
}

void run_joint(ProtoMilModel<float>& model, const BagSet& bags, std::size_t epochs, std::size_t first_joint_epoch,
               Adam<float>& adam, const TrainSchedule& schedule, const OptimizerConfig& optimizer,
               TrainReport* report, const TrainOptions& options) {
  optimizer.validate();
  if (epochs == 0) return;
  if (bags.empty()) throw InvalidInputError("joint training needs at least one bag");
  const auto t0 = Clock::now();
  const std::size_t first = next_epoch(report, 0);
  run_full_epochs(model, bags, epochs, "joint", Trainable::all(), adam,
                  [&](std::size_t e) { return optimizer.joint.at(e); }, first_joint_epoch, schedule.seed, optimizer,
                  report, options);
  close_phase(model, "joint", first, epochs, t0, bags, report, options);
}

TrainReport run_full_training(ProtoMilModel<float>& model, const BagSet& bags, const TrainSchedule& schedule,
                              const OptimizerConfig& optimizer, const TrainOptions& options) {
  schedule.validate();
  optimizer.validate();
  TrainReport report;
  run_warmup(model, bags, schedule, optimizer, &report, options);

  auto project_and_finetune = [&] {
    report.projections.push_back({report.last_epoch(), project_prototypes(model, bags)});
    run_head_finetune(model, bags, schedule.finetune_epochs, optimizer, schedule.seed, &report, options);
  };
  project_and_finetune();

  Adam<float> adam(model.parameters(), optimizer.adam);
  for (std::size_t done = 0; done < schedule.joint_epochs;) {
    const std::size_t chunk = std::min(schedule.projection_every, schedule.joint_epochs - done);
    run_joint(model, bags, chunk, done, adam, schedule, optimizer, &report, options);
    done += chunk;
    project_and_finetune();
  }
  return report;
}

}  // namespace protomil
