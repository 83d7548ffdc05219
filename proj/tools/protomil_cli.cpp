#include <cstdio>
#include <deque>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "protomil/checkpoint.hpp"
#include "protomil/data.hpp"
#include "protomil/error.hpp"
#include "protomil/explain.hpp"
#include "protomil/metrics.hpp"
#include "protomil/parallel.hpp"
#include "protomil/proto_ops.hpp"
#include "protomil/rng.hpp"
#include "protomil/run_config.hpp"
#include "protomil/tensor_io.hpp"
#include "protomil/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protomil;

namespace {

int g_verbosity = 1;

template <typename... Args>
void log(int level, const char* fmt, Args... args) {
  if (level > g_verbosity) return;
  std::fprintf(stderr, "protomil: ");
  if constexpr (sizeof...(Args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out;
}

int fail(const std::string& kind, const std::string& message, int code) {
  std::fprintf(stderr, "error: kind=%s message=\"%s\"\n", kind.c_str(), escape(message).c_str());
  return code;
}

// Flags that map onto RunConfig keys. Each flag is registered with the
// config default as its displayed default and only overrides the merged
// configuration when given on the command line.
class ConfigFlags {
 public:
  explicit ConfigFlags(json defaults) : defaults_(std::move(defaults)) {}

  void add(CLI::App* app, const std::string& flag, const std::string& path, const std::string& help) {
    const json& leaf = defaults_.at(json::json_pointer(pointer(path)));
    auto& slot = slots_.emplace_back();
    slot.path = path;
    CLI::Option* opt = nullptr;
    if (leaf.is_boolean()) {
      slot.value = leaf.get<bool>();
      opt = app->add_option(flag, std::get<bool>(slot.value), help);
    } else if (leaf.is_number_unsigned()) {
      slot.value = leaf.get<std::uint64_t>();
      opt = app->add_option(flag, std::get<std::uint64_t>(slot.value), help);
    } else if (leaf.is_number_integer()) {
      slot.value = leaf.get<std::int64_t>();
      opt = app->add_option(flag, std::get<std::int64_t>(slot.value), help);
    } else if (leaf.is_number()) {
      slot.value = leaf.get<double>();
      opt = app->add_option(flag, std::get<double>(slot.value), help);
    } else {
      slot.value = leaf.get<std::string>();
      opt = app->add_option(flag, std::get<std::string>(slot.value), help);
    }
    opt->capture_default_str();
    slot.option = opt;
  }

  json patch() const {
    json out = json::object();
    for (const auto& s : slots_) {
      if (s.option->count() == 0) continue;
      std::visit([&](const auto& v) { out[json::json_pointer(pointer(s.path))] = v; }, s.value);
    }
    return out;
  }

 private:
  static std::string pointer(const std::string& dotted) {
    std::string p = "/";
    for (char ch : dotted) p += ch == '.' ? '/' : ch;
    return p;
  }

  struct Slot {
    std::string path;
    std::variant<bool, std::uint64_t, std::int64_t, double, std::string> value;
    CLI::Option* option = nullptr;
  };
  json defaults_;
  std::deque<Slot> slots_;
};

struct Common {
  std::string config_file;
  std::string out;
};

// file < flags < environment
json merged_config(const Common& common, const ConfigFlags& flags) {
  json merged = to_json(RunConfig{});
  if (!common.config_file.empty()) {
    json file;
    try {
      file = json::parse(read_text_file(common.config_file));
    } catch (const json::exception& e) {
      throw ConfigError(common.config_file + ": " + e.what());
    } catch (const MissingFileError& e) {
      throw ConfigError(e.what());
    }
    merge_config(merged, file);
  }
  merge_config(merged, flags.patch());
  apply_env_overrides(merged, process_env);
  return merged;
}

void echo_config(const fs::path& out, const std::string& command, const json& config, const json& args) {
  json echo = {{"command", command}, {"config", config}, {"arguments", args}};
  write_text_file(out / "config.json", echo.dump(2) + "\n");
}

void require_fresh_output(const fs::path& out, const std::vector<fs::path>& inputs) {
  std::error_code ec;
  for (const auto& in : inputs) {
    if (!in.empty() && fs::exists(in) && fs::exists(out) && fs::equivalent(fs::absolute(in), fs::absolute(out), ec)) {
      throw ConfigError("--out must differ from the input " + in.string());
    }
  }
}

std::string predictions_csv(const std::vector<BagPrediction>& preds) {
  std::string out = "bag_id,label,probability\n";
  char buf[64];
  for (const auto& p : preds) {
    std::snprintf(buf, sizeof buf, ",%d,%.9g\n", p.label, p.probability);
    out += p.bag_id + buf;
  }
  return out;
}

void print_metrics_table(const MetricReport& r) {
  std::printf("%-10s %s\n", "metric", "value");
  std::printf("%-10s %zu\n", "bags", r.count);
  std::printf("%-10s %.4f\n", "accuracy", r.accuracy);
  if (r.auc)
    std::printf("%-10s %.4f\n", "auc", *r.auc);
  else
    std::printf("%-10s %s\n", "auc", "undefined");
  std::printf("%-10s %.4f\n", "f_score", r.f_score);
}

fs::path default_mnist_source() { return fs::path(PROTOMIL_DEFAULT_MNIST); }

TrainOptions epoch_logger(TrainOptions options) {
  options.on_epoch = [](const EpochRecord& r) {
    log(1, "epoch %zu %s[%zu] lr=%.3g loss=%.5f ce=%.5f clst=%.5f sep=%.5f acc=%.3f (%.1fs)", r.epoch, r.phase.c_str(),
        r.phase_epoch, r.lr, r.loss.total, r.loss.cross_entropy, r.loss.cluster, r.loss.separation, r.train_accuracy,
        r.seconds);
  };
  return options;
}

// --- subcommands -----------------------------------------------------------

int cmd_gen_mnist(const Common& common, const ConfigFlags& flags, const std::string& format) {
  const json merged = merged_config(common, flags);
  RunConfig cfg = run_config_from_json(merged);
  if (cfg.mnist.source.empty()) cfg.mnist.source = default_mnist_source();
  cfg.mnist.validate();
  if (format != "tensor" && format != "png") throw ConfigError("--format must be 'tensor' or 'png'");
  const BagSet bags = generate_mnist_bags(cfg.mnist);
  std::size_t positives = 0;
  for (const auto& b : bags) positives += b.label == 1;
  write_bag_dataset(bags, common.out, format == "png" ? InstanceFileFormat::png : InstanceFileFormat::tensor);
  echo_config(common.out, "gen-mnist-bags", merged, {{"format", format}, {"resolved_source", cfg.mnist.source.string()}});
  log(1, "wrote %zu bags (%zu positive) to %s", bags.size(), positives, common.out.c_str());
  return 0;
}

int cmd_gen_embeddings(const Common& common, const ConfigFlags& flags) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  const BagSet bags = generate_embedding_bags(cfg.embeddings);
  write_bag_dataset(bags, common.out);
  echo_config(common.out, "gen-embedding-bags", merged, json::object());
  log(1, "wrote %zu embedding bags (dim %zu) to %s", bags.size(), cfg.embeddings.dim, common.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string validation;
  bool checkpoint_phases = false;
};

int cmd_train(const Common& common, const ConfigFlags& flags, const TrainArgs& args) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  set_num_threads(cfg.threads);
  const fs::path out = common.out;
  require_fresh_output(out, {args.data});
  const BagSet bags = load_bag_dataset(args.data);
  const ModelConfig model_cfg = model_config_for(cfg.model, bags);
  cfg.schedule.validate();
  cfg.optimizer.validate();
  json echo_args = {{"data", args.data}, {"validation_data", args.validation}, {"model", to_json(model_cfg)}};
  echo_config(out, "train", merged, echo_args);

  if (cfg.cv.folds == 0) {
    BagSet validation;
    if (!args.validation.empty()) validation = load_bag_dataset(args.validation);
    TrainOptions options;
    if (!validation.empty()) options.validation = &validation;
    if (args.checkpoint_phases) options.checkpoint_dir = out / "checkpoints";
    options = epoch_logger(options);
    ProtoMilModel<float> model(model_cfg, cfg.seed);
    TrainSchedule schedule = cfg.schedule;
    schedule.seed = cfg.seed;
    log(1, "training on %zu bags: warmup %zu, fine-tune %zu, joint %zu epochs", bags.size(), schedule.warmup_epochs,
        schedule.finetune_epochs, schedule.joint_epochs);
    const TrainReport report = run_full_training(model, bags, schedule, cfg.optimizer, options);
    save_checkpoint(model, out / "model", {{"command", "train"}, {"data", args.data}});
    write_text_file(out / "train_report.jsonl", report.to_jsonl());
    json metrics = {{"train", to_json(evaluate(model, bags))}};
    if (!validation.empty()) metrics["validation"] = to_json(evaluate(model, validation));
    write_text_file(out / "metrics.json", metrics.dump(2) + "\n");
    log(1, "saved model to %s", (out / "model").c_str());
    return 0;
  }

  const auto splits = make_cv_splits(bags, cfg.cv.folds, cfg.cv.repeats, cfg.seed);
  json split_json = json::array();
  for (const auto& s : splits) split_json.push_back(s.to_json());
  write_text_file(out / "splits.json", split_json.dump(1) + "\n");

  std::vector<std::string> names;
  std::vector<MetricReport> reports;
  std::size_t run = 0;
  for (const auto& split : splits) {
    for (std::size_t fold = 0; fold < split.num_folds; ++fold, ++run) {
      if (cfg.cv.max_folds > 0 && run >= cfg.cv.max_folds) break;
      char name[32];
      std::snprintf(name, sizeof name, "r%zu_f%zu", split.repeat, fold);
      const BagSet train = select_bags(bags, split.train_indices(fold));
      const BagSet test = select_bags(bags, split.test_indices(fold));
      log(1, "%s: %zu train / %zu test bags", name, train.size(), test.size());
      const std::uint64_t seed = Rng::mix(cfg.seed, split.repeat * split.num_folds + fold);
      ProtoMilModel<float> model(model_cfg, seed);
      TrainSchedule schedule = cfg.schedule;
      schedule.seed = seed;
      TrainOptions options;
      options.validation = &test;
      if (args.checkpoint_phases) options.checkpoint_dir = out / name / "checkpoints";
      const TrainReport report = run_full_training(model, train, schedule, cfg.optimizer, epoch_logger(options));
      save_checkpoint(model, out / name / "model", {{"command", "train"}, {"fold", fold}, {"repeat", split.repeat}});
      write_text_file(out / name / "train_report.jsonl", report.to_jsonl());
      const auto preds = predict(model, test);
      write_text_file(out / name / "predictions.csv", predictions_csv(preds));
      const MetricReport m = compute_metrics(scored_labels(preds));
      log(1, "%s: accuracy %.4f auc %s f_score %.4f", name, m.accuracy,
          m.auc ? std::to_string(*m.auc).c_str() : "undefined", m.f_score);
      names.push_back(name);
      reports.push_back(m);
    }
  }
  const MetricSummary summary = aggregate_metrics(reports);
  write_text_file(out / "cv_metrics.csv", metrics_csv(names, reports));
  write_text_file(out / "cv_summary.json", to_json(summary).dump(2) + "\n");
  log(1, "cv over %zu folds: accuracy %.4f +- %.4f, auc %.4f +- %.4f, f_score %.4f +- %.4f", reports.size(),
      summary.accuracy.mean, summary.accuracy.sem, summary.auc.mean, summary.auc.sem, summary.f_score.mean,
      summary.f_score.sem);
  return 0;
}

struct ModelArgs {
  std::string checkpoint;
  std::string data;
};

int cmd_eval(const Common& common, const ConfigFlags& flags, const ModelArgs& args) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  set_num_threads(cfg.threads);
  const ProtoMilModel<float> model = load_checkpoint(args.checkpoint);
  const BagSet bags = load_bag_dataset(args.data);
  const auto preds = predict(model, bags);
  const MetricReport report = compute_metrics(scored_labels(preds));
  print_metrics_table(report);
  if (!common.out.empty()) {
    require_fresh_output(common.out, {args.checkpoint, args.data});
    echo_config(common.out, "eval", merged, {{"checkpoint", args.checkpoint}, {"data", args.data}});
    write_text_file(fs::path(common.out) / "predictions.csv", predictions_csv(preds));
    write_text_file(fs::path(common.out) / "metrics.json", to_json(report).dump(2) + "\n");
  }
  return 0;
}

int cmd_project(const Common& common, const ConfigFlags& flags, const ModelArgs& args) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  set_num_threads(cfg.threads);
  require_fresh_output(common.out, {args.checkpoint, args.data});
  ProtoMilModel<float> model = load_checkpoint(args.checkpoint);
  const BagSet bags = load_bag_dataset(args.data);
  const ProjectionReport report = project_prototypes(model, bags);
  echo_config(common.out, "project", merged, {{"checkpoint", args.checkpoint}, {"data", args.data}});
  save_checkpoint(model, fs::path(common.out) / "model", {{"command", "project"}, {"source", args.checkpoint}});
  write_text_file(fs::path(common.out) / "projection.json", to_json(report).dump(2) + "\n");
  log(1, "projected %zu prototypes", report.changes.size());
  return 0;
}

int cmd_prune(const Common& common, const ConfigFlags& flags, const ModelArgs& args, const std::string& eval_data) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  set_num_threads(cfg.threads);
  require_fresh_output(common.out, {args.checkpoint, args.data});
  ProtoMilModel<float> model = load_checkpoint(args.checkpoint);
  const BagSet bags = load_bag_dataset(args.data);
  BagSet evaluation;
  if (!eval_data.empty()) evaluation = load_bag_dataset(eval_data);
  const PruneReport report = prune_prototypes(model, bags, cfg.prune, cfg.optimizer, cfg.seed,
                                              evaluation.empty() ? nullptr : &evaluation);
  echo_config(common.out, "prune", merged,
              {{"checkpoint", args.checkpoint}, {"data", args.data}, {"eval_data", eval_data}});
  save_checkpoint(model, fs::path(common.out) / "model", {{"command", "prune"}, {"source", args.checkpoint}});
  write_text_file(fs::path(common.out) / "prune_report.json", to_json(report).dump(2) + "\n");
  if (report.decision.threshold) {
    log(1, "pruned %zu of %zu prototypes (r = %zu); auc %s -> %s", report.decision.removed.size(),
        report.decision.active_before, *report.decision.threshold,
        report.before.auc ? std::to_string(*report.before.auc).c_str() : "undefined",
        report.after.auc ? std::to_string(*report.after.auc).c_str() : "undefined");
  } else {
    log(1, "no feasible threshold; nothing pruned");
  }
  return 0;
}

struct ExplainArgs {
  std::vector<std::string> bags;
  std::size_t max_bags = 1;
  std::string gallery;
  ExplainOptions options;
  std::size_t gallery_k = 3;
};

int cmd_explain(const Common& common, const ConfigFlags& flags, const ModelArgs& args, const ExplainArgs& ex) {
  const json merged = merged_config(common, flags);
  const RunConfig cfg = run_config_from_json(merged);
  set_num_threads(cfg.threads);
  require_fresh_output(common.out, {args.checkpoint, args.data});
  const ProtoMilModel<float> model = load_checkpoint(args.checkpoint);
  const BagSet bags = load_bag_dataset(args.data);
  const BagSet gallery = ex.gallery.empty() ? bags : load_bag_dataset(ex.gallery);
  const auto census = prototype_neighbor_census(model, gallery, ex.gallery_k);

  std::vector<const Bag*> chosen;
  if (ex.bags.empty()) {
    for (std::size_t b = 0; b < std::min(ex.max_bags, bags.size()); ++b) chosen.push_back(&bags[b]);
  } else {
    for (const auto& id : ex.bags) {
      const Bag* found = nullptr;
      for (const auto& b : bags)
        if (b.id == id) found = &b;
      if (!found) throw InvalidInputError("bag '" + id + "' is not in " + args.data);
      chosen.push_back(found);
    }
  }
  echo_config(common.out, "explain", merged,
              {{"checkpoint", args.checkpoint}, {"data", args.data}, {"gallery", ex.gallery},
               {"top_instances", ex.options.top_instances},
               {"max_prototypes_per_class", ex.options.max_prototypes_per_class}});
  for (const Bag* bag : chosen) {
    const auto trace = model.infer(*bag);
    const ExplanationMatrix matrix = build_explanation(trace, model, gallery, census, ex.options);
    const auto files = render_explanation(matrix, *bag, gallery, common.out);
    log(1, "%s: p(positive) = %.4f -> %s", bag->id.c_str(), static_cast<double>(matrix.probability),
        files.image.c_str());
  }
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Prototype-based attention multiple-instance learning"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  const json defaults = to_json(RunConfig{});
  Common common;
  bool verbose = false, quiet = false;
  auto add_common = [&](CLI::App* sub, ConfigFlags& flags, bool out_required) {
    sub->add_option("--config", common.config_file, "JSON configuration file (flags and PROTOMIL_* variables override it)");
    auto* out = sub->add_option("--out", common.out, "Output directory");
    if (out_required) out->required();
    flags.add(sub, "--seed", "seed", "Random seed");
    flags.add(sub, "--threads", "threads", "Worker threads for inference passes; 1 is fully deterministic");
    sub->add_flag("-v,--verbose", verbose, "More logging");
    sub->add_flag("-q,--quiet", quiet, "Errors only");
  };
  auto add_model_flags = [](CLI::App* sub, ConfigFlags& flags) {
    flags.add(sub, "--encoder", "model.encoder.architecture", "small_conv | resnet18_conv | identity_passthrough");
    flags.add(sub, "--addon-depth", "model.encoder.addon_depth", "Latent depth D of the patch grid");
    flags.add(sub, "--resnet-width", "model.encoder.resnet_width", "Base width of the ResNet-18 trunk");
    flags.add(sub, "--prototypes-per-class", "model.prototypes_per_class", "Prototypes per class");
    flags.add(sub, "--prototype-height", "model.prototype_height", "Prototype window height");
    flags.add(sub, "--prototype-width", "model.prototype_width", "Prototype window width");
    flags.add(sub, "--attention-hidden", "model.attention_hidden", "Hidden size L of the gated attention");
    flags.add(sub, "--epsilon", "model.similarity_epsilon", "Similarity epsilon");
  };
  auto add_optimizer_flags = [](CLI::App* sub, ConfigFlags& flags) {
    flags.add(sub, "--beta1", "optimizer.beta1", "Adam beta1");
    flags.add(sub, "--beta2", "optimizer.beta2", "Adam beta2");
    flags.add(sub, "--weight-decay", "optimizer.weight_decay", "L2 weight decay");
    flags.add(sub, "--lr-warmup", "optimizer.lr_warmup", "Warmup learning rate");
    flags.add(sub, "--lr-warmup-gamma", "optimizer.lr_warmup_gamma", "Per-epoch warmup decay");
    flags.add(sub, "--lr-finetune", "optimizer.lr_finetune", "Attention/head fine-tune learning rate");
    flags.add(sub, "--lr-joint", "optimizer.lr_joint", "Joint-phase learning rate");
    flags.add(sub, "--lr-joint-step", "optimizer.lr_joint_step", "Joint-phase step size in epochs");
    flags.add(sub, "--lr-joint-gamma", "optimizer.lr_joint_gamma", "Joint-phase decay per step");
    flags.add(sub, "--lambda1", "optimizer.lambda1", "Cluster loss weight");
    flags.add(sub, "--lambda2", "optimizer.lambda2", "Separation loss weight");
    flags.add(sub, "--attention-detached", "optimizer.attention_detached",
              "Treat attention weights as constants in the cluster and separation terms");
  };

  // gen-mnist-bags
  ConfigFlags gen_flags(defaults);
  std::string format = "tensor";
  auto* gen = app.add_subcommand("gen-mnist-bags", "Generate an MNIST-Bags dataset manifest");
  add_common(gen, gen_flags, true);
  gen_flags.add(gen, "--num-bags", "mnist.num_bags", "Number of bags (even)");
  gen_flags.add(gen, "--mean-size", "mnist.mean_size", "Mean bag size");
  gen_flags.add(gen, "--std-size", "mnist.std_size", "Bag size standard deviation");
  gen_flags.add(gen, "--positive-digit", "mnist.positive_digit", "Digit that makes a bag positive");
  gen_flags.add(gen, "--source", "mnist.source", "MNIST IDX directory or image file (empty: bundled digits)");
  gen->add_option("--format", format, "Instance files: tensor (one per bag) or png (one per instance)")
      ->capture_default_str();

  // gen-embedding-bags
  ConfigFlags emb_flags(defaults);
  auto* emb = app.add_subcommand("gen-embedding-bags", "Generate a synthetic embedding-bag dataset manifest");
  add_common(emb, emb_flags, true);
  emb_flags.add(emb, "--num-bags", "embeddings.num_bags", "Number of bags (even)");
  emb_flags.add(emb, "--dim", "embeddings.dim", "Embedding dimension");
  emb_flags.add(emb, "--mean-size", "embeddings.mean_size", "Mean bag size");
  emb_flags.add(emb, "--std-size", "embeddings.std_size", "Bag size standard deviation");
  emb_flags.add(emb, "--max-witnesses", "embeddings.max_witnesses", "Maximum witnesses per positive bag");
  emb_flags.add(emb, "--noise", "embeddings.noise", "Per-dimension noise");
  emb_flags.add(emb, "--shift", "embeddings.shift", "Witness displacement");

  // train
  ConfigFlags train_flags(defaults);
  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model (optionally with cross-validation)");
  add_common(train, train_flags, true);
  train->add_option("--data", train_args.data, "Training manifest")->required();
  train->add_option("--validation-data", train_args.validation, "Manifest evaluated after every phase");
  train->add_flag("--checkpoint-phases", train_args.checkpoint_phases, "Write a checkpoint after every phase");
  add_model_flags(train, train_flags);
  add_optimizer_flags(train, train_flags);
  train_flags.add(train, "--warmup-epochs", "schedule.warmup_epochs", "Warmup epochs");
  train_flags.add(train, "--finetune-epochs", "schedule.finetune_epochs", "Attention/head fine-tune epochs per cycle");
  train_flags.add(train, "--joint-epochs", "schedule.joint_epochs", "Joint epochs");
  train_flags.add(train, "--projection-every", "schedule.projection_every", "Joint epochs between projections");
  train_flags.add(train, "--folds", "cv.folds", "Cross-validation folds (0: train once on all bags)");
  train_flags.add(train, "--repeats", "cv.repeats", "Cross-validation repeats");
  train_flags.add(train, "--max-folds", "cv.max_folds", "Stop after this many (repeat, fold) runs (0: all)");

  // eval
  ConfigFlags eval_flags(defaults);
  ModelArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  add_common(eval, eval_flags, false);
  eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", eval_args.data, "Manifest")->required();

  // project
  ConfigFlags proj_flags(defaults);
  ModelArgs proj_args;
  auto* proj = app.add_subcommand("project", "Project prototypes onto their nearest training patches");
  add_common(proj, proj_flags, true);
  proj->add_option("--checkpoint", proj_args.checkpoint, "Checkpoint directory")->required();
  proj->add_option("--data", proj_args.data, "Training manifest")->required();

  // prune
  ConfigFlags prune_flags(defaults);
  ModelArgs prune_args;
  std::string prune_eval;
  auto* prune = app.add_subcommand("prune", "Prune prototypes by nearest-patch class census");
  add_common(prune, prune_flags, true);
  prune->add_option("--checkpoint", prune_args.checkpoint, "Checkpoint directory")->required();
  prune->add_option("--data", prune_args.data, "Training manifest")->required();
  prune->add_option("--eval-data", prune_eval, "Manifest for before/after metrics (default: --data)");
  prune_flags.add(prune, "--k", "prune.k_neighbors", "Nearest patches per prototype");
  prune_flags.add(prune, "--l", "prune.max_removal_fraction", "Maximum fraction of prototypes removed");
  prune_flags.add(prune, "--finetune-epochs", "prune.finetune_epochs", "Attention/head fine-tune epochs after pruning");
  prune_flags.add(prune, "--lr-finetune", "optimizer.lr_finetune", "Fine-tune learning rate");

  // explain
  ConfigFlags explain_flags(defaults);
  ModelArgs explain_args;
  ExplainArgs ex;
  auto* explain = app.add_subcommand("explain", "Render explanation matrices for bags");
  add_common(explain, explain_flags, true);
  explain->add_option("--checkpoint", explain_args.checkpoint, "Checkpoint directory")->required();
  explain->add_option("--data", explain_args.data, "Manifest holding the bags to explain")->required();
  explain->add_option("--bag", ex.bags, "Bag id to explain (repeatable)");
  explain->add_option("--max-bags", ex.max_bags, "Bags explained when no --bag is given")->capture_default_str();
  explain->add_option("--gallery-data", ex.gallery, "Training manifest for prototype sources and neighbours");
  explain->add_option("--gallery-k", ex.gallery_k, "Nearest training patches listed per prototype")
      ->capture_default_str();
  explain->add_option("--top", ex.options.top_instances, "Instances (columns) per matrix")->capture_default_str();
  explain->add_option("--max-prototypes-per-class", ex.options.max_prototypes_per_class,
                      "Rows per class by head weight (0: all active)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }
  g_verbosity = quiet ? 0 : verbose ? 2 : 1;

  if (gen->parsed()) return cmd_gen_mnist(common, gen_flags, format);
  if (emb->parsed()) return cmd_gen_embeddings(common, emb_flags);
  if (train->parsed()) return cmd_train(common, train_flags, train_args);
  if (eval->parsed()) return cmd_eval(common, eval_flags, eval_args);
  if (proj->parsed()) return cmd_project(common, proj_flags, proj_args);
  if (prune->parsed()) return cmd_prune(common, prune_flags, prune_args, prune_eval);
  if (explain->parsed()) return cmd_explain(common, explain_flags, explain_args, ex);
  return fail("usage", "no subcommand", 2);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const NumericalError& e) {
    return fail(e.kind(), e.what(), 4);
  } catch (const IoError& e) {
    return fail(e.kind(), e.what(), 3);
  } catch (const MissingFileError& e) {
    return fail(e.kind(), e.what(), 3);
  } catch (const SchemaError& e) {
    return fail(e.kind(), e.what(), 3);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}
