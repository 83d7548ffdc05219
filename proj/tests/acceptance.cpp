// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// when any criterion fails. Artifacts land in PROTOMIL_ACCEPTANCE_DIR
// (default: ./acceptance_work); PROTOMIL_ACCEPTANCE_FOLDS selects how many of
// the ten MNIST-Bags cross-validation folds are trained (default 1).
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/checkpoint.hpp"
#include "protomil/data.hpp"
#include "protomil/metrics.hpp"
#include "protomil/parallel.hpp"
#include "protomil/proto_ops.hpp"
#include "protomil/run_config.hpp"
#include "protomil/tensor_io.hpp"
#include "protomil/train.hpp"

namespace fs = std::filesystem;
using namespace protomil;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t env_size(const char* name, std::size_t fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::stoul(v) : fallback;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

struct Line {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Line> g_lines;
json g_report = json::object();

void emit(const std::string& name, bool pass, const std::string& detail) {
  g_lines.push_back({name, pass, detail});
  std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

void log(const std::string& msg) {
  std::fprintf(stderr, "acceptance: %s\n", msg.c_str());
}

MnistBagsConfig mnist_bags(std::size_t n, std::uint64_t seed) {
  MnistBagsConfig c;
  c.num_bags = n;
  c.seed = seed;
  c.source = fs::path(PROTOMIL_DATA_DIR) / "mnist";
  return c;
}

ModelConfig mnist_model() {
  return ModelConfig{};  // small_conv, D = 64, 10 prototypes per class of 64 x 2 x 2
}

// --- MNIST-Bags headline and pruning --------------------------------------

void mnist_headline_and_pruning(const fs::path& work) {
  const std::size_t folds_to_run = std::max<std::size_t>(1, std::min<std::size_t>(10, env_size("PROTOMIL_ACCEPTANCE_FOLDS", 1)));
  const BagSet bags = generate_mnist_bags(mnist_bags(500, 7));
  std::size_t positives = 0;
  for (const auto& b : bags) positives += b.label;
  log("generated 500 MNIST bags (" + std::to_string(positives) + " positive)");
  const CvSplit split = make_cv_splits(bags, 10, 1, 7).at(0);

  std::vector<double> aucs;
  double worst_minutes = 0;
  ProtoMilModel<float> fold0(mnist_model(), 0);
  BagSet fold0_train, fold0_test;
  json folds = json::array();
  for (std::size_t f = 0; f < folds_to_run; ++f) {
    const BagSet train = select_bags(bags, split.train_indices(f));
    const BagSet test = select_bags(bags, split.test_indices(f));
    ProtoMilModel<float> model(mnist_model(), Rng::mix(7, f));
    TrainSchedule schedule = TrainSchedule::mnist();
    schedule.seed = Rng::mix(7, f);
    TrainOptions options;
    options.on_epoch = [&](const EpochRecord& e) {
      log(fmt("mnist fold %.0f epoch %.0f loss %.5f acc %.3f", static_cast<double>(f), static_cast<double>(e.epoch),
              e.loss.total, e.train_accuracy));
    };
    const auto t0 = Clock::now();
    run_full_training(model, train, schedule, OptimizerConfig{}, options);
    const MetricReport m = evaluate(model, test);
    const double minutes = seconds_since(t0) / 60.0;
    worst_minutes = std::max(worst_minutes, minutes);
    aucs.push_back(m.auc.value_or(0.0));
    folds.push_back({{"fold", f}, {"metrics", to_json(m)}, {"minutes", minutes}});
    save_checkpoint(model, work / ("mnist500_fold" + std::to_string(f)));
    if (f == 0) {
      fold0 = model;
      fold0_train = train;
      fold0_test = test;
    }
  }
  const MeanSem auc = mean_sem(aucs);
  const double min_auc = *std::min_element(aucs.begin(), aucs.end());
  g_report["mnist500"] = {{"folds", folds}, {"auc_mean", auc.mean}, {"auc_sem", auc.sem}};
  emit("MNIST-Bags-500 headline (schedule 30/20/10, 10x 64x2x2 prototypes per class)",
       positives == 250 && min_auc >= 0.98 && worst_minutes <= 60.0,
       fmt("held-out AUC %.4f +- %.4f over %.0f of 10 folds (min %.4f, need >= 0.98); ", auc.mean, auc.sem,
           static_cast<double>(aucs.size()), min_auc) +
           fmt("slowest fold %.1f min (target <= 60)", worst_minutes));

  PruneConfig prune;  // k = 6, l = 0.4, 20 fine-tune epochs
  const auto t0 = Clock::now();
  const PruneReport r = prune_prototypes(fold0, fold0_train, prune, OptimizerConfig{}, 7, &fold0_test);
  const double before = r.before.auc.value_or(0.0), after = r.after.auc.value_or(0.0);
  save_checkpoint(fold0, work / "mnist500_fold0_pruned");
  write_text_file(work / "mnist500_prune_report.json", to_json(r).dump(2) + "\n");
  g_report["pruning"] = {{"survivors", r.active_after}, {"threshold", r.decision.threshold ? json(*r.decision.threshold) : json()},
                         {"auc_before", before}, {"auc_after", after}, {"seconds", seconds_since(t0)}};
  emit("Pruning (k=6, l=40%) on the trained MNIST-Bags-500 model",
       r.active_after >= 11 && r.active_after <= 17 && std::abs(after - before) <= 0.01,
       fmt("%.0f of 20 prototypes survive (need 11..17, r = %.0f); AUC %.4f -> %.4f (need |delta| <= 0.01)",
           static_cast<double>(r.active_after), r.decision.threshold ? static_cast<double>(*r.decision.threshold) : 0.0,
           before, after));
}

// --- reduced smoke variant ---------------------------------------------------

void mnist_smoke(const fs::path& work) {
  const auto t0 = Clock::now();
  const BagSet train = generate_mnist_bags(mnist_bags(50, 7));
  // The task is identical across generator seeds, so an independent draw is a clean test set.
  const BagSet test = generate_mnist_bags(mnist_bags(200, 8));
  ProtoMilModel<float> model(mnist_model(), 7);
  TrainSchedule schedule{5, 5, 5, 10, 7};
  run_full_training(model, train, schedule, OptimizerConfig{});
  const MetricReport m = evaluate(model, test);
  const double secs = seconds_since(t0);
  save_checkpoint(model, work / "mnist50_smoke");
  g_report["smoke"] = {{"metrics", to_json(m)}, {"seconds", secs}};
  emit("MNIST-Bags smoke (50 bags, 5 epochs per phase)", m.auc.value_or(0.0) >= 0.7 && secs <= 300.0,
       fmt("AUC %.4f on 200 independent bags (need >= 0.7); %.0f s end to end (need <= 300)", m.auc.value_or(0.0), secs));
}

// --- synthetic embedding bags ----------------------------------------------

void embedding_bags() {
  EmbeddingBagsConfig c;  // 100 bags, 512-dim
  c.seed = 1;
  const BagSet bags = generate_embedding_bags(c);
  const ModelConfig cfg = model_config_for(ModelConfig{}, bags);
  const CvSplit split = make_cv_splits(bags, 5, 1, 1).at(0);
  std::vector<double> aucs;
  const auto t0 = Clock::now();
  for (std::size_t f = 0; f < 5; ++f) {
    ProtoMilModel<float> model(cfg, Rng::mix(1, f));
    TrainSchedule schedule = TrainSchedule::mnist();
    schedule.seed = Rng::mix(1, f);
    run_full_training(model, select_bags(bags, split.train_indices(f)), schedule, OptimizerConfig{});
    aucs.push_back(evaluate(model, select_bags(bags, split.test_indices(f))).auc.value_or(0.0));
  }
  const MeanSem auc = mean_sem(aucs);
  g_report["embeddings"] = {{"fold_auc", aucs}, {"auc_mean", auc.mean}, {"seconds", seconds_since(t0)}};
  emit("Synthetic 512-dim embedding bags (100 bags)", auc.mean >= 0.9,
       fmt("5-fold AUC %.4f +- %.4f (need >= 0.9)", auc.mean, auc.sem));
}

// --- property suite ---------------------------------------------------------

struct Property {
  const char* name;
  const char* binary;
  const char* filter;
};

void property_suite(const fs::path& work) {
  const Property props[] = {
      {"attention sums to 1, permutation invariance (100 bags, sizes 1-300)", PROTOMIL_TEST_MIL_CORE,
       "Forward.AttentionSumsToOneAndPermutationInvariantOnHundredBags:Forward.TraceInvariantsAndPermutationInvariance"},
      {"gradient checks vs central differences (20 configurations)", PROTOMIL_TEST_GRADCHECK, "GradCheck.*"},
      {"loss oracles equal brute-force scans exactly (50 bags)", PROTOMIL_TEST_LOSSES,
       "Losses.MatchBruteForceExactlyOnFiftyBags"},
      {"projection oracle and idempotence", PROTOMIL_TEST_PROTO_OPS, "Projection.*"},
      {"census oracle, prune cap and class floor (50 banks)", PROTOMIL_TEST_PROTO_OPS,
       "Census.*:PruneDecision.*:Prune.*"},
      {"AUC equals pairwise oracle (1,000 lists)", PROTOMIL_TEST_METRICS, "Auc.*"},
      {"generator statistics (10,000 bags)", PROTOMIL_TEST_DATA_IO, "MnistBags.TenThousandBagStatistics"},
      {"determinism: equal seeds give bit-identical checkpoints and manifests", PROTOMIL_TEST_CLI,
       "Cli.GenMnistBagsBalancedAndByteIdentical:Cli.PipelineIsDeterministicAndNeverMutatesInputs"},
      {"determinism: library training", PROTOMIL_TEST_TRAIN, "FullTraining.DeterministicCheckpoints"},
      {"head initialisation pattern", PROTOMIL_TEST_MIL_CORE, "Head.InitialisationPatternIsExact"},
      {"checkpoint round trip bit-exact", PROTOMIL_TEST_DATA_IO, "Checkpoint.RoundTripIsBitExact"},
  };
  bool all = true;
  json results = json::array();
  for (const auto& p : props) {
    const fs::path log_file = work / "property.log";
    const std::string cmd = std::string("'") + p.binary + "' --gtest_filter='" + p.filter + "' >'" +
                            log_file.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    const std::string out = read_text_file(log_file);
    const bool ran = out.find("[  PASSED  ]") != std::string::npos;
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && ran;
    all = all && ok;
    results.push_back({{"property", p.name}, {"pass", ok}});
    std::printf("      %s  %s\n", ok ? "ok  " : "FAIL", p.name);
    if (!ok) std::fprintf(stderr, "%s\n", out.c_str());
  }
  g_report["properties"] = results;
  emit("Property suite", all, all ? "all sub-properties pass" : "see failing sub-properties above");
}

}  // namespace

int main() {
  try {
    const char* dir = std::getenv("PROTOMIL_ACCEPTANCE_DIR");
    const fs::path work = dir && *dir ? fs::path(dir) : fs::current_path() / "acceptance_work";
    fs::create_directories(work);
    set_num_threads(env_size("PROTOMIL_ACCEPTANCE_THREADS", 1));

    property_suite(work);
    embedding_bags();
    mnist_smoke(work);
    mnist_headline_and_pruning(work);

    std::size_t failed = 0;
    for (const auto& l : g_lines) failed += !l.pass;
    g_report["failed"] = failed;
    write_text_file(work / "acceptance_report.json", g_report.dump(2) + "\n");
    std::printf("%zu of %zu criteria passed\n", g_lines.size() - failed, g_lines.size());
    return failed == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance run aborted: %s\n", e.what());
    return 1;
  }
}
