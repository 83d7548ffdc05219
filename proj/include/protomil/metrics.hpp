#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/model.hpp"

namespace protomil {

struct ScoredLabel {
  double probability = 0.0;  // positive class
  int label = 0;
};

struct MetricReport {
  std::size_t count = 0;
  double accuracy = 0.0;
  std::optional<double> auc;  // undefined when only one class is present
  double f_score = 0.0;
};

// Mann-Whitney estimate of P(score_pos > score_neg) with half credit for ties.
// Throws InvalidInputError unless both labels are present.
double roc_auc(std::span<const ScoredLabel> scores);

// Accuracy and positive-class F-score at threshold 0.5 (p >= 0.5 is positive).
MetricReport compute_metrics(std::span<const ScoredLabel> scores);

struct MeanSem {
  double mean = 0.0;
  double sem = 0.0;  // sample std / sqrt(n); 0 for a single value
  std::size_t n = 0;
};
MeanSem mean_sem(std::span<const double> values);

struct MetricSummary {
  MeanSem accuracy;
  MeanSem auc;  // over folds where AUC is defined
  MeanSem f_score;
};
MetricSummary aggregate_metrics(std::span<const MetricReport> folds);

nlohmann::json to_json(const MetricReport& report);
nlohmann::json to_json(const MetricSummary& summary);
// One row per fold: fold,count,accuracy,auc,f_score (empty auc when undefined).
std::string metrics_csv(std::span<const std::string> fold_names, std::span<const MetricReport> folds);

struct BagPrediction {
  std::string bag_id;
  int label = 0;
  double probability = 0.0;
};

std::vector<BagPrediction> predict(const ProtoMilModel<float>& model, const BagSet& bags);
std::vector<ScoredLabel> scored_labels(std::span<const BagPrediction> predictions);
MetricReport evaluate(const ProtoMilModel<float>& model, const BagSet& bags);

}  // namespace protomil
