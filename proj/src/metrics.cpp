#include "protomil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "protomil/error.hpp"
#include "protomil/parallel.hpp"

namespace protomil {

double roc_auc(std::span<const ScoredLabel> scores) {
  std::vector<ScoredLabel> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.probability < b.probability; });
  // Count in half units so that ties stay exact integers.
  std::uint64_t half_wins = 0, positives = 0, negatives = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < sorted.size() && sorted[j].probability == sorted[i].probability) {
      (sorted[j].label == 1 ? pos : neg) += 1;
      ++j;
    }
    half_wins += 2 * pos * negatives + pos * neg;
    positives += pos;
    negatives += neg;
    i = j;
  }
  if (positives == 0 || negatives == 0) throw InvalidInputError("AUC is undefined unless both classes are present");
  return static_cast<double>(half_wins) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

MetricReport compute_metrics(std::span<const ScoredLabel> scores) {
  if (scores.empty()) throw InvalidInputError("cannot compute metrics on an empty score list");
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  bool has_pos = false, has_neg = false;
  for (const auto& s : scores) {
    if (s.label != 0 && s.label != 1) throw InvalidInputError("labels must be 0 or 1");
    const bool predicted = s.probability >= 0.5;
    const bool actual = s.label == 1;
    (actual ? has_pos : has_neg) = true;
    correct += predicted == actual;
    tp += predicted && actual;
    fp += predicted && !actual;
    fn += !predicted && actual;
  }
  MetricReport r;
  r.count = scores.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());
  r.f_score = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  if (has_pos && has_neg) r.auc = roc_auc(scores);
  return r;
}

MeanSem mean_sem(std::span<const double> values) {
  MeanSem out;
  out.n = values.size();
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    out.sem = sd / std::sqrt(static_cast<double>(values.size()));
  }
  return out;
}

MetricSummary aggregate_metrics(std::span<const MetricReport> folds) {
  std::vector<double> acc, auc, f;
  for (const auto& r : folds) {
    acc.push_back(r.accuracy);
    f.push_back(r.f_score);
    if (r.auc) auc.push_back(*r.auc);
  }
  return {mean_sem(acc), mean_sem(auc), mean_sem(f)};
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"count", r.count},
          {"accuracy", r.accuracy},
          {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)},
          {"f_score", r.f_score}};
}

nlohmann::json to_json(const MetricSummary& s) {
  auto one = [](const MeanSem& m) { return nlohmann::json{{"mean", m.mean}, {"sem", m.sem}, {"n", m.n}}; };
  return {{"accuracy", one(s.accuracy)}, {"auc", one(s.auc)}, {"f_score", one(s.f_score)}};
}

std::string metrics_csv(std::span<const std::string> fold_names, std::span<const MetricReport> folds) {
  if (fold_names.size() != folds.size()) throw DimensionError("metrics_csv: one name per fold required");
  std::string out = "fold,count,accuracy,auc,f_score\n";
  char buf[160];
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto& r = folds[i];
    std::string auc;
    if (r.auc) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.auc);
      auc = buf;
    }
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%s,%.17g\n", r.count, r.accuracy, auc.c_str(), r.f_score);
    out += fold_names[i] + "," + buf;
  }
  return out;
}

std::vector<BagPrediction> predict(const ProtoMilModel<float>& model, const BagSet& bags) {
  std::vector<BagPrediction> out(bags.size());
  parallel_for(bags.size(), [&](std::size_t b) {
    const auto trace = model.infer(bags[b]);
    out[b] = {bags[b].id, bags[b].label, static_cast<double>(trace.probability())};
  });
  return out;
}

std::vector<ScoredLabel> scored_labels(std::span<const BagPrediction> predictions) {
  std::vector<ScoredLabel> out;
  out.reserve(predictions.size());
  for (const auto& p : predictions) out.push_back({p.probability, p.label});
  return out;
}

MetricReport evaluate(const ProtoMilModel<float>& model, const BagSet& bags) {
  const auto preds = predict(model, bags);
  return compute_metrics(scored_labels(preds));
}

}  // namespace protomil
