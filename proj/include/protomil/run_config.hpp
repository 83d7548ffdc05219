#pragma once

#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "protomil/data.hpp"
#include "protomil/model.hpp"
#include "protomil/train.hpp"

namespace protomil {

struct CvConfig {
  std::size_t folds = 0;  // 0 trains once on the whole dataset
  std::size_t repeats = 1;
  std::size_t max_folds = 0;  // 0 runs every (repeat, fold) pair
};

// Every tunable of a run. Serialized form is nested objects:
// seed, threads, model, schedule, optimizer, prune, mnist, embeddings, cv.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  ModelConfig model;
  TrainSchedule schedule;
  OptimizerConfig optimizer;
  PruneConfig prune;
  MnistBagsConfig mnist;
  EmbeddingBagsConfig embeddings;
  CvConfig cv;
};

nlohmann::json to_json(const RunConfig& config);
// Missing keys keep their defaults; unknown keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

// Recursively overlays `patch` onto `base`; keys absent from `base` are a
// ConfigError naming the offending path.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");

// For every leaf a.b.c of `config`, an environment variable PROTOMIL_A_B_C
// replaces the value (parsed as the leaf's JSON type). `getenv` is injectable
// for tests.
void apply_env_overrides(nlohmann::json& config,
                         const std::function<std::optional<std::string>(const std::string&)>& getenv);
std::optional<std::string> process_env(const std::string& name);

// Name of the environment variable that overrides a config path.
std::string env_name(const std::string& dotted_path);

}  // namespace protomil

namespace protomil {

// Fills the encoder input shape from the dataset. Embedding bags switch to the
// identity encoder with 1 x 1 prototypes; pixel bags reject it.
ModelConfig model_config_for(const ModelConfig& base, const BagSet& bags);

}  // namespace protomil
