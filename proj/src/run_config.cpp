#include "protomil/run_config.hpp"

#include <cctype>
#include <cstdlib>

#include "protomil/checkpoint.hpp"
#include "protomil/error.hpp"

namespace protomil {

using nlohmann::json;

json to_json(const RunConfig& c) {
  const auto& o = c.optimizer;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"model", to_json(c.model)},
      {"schedule",
       {{"warmup_epochs", c.schedule.warmup_epochs},
        {"finetune_epochs", c.schedule.finetune_epochs},
        {"joint_epochs", c.schedule.joint_epochs},
        {"projection_every", c.schedule.projection_every}}},
      {"optimizer",
       {{"beta1", o.adam.beta1},
        {"beta2", o.adam.beta2},
        {"eps", o.adam.eps},
        {"weight_decay", o.adam.weight_decay},
        {"batch_size", o.batch_size},
        {"lr_warmup", o.warmup.base},
        {"lr_warmup_gamma", o.warmup.gamma},
        {"lr_finetune", o.lr_finetune},
        {"lr_joint", o.joint.base},
        {"lr_joint_step", o.joint.step_size},
        {"lr_joint_gamma", o.joint.gamma},
        {"lambda1", o.loss.lambda1},
        {"lambda2", o.loss.lambda2},
        {"attention_detached", o.loss.attention_detached}}},
      {"prune",
       {{"k_neighbors", c.prune.k_neighbors},
        {"max_removal_fraction", c.prune.max_removal_fraction},
        {"finetune_epochs", c.prune.finetune_epochs}}},
      {"mnist",
       {{"num_bags", c.mnist.num_bags},
        {"mean_size", c.mnist.mean_size},
        {"std_size", c.mnist.std_size},
        {"positive_digit", c.mnist.positive_digit},
        {"source", c.mnist.source.string()}}},
      {"embeddings",
       {{"num_bags", c.embeddings.num_bags},
        {"dim", c.embeddings.dim},
        {"mean_size", c.embeddings.mean_size},
        {"std_size", c.embeddings.std_size},
        {"max_witnesses", c.embeddings.max_witnesses},
        {"noise", c.embeddings.noise},
        {"shift", c.embeddings.shift}}},
      {"cv", {{"folds", c.cv.folds}, {"repeats", c.cv.repeats}, {"max_folds", c.cv.max_folds}}},
  };
}

RunConfig run_config_from_json(const json& patch) {
  json merged = to_json(RunConfig{});
  merge_config(merged, patch);
  RunConfig c;
  try {
    c.seed = merged.at("seed");
    c.threads = merged.at("threads");
    c.model = model_config_from_json(merged.at("model"));
    const auto& s = merged.at("schedule");
    c.schedule.warmup_epochs = s.at("warmup_epochs");
    c.schedule.finetune_epochs = s.at("finetune_epochs");
    c.schedule.joint_epochs = s.at("joint_epochs");
    c.schedule.projection_every = s.at("projection_every");
    c.schedule.seed = c.seed;
    const auto& o = merged.at("optimizer");
    c.optimizer.adam.beta1 = o.at("beta1");
    c.optimizer.adam.beta2 = o.at("beta2");
    c.optimizer.adam.eps = o.at("eps");
    c.optimizer.adam.weight_decay = o.at("weight_decay");
    c.optimizer.batch_size = o.at("batch_size");
    c.optimizer.warmup.base = o.at("lr_warmup");
    c.optimizer.warmup.gamma = o.at("lr_warmup_gamma");
    c.optimizer.lr_finetune = o.at("lr_finetune");
    c.optimizer.joint.base = o.at("lr_joint");
    c.optimizer.joint.step_size = o.at("lr_joint_step");
    c.optimizer.joint.gamma = o.at("lr_joint_gamma");
    c.optimizer.loss.lambda1 = o.at("lambda1");
    c.optimizer.loss.lambda2 = o.at("lambda2");
    c.optimizer.loss.attention_detached = o.at("attention_detached");
    const auto& p = merged.at("prune");
    c.prune.k_neighbors = p.at("k_neighbors");
    c.prune.max_removal_fraction = p.at("max_removal_fraction");
    c.prune.finetune_epochs = p.at("finetune_epochs");
    const auto& m = merged.at("mnist");
    c.mnist.num_bags = m.at("num_bags");
    c.mnist.mean_size = m.at("mean_size");
    c.mnist.std_size = m.at("std_size");
    c.mnist.positive_digit = m.at("positive_digit");
    c.mnist.source = m.at("source").get<std::string>();
    c.mnist.seed = c.seed;
    const auto& e = merged.at("embeddings");
    c.embeddings.num_bags = e.at("num_bags");
    c.embeddings.dim = e.at("dim");
    c.embeddings.mean_size = e.at("mean_size");
    c.embeddings.std_size = e.at("std_size");
    c.embeddings.max_witnesses = e.at("max_witnesses");
    c.embeddings.noise = e.at("noise");
    c.embeddings.shift = e.at("shift");
    c.embeddings.seed = c.seed;
    const auto& v = merged.at("cv");
    c.cv.folds = v.at("folds");
    c.cv.repeats = v.at("repeats");
    c.cv.max_folds = v.at("max_folds");
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("configuration value has the wrong type: ") + ex.what());
  } catch (const SchemaError& ex) {
    throw ConfigError(ex.what());
  } catch (const InvalidInputError& ex) {
    throw ConfigError(ex.what());
  }
  if (c.threads == 0) throw ConfigError("threads must be at least 1");
  return c;
}

void merge_config(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("configuration " + (path.empty() ? "root" : path) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown configuration key '" + here + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, here);
    } else {
      const bool numeric = slot.is_number() && value.is_number();
      const bool same = slot.type() == value.type() || numeric;
      if (!same) throw ConfigError("configuration key '" + here + "' has the wrong type");
      if (slot.is_number_unsigned() && !(value.is_number_unsigned() || (value.is_number_integer() && value.get<long long>() >= 0))) {
        throw ConfigError("configuration key '" + here + "' must be a nonnegative integer");
      }
      if (slot.is_number_unsigned()) {
        slot = value.get<std::uint64_t>();
      } else if (slot.is_number_integer() && !value.is_number_integer()) {
        throw ConfigError("configuration key '" + here + "' must be an integer");
      } else {
        slot = value;
      }
    }
  }
}

std::string env_name(const std::string& dotted_path) {
  std::string out = "PROTOMIL_";
  for (char ch : dotted_path) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

std::optional<std::string> process_env(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (!v) return std::nullopt;
  return std::string(v);
}

namespace {

void apply_env_rec(json& node, const std::string& path,
                   const std::function<std::optional<std::string>(const std::string&)>& getenv) {
  for (auto& [key, value] : node.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (value.is_object()) {
      apply_env_rec(value, here, getenv);
      continue;
    }
    const std::string name = env_name(here);
    const auto raw = getenv(name);
    if (!raw) continue;
    json patch;
    if (value.is_string()) {
      patch = *raw;
    } else {
      try {
        patch = json::parse(*raw);
      } catch (const json::exception&) {
        throw ConfigError(name + ": cannot parse '" + *raw + "'");
      }
    }
    json wrapper = {{key, patch}};
    json holder = {{key, value}};
    try {
      merge_config(holder, wrapper, here.substr(0, here.size() - key.size()));
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
    value = holder[key];
  }
}

}  // namespace

void apply_env_overrides(json& config, const std::function<std::optional<std::string>(const std::string&)>& getenv) {
  apply_env_rec(config, "", getenv);
}

}  // namespace protomil

namespace protomil {

ModelConfig model_config_for(const ModelConfig& base, const BagSet& bags) {
  if (bags.empty() || bags.front().instances.empty()) throw InvalidInputError("dataset has no instances");
  ModelConfig c = base;
  const Instance& first = bags.front().instances.front();
  const Shape shape = first.input_shape();
  if (first.has_embedding()) {
    c.encoder.architecture = EncoderArch::identity_passthrough;
    c.prototype_height = 1;
    c.prototype_width = 1;
  } else if (c.encoder.architecture == EncoderArch::identity_passthrough) {
    throw ConfigError("identity_passthrough needs an embeddings dataset");
  }
  c.encoder.input_channels = shape[0];
  c.encoder.input_height = shape[1];
  c.encoder.input_width = shape[2];
  c.validate();
  return c;
}

}  // namespace protomil
