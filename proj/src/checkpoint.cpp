#include "protomil/checkpoint.hpp"

#include "protomil/tensor_io.hpp"

namespace protomil {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& j, const char* key, const char* where) {
  if (!j.contains(key)) throw SchemaError(std::string(where) + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string(where) + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const EncoderConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"addon_depth", c.addon_depth},
          {"input_channels", c.input_channels},
          {"input_height", c.input_height},
          {"input_width", c.input_width},
          {"resnet_width", c.resnet_width}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.architecture = parse_encoder_arch(field<std::string>(j, "architecture", "encoder"));
  c.addon_depth = field<std::size_t>(j, "addon_depth", "encoder");
  c.input_channels = field<std::size_t>(j, "input_channels", "encoder");
  c.input_height = field<std::size_t>(j, "input_height", "encoder");
  c.input_width = field<std::size_t>(j, "input_width", "encoder");
  c.resnet_width = j.value("resnet_width", std::size_t{64});
  return c;
}

json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"prototypes_per_class", c.prototypes_per_class},
          {"prototype_height", c.prototype_height},
          {"prototype_width", c.prototype_width},
          {"attention_hidden", c.attention_hidden},
          {"similarity_epsilon", c.similarity_epsilon}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.encoder = encoder_config_from_json(field<json>(j, "encoder", "model"));
  c.prototypes_per_class = field<std::size_t>(j, "prototypes_per_class", "model");
  c.prototype_height = field<std::size_t>(j, "prototype_height", "model");
  c.prototype_width = field<std::size_t>(j, "prototype_width", "model");
  c.attention_hidden = field<std::size_t>(j, "attention_hidden", "model");
  c.similarity_epsilon = field<double>(j, "similarity_epsilon", "model");
  return c;
}

json to_json(const PatchRef& r) {
  return {{"bag_id", r.bag_id}, {"bag_index", r.bag_index}, {"instance", r.instance}, {"row", r.row}, {"col", r.col}};
}

PatchRef patch_ref_from_json(const json& j) {
  PatchRef r;
  r.bag_id = field<std::string>(j, "bag_id", "patch reference");
  r.bag_index = j.value("bag_index", std::size_t{0});
  r.instance = field<std::size_t>(j, "instance", "patch reference");
  r.row = field<std::size_t>(j, "row", "patch reference");
  r.col = field<std::size_t>(j, "col", "patch reference");
  return r;
}

void save_checkpoint(ProtoMilModel<float>& model, const std::filesystem::path& dir, const json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create checkpoint directory: " + ec.message());

  json slots = json::array();
  for (std::size_t j = 0; j < model.bank().size(); ++j) {
    const auto& s = model.bank().slots[j];
    slots.push_back({{"index", j},
                     {"class", s.label},
                     {"active", s.active},
                     {"provenance", s.provenance ? to_json(*s.provenance) : json(nullptr)}});
  }
  json counts = json::object();
  for (const auto& [label, n] : model.bank().per_class_count()) counts[std::to_string(label)] = n;

  json tensors = json::array();
  auto emit = [&](Param<float>* p, const char* kind) {
    const std::string file = p->name + ".pmt";
    write_tensor_file(dir / file, p->value);
    tensors.push_back({{"name", p->name}, {"group", to_string(p->group)}, {"kind", kind}, {"file", file},
                       {"shape", p->value.shape()}});
  };
  for (auto* p : model.parameters()) emit(p, "parameter");
  for (auto* p : model.buffers()) emit(p, "buffer");

  const json manifest = {{"format", "protomil-checkpoint"},
                         {"format_version", kCheckpointFormatVersion},
                         {"config", to_json(model.config())},
                         {"prototypes", {{"per_class_count", counts}, {"active_count", model.bank().active_count()},
                                         {"slots", slots}}},
                         {"tensors", tensors},
                         {"extra", extra}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

json read_checkpoint_manifest(const std::filesystem::path& dir) {
  const std::string text = read_text_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "protomil-checkpoint") {
    throw SchemaError(dir.string() + ": not a protomil checkpoint");
  }
  const int version = manifest.value("format_version", 0);
  if (version != kCheckpointFormatVersion) {
    throw SchemaError(dir.string() + ": unsupported checkpoint format version " + std::to_string(version));
  }
  return manifest;
}

ProtoMilModel<float> load_checkpoint(const std::filesystem::path& dir) {
  const json manifest = read_checkpoint_manifest(dir);
  ProtoMilModel<float> model(model_config_from_json(manifest.at("config")), 0);

  std::map<std::string, json> entries;
  for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  auto load = [&](Param<float>* p) {
    const auto it = entries.find(p->name);
    if (it == entries.end()) throw SchemaError(dir.string() + ": checkpoint lacks tensor '" + p->name + "'");
    Tensor<float> value = read_tensor_file(dir / it->second.at("file").get<std::string>());
    if (it->second.at("shape").get<Shape>() != value.shape()) {
      throw SchemaError(dir.string() + ": manifest shape of '" + p->name + "' disagrees with its tensor file");
    }
    if (value.shape() != p->value.shape()) {
      throw DimensionError(p->name + ": checkpoint shape " + shape_string(value.shape()) + " differs from model " +
                           shape_string(p->value.shape()));
    }
    p->value = std::move(value);
  };
  for (auto* p : model.parameters()) load(p);
  for (auto* p : model.buffers()) load(p);

  const auto& slots = manifest.at("prototypes").at("slots");
  if (slots.size() != model.bank().size()) throw SchemaError(dir.string() + ": prototype slot count mismatch");
  for (std::size_t j = 0; j < slots.size(); ++j) {
    auto& s = model.bank().slots[j];
    s.label = slots[j].at("class").get<int>();
    s.active = slots[j].at("active").get<bool>();
    s.provenance.reset();
    if (!slots[j].at("provenance").is_null()) s.provenance = patch_ref_from_json(slots[j].at("provenance"));
  }
  model.bank().check_invariants();
  return model;
}

}  // namespace protomil
