#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "protomil/model.hpp"

namespace protomil {

inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PatchRef& ref);
PatchRef patch_ref_from_json(const nlohmann::json& j);

// Checkpoint directory: manifest.json (shapes, prototype classes, active
// flags, provenance, configuration echo, format version) plus one PMTN file
// per parameter or buffer tensor. `extra` is stored verbatim under "extra".
void save_checkpoint(ProtoMilModel<float>& model, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object());
ProtoMilModel<float> load_checkpoint(const std::filesystem::path& dir);
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace protomil
