#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/image_io.hpp"
#include "protomil/proto_ops.hpp"

namespace protomil {

inline constexpr int kExplanationFormatVersion = 1;

// Pixel box [x0, x1) x [y0, y1) on the source instance.
struct CropBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct ExplanationPrototype {
  std::size_t index = 0;
  int label = 0;
  float head_weight = 0.0f;  // weight on the prototype's own class logit
  std::optional<PatchRef> provenance;
  std::optional<CropBox> crop;
  std::vector<Neighbor> nearest;
  friend bool operator==(const ExplanationPrototype&, const ExplanationPrototype&) = default;
};

struct ExplanationCell {
  float score = 0.0f;
  Tensor<float> activation_map;  // Hm x Wm
  friend bool operator==(const ExplanationCell&, const ExplanationCell&) = default;
};

struct ExplanationMatrix {
  std::string bag_id;
  int label = 0;
  float probability = 0.0f;
  std::vector<std::size_t> instances;  // columns, by descending attention
  std::vector<float> attention;        // weight of each column's instance
  std::vector<ExplanationPrototype> prototypes;       // rows, negative then positive class
  std::vector<std::vector<ExplanationCell>> cells;    // [row][column]
  friend bool operator==(const ExplanationMatrix&, const ExplanationMatrix&) = default;
};

struct ExplainOptions {
  std::size_t top_instances = 5;
  // Keep only the rows with the largest own-class head weight; 0 keeps all.
  std::size_t max_prototypes_per_class = 0;
  double crop_percentile = 0.95;
};

// `census` supplies the nearest-patch gallery (typically k = 3); `dataset`
// resolves prototype provenance for the crop boxes and may be empty.
ExplanationMatrix build_explanation(const BagForwardTrace<float>& trace, const ProtoMilModel<float>& model,
                                    const BagSet& dataset, const std::vector<PrototypeCensus>& census,
                                    const ExplainOptions& options = {});

// Bilinear resize with half-pixel centres (edges clamped).
Tensor<float> bilinear_upsample(const Tensor<float>& map, std::size_t height, std::size_t width);

// Bounding box of the pixels at or above the given percentile of `heat`.
CropBox percentile_box(const Tensor<float>& heat, double percentile);

nlohmann::json to_json(const ExplanationMatrix& matrix);
ExplanationMatrix explanation_from_json(const nlohmann::json& j);

// Composite image: header row of instances with attention weights, then one
// row per prototype (source instance with its crop box, then a heat overlay
// and score per instance).
Image8 render_explanation_image(const ExplanationMatrix& matrix, const Bag& bag, const BagSet& dataset);

struct ExplanationFiles {
  std::filesystem::path image;
  std::filesystem::path json;
};
ExplanationFiles render_explanation(const ExplanationMatrix& matrix, const Bag& bag, const BagSet& dataset,
                                    const std::filesystem::path& out_dir);

}  // namespace protomil
