#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomil/bag.hpp"

namespace protomil {

// --- MNIST source ---------------------------------------------------------

struct DigitPool {
  std::vector<std::shared_ptr<const Tensor<float>>> images;  // 1 x 28 x 28 in [0,1]
  std::vector<int> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

// Reads an IDX image/label file pair (gzip-compressed or raw).
DigitPool read_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
// `source` is either a directory holding the image and label archives (any of
// the usual file names) or the image file itself with the label file beside it.
DigitPool read_mnist(const std::filesystem::path& source);

// --- MNIST-Bags -------------------------------------------------------------

struct MnistBagsConfig {
  std::size_t num_bags = 500;
  double mean_size = 100.0;
  double std_size = 20.0;
  int positive_digit = 9;
  std::uint64_t seed = 0;
  std::filesystem::path source;

  void validate() const;
};

// A generated bag as indices into the digit pool.
struct BagDraw {
  int label = 0;
  std::vector<std::size_t> indices;
};

// Bags alternate positive, negative, ... Each bag draws its size from
// round(N(mean, std)) clamped to >= 1. Positive bags sample uniformly from the
// whole pool and redraw until at least one positive digit is present; negative
// bags sample from the pool without the positive digit.
std::vector<BagDraw> draw_mnist_bags(const MnistBagsConfig& config, std::span<const int> digit_labels);
BagSet generate_mnist_bags(const MnistBagsConfig& config, const DigitPool& pool);
BagSet generate_mnist_bags(const MnistBagsConfig& config);
std::string bag_id_for(std::size_t index);

// --- synthetic embedding bags ----------------------------------------------

// Instances are N(0.5, noise) vectors; witnesses additionally move by `shift`
// along a fixed random unit direction, so witnesses and background are
// linearly separable. Positive bags hold between 1 and max_witnesses witnesses.
struct EmbeddingBagsConfig {
  std::size_t num_bags = 100;
  std::size_t dim = 512;
  double mean_size = 20.0;
  double std_size = 5.0;
  std::size_t max_witnesses = 3;
  double noise = 0.05;
  double shift = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

BagSet generate_embedding_bags(const EmbeddingBagsConfig& config);

// --- manifests ---------------------------------------------------------------

enum class Modality { pixels, embeddings };
const char* to_string(Modality m);

enum class InstanceFileFormat { tensor, png };

inline constexpr int kManifestFormatVersion = 1;

// Writes manifest.json plus instance files under `dir`. Tensor format stores
// one stacked N x ... file per bag; PNG stores one file per instance.
void write_bag_dataset(const BagSet& bags, const std::filesystem::path& dir,
                       InstanceFileFormat format = InstanceFileFormat::tensor);

// Accepts the manifest file or its directory. Each file reference is a PNG
// (pixels only), a single-instance tensor, or a stacked N x ... tensor.
BagSet load_bag_dataset(const std::filesystem::path& manifest);

// --- cross-validation -------------------------------------------------------

struct CvSplit {
  std::size_t num_folds = 0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> fold_of;  // indexed like the bag set
  std::vector<std::string> bag_ids;

  std::vector<std::size_t> test_indices(std::size_t fold) const;
  std::vector<std::size_t> train_indices(std::size_t fold) const;
  nlohmann::json to_json() const;
};

// Per repeat, bags of each class are shuffled and dealt round-robin onto the
// folds, continuing the deal across classes so fold sizes differ by at most one.
std::vector<CvSplit> make_cv_splits(const BagSet& bags, std::size_t num_folds, std::size_t repeats,
                                    std::uint64_t seed);

BagSet select_bags(const BagSet& bags, std::span<const std::size_t> indices);

}  // namespace protomil
