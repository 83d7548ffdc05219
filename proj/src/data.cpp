#include "protomil/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include <zlib.h>

#include "protomil/error.hpp"
#include "protomil/image_io.hpp"
#include "protomil/rng.hpp"
#include "protomil/tensor_io.hpp"

namespace protomil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_maybe_gzip(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError(path.string() + ": no such file");
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError(path.string() + ": cannot open");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw IoError(path.string() + ": read error");
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

fs::path find_first(const fs::path& dir, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (fs::exists(dir / n)) return dir / n;
  return {};
}

}  // namespace

DigitPool read_mnist_idx(const fs::path& images, const fs::path& labels) {
  const auto img = read_maybe_gzip(images);
  const auto lab = read_maybe_gzip(labels);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) throw SchemaError(images.string() + ": not an IDX image file");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) throw SchemaError(labels.string() + ": not an IDX label file");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  if (be32(lab, 4) != n) throw DimensionError("MNIST image and label counts differ");
  if (img.size() != 16 + n * rows * cols || lab.size() != 8 + n) throw SchemaError(images.string() + ": truncated");

  DigitPool pool;
  pool.images.reserve(n);
  pool.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> t({1, rows, cols});
    const std::uint8_t* src = img.data() + 16 + i * rows * cols;
    for (std::size_t p = 0; p < rows * cols; ++p) t[p] = static_cast<float>(src[p]) / 255.0f;
    pool.images.push_back(std::make_shared<const Tensor<float>>(std::move(t)));
    const int label = lab[8 + i];
    if (label > 9) throw SchemaError(labels.string() + ": label out of range");
    pool.labels.push_back(label);
  }
  return pool;
}

DigitPool read_mnist(const fs::path& source) {
  if (source.empty()) throw ConfigError("MNIST source path is empty");
  if (fs::is_directory(source)) {
    const fs::path images = find_first(source, {"images-idx3-ubyte.gz", "images-idx3-ubyte",
                                                "train-images-idx3-ubyte.gz", "train-images-idx3-ubyte"});
    const fs::path labels = find_first(source, {"labels-idx1-ubyte.gz", "labels-idx1-ubyte",
                                                "train-labels-idx1-ubyte.gz", "train-labels-idx1-ubyte"});
    if (images.empty() || labels.empty()) throw MissingFileError(source.string() + ": no MNIST IDX files found");
    return read_mnist_idx(images, labels);
  }
  std::string name = source.filename().string();
  const auto pos = name.find("images-idx3");
  if (pos == std::string::npos) throw ConfigError(source.string() + ": expected an images-idx3 file or a directory");
  name.replace(pos, 11, "labels-idx1");
  return read_mnist_idx(source, source.parent_path() / name);
}

void MnistBagsConfig::validate() const {
  if (num_bags == 0) throw ConfigError("num_bags must be positive");
  if (num_bags % 2 != 0) throw ConfigError("num_bags must be even for balanced classes");
  if (!(mean_size > 0) || !(std_size >= 0)) throw ConfigError("bag size distribution must have mean > 0, std >= 0");
  if (positive_digit < 0 || positive_digit > 9) throw ConfigError("positive_digit must be in 0..9");
}

std::string bag_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag_%05zu", index);
  return buf;
}

std::vector<BagDraw> draw_mnist_bags(const MnistBagsConfig& config, std::span<const int> digit_labels) {
  config.validate();
  std::vector<std::size_t> negatives;
  bool has_positive = false;
  for (std::size_t i = 0; i < digit_labels.size(); ++i) {
    if (digit_labels[i] == config.positive_digit)
      has_positive = true;
    else
      negatives.push_back(i);
  }
  if (!has_positive || negatives.empty()) throw InvalidInputError("digit pool must contain both positive and negative digits");

  Rng rng(config.seed);
  std::vector<BagDraw> bags(config.num_bags);
  for (std::size_t b = 0; b < config.num_bags; ++b) {
    BagDraw& draw = bags[b];
    draw.label = b % 2 == 0 ? 1 : 0;
    const auto size = static_cast<std::size_t>(std::max(1.0, std::round(rng.normal(config.mean_size, config.std_size))));
    draw.indices.resize(size);
    if (draw.label == 1) {
      bool found = false;
      while (!found) {
        for (auto& idx : draw.indices) {
          idx = rng.below(digit_labels.size());
          found = found || digit_labels[idx] == config.positive_digit;
        }
      }
    } else {
      for (auto& idx : draw.indices) idx = negatives[rng.below(negatives.size())];
    }
  }
  return bags;
}

BagSet generate_mnist_bags(const MnistBagsConfig& config, const DigitPool& pool) {
  const auto draws = draw_mnist_bags(config, pool.labels);
  BagSet bags(draws.size());
  for (std::size_t b = 0; b < draws.size(); ++b) {
    bags[b].id = bag_id_for(b);
    bags[b].label = draws[b].label;
    bags[b].instances.reserve(draws[b].indices.size());
    for (std::size_t idx : draws[b].indices) bags[b].instances.push_back(Instance::from_pixels(pool.images[idx]));
  }
  return bags;
}

BagSet generate_mnist_bags(const MnistBagsConfig& config) {
  config.validate();
  return generate_mnist_bags(config, read_mnist(config.source));
}

void EmbeddingBagsConfig::validate() const {
  if (num_bags == 0 || num_bags % 2 != 0) throw ConfigError("num_bags must be positive and even");
  if (dim == 0) throw ConfigError("dim must be positive");
  if (!(mean_size > 0) || !(std_size >= 0)) throw ConfigError("bag size distribution must have mean > 0, std >= 0");
  if (max_witnesses == 0) throw ConfigError("max_witnesses must be positive");
}

BagSet generate_embedding_bags(const EmbeddingBagsConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<double> direction(config.dim);
  double norm = 0;
  for (auto& v : direction) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : direction) v /= norm;

  BagSet bags(config.num_bags);
  for (std::size_t b = 0; b < config.num_bags; ++b) {
    Bag& bag = bags[b];
    bag.id = bag_id_for(b);
    bag.label = b % 2 == 0 ? 1 : 0;
    const auto size = static_cast<std::size_t>(std::max(1.0, std::round(rng.normal(config.mean_size, config.std_size))));
    std::vector<bool> witness(size, false);
    if (bag.label == 1) {
      const std::size_t count = std::min<std::size_t>(size, 1 + rng.below(config.max_witnesses));
      std::vector<std::size_t> order(size);
      for (std::size_t i = 0; i < size; ++i) order[i] = i;
      rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t i = 0; i < count; ++i) witness[order[i]] = true;
    }
    for (std::size_t i = 0; i < size; ++i) {
      std::vector<float> e(config.dim);
      for (std::size_t d = 0; d < config.dim; ++d) {
        double v = rng.normal(0.5, config.noise);
        if (witness[i]) v += config.shift * direction[d];
        e[d] = static_cast<float>(v);
      }
      bag.instances.push_back(Instance::from_embedding(std::move(e)));
    }
  }
  return bags;
}

const char* to_string(Modality m) { return m == Modality::pixels ? "pixels" : "embeddings"; }

void write_bag_dataset(const BagSet& bags, const fs::path& dir, InstanceFileFormat format) {
  if (bags.empty()) throw InvalidInputError("cannot write an empty bag set");
  const bool pixels = bags.front().instances.at(0).has_pixels();
  if (!pixels && format == InstanceFileFormat::png) throw InvalidInputError("embeddings cannot be stored as PNG");

  json entries = json::array();
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const Bag& bag = bags[b];
    bag.validate();
    if (bag.instances.front().has_pixels() != pixels) throw InvalidInputError(bag.id + ": mixed modalities in bag set");
    json files = json::array();
    if (format == InstanceFileFormat::tensor) {
      const std::string rel = "instances/" + bag_id_for(b) + ".pmt";
      write_tensor_file(dir / rel, pixels ? stack_instances<float>(bag)
                                          : Tensor<float>({bag.size(), bag.instances[0].embedding().size()},
                                                          [&] {
                                                            std::vector<float> v;
                                                            for (const auto& inst : bag.instances)
                                                              v.insert(v.end(), inst.embedding().begin(),
                                                                       inst.embedding().end());
                                                            return v;
                                                          }()));
      files.push_back(rel);
    } else {
      for (std::size_t i = 0; i < bag.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "instances/%s_%04zu.png", bag_id_for(b).c_str(), i);
        write_png(dir / name, tensor_to_image(bag.instances[i].pixels()));
        files.push_back(name);
      }
    }
    entries.push_back({{"id", bag.id}, {"label", bag.label}, {"files", files}});
  }
  json manifest = {{"format", "protomil-bags"},
                   {"format_version", kManifestFormatVersion},
                   {"modality", pixels ? "pixels" : "embeddings"}};
  if (pixels)
    manifest["instance_shape"] = bags.front().instances.front().input_shape();
  else
    manifest["embedding_dim"] = bags.front().instances.front().embedding().size();
  manifest["bags"] = entries;
  write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

namespace {

void append_tensor_instances(Bag& bag, Tensor<float> t, Modality modality, const std::string& where) {
  if (modality == Modality::embeddings) {
    if (t.rank() == 1) t.reshape({1, t.size()});
    if (t.rank() != 2) throw DimensionError(where + ": embedding tensor must be D or N x D, got " + shape_string(t.shape()));
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      const auto row = t.slice(i);
      bag.instances.push_back(Instance::from_embedding({row.begin(), row.end()}));
    }
    return;
  }
  if (t.rank() == 2) t.reshape({1, 1, t.dim(0), t.dim(1)});
  if (t.rank() == 3) t.reshape({1, t.dim(0), t.dim(1), t.dim(2)});
  if (t.rank() != 4) throw DimensionError(where + ": pixel tensor must be H x W, C x H x W or N x C x H x W");
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    const auto s = t.slice(i);
    try {
      bag.instances.push_back(
          Instance::from_pixels(Tensor<float>({t.dim(1), t.dim(2), t.dim(3)}, std::vector<float>(s.begin(), s.end()))));
    } catch (const InvalidInputError& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
}

}  // namespace

BagSet load_bag_dataset(const fs::path& manifest_path) {
  const fs::path file = fs::is_directory(manifest_path) ? manifest_path / "manifest.json" : manifest_path;
  const fs::path dir = file.parent_path();
  json m;
  try {
    m = json::parse(read_text_file(file));
  } catch (const json::exception& e) {
    throw SchemaError(file.string() + ": " + e.what());
  }
  auto fail = [&](const std::string& what) { throw SchemaError(file.string() + ": " + what); };
  if (!m.is_object()) fail("manifest must be a JSON object");
  if (m.value("format_version", 0) != kManifestFormatVersion) fail("unsupported or missing format_version");
  if (!m.contains("modality") || !m["modality"].is_string()) fail("missing modality");
  const std::string mod = m["modality"];
  if (mod != "pixels" && mod != "embeddings") fail("modality must be 'pixels' or 'embeddings'");
  const Modality modality = mod == "pixels" ? Modality::pixels : Modality::embeddings;
  std::size_t embedding_dim = 0;
  if (modality == Modality::embeddings) {
    if (!m.contains("embedding_dim") || !m["embedding_dim"].is_number_unsigned()) fail("embeddings need embedding_dim");
    embedding_dim = m["embedding_dim"];
  }
  if (!m.contains("bags") || !m["bags"].is_array()) fail("missing bags array");
  if (m["bags"].empty()) throw InvalidInputError(file.string() + ": manifest lists no bags");

  BagSet bags;
  Shape pixel_shape;
  for (const auto& entry : m["bags"]) {
    if (!entry.is_object() || !entry.contains("id") || !entry["id"].is_string()) fail("bag entry without string id");
    Bag bag;
    bag.id = entry["id"];
    if (!entry.contains("label") || !entry["label"].is_number_integer()) fail(bag.id + ": missing integer label");
    bag.label = entry["label"];
    if (bag.label != 0 && bag.label != 1) fail(bag.id + ": label must be 0 or 1");
    if (!entry.contains("files") || !entry["files"].is_array() || entry["files"].empty()) fail(bag.id + ": no files");
    for (const auto& f : entry["files"]) {
      if (!f.is_string()) fail(bag.id + ": file references must be strings");
      const fs::path path = dir / f.get<std::string>();
      const std::string where = bag.id + " (" + path.string() + ")";
      if (path.extension() == ".png") {
        if (modality != Modality::pixels) fail(where + ": PNG in an embeddings manifest");
        bag.instances.push_back(Instance::from_pixels(image_to_tensor(read_png(path))));
      } else {
        append_tensor_instances(bag, read_tensor_file(path), modality, where);
      }
    }
    for (const auto& inst : bag.instances) {
      if (modality == Modality::embeddings && inst.embedding().size() != embedding_dim) {
        throw DimensionError(bag.id + ": embedding length " + std::to_string(inst.embedding().size()) +
                             " differs from embedding_dim " + std::to_string(embedding_dim));
      }
      if (modality == Modality::pixels) {
        if (pixel_shape.empty()) pixel_shape = inst.input_shape();
        if (inst.input_shape() != pixel_shape) {
          throw DimensionError(bag.id + ": instance shape " + shape_string(inst.input_shape()) + " differs from " +
                               shape_string(pixel_shape));
        }
      }
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

std::vector<std::size_t> CvSplit::test_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> CvSplit::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] != fold) out.push_back(i);
  return out;
}

json CvSplit::to_json() const {
  json folds = json::object();
  for (std::size_t i = 0; i < fold_of.size(); ++i) folds[bag_ids[i]] = fold_of[i];
  return {{"num_folds", num_folds}, {"repeat", repeat}, {"seed", seed}, {"folds", folds}};
}

std::vector<CvSplit> make_cv_splits(const BagSet& bags, std::size_t num_folds, std::size_t repeats, std::uint64_t seed) {
  if (num_folds < 2) throw InvalidInputError("cross-validation needs at least 2 folds");
  if (repeats == 0) throw InvalidInputError("cross-validation needs at least 1 repeat");
  if (num_folds > bags.size()) {
    throw InvalidInputError("cannot split " + std::to_string(bags.size()) + " bags into " + std::to_string(num_folds) +
                            " folds");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < bags.size(); ++i) by_class[bags[i].label].push_back(i);

  std::vector<CvSplit> splits;
  for (std::size_t r = 0; r < repeats; ++r) {
    CvSplit split;
    split.num_folds = num_folds;
    split.repeat = r;
    split.seed = seed;
    split.fold_of.assign(bags.size(), 0);
    for (const auto& b : bags) split.bag_ids.push_back(b.id);
    Rng rng(Rng::mix(seed, r));
    std::size_t deal = 0;
    for (auto& [label, members] : by_class) {
      std::vector<std::size_t> order = members;
      rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t idx : order) split.fold_of[idx] = deal++ % num_folds;
    }
    splits.push_back(std::move(split));
  }
  return splits;
}

BagSet select_bags(const BagSet& bags, std::span<const std::size_t> indices) {
  BagSet out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(bags.at(i));
  return out;
}

}  // namespace protomil
