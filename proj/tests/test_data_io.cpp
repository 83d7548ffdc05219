#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "protomil/checkpoint.hpp"
#include "protomil/data.hpp"
#include "protomil/error.hpp"
#include "protomil/image_io.hpp"
#include "protomil/tensor_io.hpp"
#include "test_support.hpp"

namespace protomil {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

const fs::path kMnist = fs::path(PROTOMIL_DATA_DIR) / "mnist";

template <typename E, typename F>
std::string kind_of(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e.kind();
  } catch (const Error& e) {
    return "wrong:" + e.kind();
  }
  return "none";
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

// --- tensor files -------------------------------------------------------------

TEST(TensorIo, HeaderLayout) {
  EXPECT_EQ(tensor_header_size(0), 16u);
  EXPECT_EQ(tensor_header_size(1), 16u);
  EXPECT_EQ(tensor_header_size(2), 16u);
  EXPECT_EQ(tensor_header_size(3), 32u);
  EXPECT_EQ(tensor_header_size(4), 32u);

  const Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, -0.5f});
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 16u + 6 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PMTN");
  const std::vector<std::uint8_t> expected_dims = {2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0};
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + 4, bytes.begin() + 16), expected_dims);
  // 1.0f = 0x3F800000 little-endian.
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + 16, bytes.begin() + 20), (std::vector<std::uint8_t>{0, 0, 0x80, 0x3F}));
  EXPECT_EQ(encode_tensor(Tensor<float>({1, 1, 1}, 0.0f)).size(), 32u + 4);
  // -0.5f = 0xBF000000 little-endian.
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.end() - 4, bytes.end()), (std::vector<std::uint8_t>{0, 0, 0, 0xBF}));
}

TEST(TensorIo, RoundTripIsBitExact) {
  Rng rng(3);
  TempDir dir("tensor");
  for (const Shape& shape : {Shape{7}, Shape{3, 5}, Shape{2, 1, 4, 4}, Shape{1, 2, 3}}) {
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = static_cast<float>(rng.normal());
    t[0] = -0.0f;
    write_tensor_file(dir / "t.pmt", t);
    EXPECT_TRUE(bit_equal(read_tensor_file(dir / "t.pmt"), t)) << shape_string(shape);
  }
}

TEST(TensorIo, CorruptInputsAreSchemaErrors) {
  auto bytes = encode_tensor(Tensor<float>({2, 2}, 1.0f));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of<SchemaError>([&] { decode_tensor(bad_magic); }), "schema");
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_EQ(kind_of<SchemaError>([&] { decode_tensor(truncated); }), "schema");
  EXPECT_EQ(kind_of<SchemaError>([&] { decode_tensor({'P', 'M', 'T'}); }), "schema");
  EXPECT_EQ(kind_of<MissingFileError>([&] { read_tensor_file("/nonexistent/protomil.pmt"); }), "missing_file");
}

TEST(ImageIo, PngRoundTripAndScaling) {
  TempDir dir("png");
  Image8 img(3, 2, 1);
  img.pixels = {0, 10, 255, 128, 1, 254};
  write_png(dir / "a.png", img);
  const Image8 back = read_png(dir / "a.png");
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, img.pixels);
  const Tensor<float> t = image_to_tensor(back);
  EXPECT_EQ(t.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(t.at(0, 0, 2), 1.0f);
  EXPECT_EQ(t.at(0, 1, 0), 128.0f / 255.0f);
  EXPECT_EQ(tensor_to_image(t).pixels, img.pixels);
}

// --- checkpoints --------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  ModelConfig cfg = testing::tiny_conv_config(4, 3, 5, 1);
  ProtoMilModel<float> model(cfg, 17);
  model.bank().slots[1].active = false;
  model.bank().slots[4].provenance = PatchRef{"bag_00003", 3, 2, 1, 0};
  save_checkpoint(model, dir.path(), {{"note", "x"}});
  ProtoMilModel<float> loaded = load_checkpoint(dir.path());

  EXPECT_EQ(loaded.config(), cfg);
  EXPECT_EQ(loaded.bank().slots, model.bank().slots);
  const auto a = model.parameters(), b = loaded.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_TRUE(bit_equal(a[i]->value, b[i]->value)) << a[i]->name;
  }
  EXPECT_EQ(read_checkpoint_manifest(dir.path())["extra"]["note"], "x");

  Rng rng(1);
  const Bag bag = testing::random_pixel_bag(rng, 4, 20, 1);
  EXPECT_EQ(model.infer(bag).probability(), loaded.infer(bag).probability());

  // Saving the reloaded model reproduces every file byte for byte.
  TempDir again("ckpt2");
  save_checkpoint(loaded, again.path(), {{"note", "x"}});
  for (const auto& entry : fs::directory_iterator(dir.path()))
    EXPECT_EQ(read_file_bytes(entry.path()), read_file_bytes(again / entry.path().filename().string()))
        << entry.path().filename();
}

TEST(Checkpoint, ManifestErrors) {
  TempDir dir("ckpt_bad");
  ProtoMilModel<float> model(testing::embedding_config(6, 2), 1);
  save_checkpoint(model, dir.path());
  EXPECT_EQ(kind_of<MissingFileError>([&] { load_checkpoint(dir / "missing"); }), "missing_file");

  auto manifest = read_checkpoint_manifest(dir.path());
  manifest["format_version"] = 99;
  write_text_file(dir / "manifest.json", manifest.dump());
  EXPECT_EQ(kind_of<SchemaError>([&] { load_checkpoint(dir.path()); }), "schema");

  manifest["format_version"] = kCheckpointFormatVersion;
  auto tampered = manifest;
  tampered["tensors"][0]["shape"][0] = 999;
  write_text_file(dir / "manifest.json", tampered.dump());
  EXPECT_EQ(kind_of<SchemaError>([&] { load_checkpoint(dir.path()); }), "schema");

  const std::string file = manifest["tensors"][0]["file"];
  manifest["tensors"][0]["shape"] = std::vector<std::size_t>{3};
  write_text_file(dir / "manifest.json", manifest.dump());
  write_tensor_file(dir / file, Tensor<float>({3}, 0.0f));
  EXPECT_EQ(kind_of<DimensionError>([&] { load_checkpoint(dir.path()); }), "dimension_mismatch");
}

// --- MNIST source and bag generator ----------------------------------------

TEST(Mnist, BundledDigitsLoad) {
  const DigitPool pool = read_mnist(kMnist);
  ASSERT_EQ(pool.size(), 60000u);
  EXPECT_EQ(pool.labels[0], 5);
  std::array<int, 10> counts{};
  for (int l : pool.labels) ++counts.at(l);
  for (int c : counts) EXPECT_GT(c, 5400);
  EXPECT_EQ(counts[9], 5949);
  const auto& img = *pool.images[0];
  EXPECT_EQ(img.shape(), (Shape{1, 28, 28}));
  EXPECT_EQ(*std::max_element(img.values().begin(), img.values().end()), 1.0f);
  EXPECT_EQ(*std::min_element(img.values().begin(), img.values().end()), 0.0f);
  EXPECT_EQ(read_mnist(kMnist / "train-images-idx3-ubyte.gz").labels, pool.labels);
}

TEST(Mnist, SourceErrors) {
  TempDir dir("mnist_bad");
  EXPECT_EQ(kind_of<MissingFileError>([&] { read_mnist(dir.path()); }), "missing_file");
  write_file_bytes(dir / "images-idx3-ubyte", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  write_file_bytes(dir / "labels-idx1-ubyte", {0, 0, 8, 1, 0, 0, 0, 0});
  EXPECT_EQ(kind_of<SchemaError>([&] { read_mnist(dir.path()); }), "schema");
}

TEST(MnistBags, ConfigValidation) {
  MnistBagsConfig c;
  c.num_bags = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c.num_bags = 10;
  c.std_size = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(MnistBags, LabelsFollowDigitContent) {
  const DigitPool pool = read_mnist(kMnist);
  MnistBagsConfig c;
  c.num_bags = 40;
  c.mean_size = 10;
  c.std_size = 2;
  c.seed = 5;
  const auto draws = draw_mnist_bags(c, pool.labels);
  ASSERT_EQ(draws.size(), 40u);
  int positives = 0;
  for (std::size_t b = 0; b < draws.size(); ++b) {
    const auto& d = draws[b];
    positives += d.label;
    EXPECT_GE(d.indices.size(), 1u);
    std::vector<int> instance_labels;
    for (std::size_t idx : d.indices) instance_labels.push_back(pool.labels[idx] == 9 ? 1 : 0);
    EXPECT_EQ(bag_label_from_instances(instance_labels), d.label) << b;
  }
  EXPECT_EQ(positives, 20);

  const BagSet bags = generate_mnist_bags(c, pool);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    EXPECT_EQ(bags[b].id, bag_id_for(b));
    EXPECT_EQ(bags[b].label, draws[b].label);
    ASSERT_EQ(bags[b].size(), draws[b].indices.size());
    EXPECT_EQ(&bags[b].instances[0].pixels(), pool.images[draws[b].indices[0]].get());
  }
}

TEST(MnistBags, Deterministic) {
  const DigitPool pool = read_mnist(kMnist);
  MnistBagsConfig c;
  c.num_bags = 20;
  c.seed = 11;
  const auto a = draw_mnist_bags(c, pool.labels), b = draw_mnist_bags(c, pool.labels);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].indices, b[i].indices);
  c.seed = 12;
  EXPECT_NE(draw_mnist_bags(c, pool.labels)[0].indices, a[0].indices);
}

TEST(MnistBags, TenThousandBagStatistics) {
  const DigitPool pool = read_mnist(kMnist);
  MnistBagsConfig c;
  c.num_bags = 10000;
  c.seed = 2024;
  const auto draws = draw_mnist_bags(c, pool.labels);
  double sum = 0, sumsq = 0, nines = 0, total = 0;
  for (const auto& d : draws) {
    const double n = static_cast<double>(d.indices.size());
    sum += n;
    sumsq += n * n;
    total += n;
    for (std::size_t idx : d.indices) nines += pool.labels[idx] == 9;
  }
  const double mean = sum / draws.size();
  const double sd = std::sqrt((sumsq - draws.size() * mean * mean) / (draws.size() - 1));
  EXPECT_GE(mean, 97.0);
  EXPECT_LE(mean, 103.0);
  EXPECT_GE(sd, 18.0);
  EXPECT_LE(sd, 22.0);
  EXPECT_NEAR(nines / total, 0.05, 0.01);
}

// --- embedding generator -------------------------------------------------------

TEST(EmbeddingBags, ShapeLabelsAndDeterminism) {
  EmbeddingBagsConfig c;
  c.num_bags = 30;
  c.dim = 16;
  c.seed = 4;
  const BagSet a = generate_embedding_bags(c), b = generate_embedding_bags(c);
  ASSERT_EQ(a.size(), 30u);
  int positives = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    positives += a[i].label;
    a[i].validate();
    EXPECT_EQ(a[i].instances[0].embedding().size(), 16u);
    ASSERT_EQ(a[i].size(), b[i].size());
    for (std::size_t k = 0; k < a[i].size(); ++k)
      EXPECT_TRUE(std::ranges::equal(a[i].instances[k].embedding(), b[i].instances[k].embedding()));
  }
  EXPECT_EQ(positives, 15);
  c.max_witnesses = 0;
  EXPECT_THROW(generate_embedding_bags(c), ConfigError);
}

// --- manifests ---------------------------------------------------------------

void expect_same_bags(const BagSet& a, const BagSet& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].label, b[i].label);
    ASSERT_EQ(a[i].size(), b[i].size());
    for (std::size_t k = 0; k < a[i].size(); ++k)
      EXPECT_TRUE(std::ranges::equal(a[i].instances[k].values(), b[i].instances[k].values())) << i << "/" << k;
  }
}

BagSet small_mnist_bags() {
  MnistBagsConfig c;
  c.num_bags = 6;
  c.mean_size = 4;
  c.std_size = 1;
  c.seed = 9;
  c.source = kMnist;
  return generate_mnist_bags(c);
}

TEST(Manifest, TensorAndPngRoundTrip) {
  const BagSet bags = small_mnist_bags();
  TempDir t("manifest_t"), p("manifest_p");
  write_bag_dataset(bags, t.path(), InstanceFileFormat::tensor);
  write_bag_dataset(bags, p.path(), InstanceFileFormat::png);
  expect_same_bags(load_bag_dataset(t.path()), bags);
  // MNIST pixels are k/255, so the PNG path is lossless too.
  expect_same_bags(load_bag_dataset(p / "manifest.json"), bags);
  const auto m = nlohmann::json::parse(read_text_file(t / "manifest.json"));
  EXPECT_EQ(m["format"], "protomil-bags");
  EXPECT_EQ(m["modality"], "pixels");
  EXPECT_EQ(m["instance_shape"], (std::vector<int>{1, 28, 28}));
}

TEST(Manifest, EmbeddingRoundTrip) {
  EmbeddingBagsConfig c;
  c.num_bags = 4;
  c.dim = 8;
  const BagSet bags = generate_embedding_bags(c);
  TempDir dir("manifest_e");
  write_bag_dataset(bags, dir.path());
  expect_same_bags(load_bag_dataset(dir.path()), bags);
  EXPECT_THROW(write_bag_dataset(bags, dir.path(), InstanceFileFormat::png), InvalidInputError);
}

TEST(Manifest, DistinctErrorKinds) {
  const BagSet bags = small_mnist_bags();
  TempDir dir("manifest_err");
  write_bag_dataset(bags, dir.path());
  const auto good = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  auto rewrite = [&](const nlohmann::json& m) { write_text_file(dir / "manifest.json", m.dump()); };

  EXPECT_EQ(kind_of<MissingFileError>([&] { load_bag_dataset(dir / "nope.json"); }), "missing_file");

  write_text_file(dir / "manifest.json", "{not json");
  EXPECT_EQ(kind_of<SchemaError>([&] { load_bag_dataset(dir.path()); }), "schema");

  auto m = good;
  m.erase("modality");
  rewrite(m);
  EXPECT_EQ(kind_of<SchemaError>([&] { load_bag_dataset(dir.path()); }), "schema");

  m = good;
  m["bags"] = nlohmann::json::array();
  rewrite(m);
  EXPECT_EQ(kind_of<InvalidInputError>([&] { load_bag_dataset(dir.path()); }), "invalid_input");

  m = good;
  m["bags"][0]["files"][0] = "instances/absent.pmt";
  rewrite(m);
  EXPECT_EQ(kind_of<MissingFileError>([&] { load_bag_dataset(dir.path()); }), "missing_file");

  m = good;
  write_tensor_file(dir / "instances/odd.pmt", Tensor<float>({1, 1, 14, 14}, 0.5f));
  m["bags"][1]["files"][0] = "instances/odd.pmt";
  rewrite(m);
  EXPECT_EQ(kind_of<DimensionError>([&] { load_bag_dataset(dir.path()); }), "dimension_mismatch");
}

// --- cross-validation -------------------------------------------------------

BagSet labelled_bags(std::size_t n, std::size_t positives) {
  BagSet bags;
  for (std::size_t i = 0; i < n; ++i)
    bags.push_back(Bag{bag_id_for(i), i < positives ? 1 : 0, {Instance::from_embedding({0.0f})}});
  return bags;
}

TEST(CrossValidation, FiveHundredBagsTenFoldsFiveRepeats) {
  const BagSet bags = labelled_bags(500, 250);
  const auto splits = make_cv_splits(bags, 10, 5, 3);
  ASSERT_EQ(splits.size(), 5u);
  std::size_t pairs = 0;
  for (const auto& s : splits) {
    std::vector<int> seen(bags.size(), 0);
    for (std::size_t f = 0; f < 10; ++f, ++pairs) {
      const auto test = s.test_indices(f), train = s.train_indices(f);
      EXPECT_EQ(test.size(), 50u);
      EXPECT_EQ(test.size() + train.size(), bags.size());
      std::size_t pos = 0;
      for (std::size_t i : test) {
        ++seen[i];
        pos += bags[i].label;
      }
      EXPECT_EQ(pos, 25u);  // stratified
      std::vector<std::size_t> all(test);
      all.insert(all.end(), train.begin(), train.end());
      std::ranges::sort(all);
      EXPECT_TRUE(std::ranges::adjacent_find(all) == all.end());
    }
    EXPECT_TRUE(std::ranges::all_of(seen, [](int c) { return c == 1; }));
  }
  EXPECT_EQ(pairs, 50u);
  EXPECT_NE(splits[0].fold_of, splits[1].fold_of);
  EXPECT_EQ(make_cv_splits(bags, 10, 5, 3)[4].fold_of, splits[4].fold_of);
}

TEST(CrossValidation, UnevenClassesAndEdgeCases) {
  const BagSet bags = labelled_bags(23, 7);
  const auto s = make_cv_splits(bags, 4, 1, 1).at(0);
  std::vector<std::size_t> sizes;
  for (std::size_t f = 0; f < 4; ++f) sizes.push_back(s.test_indices(f).size());
  EXPECT_LE(*std::ranges::max_element(sizes) - *std::ranges::min_element(sizes), 1u);

  const auto ten = make_cv_splits(labelled_bags(10, 5), 10, 1, 0).at(0);
  for (std::size_t f = 0; f < 10; ++f) EXPECT_EQ(ten.test_indices(f).size(), 1u);
  EXPECT_THROW(make_cv_splits(labelled_bags(10, 5), 11, 1, 0), InvalidInputError);
  EXPECT_THROW(make_cv_splits(labelled_bags(10, 5), 1, 1, 0), InvalidInputError);
}

}  // namespace
}  // namespace protomil
