#include "protomil/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace protomil {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

std::size_t tensor_header_size(std::size_t rank) {
  return (8 + 4 * rank + 15) / 16 * 16;
}

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& tensor) {
  const std::size_t header = tensor_header_size(tensor.rank());
  std::vector<std::uint8_t> out;
  out.reserve(header + 4 * tensor.size());
  out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.resize(header, 0);
  for (float v : tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor<float> decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw SchemaError(origin + ": not a PMTN tensor file");
  }
  const std::size_t rank = get_u32(bytes.data() + 4);
  const std::size_t header = tensor_header_size(rank);
  if (rank > 16 || bytes.size() < header) throw SchemaError(origin + ": truncated tensor header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) shape[i] = get_u32(bytes.data() + 8 + 4 * i);
  const std::size_t count = shape_size(shape);
  if (bytes.size() != header + 4 * count) {
    throw SchemaError(origin + ": payload of " + std::to_string(bytes.size() - header) + " bytes does not match shape " +
                      shape_string(shape));
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<float>(get_u32(bytes.data() + header + 4 * i));
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& tensor) {
  write_file_bytes(path, encode_tensor(tensor));
}

Tensor<float> read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path), path.string());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError(path.string() + ": no such file");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace protomil
