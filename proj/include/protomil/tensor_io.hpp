#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protomil/tensor.hpp"

namespace protomil {

// Raw tensor file: "PMTN", u32 rank, u32 dims[rank], zero padding up to a
// multiple of 16 bytes (so rank <= 2 gives exactly 16 header bytes), then the
// values as little-endian IEEE-754 binary32 in row-major order.
inline constexpr char kTensorMagic[4] = {'P', 'M', 'T', 'N'};

std::size_t tensor_header_size(std::size_t rank);
std::vector<std::uint8_t> encode_tensor(const Tensor<float>& tensor);
Tensor<float> decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> read_tensor_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace protomil
