#pragma once

// Little-endian named-tensor container:
//   magic "FDLT" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 payload

#include "fdl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdl {

inline constexpr std::uint32_t kTensorFileVersion = 1;

class TensorFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::string encode_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_tensors(const std::string& bytes, const std::string& origin = "<memory>");

void write_tensor_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);
// Hex SHA-256 digest.
std::string sha256_hex(const std::string& bytes);

}  // namespace fdl
