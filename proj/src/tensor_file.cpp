#include "fdl/tensor_file.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

namespace fdl {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

constexpr char kMagic[4] = {'F', 'D', 'L', 'T'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get(const char* what) {
    T value;
    need(sizeof(T), what);
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(double* dst, std::size_t n, const char* what) {
    need(n * sizeof(double), what);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw TensorFileError(origin_ + ": truncated tensor file while reading " + what);
    }
  }

  const std::string& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.raw()), t.size() * sizeof(double));
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw TensorFileError(origin + ": bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTensorFileVersion) {
    throw TensorFileError(origin + ": unsupported tensor file version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint32_t>("name length");
    std::string name = r.get_string(len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw TensorFileError(origin + ": tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("dims");
      if (d == 0 || d > (1ull << 32)) throw TensorFileError(origin + ": tensor '" + name + "' has invalid dims");
    }
    Tensor t(shape);
    r.get_doubles(t.raw(), t.size(), "payload");
    out.push_back({std::move(name), std::move(t)});
  }
  if (!r.at_end()) throw TensorFileError(origin + ": trailing bytes after last tensor");
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_tensors(tensors));
}

std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  return decode_tensors(read_file_bytes(path), path.string());
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFileError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError("write failed for " + path.string());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xF];
  }
  return hex;
}

}  // namespace fdl
