#ifndef PEAP_SAFETENSORS_HPP
#define PEAP_SAFETENSORS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace peap::safetensors {

enum class DType { F32, F16, BF16, F64 };

std::string to_string(DType d);
DType dtype_from_string(const std::string& s);
std::size_t dtype_size(DType d);

struct TensorInfo {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::size_t begin = 0;  // offsets relative to the start of the payload
  std::size_t end = 0;

  std::int64_t numel() const;
};

// A whole container read into memory: 8-byte little-endian header length,
// JSON header {name -> {dtype, shape, data_offsets}}, then the raw payload.
class File {
 public:
  static File read(const std::filesystem::path& path);
  static File parse(std::vector<std::uint8_t> bytes, const std::string& origin = "<memory>");

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const TensorInfo& info(const std::string& name) const;
  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  // Tensor payload converted to float, row-major.
  std::vector<float> as_float(const std::string& name) const;

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t payload_offset_ = 0;
  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
  std::string origin_;
};

struct TensorView {
  std::string name;
  std::vector<std::int64_t> shape;
  std::span<const float> data;
};

// Writes F32 tensors in sorted-name order with tightly packed offsets.
void write(const std::filesystem::path& path, const std::vector<TensorView>& tensors,
           const std::map<std::string, std::string>& metadata = {});

}  // namespace peap::safetensors

#endif  // PEAP_SAFETENSORS_HPP
