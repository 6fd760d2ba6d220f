#include "peap/safetensors.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace peap::safetensors {

std::string to_string(DType d) {
  switch (d) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F64: return "F64";
  }
  return "?";
}

DType dtype_from_string(const std::string& s) {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  if (s == "F64") return DType::F64;
  throw DataError(fmt::format("unsupported dtype '{}'", s));
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F64: return 8;
  }
  return 0;
}

std::int64_t TensorInfo::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::uint64_t read_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

File File::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open tensor file '{}'", path.string()));
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw DataError(fmt::format("short read on '{}'", path.string()));
  return parse(std::move(bytes), path.string());
}

File File::parse(std::vector<std::uint8_t> bytes, const std::string& origin) {
  File f;
  f.origin_ = origin;
  if (bytes.size() < 8) throw DataError(fmt::format("{}: unreadable header (file shorter than 8 bytes)", origin));
  const std::uint64_t header_len = read_le64(bytes.data());
  if (header_len > bytes.size() - 8)
    throw DataError(fmt::format("{}: unreadable header (length {} exceeds file size)", origin, header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: unreadable header ({})", origin, e.what()));
  }
  if (!header.is_object()) throw DataError(fmt::format("{}: unreadable header (not a JSON object)", origin));
  f.payload_offset_ = 8 + header_len;
  const std::size_t payload = bytes.size() - f.payload_offset_;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items())
        if (v.is_string()) f.metadata_[k] = v.get<std::string>();
      continue;
    }
    TensorInfo info;
    try {
      info.dtype = dtype_from_string(entry.at("dtype").get<std::string>());
      info.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offs = entry.at("data_offsets").get<std::vector<std::size_t>>();
      if (offs.size() != 2) throw DataError("data_offsets must have two entries");
      info.begin = offs[0];
      info.end = offs[1];
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}: tensor '{}': malformed header entry ({})", origin, name, e.what()));
    }
    const auto expected = static_cast<std::size_t>(info.numel()) * dtype_size(info.dtype);
    if (info.end < info.begin || info.end > payload || info.end - info.begin != expected)
      throw DataError(fmt::format("{}: tensor '{}': data offsets [{}, {}) inconsistent with shape/payload",
                                  origin, name, info.begin, info.end));
    f.tensors_.emplace(name, std::move(info));
  }
  f.bytes_ = std::move(bytes);
  return f;
}

const TensorInfo& File::info(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError(fmt::format("{}: missing tensor '{}'", origin_, name));
  return it->second;
}

std::vector<float> File::as_float(const std::string& name) const {
  const auto& ti = info(name);
  const std::uint8_t* p = bytes_.data() + payload_offset_ + ti.begin;
  const auto n = static_cast<std::size_t>(ti.numel());
  std::vector<float> out(n);
  switch (ti.dtype) {
    case DType::F32:
      std::memcpy(out.data(), p, n * 4);
      break;
    case DType::F64:
      for (std::size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, p + 8 * i, 8);
        out[i] = static_cast<float>(d);
      }
      break;
    case DType::F16:
      for (std::size_t i = 0; i < n; ++i) out[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(p[2 * i] | (p[2 * i + 1] << 8)) << 16;
        out[i] = std::bit_cast<float>(bits);
      }
      break;
  }
  return out;
}

void write(const std::filesystem::path& path, const std::vector<TensorView>& tensors,
           const std::map<std::string, std::string>& metadata) {
  std::vector<const TensorView*> order;
  for (const auto& t : tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->name < b->name; });

  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto* t : order) {
    std::int64_t numel = 1;
    for (auto s : t->shape) numel *= s;
    if (static_cast<std::size_t>(numel) != t->data.size())
      throw DataError(fmt::format("tensor '{}': shape does not match data length", t->name));
    const std::size_t bytes = t->data.size() * 4;
    header[t->name] = {{"dtype", "F32"}, {"shape", t->shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string h = header.dump();
  while ((h.size() + 8) % 8 != 0) h.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write tensor file '{}'", path.string()));
  std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xff));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto* t : order)
    out.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(t->data.size() * 4));
  if (!out) throw DataError(fmt::format("short write on '{}'", path.string()));
}

}  // namespace peap::safetensors
