#ifndef PEAP_COMMON_HPP
#define PEAP_COMMON_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <stdexcept>
#include <string>

namespace peap {

// Row-major dense types. Activations are stored one row per token position.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using RowVectorF = RowVector<float>;

// Errors carry a category so the CLI can map them onto exit codes.
enum class ErrorKind { Config, Data, Endpoint };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class EndpointError : public Error {
 public:
  explicit EndpointError(const std::string& what) : Error(ErrorKind::Endpoint, what) {}
};

// 64-bit FNV-1a, used for dataset fingerprints in output sidecars.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Directory holding the shipped tokenizer files and lexicons.
std::string data_dir();

}  // namespace peap

#endif  // PEAP_COMMON_HPP
