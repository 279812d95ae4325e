#ifndef KOALA_COMMON_HPP
#define KOALA_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace koala {

// Error taxonomy. Shape/argument problems are invalid_argument subclasses,
// I/O problems and numeric failures get their own types so callers (the CLI
// in particular) can map them to distinct exit codes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}
inline void check_value(bool ok, const std::string& msg) {
  if (!ok) throw ValueError(msg);
}

// Border handling for image-domain filtering (degradation, local filtering).
enum class Border { kZero, kReplicate };

// Convolution padding. kSame follows the stride-aware convention:
// total pad = k - stride (input divisible by stride), front pad = (k - s) / 2
// rounded down, so stride-1 odd kernels are centered and strided kernels
// keep the sampling grid centroid-aligned.
enum class Padding { kSame, kValid };

inline int same_pad_before(int kernel, int stride) {
  return (kernel - stride) / 2;
}
inline int same_pad_total(int kernel, int stride) {
  return kernel - stride;
}

}  // namespace koala

#endif  // KOALA_COMMON_HPP
