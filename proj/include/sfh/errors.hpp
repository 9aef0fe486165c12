#pragma once

#include <stdexcept>
#include <string>

namespace sfh {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyInput : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NonPositiveVariance : Error { using Error::Error; };
struct ComponentCountMismatch : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct LabelOutOfRange : Error { using Error::Error; };
struct StaleCache : Error { using Error::Error; };
struct AlreadyShifted : Error { using Error::Error; };
struct WouldEmptyDataset : Error { using Error::Error; };
struct InvariantViolation : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct UnsupportedVersion : Error { using Error::Error; };
struct ChecksumMismatch : Error { using Error::Error; };
struct NotFound : Error { using Error::Error; };
struct ConcurrentWriteConflict : Error { using Error::Error; };
struct UnsupportedTask : Error { using Error::Error; };

}  // namespace sfh
