#pragma once

#include <stdexcept>
#include <string>

namespace wfunet {

/// Base of every error raised by the library. The category decides the
/// process exit code used by the command-line tool.
class Error : public std::runtime_error {
 public:
  enum class Category { kConfig, kData, kNumerical };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

  int exit_code() const noexcept {
    switch (category_) {
      case Category::kConfig: return 2;
      case Category::kData: return 3;
      case Category::kNumerical: return 4;
    }
    return 1;
  }

 private:
  Category category_;
};

#define WFUNET_DEFINE_ERROR(Name, Cat)                               \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what)                          \
        : Error(Category::Cat, std::string(#Name ": ") + what) {}   \
  };

// Usage and configuration problems (exit code 2).
WFUNET_DEFINE_ERROR(ConfigurationError, kConfig)
WFUNET_DEFINE_ERROR(BoundsError, kConfig)
WFUNET_DEFINE_ERROR(StateError, kConfig)
WFUNET_DEFINE_ERROR(ModelTypeError, kConfig)

// Malformed, inconsistent or unreadable data (exit code 3).
WFUNET_DEFINE_ERROR(FormatError, kData)
WFUNET_DEFINE_ERROR(ConsistencyError, kData)
WFUNET_DEFINE_ERROR(AlignmentError, kData)
WFUNET_DEFINE_ERROR(InvariantError, kData)
WFUNET_DEFINE_ERROR(DegenerateScaleError, kData)
WFUNET_DEFINE_ERROR(ManifestError, kData)
WFUNET_DEFINE_ERROR(CorruptionError, kData)
WFUNET_DEFINE_ERROR(IoError, kData)

// Training diverged (exit code 4).
WFUNET_DEFINE_ERROR(NumericalError, kNumerical)

#undef WFUNET_DEFINE_ERROR

}  // namespace wfunet
