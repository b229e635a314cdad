#pragma once

#include <stdexcept>
#include <string>

namespace subjmap {

/// Base of every error thrown by the library. The CLI maps ConfigError to
/// exit status 1 and every other Error to exit status 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SUBJMAP_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    explicit Name(const std::string& what)  \
        : Error(#Name ": " + what) {}       \
  };

// linalg-core
SUBJMAP_DEFINE_ERROR(RankDeficient)
SUBJMAP_DEFINE_ERROR(DimensionError)
SUBJMAP_DEFINE_ERROR(ConvergenceError)

// layers and models
SUBJMAP_DEFINE_ERROR(ShapeError)
SUBJMAP_DEFINE_ERROR(UnknownSubject)
SUBJMAP_DEFINE_ERROR(MissingLabels)

// training
SUBJMAP_DEFINE_ERROR(DivergenceError)
SUBJMAP_DEFINE_ERROR(EmptySubset)

// data
SUBJMAP_DEFINE_ERROR(InvalidFraction)
SUBJMAP_DEFINE_ERROR(ParseError)
SUBJMAP_DEFINE_ERROR(ShapeMismatch)
SUBJMAP_DEFINE_ERROR(MissingManifestField)

// evaluation and statistics
SUBJMAP_DEFINE_ERROR(DegenerateFold)
SUBJMAP_DEFINE_ERROR(DegenerateGeometry)
SUBJMAP_DEFINE_ERROR(InvalidP)

// checkpoints and configuration
SUBJMAP_DEFINE_ERROR(ChecksumMismatch)
SUBJMAP_DEFINE_ERROR(VersionUnsupported)
SUBJMAP_DEFINE_ERROR(ConfigError)

#undef SUBJMAP_DEFINE_ERROR

}  // namespace subjmap
