#pragma once

#include <stdexcept>
#include <string>

namespace dfl {

// All library errors derive from Error. The exit code groups map onto the
// CLI contract: 1 usage, 2 data/parse, 3 numeric failure.
class Error : public std::runtime_error {
 public:
  Error(const std::string& msg, int exit_code)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

#define DFL_DEFINE_ERROR(Name, code)                  \
  class Name : public Error {                         \
   public:                                            \
    explicit Name(const std::string& msg)             \
        : Error(std::string(#Name ": ") + msg, code) {} \
  };

// numeric / logic
DFL_DEFINE_ERROR(ShapeMismatch, 3)
DFL_DEFINE_ERROR(NotScalarLoss, 3)
DFL_DEFINE_ERROR(NonFiniteValue, 3)
DFL_DEFINE_ERROR(DegenerateBox, 3)
DFL_DEFINE_ERROR(InvalidGrid, 3)
DFL_DEFINE_ERROR(InvalidThresholds, 3)
DFL_DEFINE_ERROR(MissingRegressionTarget, 3)
DFL_DEFINE_ERROR(NoNegatives, 3)
DFL_DEFINE_ERROR(DegenerateRoi, 3)

// data / parse / io
DFL_DEFINE_ERROR(ParseError, 2)
DFL_DEFINE_ERROR(MissingImage, 2)
DFL_DEFINE_ERROR(TileLargerThanImage, 2)
DFL_DEFINE_ERROR(DegenerateQuadrilateral, 2)
DFL_DEFINE_ERROR(PlacementFailure, 2)
DFL_DEFINE_ERROR(UnsupportedFormat, 2)
DFL_DEFINE_ERROR(TruncatedFile, 2)
DFL_DEFINE_ERROR(IoFailure, 2)

#undef DFL_DEFINE_ERROR

}  // namespace dfl
