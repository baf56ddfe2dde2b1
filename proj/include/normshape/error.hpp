#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace normshape {

enum class ErrorKind {
  MalformedHeader,
  SizeMismatch,
  NonBinaryVoxel,
  IoFailure,
  InvalidSpacing,
  InvalidArgument,
  EmptyMask,
  DoesNotFit,
  DimMismatch,
  UniformMask,
  DegenerateShape,
  VolumeMatchFailed,
  GenerationExhausted,
  ShapeMismatch,
  StepOverflow,
  NonFiniteLoss,
  EmptyCohort,
  LengthMismatch,
  SingleClass,
  RankDeficient,
  ResampleExhausted,
  InvalidK,
  TooFewSamples,
  EmptyGroup,
};

std::string_view to_string(ErrorKind kind);

/// All library failures are reported through this exception; `kind()` is the
/// machine-readable category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace normshape
