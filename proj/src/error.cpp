#include "normshape/error.hpp"

namespace normshape {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::SizeMismatch: return "SizeMismatch";
    case ErrorKind::NonBinaryVoxel: return "NonBinaryVoxel";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::InvalidSpacing: return "InvalidSpacing";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::DoesNotFit: return "DoesNotFit";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::UniformMask: return "UniformMask";
    case ErrorKind::DegenerateShape: return "DegenerateShape";
    case ErrorKind::VolumeMatchFailed: return "VolumeMatchFailed";
    case ErrorKind::GenerationExhausted: return "GenerationExhausted";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::StepOverflow: return "StepOverflow";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::EmptyCohort: return "EmptyCohort";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::ResampleExhausted: return "ResampleExhausted";
    case ErrorKind::InvalidK: return "InvalidK";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::EmptyGroup: return "EmptyGroup";
  }
  return "Unknown";
}

}  // namespace normshape
