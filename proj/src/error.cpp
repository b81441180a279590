#include "sdl/error.hpp"

namespace sdl {

const char* err_name(Err code) {
  switch (code) {
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::InvalidAxis: return "InvalidAxis";
    case Err::NonScalarLoss: return "NonScalarLoss";
    case Err::TapeNotRecording: return "TapeNotRecording";
    case Err::NonFiniteEvaluation: return "NonFiniteEvaluation";
    case Err::NonFiniteValue: return "NonFiniteValue";
    case Err::NonFiniteLoss: return "NonFiniteLoss";
    case Err::IndivisibleDimensions: return "IndivisibleDimensions";
    case Err::ZeroNormVector: return "ZeroNormVector";
    case Err::ZeroNormAtom: return "ZeroNormAtom";
    case Err::OutOfRangeMu: return "OutOfRangeMu";
    case Err::UnknownClass: return "UnknownClass";
    case Err::GateClosed: return "GateClosed";
    case Err::InvalidDims: return "InvalidDims";
    case Err::InvalidEpoch: return "InvalidEpoch";
    case Err::InvalidClass: return "InvalidClass";
    case Err::IndexOutOfRange: return "IndexOutOfRange";
    case Err::NoPositives: return "NoPositives";
    case Err::DictionaryCollapse: return "DictionaryCollapse";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::IoError: return "IoError";
    case Err::CheckpointCorrupt: return "CheckpointCorrupt";
  }
  return "UnknownError";
}

}  // namespace sdl
