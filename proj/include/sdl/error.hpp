#pragma once

#include <stdexcept>
#include <string>

namespace sdl {

enum class Err {
  ShapeMismatch,
  InvalidAxis,
  NonScalarLoss,
  TapeNotRecording,
  NonFiniteEvaluation,
  NonFiniteValue,
  NonFiniteLoss,
  IndivisibleDimensions,
  ZeroNormVector,
  ZeroNormAtom,
  OutOfRangeMu,
  UnknownClass,
  GateClosed,
  InvalidDims,
  InvalidEpoch,
  InvalidClass,
  IndexOutOfRange,
  NoPositives,
  DictionaryCollapse,
  InvalidConfig,
  IoError,
  CheckpointCorrupt,
};

const char* err_name(Err code);

// All library failures surface as SdlError; the CLI maps codes to exit codes.
class SdlError : public std::runtime_error {
 public:
  SdlError(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw SdlError(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace sdl
