#pragma once

#include <stdexcept>
#include <string>

namespace zfcl {

enum class Errc {
  ShapeMismatch,
  InvalidGeometry,
  InvalidArgument,
  NotOnTape,
  NonScalarLoss,
  LabelOutOfRange,
  BatchTooSmall,
  EmptyDataset,
  NonFiniteLoss,
  DuplicateTask,
  UnknownTask,
  BaseHashMismatch,
  BadMagic,
  BadVersion,
  Truncated,
  MissingProbeHash,
  IoError,
  BadConfig,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::ShapeMismatch: return "shape-mismatch";
    case Errc::InvalidGeometry: return "invalid-geometry";
    case Errc::InvalidArgument: return "invalid-argument";
    case Errc::NotOnTape: return "not-on-tape";
    case Errc::NonScalarLoss: return "non-scalar-loss";
    case Errc::LabelOutOfRange: return "label-out-of-range";
    case Errc::BatchTooSmall: return "batch-too-small";
    case Errc::EmptyDataset: return "empty-dataset";
    case Errc::NonFiniteLoss: return "non-finite-loss";
    case Errc::DuplicateTask: return "duplicate-task";
    case Errc::UnknownTask: return "unknown-task";
    case Errc::BaseHashMismatch: return "base-hash-mismatch";
    case Errc::BadMagic: return "bad-magic";
    case Errc::BadVersion: return "bad-version";
    case Errc::Truncated: return "truncated";
    case Errc::MissingProbeHash: return "missing-probe-hash";
    case Errc::IoError: return "io-error";
    case Errc::BadConfig: return "bad-config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace zfcl
