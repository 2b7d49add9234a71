#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace noisemap {

enum class ErrorKind {
  Argument,
  Format,
  Corruption,
  Unsupported,
  Validation,
  Io,
  Shape,
  Alignment,
  DegenerateCorpus,
  Config,
  Incomplete,
  EmptyEvaluation,
  Domain,
  EmptyBatch,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Argument: return "argument";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Io: return "io";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::DegenerateCorpus: return "degenerate_corpus";
    case ErrorKind::Config: return "config";
    case ErrorKind::Incomplete: return "incomplete";
    case ErrorKind::EmptyEvaluation: return "empty_evaluation";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::EmptyBatch: return "empty_batch";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind and,
/// when a file is involved, the offending path.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string path = {})
      : std::runtime_error(message), kind_(kind), path_(std::move(path)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& path() const noexcept { return path_; }

 private:
  ErrorKind kind_;
  std::string path_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace noisemap
