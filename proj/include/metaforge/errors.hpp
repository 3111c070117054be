#pragma once

#include <stdexcept>
#include <string>

namespace metaforge {

// Every library failure carries a category so the CLI can map it to an exit
// code and the `error[<category>]:` prefix.
enum class ErrorCategory { validation, bounds, shape, numeric, io };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::bounds: return "bounds";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error(ErrorCategory::validation, w) {}
};
struct BoundsError : Error {
  explicit BoundsError(const std::string& w) : Error(ErrorCategory::bounds, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCategory::shape, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::io, w) {}
};

}  // namespace metaforge
