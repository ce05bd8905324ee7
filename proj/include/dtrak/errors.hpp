#pragma once

#include <stdexcept>
#include <string>

namespace dtrak {

/// Invalid argument values (ranges, counts, unknown enum names).
class ParameterError : public std::invalid_argument {
 public:
  explicit ParameterError(const std::string& what) : std::invalid_argument(what) {}
};

/// Dimension mismatch between vectors, matrices or model architectures.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// A linear system that cannot be solved by the requested solver.
class SingularityError : public std::runtime_error {
 public:
  explicit SingularityError(const std::string& what) : std::runtime_error(what) {}
};

/// A training index never (or always) appears in the subset family.
class CoverageError : public std::runtime_error {
 public:
  explicit CoverageError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent persisted data.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dtrak
