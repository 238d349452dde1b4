#ifndef TAGBERT_ERROR_HPP
#define TAGBERT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace tagbert {

/// Malformed or inconsistent input data (dataset lines, graph files,
/// checkpoints, configs that reference missing things).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value showed up where the math requires finite reals.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's preconditions (shapes, ranges).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace tagbert

#endif  // TAGBERT_ERROR_HPP
