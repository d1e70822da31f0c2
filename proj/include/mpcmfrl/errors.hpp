#ifndef MPCMFRL_ERRORS_HPP_
#define MPCMFRL_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace mpcmfrl {

// Bad names, out-of-range parameters, malformed config files.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite inputs, rejected updates, diverged computations.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Operation called on an object that cannot serve it (e.g. empty dataset).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

class UnsupportedError : public std::runtime_error {
 public:
  explicit UnsupportedError(const std::string& what)
      : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mpcmfrl

#endif  // MPCMFRL_ERRORS_HPP_
