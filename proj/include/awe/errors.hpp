#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace awe {

/// Malformed input data (dataset text, flag values out of range).
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;

  static DataError at_line(std::size_t line, const std::string& what) {
    return DataError(what + " at line " + std::to_string(line));
  }
};

/// Artifact files that are malformed or do not belong together
/// (fingerprint mismatches, dimension mismatches).
class ArtifactError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Files that cannot be opened, read or written.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace awe
