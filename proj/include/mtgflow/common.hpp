#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mtgflow {

inline constexpr int kFormatVersion = 1;

// Error taxonomy. The CLI maps ConfigError/ParseError to exit code 2 and
// NumericError/MetricError to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-fatal conditions (dead channels, empty window batches, merged anomaly
// intervals) are recorded here instead of being thrown.
using Warnings = std::vector<std::string>;

inline void warn(Warnings* sink, std::string msg) {
  if (sink) sink->push_back(std::move(msg));
}

}  // namespace mtgflow
