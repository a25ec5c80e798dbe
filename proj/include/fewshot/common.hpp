#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// Data / file format problems (CLI exit code 3).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failures: degenerate inputs, non-finite values (CLI exit code 4).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller misuse of an API or CLI (exit code 2).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Whether values have been divided by the global scaler.
enum class Space { scaled, physical };

inline const char* space_name(Space s) {
  return s == Space::scaled ? "scaled" : "physical";
}

inline Space space_from_name(const std::string& s) {
  if (s == "scaled") return Space::scaled;
  if (s == "physical") return Space::physical;
  throw FormatError("unknown space tag: " + s);
}

}  // namespace fewshot
