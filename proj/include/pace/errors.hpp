#pragma once

#include <stdexcept>
#include <string>

namespace pace {

// Base of every error this library throws.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// --- dag validation ---
struct ValidationError : Error {
  using Error::Error;
};
struct CycleDetected : ValidationError {
  using ValidationError::ValidationError;
};
struct SelfLoop : ValidationError {
  using ValidationError::ValidationError;
};
struct DuplicateEdge : ValidationError {
  using ValidationError::ValidationError;
};
struct BadLabel : ValidationError {
  using ValidationError::ValidationError;
};

// --- file parsing ---
struct ParseError : Error {
  ParseError(int line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  int line;
};
struct IoError : Error {
  using Error::Error;
};

// --- sequence / mask construction ---
struct TooManyNodes : Error {
  using Error::Error;
};
struct NotATree : Error {
  using Error::Error;
};
struct BadDepths : Error {
  using Error::Error;
};

// --- tensor engine ---
struct ShapeMismatch : Error {
  using Error::Error;
};
struct DimMismatch : Error {
  using Error::Error;
};
struct NonFinite : Error {
  using Error::Error;
};
struct DoubleBackward : Error {
  using Error::Error;
};
struct AllMaskedRow : Error {
  using Error::Error;
};

// --- model / harness ---
struct NoUniqueSink : Error {
  using Error::Error;
};
struct DegenerateTargets : Error {
  using Error::Error;
};
struct GenerationFailed : Error {
  using Error::Error;
};

}  // namespace pace
