#pragma once

#include <stdexcept>
#include <string>

namespace denseclip {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Class label or token id outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Token id not present in the text encoder's vocabulary.
struct VocabularyError : IndexError {
  using IndexError::IndexError;
};

// Malformed input data (non-binary targets, degenerate boxes, ...).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model or task configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An API was called in a state where its precondition cannot hold.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace denseclip
