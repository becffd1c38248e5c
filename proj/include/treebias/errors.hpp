#pragma once

#include <stdexcept>
#include <string>

namespace treebias {

// Base class for all library errors. Subclasses carry no extra state;
// the message holds the offending word/symbol/line where applicable.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// lexicon
struct DuplicatePhoneme : Error { using Error::Error; };
struct EmptyInventory : Error { using Error::Error; };
struct UnknownPhoneme : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct MissingPronunciation : Error { using Error::Error; };

// g2p alignment
struct UnalignableEntry : Error { using Error::Error; };
struct NumericalError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct NotColumnStochastic : Error { using Error::Error; };
struct InvalidSegmentation : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };

// tokenizer
struct UnknownCharacter : Error { using Error::Error; };
struct MalformedSequence : Error { using Error::Error; };

// encoder / head
struct InvariantBreach : Error { using Error::Error; };
struct MissingAlignment : Error { using Error::Error; };
struct DuplicateActivePiece : Error { using Error::Error; };
struct NotNormalized : Error { using Error::Error; };
struct InfiniteLoss : Error { using Error::Error; };

// simulator
struct InvalidConfusion : Error { using Error::Error; };

// file I/O
struct IoError : Error { using Error::Error; };

}  // namespace treebias
