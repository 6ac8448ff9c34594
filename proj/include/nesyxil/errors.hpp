#pragma once

#include <stdexcept>
#include <string>

namespace nesyxil {

// Base of every error thrown by the library. The CLI maps any of these to a
// nonzero exit code, the service maps them to HTTP status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NESYXIL_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    explicit Name(const std::string& what)  \
        : Error(#Name ": " + what) {}       \
  }

NESYXIL_DEFINE_ERROR(ShapeMismatch);
NESYXIL_DEFINE_ERROR(NonFiniteValue);
NESYXIL_DEFINE_ERROR(NotScalar);
NESYXIL_DEFINE_ERROR(TapeConsumed);
NESYXIL_DEFINE_ERROR(LevelUnsupported);
NESYXIL_DEFINE_ERROR(SceneTooLarge);
NESYXIL_DEFINE_ERROR(GenerationExhausted);
NESYXIL_DEFINE_ERROR(FeedbackMissing);
NESYXIL_DEFINE_ERROR(InvalidFeedback);
NESYXIL_DEFINE_ERROR(FormatError);
NESYXIL_DEFINE_ERROR(NotFound);
NESYXIL_DEFINE_ERROR(Conflict);

#undef NESYXIL_DEFINE_ERROR

}  // namespace nesyxil
