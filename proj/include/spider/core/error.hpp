#pragma once

#include <stdexcept>
#include <string>

namespace spider {

// Base of every error thrown by the library. Callers that only need a
// diagnostic can catch this; the subclasses let tests and the CLI tell the
// failure classes apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SPIDER_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

SPIDER_DEFINE_ERROR(IndexError);
SPIDER_DEFINE_ERROR(InvalidArgument);
SPIDER_DEFINE_ERROR(ShapeError);
SPIDER_DEFINE_ERROR(NumericError);
SPIDER_DEFINE_ERROR(DataError);
SPIDER_DEFINE_ERROR(CapacityError);
SPIDER_DEFINE_ERROR(VocabularyError);
SPIDER_DEFINE_ERROR(ContractViolation);
SPIDER_DEFINE_ERROR(SamplingError);
SPIDER_DEFINE_ERROR(ConfigError);
SPIDER_DEFINE_ERROR(VersionError);
SPIDER_DEFINE_ERROR(IoError);

#undef SPIDER_DEFINE_ERROR

}  // namespace spider
