#include "milsurv/error.hpp"

namespace milsurv {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::empty_bag: return "empty_bag";
    case ErrorKind::contract: return "contract";
    case ErrorKind::corrupt_file: return "corrupt_file";
    case ErrorKind::registry: return "registry";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::degenerate_cohort: return "degenerate_cohort";
    case ErrorKind::undefined_metric: return "undefined_metric";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

bool is_validation_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension:
    case ErrorKind::configuration:
    case ErrorKind::registry:
    case ErrorKind::alignment:
    case ErrorKind::ingestion:
    case ErrorKind::degenerate_cohort:
    case ErrorKind::contract:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace milsurv
