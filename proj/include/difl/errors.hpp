#pragma once

#include <stdexcept>
#include <string>

namespace difl {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map families of failures onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define DIFL_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                   \
    public:                                                       \
        explicit Name(const std::string& what) : Error(what) {}   \
    }

DIFL_DEFINE_ERROR(KeyNotFound);
DIFL_DEFINE_ERROR(ShapeError);
DIFL_DEFINE_ERROR(ConfigError);
DIFL_DEFINE_ERROR(RangeError);
DIFL_DEFINE_ERROR(IoError);
DIFL_DEFINE_ERROR(ManifestError);
DIFL_DEFINE_ERROR(CheckpointError);
DIFL_DEFINE_ERROR(TrainingDiverged);
DIFL_DEFINE_ERROR(IndexError);
DIFL_DEFINE_ERROR(FormatError);
DIFL_DEFINE_ERROR(DegenerateVector);
DIFL_DEFINE_ERROR(DegenerateRotation);

#undef DIFL_DEFINE_ERROR

}  // namespace difl
