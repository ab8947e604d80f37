#pragma once

#include <stdexcept>
#include <string>

namespace fdiff {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidShape : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct NumericalFailure : Error { using Error::Error; };
struct DegenerateBatch : Error { using Error::Error; };

struct InvalidSchedule : Error { using Error::Error; };
struct InvalidTimestep : Error { using Error::Error; };
struct InvalidPlan : Error { using Error::Error; };

struct InvalidReduction : Error { using Error::Error; };
struct EmptyTrajectory : Error { using Error::Error; };

struct InvalidLabel : Error { using Error::Error; };
struct EmptyMask : Error { using Error::Error; };

struct InvalidConfig : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct CorruptFile : Error { using Error::Error; };
struct InvalidSplit : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

} // namespace fdiff
