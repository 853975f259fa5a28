#pragma once

#include <stdexcept>
#include <string>

namespace qc {

/// Base of every engine error. `code()` is the stable machine-readable name
/// surfaced in API error bodies and CLI output.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

#define QC_DEFINE_ERROR(Name)                                                  \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message) : Error(#Name, message) {}   \
    };

// rulebase
QC_DEFINE_ERROR(JsonError)
QC_DEFINE_ERROR(SchemaError)
QC_DEFINE_ERROR(DuplicateIdError)

// waterfall
QC_DEFINE_ERROR(UnknownTemplateError)
QC_DEFINE_ERROR(TemplateError)

// modelclient
QC_DEFINE_ERROR(BackendUnavailable)
QC_DEFINE_ERROR(SchemaViolation)
QC_DEFINE_ERROR(Timeout)
QC_DEFINE_ERROR(UnknownModelError)
QC_DEFINE_ERROR(MisconfiguredPolicy)

// hitl
QC_DEFINE_ERROR(StorageError)
QC_DEFINE_ERROR(NotFound)
QC_DEFINE_ERROR(AlreadyDecided)
QC_DEFINE_ERROR(EmptyJustification)
QC_DEFINE_ERROR(UnknownRule)

// evalharness
QC_DEFINE_ERROR(MissingSample)
QC_DEFINE_ERROR(DuplicateSample)
QC_DEFINE_ERROR(EmptyCounts)
QC_DEFINE_ERROR(LengthMismatch)
QC_DEFINE_ERROR(OutOfRangeScore)
QC_DEFINE_ERROR(DegenerateMarginals)
QC_DEFINE_ERROR(ZeroVariance)
QC_DEFINE_ERROR(UnknownClass)
QC_DEFINE_ERROR(EmptySubset)

// service
QC_DEFINE_ERROR(ConfigError)

#undef QC_DEFINE_ERROR

} // namespace qc
