#ifndef EBLMM_ERROR_HPP
#define EBLMM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace eblmm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: dimension mismatches, empty levels, bad config values.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what, std::string subject = {})
        : Error(what), subject_(std::move(subject)) {}

    /// Name of the offending matrix, column or key, when there is one.
    const std::string& subject() const noexcept { return subject_; }

private:
    std::string subject_;
};

/// Linear-algebra failure (non-PD matrix after the jitter retry, singular systems).
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace eblmm

#endif // EBLMM_ERROR_HPP
