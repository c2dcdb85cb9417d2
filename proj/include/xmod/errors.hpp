#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "xmod/text.hpp"

namespace xmod {

// Non-finite values encountered during a sampling step.
class SamplingError : public std::runtime_error {
  public:
    SamplingError(int step, const std::string& what)
        : std::runtime_error("sampling step " + std::to_string(step) + ": " + what), step_(step) {}
    int step() const { return step_; }

  private:
    int step_;
};

// Training loss evaluated to NaN/inf; carries the diffusion time of the offending sample.
class NonFiniteLossError : public std::runtime_error {
  public:
    explicit NonFiniteLossError(double t)
        : std::runtime_error("non-finite training loss at t=" + format_double(t)), t_(t) {}
    double t() const { return t_; }

  private:
    double t_;
};

// A sampler failure re-raised with the transverse slice it happened on.
class SliceError : public std::runtime_error {
  public:
    SliceError(std::int64_t slice, const std::string& what)
        : std::runtime_error("slice " + std::to_string(slice) + ": " + what), slice_(slice) {}
    std::int64_t slice() const { return slice_; }

  private:
    std::int64_t slice_;
};

}  // namespace xmod
