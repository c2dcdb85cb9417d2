#pragma once

#include <string>
#include <string_view>

namespace xmod {

enum class ScheduleKind { Cosine, ShiftedCosine, Sigmoid };

struct LogSnrClamp {
    double min = -20.0;
    double max = 20.0;
};

struct AlphaSigma {
    double alpha;
    double sigma;
};

// alpha = sqrt(sigmoid(lambda)), sigma = sqrt(sigmoid(-lambda)).
AlphaSigma alpha_sigma(double lambda);

// Continuous-time variance-preserving noise schedule, expressed through its log-SNR.
// Immutable value object.
class NoiseSchedule {
  public:
    static NoiseSchedule cosine(LogSnrClamp clamp = {});
    // Resolution shift relative to a 256x256 base: lambda += 2 log(d / 256).
    static NoiseSchedule shifted_cosine(double reference_d, LogSnrClamp clamp = {});
    static NoiseSchedule sigmoid(double start = 0.0, double end = 3.0, double tau = 0.9, LogSnrClamp clamp = {});

    // Accepts `cosine`, `shifted-cosine:d=<int>`, `sigmoid:s=<f>,e=<f>,tau=<f>`; every kind also takes
    // an optional `clamp=<f>` key setting a symmetric log-SNR clamp.
    static NoiseSchedule parse(std::string_view descriptor);
    std::string descriptor() const;

    ScheduleKind kind() const { return kind_; }
    LogSnrClamp clamp() const { return clamp_; }
    double reference_d() const { return reference_d_; }
    double sigmoid_start() const { return start_; }
    double sigmoid_end() const { return end_; }
    double sigmoid_tau() const { return tau_; }

    // log-SNR before clamping; may be +-inf at the endpoints.
    double log_snr_unclamped(double t) const;
    double log_snr(double t) const;
    AlphaSigma alpha_sigma(double t) const;
    double snr(double t) const;

  private:
    NoiseSchedule(ScheduleKind kind, LogSnrClamp clamp);

    ScheduleKind kind_;
    LogSnrClamp clamp_;
    double reference_d_ = 256.0;
    double shift_ = 0.0;
    double start_ = 0.0;
    double end_ = 3.0;
    double tau_ = 0.9;
};

}  // namespace xmod
