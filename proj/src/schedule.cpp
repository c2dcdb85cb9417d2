#include "xmod/schedule.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

#include "xmod/text.hpp"

namespace xmod {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void check_time(double t) {
    if (!std::isfinite(t)) throw std::invalid_argument("diffusion time must be finite");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("diffusion time " + format_double(t) + " outside [0, 1]");
}

double cosine_log_snr(double t) {
    if (t <= 0.0) return std::numeric_limits<double>::infinity();
    if (t >= 1.0) return -std::numeric_limits<double>::infinity();
    // Around the midpoint use tan(pi/4 + a) = (1 + tan a) / (1 - tan a), which makes lambda(1/2) = 0
    // exactly; elsewhere take the tangent of the smaller angle so lambda(1 - t) = -lambda(t).
    const double u = t - 0.5;
    if (std::abs(u) <= 0.25) return -4.0 * std::atanh(std::tan(std::numbers::pi * u / 2.0));
    if (t < 0.5) return -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0));
    return 2.0 * std::log(std::tan(std::numbers::pi * (1.0 - t) / 2.0));
}

}  // namespace

AlphaSigma alpha_sigma(double lambda) {
    if (!std::isfinite(lambda)) throw std::invalid_argument("log-SNR must be finite");
    return {std::sqrt(stable_sigmoid(lambda)), std::sqrt(stable_sigmoid(-lambda))};
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, LogSnrClamp clamp) : kind_(kind), clamp_(clamp) {
    if (!(clamp.min < clamp.max) || !std::isfinite(clamp.min) || !std::isfinite(clamp.max)) {
        throw std::invalid_argument("log-SNR clamp requires finite min < max");
    }
}

NoiseSchedule NoiseSchedule::cosine(LogSnrClamp clamp) { return NoiseSchedule(ScheduleKind::Cosine, clamp); }

NoiseSchedule NoiseSchedule::shifted_cosine(double reference_d, LogSnrClamp clamp) {
    if (!(reference_d > 0.0) || !std::isfinite(reference_d)) {
        throw std::invalid_argument("shifted cosine reference resolution must be positive");
    }
    NoiseSchedule s(ScheduleKind::ShiftedCosine, clamp);
    s.reference_d_ = reference_d;
    s.shift_ = 2.0 * std::log(reference_d / 256.0);
    return s;
}

NoiseSchedule NoiseSchedule::sigmoid(double start, double end, double tau, LogSnrClamp clamp) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("sigmoid schedule tau must be positive");
    if (!std::isfinite(start) || !std::isfinite(end) || start == end) {
        throw std::invalid_argument("sigmoid schedule needs finite start != end");
    }
    NoiseSchedule s(ScheduleKind::Sigmoid, clamp);
    s.start_ = start;
    s.end_ = end;
    s.tau_ = tau;
    return s;
}

double NoiseSchedule::log_snr_unclamped(double t) const {
    check_time(t);
    switch (kind_) {
    case ScheduleKind::Cosine:
        return cosine_log_snr(t);
    case ScheduleKind::ShiftedCosine:
        return cosine_log_snr(t) + shift_;
    case ScheduleKind::Sigmoid: {
        // alpha^2(t) = (raw(t) - raw(1)) / (raw(0) - raw(1)), raw(u) = sigmoid(-((e - s) u + s) / tau)
        auto raw = [&](double u) { return stable_sigmoid(-((end_ - start_) * u + start_) / tau_); };
        const double r0 = raw(0.0), r1 = raw(1.0), rt = raw(t);
        const double num = (rt - r1) / (r0 - r1);
        const double den = (r0 - rt) / (r0 - r1);
        if (num <= 0.0) return -std::numeric_limits<double>::infinity();
        if (den <= 0.0) return std::numeric_limits<double>::infinity();
        return std::log(num) - std::log(den);
    }
    }
    throw std::logic_error("unknown schedule kind");
}

double NoiseSchedule::log_snr(double t) const {
    const double raw = log_snr_unclamped(t);
    if (std::isnan(raw)) throw std::domain_error("log-SNR evaluated to NaN");
    return std::clamp(raw, clamp_.min, clamp_.max);
}

AlphaSigma NoiseSchedule::alpha_sigma(double t) const { return xmod::alpha_sigma(log_snr(t)); }

double NoiseSchedule::snr(double t) const { return std::exp(log_snr(t)); }

std::string NoiseSchedule::descriptor() const {
    std::string out;
    switch (kind_) {
    case ScheduleKind::Cosine:
        out = "cosine";
        break;
    case ScheduleKind::ShiftedCosine:
        out = "shifted-cosine:d=" + format_double(reference_d_);
        break;
    case ScheduleKind::Sigmoid:
        out = "sigmoid:s=" + format_double(start_) + ",e=" + format_double(end_) + ",tau=" + format_double(tau_);
        break;
    }
    const LogSnrClamp def{};
    if (clamp_.min != def.min || clamp_.max != def.max) {
        if (clamp_.min != -clamp_.max) throw std::logic_error("asymmetric clamp has no descriptor form");
        out += (kind_ == ScheduleKind::Cosine ? ":" : ",");
        out += "clamp=" + format_double(clamp_.max);
    }
    return out;
}

NoiseSchedule NoiseSchedule::parse(std::string_view descriptor) {
    const auto colon = descriptor.find(':');
    const std::string_view name = descriptor.substr(0, colon);
    std::map<std::string, double> kv;
    if (colon != std::string_view::npos) kv = parse_key_values(descriptor.substr(colon + 1), "schedule descriptor");

    LogSnrClamp clamp{};
    if (auto it = kv.find("clamp"); it != kv.end()) {
        if (!(it->second > 0.0)) throw std::invalid_argument("schedule clamp must be positive");
        clamp = {-it->second, it->second};
        kv.erase(it);
    }
    auto take = [&](const char* key, double def, bool required) {
        auto it = kv.find(key);
        if (it == kv.end()) {
            if (required) throw std::invalid_argument(std::string("schedule descriptor is missing '") + key + "'");
            return def;
        }
        const double v = it->second;
        kv.erase(it);
        return v;
    };
    auto reject_leftovers = [&] {
        if (!kv.empty()) {
            throw std::invalid_argument("unknown schedule parameter '" + kv.begin()->first + "'");
        }
    };

    if (name == "cosine") {
        reject_leftovers();
        return cosine(clamp);
    }
    if (name == "shifted-cosine") {
        const double d = take("d", 0.0, true);
        reject_leftovers();
        return shifted_cosine(d, clamp);
    }
    if (name == "sigmoid") {
        const double s = take("s", 0.0, false);
        const double e = take("e", 3.0, false);
        const double tau = take("tau", 0.9, false);
        reject_leftovers();
        return sigmoid(s, e, tau, clamp);
    }
    throw std::invalid_argument("unknown schedule '" + std::string(name) + "'");
}

}  // namespace xmod
