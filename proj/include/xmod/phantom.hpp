#pragma once

// Paired synthetic slices: a vessel-like source image and a target rendered from the same geometry.

#include <cstdint>
#include <string>
#include <string_view>

#include "xmod/volume.hpp"

namespace xmod::phantom {

struct PhantomSpec {
    std::int64_t count = 100;
    std::int64_t size = 64;
    std::uint64_t seed = 0;
    int blob_min = 3;
    int blob_max = 6;
    int tube_min = 2;
    int tube_max = 4;
    double noise_sigma = 0.03;

    void validate() const;
    // `count=..,size=..,seed=..,blob_min=..,blob_max=..,tube_min=..,tube_max=..,noise=..`, any subset.
    static PhantomSpec parse(std::string_view descriptor);
    std::string descriptor() const;
};

// Both volumes are (count, size, size) and normalized to [-1, 1]. The target carries the CT window so
// it unscales to [-50, 350]. Slice i depends only on (seed, i).
struct PhantomPairs {
    volume::Volume source;
    volume::Volume target;
};

PhantomPairs gen_phantom_pairs(const PhantomSpec& spec);

// The fixed monotone intensity map from source tissue to target tissue.
double target_intensity(double source_value);

}  // namespace xmod::phantom
