#pragma once

// Shared helpers for the test suites: deterministic random draws.

#include <cstdint>
#include <random>

#include "hypertower/dynamics.hpp"

namespace test_support {

inline double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline hypertower::TorusPoint random_point(std::mt19937_64& rng) {
    const double a = uniform(rng);
    return {a, uniform(rng)};
}

}  // namespace test_support
