#pragma once

// Map setups shared by the branch, shadowing and tower suites: constants,
// chart settings and a calibrated delta per builtin map.

#include <cmath>
#include <random>

#include "hypertower/pseudo.hpp"

namespace test_support {

using namespace hypertower;

inline constexpr double kCatChi = 0.9624236501192069;

struct MapSetup {
    MapPtr f;
    HyperbolicityParams params;
    DerivedConstants k;
    ChartSettings cs;
    double delta = 0;
};

inline MapSetup make_setup(MapPtr f, double chi) {
    MapSetup s{std::move(f), {}, {}, {}, 0};
    s.params.chi = chi;
    s.params.lambda = chi / 2;
    s.k = derive_constants(*s.f, s.params);
    s.delta = calibrate_delta(*s.f, s.params, s.k, s.cs, 200).delta;
    return s;
}

inline const MapSetup& cat() {
    static const MapSetup s = make_setup(make_cat_map(), kCatChi);
    return s;
}

inline const MapSetup& perturbed() {
    static const MapSetup s = [] {
        auto f = make_perturbed_cat_map(0.03);
        const double chi = auto_chi(*f);
        return make_setup(f, chi);
    }();
    return s;
}

// Forward orbit with jumps of relative size `rel` of the allowed bound.
inline PseudoOrbit noisy_orbit(const MapSetup& s, const TorusPoint& x, int n, double rel, std::mt19937_64& rng,
                               long start_level = 1) {
    PseudoOrbit po;
    po.delta = s.delta;
    po.lambda = s.k.lambda;
    po.points.push_back(x);
    po.levels.push_back(start_level);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int j = 1; j <= n; ++j) {
        // levels: random walk with steps in {-1, 0, 1}, at least 1
        const long lv = std::max(1L, po.levels.back() + static_cast<long>(std::floor(1.5 * u(rng) + 0.5)));
        const double r = rel * s.delta * std::exp(-s.k.lambda * static_cast<double>(lv)) / std::sqrt(2.0);
        po.points.push_back(TorusPoint(s.f->forward(po.points.back()).vec() + Vec2{r * u(rng), r * u(rng)}));
        po.levels.push_back(lv);
    }
    return po;
}

}  // namespace test_support
