#pragma once

// Empirical Hoelder moduli of x -> E^s_x, E^u_x (exponent beta) and of
// x -> s(x), u(x) (exponent zeta) over random pairs of points of level <= l.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <tuple>
#include <utility>
#include <random>
#include <vector>

#include "hypertower/charts.hpp"
#include "hypertower/parallel.hpp"
#include "hypertower/regularity.hpp"

namespace hypertower {

struct HoelderReport {
    double exponent = 0;
    long level = 0;
    int pairs = 0;         // pairs actually used
    int excluded = 0;      // pairs at distance 0
    int rejected = 0;      // points drawn outside Lambda_l (or without a stable C)
    double max_ratio = 0;  // max of the two below
    double max_ratio_s = 0;
    double max_ratio_u = 0;
    double ceiling = 0;
    [[nodiscard]] bool bounded() const { return std::isfinite(max_ratio) && max_ratio <= ceiling; }
};

struct HoelderSample {
    TorusPoint x;
    Vec2 e_s, e_u;
    double s = 0, u = 0;
};

namespace detail {

// Points of level <= l drawn uniformly; draws are deterministic in the seed
// and the first n points do not depend on how many are requested.
[[nodiscard]] inline std::vector<HoelderSample> level_sample(const SurfaceMap& f, const HyperbolicityParams& params,
                                                             const DerivedConstants& k, long level, int n,
                                                             std::uint64_t seed, bool with_su, int& rejected) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<HoelderSample> out;
    rejected = 0;
    while (static_cast<int>(out.size()) < n) {
        // Draw a batch, evaluate in parallel, keep accepted points in draw order.
        const std::size_t batch = static_cast<std::size_t>(std::max(64, n - static_cast<int>(out.size())));
        std::vector<TorusPoint> cand(batch);
        for (auto& c : cand) {
            const double a = U(rng);
            c = TorusPoint(a, U(rng));
        }
        const auto got = parallel_map<std::optional<HoelderSample>>(batch, [&](std::size_t i) {
            std::optional<HoelderSample> r;
            try {
                const Splitting sp = estimate_splitting(f, cand[i], 30);
                const RegularityData reg = regularity_data(f, sp, params);
                if (reg.level > level) return r;
                HoelderSample h{cand[i], sp.e_s, sp.e_u, 0, 0};
                if (with_su) std::tie(h.s, h.u) = lyapunov_norms(f, sp, reg.C, k);
                r = h;
            } catch (const ConvergenceError&) {
            }
            return r;
        });
        for (const auto& g : got) {
            if (static_cast<int>(out.size()) == n) break;
            if (g)
                out.push_back(*g);
            else
                ++rejected;
        }
    }
    return out;
}

template <class Diff>
HoelderReport pair_ratios(const std::vector<HoelderSample>& pts, double exponent, long level, double ceiling,
                          Diff diff) {
    HoelderReport r;
    r.exponent = exponent;
    r.level = level;
    r.ceiling = ceiling;
    for (std::size_t i = 0; i + 1 < pts.size(); i += 2) {
        const double d = distance(pts[i].x, pts[i + 1].x);
        if (!(d > 0)) {
            ++r.excluded;
            continue;
        }
        const auto [ds, du] = diff(pts[i], pts[i + 1]);
        const double w = std::pow(d, exponent);
        r.max_ratio_s = std::max(r.max_ratio_s, ds / w);
        r.max_ratio_u = std::max(r.max_ratio_u, du / w);
        ++r.pairs;
    }
    r.max_ratio = std::max(r.max_ratio_s, r.max_ratio_u);
    return r;
}

}  // namespace detail

// Consecutive sample points (2i, 2i+1) form the pairs.
[[nodiscard]] inline HoelderReport splitting_hoelder(const std::vector<HoelderSample>& pts, double beta, long level,
                                                     double ceiling) {
    return detail::pair_ratios(pts, beta, level, ceiling, [](const HoelderSample& a, const HoelderSample& b) {
        return std::pair{line_angle(a.e_s, b.e_s), line_angle(a.e_u, b.e_u)};
    });
}

[[nodiscard]] inline HoelderReport su_hoelder(const std::vector<HoelderSample>& pts, double zeta, long level,
                                              double ceiling) {
    return detail::pair_ratios(pts, zeta, level, ceiling, [](const HoelderSample& a, const HoelderSample& b) {
        return std::pair{std::abs(a.s - b.s), std::abs(a.u - b.u)};
    });
}

[[nodiscard]] inline HoelderReport verify_splitting_hoelder(const SurfaceMap& f, const HyperbolicityParams& params,
                                                            const DerivedConstants& k, long level, int n_pairs,
                                                            std::uint64_t seed = 11, double ceiling = 1e3) {
    int rejected = 0;
    const auto pts = detail::level_sample(f, params, k, level, 2 * n_pairs, seed, false, rejected);
    HoelderReport r = splitting_hoelder(pts, k.beta, level, ceiling);
    r.rejected = rejected;
    return r;
}

[[nodiscard]] inline HoelderReport verify_su_hoelder(const SurfaceMap& f, const HyperbolicityParams& params,
                                                     const DerivedConstants& k, long level, int n_pairs,
                                                     std::uint64_t seed = 11, double ceiling = 1e3) {
    int rejected = 0;
    const auto pts = detail::level_sample(f, params, k, level, 2 * n_pairs, seed, true, rejected);
    HoelderReport r = su_hoelder(pts, k.zeta, level, ceiling);
    r.rejected = rejected;
    return r;
}

}  // namespace hypertower
