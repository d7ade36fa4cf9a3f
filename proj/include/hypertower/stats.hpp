#pragma once

// Return-time statistics of the tower, the return-frequency relation
// v_N / N = (R_{v_N} / v_N)^{-1}, and SRB averages through the tower.

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "hypertower/tower.hpp"

namespace hypertower {

struct ReturnStats {
    int T = 1, horizon = 0;
    std::size_t n = 0;                   // Gamma samples
    std::size_t tail_bucket = 0;         // no return within the horizon
    std::map<int, std::size_t> histogram;
    std::map<int, double> tail;          // fraction with tau > n, n = 0, T, ..., horizon
    double fitted_rate = 0;              // slope of log tail per unit time; -inf if the tail vanishes
    int window_lo = 0, window_hi = 0;
    double mean_tau = 0;                 // over returns within the horizon
    double gamma_measure = 0;            // Lebesgue measure of the Gamma samples
    [[nodiscard]] double kac_product() const { return mean_tau * gamma_measure; }
};

[[nodiscard]] inline ReturnStats return_stats(const RectanglePoints& rect, const TowerPartition& P) {
    if (P.assigned < 100)
        throw PreconditionError("return statistics need at least 100 assigned samples, got " +
                                std::to_string(P.assigned));
    ReturnStats st;
    st.T = rect.T;
    st.horizon = rect.horizon;
    st.gamma_measure = rect.gamma_measure();
    double sum = 0;
    for (const TowerSample& s : rect.samples) {
        if (!s.in_gamma) continue;
        ++st.n;
        if (s.tau > 0) {
            ++st.histogram[s.tau];
            sum += s.tau;
        } else {
            ++st.tail_bucket;
        }
    }
    st.mean_tau = st.n > st.tail_bucket ? sum / static_cast<double>(st.n - st.tail_bucket) : 0;
    std::size_t above = st.n;
    auto it = st.histogram.begin();
    for (int m = 0; m <= st.horizon; m += st.T) {
        for (; it != st.histogram.end() && it->first <= m; ++it) above -= it->second;
        st.tail[m] = static_cast<double>(above) / static_cast<double>(st.n);
    }
    st.window_lo = 5 * st.T;
    st.window_hi = st.horizon / 2;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    bool vanished = true;
    for (const auto& [t, frac] : st.tail) {
        if (t < st.window_lo || t > st.window_hi) continue;
        if (frac <= 0) continue;
        vanished = false;
        const double y = std::log(frac);
        sx += t;
        sy += y;
        sxx += static_cast<double>(t) * t;
        sxy += t * y;
        ++m;
    }
    if (vanished) {
        st.fitted_rate = -std::numeric_limits<double>::infinity();
    } else if (m < 2) {
        throw ConvergenceError("tail fit window [" + std::to_string(st.window_lo) + ", " +
                               std::to_string(st.window_hi) + "] holds fewer than two nonzero points");
    } else {
        st.fitted_rate = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    }
    return st;
}

struct PinheiroResult {
    long N = 0;
    long v = 0;      // T-returns to the domain up to time N
    long R = 0;      // sum of the first v induced return times
    double lhs = 0;  // v / N
    double rhs = std::numeric_limits<double>::quiet_NaN();  // R / v, undefined when v = 0
    [[nodiscard]] bool defined() const { return v > 0; }
    [[nodiscard]] double product() const { return lhs * rhs; }
};

// v_N counts i in (0, N], i a multiple of T, with f^i(x) in the domain, on
// the torus orbit; R_{v_N} sums induced return times along the lifted orbit.
[[nodiscard]] inline PinheiroResult pinheiro_check(const SurfaceMap& f, const NiceDomain& d, const Vec2& x, long N) {
    if (N < 10000) throw PreconditionError("pinheiro_check needs N >= 10^4");
    if (!d.inside_lift(x)) throw PreconditionError("pinheiro_check needs a point of the domain lift");
    PinheiroResult r;
    r.N = N;
    TorusPoint p(x);
    for (long i = 1; i <= N; ++i) {
        p = f.forward(p);
        if (i % d.T == 0 && d.lift_in(p)) ++r.v;
    }
    r.lhs = static_cast<double>(r.v) / static_cast<double>(N);
    if (r.v == 0) return r;
    Vec2 y = x;
    for (long j = 0; j < r.v; ++j) {
        const auto fr = first_return(f, d, y, static_cast<int>(N));
        if (!fr) throw ConvergenceError("induced orbit has no return within N");
        r.R += fr->tau;
        y = fr->image;
    }
    r.rhs = static_cast<double>(r.R) / static_cast<double>(r.v);
    return r;
}

struct Observable {
    std::string name;
    std::function<double(const TorusPoint&)> fn;
};

[[nodiscard]] inline std::vector<std::string> builtin_observable_names() {
    return {"one", "cos1", "cos2", "x1x2"};
}

// x1x2 is the smooth periodic stand-in sin^2(pi x1) sin^2(pi x2).
[[nodiscard]] inline Observable builtin_observable(const std::string& name) {
    using std::numbers::pi;
    if (name == "one") return {name, [](const TorusPoint&) { return 1.0; }};
    if (name == "cos1") return {name, [](const TorusPoint& p) { return std::cos(2 * pi * p.x1); }};
    if (name == "cos2") return {name, [](const TorusPoint& p) { return std::cos(2 * pi * p.x2); }};
    if (name == "x1x2")
        return {name, [](const TorusPoint& p) {
                    const double a = std::sin(pi * p.x1), b = std::sin(pi * p.x2);
                    return a * a * b * b;
                }};
    throw PreconditionError("unknown observable '" + name + "' (expected one, cos1, cos2 or x1x2)");
}

struct SrbOptions {
    std::size_t tower_samples = 200000;  // cap on assigned samples used
    int burn_in = 8;                     // induced steps before summing
    std::size_t birkhoff_samples = 400;
    long birkhoff_iterations = 20000;
    std::uint64_t seed = 1;
};

struct MeasureEstimate {
    std::string observable;
    double tower_estimate = 0, tower_se = 0;
    double birkhoff_estimate = 0, birkhoff_se = 0;
    std::size_t n_samples = 0;  // tower samples after burn-in
    long n_iterations = 0;
    double unassigned_fraction = 0;
    bool low_confidence = false;
    [[nodiscard]] double combined_se() const { return tower_se + birkhoff_se; }
};

// Tower side: sum_{i < tau} phi(f^i y) over y = F^burn_in(x), divided by
// sum tau, x running over the assigned grid samples; the standard error is
// the ratio-estimator one. Birkhoff side: seeded uniform starts.
[[nodiscard]] inline MeasureEstimate srb_estimate(const SurfaceMap& f, const NiceDomain& d,
                                                  const RectanglePoints& rect, const TowerPartition& P,
                                                  const Observable& phi, const SrbOptions& opt = {}) {
    MeasureEstimate est;
    est.observable = phi.name;
    est.n_iterations = opt.birkhoff_iterations;
    std::vector<std::size_t> assigned;
    for (std::size_t si = 0; si < rect.samples.size(); ++si)
        if (P.element_of[si] >= 0) assigned.push_back(si);
    const std::size_t gamma = P.gamma_samples;
    est.unassigned_fraction = gamma ? 1.0 - static_cast<double>(assigned.size()) / static_cast<double>(gamma) : 1.0;
    est.low_confidence = est.unassigned_fraction > 0.2;
    if (assigned.empty()) throw PreconditionError("srb_estimate needs assigned samples");

    const auto pick = detail::spread(assigned.size(), opt.tower_samples);
    struct AB {
        double a = 0, b = 0;
        bool ok = false;
    };
    const int reach = 10 * rect.horizon;
    const auto ab = parallel_map<AB>(pick.size(), [&](std::size_t i) {
        AB out;
        Vec2 y = rect.samples[assigned[pick[i]]].z;
        for (int k = 0; k < opt.burn_in; ++k) {
            const auto fr = first_return(f, d, y, reach);
            if (!fr) return out;
            y = fr->image;
        }
        const auto fr = first_return(f, d, y, reach);
        if (!fr) return out;
        TorusPoint p(y);
        for (int t = 0; t < fr->tau; ++t) {
            out.a += phi.fn(p);
            p = f.forward(p);
        }
        out.b = fr->tau;
        out.ok = true;
        return out;
    });
    double sa = 0, sb = 0;
    std::size_t n = 0;
    for (const auto& v : ab)
        if (v.ok) {
            sa += v.a;
            sb += v.b;
            ++n;
        }
    if (n < 2) throw ConvergenceError("no tower sample survived the burn-in");
    est.n_samples = n;
    est.tower_estimate = sa / sb;
    {
        const double r = est.tower_estimate, bbar = sb / static_cast<double>(n);
        double ss = 0;
        for (const auto& v : ab)
            if (v.ok) ss += (v.a - r * v.b) * (v.a - r * v.b);
        est.tower_se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n)) / bbar;
    }

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TorusPoint> starts;
    for (std::size_t i = 0; i < opt.birkhoff_samples; ++i) {
        const double x1 = u(rng);
        starts.emplace_back(x1, u(rng));
    }
    const auto avg = parallel_map<double>(starts.size(), [&](std::size_t i) {
        TorusPoint p = starts[i];
        double s = 0;
        for (long k = 0; k < opt.birkhoff_iterations; ++k) {
            s += phi.fn(p);
            p = f.forward(p);
        }
        return s / static_cast<double>(opt.birkhoff_iterations);
    });
    double m = 0;
    for (double v : avg) m += v;
    m /= static_cast<double>(avg.size());
    double var = 0;
    for (double v : avg) var += (v - m) * (v - m);
    est.birkhoff_estimate = m;
    est.birkhoff_se = avg.size() > 1
                          ? std::sqrt(var / static_cast<double>(avg.size() - 1) / static_cast<double>(avg.size()))
                          : 0;
    return est;
}

inline void write_tail_csv(std::ostream& os, const ReturnStats& st) {
    os << std::setprecision(17) << "n,fraction,log_fraction\n";
    for (const auto& [n, frac] : st.tail) os << n << ',' << frac << ',' << (frac > 0 ? std::log(frac) : -INFINITY) << '\n';
}

inline void write_histogram_csv(std::ostream& os, const ReturnStats& st) {
    os << std::setprecision(17) << "tau,count\n";
    for (const auto& [t, c] : st.histogram) os << t << ',' << c << '\n';
}

inline void write_estimate_csv(std::ostream& os, const std::vector<MeasureEstimate>& es) {
    os << std::setprecision(17) << "observable,tower,tower_se,birkhoff,birkhoff_se\n";
    for (const auto& e : es)
        os << e.observable << ',' << e.tower_estimate << ',' << e.tower_se << ',' << e.birkhoff_estimate << ','
           << e.birkhoff_se << '\n';
}

}  // namespace hypertower
