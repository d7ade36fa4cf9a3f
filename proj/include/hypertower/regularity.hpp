#pragma once

// Oseledets splittings, the (H3) constants C(x), K(x), regular levels, and
// the global constants that every later estimate is phrased in.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "hypertower/dynamics.hpp"
#include "hypertower/error.hpp"

namespace hypertower {

struct HyperbolicityParams {
    double chi = 0.0;
    double lambda = 0.0;
    double epsilon = 0.008;
    double alpha = 1.0;
    double epsilon0 = 0.01;
};

struct DerivedConstants {
    double chi = 0, lambda = 0, epsilon = 0, alpha = 1, epsilon0 = 0.01;
    double c1 = 0, c2 = 0, c3 = 0;
    double gamma = 0, beta = 0, iota = 0, eta = 0, zeta = 0;
    double eps1 = 0;
    double Q0 = 0.125;
    double Qhat = 0;
    double Q1 = 0;
    double omega = 0;
    long ell_prime = 0;

    // Strong cone width e^{-lambda} omega.
    [[nodiscard]] double strong_omega() const { return std::exp(-lambda) * omega; }
};

// The six inequalities that omega has to satisfy, in order.
[[nodiscard]] inline std::array<bool, 6> omega_conditions(double omega, double lambda, double epsilon,
                                                          double alpha) {
    const double w2 = 1.0 + omega * omega;
    return {
        std::exp(-lambda / 2) * std::exp(3 * epsilon / alpha) + std::exp(-lambda) * omega < std::exp(-lambda / 3),
        std::exp(lambda) / std::sqrt(w2) >= std::exp(2 * lambda / 3),
        (std::exp(-lambda / 24) - omega * std::exp(lambda / 24)) / std::sqrt(w2) > std::exp(-lambda / 4),
        (1 - omega) >= std::sqrt(2 * w2) / 2,
        2 * omega < 1 - std::exp(lambda / 24) * std::exp(-lambda / 3),
        std::exp(-lambda / 24) < 1 / std::sqrt(1 + std::exp(-2 * lambda) * omega * omega),
    };
}

[[nodiscard]] inline bool omega_admissible(double omega, double lambda, double epsilon, double alpha) {
    const auto c = omega_conditions(omega, lambda, epsilon, alpha);
    return std::all_of(c.begin(), c.end(), [](bool b) { return b; });
}

// Largest omega in (0,1) satisfying all six inequalities, to 1e-10.
[[nodiscard]] inline double largest_omega(double lambda, double epsilon, double alpha) {
    if (!omega_admissible(1e-12, lambda, epsilon, alpha))
        throw PreconditionError("no cone width omega > 1e-12 satisfies the cone inequalities; lambda too large "
                                "relative to alpha or epsilon too large");
    double lo = 1e-12, hi = 1.0;
    while (hi - lo > 1e-10) {
        const double mid = 0.5 * (lo + hi);
        (omega_admissible(mid, lambda, epsilon, alpha) ? lo : hi) = mid;
    }
    return lo;
}

// max over a uniform grid of max(log||Df||, log||Df^{-1}||).
[[nodiscard]] inline double max_log_derivative(const SurfaceMap& f, int grid = 256) {
    double best = -1e300;
    const int n = f.is_linear() ? 1 : grid;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const Mat2 d = f.derivative(Vec2{(i + 0.5) / n, (j + 0.5) / n});
            best = std::max({best, std::log(op_norm(d)), std::log(op_norm(d.inverse()))});
        }
    return best;
}

[[nodiscard]] inline double qhat_value(double chi, double lambda) {
    // Q0 (2 sum_{i>=0} e^{2(lambda-chi)i})^{-1/2}, geometric series in closed form.
    const double r = std::exp(2 * (lambda - chi));
    return 0.125 * std::sqrt((1 - r) / 2);
}

[[nodiscard]] inline DerivedConstants derive_constants(const SurfaceMap& f, const HyperbolicityParams& p) {
    if (!(p.chi > 0 && p.lambda > 0 && p.lambda < p.chi))
        throw PreconditionError("need 0 < lambda < chi (got chi=" + std::to_string(p.chi) +
                                ", lambda=" + std::to_string(p.lambda) + ")");
    if (!(p.alpha > 0 && p.alpha <= 1)) throw PreconditionError("alpha must lie in (0, 1]");
    if (!(p.epsilon0 > 0)) throw PreconditionError("epsilon0 must be positive");
    DerivedConstants k;
    k.chi = p.chi;
    k.lambda = p.lambda;
    k.epsilon = p.epsilon;
    k.alpha = p.alpha;
    k.epsilon0 = p.epsilon0;
    const double raw = max_log_derivative(f);
    // The grid maximum is exact for constant derivatives; otherwise add 1%.
    k.c2 = f.is_linear() ? raw : 1.01 * raw;
    k.c1 = -k.c2;
    k.c3 = 1.05 * (1 + p.alpha) * k.c2;
    const double chi = p.chi, lam = p.lambda, a = p.alpha;
    k.gamma = (chi - k.c1) / (2 * chi);
    k.beta = 2 * chi / (k.c3 + chi) * a;
    k.iota = 2 * (chi - lam) / (6 * p.epsilon0 * k.gamma * a + (2 + a * k.beta) * k.c2 + 2 * chi);
    k.eta = 6 * k.gamma * a * k.iota + 2;
    k.zeta = a * k.beta * k.iota;
    k.eps1 = std::min({lam * a / 18, lam * k.beta / (7 * k.gamma), lam * k.zeta / (k.eta - 1),
                       lam / (2 * (1 + 1 / a)), p.epsilon0});
    k.Qhat = qhat_value(chi, lam);
    k.Q1 = std::max(std::exp(k.c2 - lam), std::sqrt(1 + std::exp(2 * (lam + k.c2))));
    // outside (0, eps1) omega is left at 0 so that validate reports eps1
    k.omega = p.epsilon > 0 && p.epsilon < k.eps1 ? largest_omega(lam, p.epsilon, a) : 0.0;
    k.ell_prime = p.epsilon > 0 ? static_cast<long>(std::ceil(std::abs(std::log(k.Qhat)) / (2 * p.epsilon))) : 0;
    return k;
}

// Re-validates the parameter block against the derived constants.
inline void validate(const HyperbolicityParams& p, const DerivedConstants& k) {
    if (!(p.lambda < p.chi)) throw PreconditionError("lambda must be smaller than chi");
    if (!(p.epsilon > 0 && p.epsilon < k.eps1))
        throw PreconditionError("epsilon must lie in (0, eps1) with eps1 = " + std::to_string(k.eps1) +
                                " (got epsilon = " + std::to_string(p.epsilon) + ")");
}

// ---------------------------------------------------------------------------
// Splittings

struct Splitting {
    TorusPoint base;
    Vec2 e_s;
    Vec2 e_u;
    double angle = 0.0;  // angle between e_s and e_u, in (0, pi]
};

[[nodiscard]] inline Vec2 canonical_direction(Vec2 v) {
    v = normalized(v);
    if (v.x < 0 || (v.x == 0 && v.y < 0)) v = -v;
    return v;
}

struct EigenDirections {
    Vec2 e_u, e_s;
    double mu_u = 0, mu_s = 0;
};

[[nodiscard]] inline EigenDirections eigen_directions(const IMat2& a) {
    const LinearAutomorphism lin(a, "linear-part");
    return {lin.unstable_direction(), lin.stable_direction(), lin.unstable_eigenvalue(), lin.stable_eigenvalue()};
}

[[nodiscard]] inline Splitting make_splitting(const TorusPoint& p, const Vec2& es, const Vec2& eu) {
    Splitting s{p, canonical_direction(es), canonical_direction(eu), 0.0};
    s.angle = vector_angle(s.e_s, s.e_u);
    if (line_angle(s.e_s, s.e_u) < 1e-6)
        throw ConvergenceError("stable and unstable directions within 1e-6 rad: no hyperbolicity detected");
    return s;
}

// Power iteration: e_u from the past, e_s from the future. Exact for linear maps.
[[nodiscard]] inline Splitting estimate_splitting(const SurfaceMap& f, const TorusPoint& p, int horizon = 30) {
    if (horizon < 10) throw PreconditionError("splitting horizon must be at least 10");
    const EigenDirections lin = eigen_directions(f.linear_part());
    if (f.is_linear()) return make_splitting(p, lin.e_s, lin.e_u);
    std::vector<TorusPoint> past(horizon + 1), future(horizon + 1);
    past[0] = future[0] = p;
    for (int k = 1; k <= horizon; ++k) {
        past[k] = f.inverse(past[k - 1]);
        future[k] = f.forward(future[k - 1]);
    }
    Vec2 u = lin.e_u, s = lin.e_s;
    for (int k = horizon; k >= 1; --k) {
        u = normalized(f.derivative(past[k]) * u);
        s = normalized(f.derivative(future[k - 1]).inverse() * s);
    }
    return make_splitting(p, s, u);
}

// Splitting and one-step rates along a finite piece of orbit, indices
// k in [-back, fwd]. Stable directions are pulled back from beyond the window
// and unstable ones pushed forward from before it, the numerically stable
// direction for each.
class OrbitFrames {
public:
    OrbitFrames(const SurfaceMap& f, const TorusPoint& x, int back, int fwd, int margin = 40)
        : back_(back), fwd_(fwd), margin_(margin) {
        const int lo = back + margin, hi = fwd + margin;
        const std::size_t n = static_cast<std::size_t>(lo + hi + 1);
        pts_.resize(n);
        es_.resize(n);
        eu_.resize(n);
        srate_.resize(n);
        urate_.resize(n);
        pts_[lo] = x;
        for (int k = 1; k <= hi; ++k) pts_[lo + k] = f.forward(pts_[lo + k - 1]);
        for (int k = 1; k <= lo; ++k) pts_[lo - k] = f.inverse(pts_[lo - k + 1]);
        const EigenDirections lin = eigen_directions(f.linear_part());
        if (f.is_linear()) {
            std::fill(es_.begin(), es_.end(), lin.e_s);
            std::fill(eu_.begin(), eu_.end(), lin.e_u);
            std::fill(srate_.begin(), srate_.end(), std::abs(lin.mu_s));
            std::fill(urate_.begin(), urate_.end(), std::abs(lin.mu_u));
            return;
        }
        eu_[0] = lin.e_u;
        for (std::size_t i = 1; i < n; ++i) eu_[i] = normalized(f.derivative(pts_[i - 1]) * eu_[i - 1]);
        es_[n - 1] = lin.e_s;
        for (std::size_t i = n - 1; i > 0; --i) es_[i - 1] = normalized(f.derivative(pts_[i - 1]).inverse() * es_[i]);
        for (std::size_t i = 0; i < n; ++i) {
            const Mat2 d = f.derivative(pts_[i]);
            srate_[i] = norm(d * es_[i]);
            urate_[i] = norm(d * eu_[i]);
        }
    }

    [[nodiscard]] int first() const { return -back_; }
    [[nodiscard]] int last() const { return fwd_; }
    [[nodiscard]] const TorusPoint& point(int k) const { return pts_[idx(k)]; }
    [[nodiscard]] const Vec2& e_s(int k) const { return es_[idx(k)]; }
    [[nodiscard]] const Vec2& e_u(int k) const { return eu_[idx(k)]; }
    // ||Df_{x_k} e^s_k|| and ||Df_{x_k} e^u_k||.
    [[nodiscard]] double stable_rate(int k) const { return srate_[idx(k)]; }
    [[nodiscard]] double unstable_rate(int k) const { return urate_[idx(k)]; }

    // log ||Df^n e^s_0|| for n >= 0 and log ||Df^{n} e^s_0|| for n < 0 (similarly for e^u).
    [[nodiscard]] double log_stable_growth(int n) const {
        double s = 0;
        if (n >= 0)
            for (int k = 0; k < n; ++k) s += std::log(stable_rate(k));
        else
            for (int k = -1; k >= n; --k) s -= std::log(stable_rate(k));
        return s;
    }
    [[nodiscard]] double log_unstable_growth(int n) const {
        double s = 0;
        if (n >= 0)
            for (int k = 0; k < n; ++k) s += std::log(unstable_rate(k));
        else
            for (int k = -1; k >= n; --k) s -= std::log(unstable_rate(k));
        return s;
    }

private:
    [[nodiscard]] std::size_t idx(int k) const {
        if (k < -(back_ + margin_) || k > fwd_ + margin_) throw std::out_of_range("orbit frame index");
        return static_cast<std::size_t>(k + back_ + margin_);
    }

    int back_, fwd_, margin_;
    std::vector<TorusPoint> pts_;
    std::vector<Vec2> es_, eu_;
    std::vector<double> srate_, urate_;
};

// ---------------------------------------------------------------------------
// Regularity
//
// C0(x) is the smallest constant for the four (H3) inequalities over a finite
// window. It is not slowly varying along orbits, so C and K are tempered:
//   C(x) = sup_n C0(f^n x) e^{-eps|n|},  K(x) = inf_n K0(f^n x) e^{eps|n|}.
// These still satisfy (H3) and now satisfy (H1) by construction.

struct RegularityData {
    TorusPoint base;
    double C = 1.0;
    double K = 0.0;
    long level = 1;
    int window = 0;
    double C_raw = 1.0;  // untempered window constant at x
    double K_raw = 0.0;  // angle at x
    int temper_range = 0;
};

[[nodiscard]] inline long regular_level(double C, double K, double epsilon) {
    const double a = std::log(C) / epsilon;
    const double b = -std::log(K) / epsilon;
    const double need = std::max({1.0, std::ceil(a - 1e-9), std::ceil(b - 1e-9)});
    return static_cast<long>(need);
}

namespace detail {

// Prefix sums of log one-step rates: log||Df^n e^s_m|| = S[m+n] - S[m].
struct RateSums {
    int lo = 0;
    std::vector<double> s, u;
    RateSums(const OrbitFrames& fr, int lo_, int hi_) : lo(lo_) {
        const std::size_t n = static_cast<std::size_t>(hi_ - lo_ + 1);
        s.assign(n + 1, 0.0);
        u.assign(n + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const int k = lo_ + static_cast<int>(i);
            s[i + 1] = s[i] + std::log(fr.stable_rate(k));
            u[i + 1] = u[i] + std::log(fr.unstable_rate(k));
        }
    }
    [[nodiscard]] double S(int k) const { return s[static_cast<std::size_t>(k - lo)]; }
    [[nodiscard]] double U(int k) const { return u[static_cast<std::size_t>(k - lo)]; }
};

[[nodiscard]] inline double log_c0(const RateSums& r, int m, double chi, int window) {
    double c = 0.0;
    for (int n = 1; n <= window; ++n) {
        c = std::max({c, r.S(m + n) - r.S(m) + chi * n, chi * n - (r.U(m + n) - r.U(m)),
                      chi * n + (r.S(m) - r.S(m - n)), chi * n - (r.U(m) - r.U(m - n))});
    }
    return c;
}

}  // namespace detail

// Smallest C making the four (H3) inequalities hold for 1 <= n <= window.
[[nodiscard]] inline double hyperbolicity_constant(const OrbitFrames& fr, double chi, int window) {
    const detail::RateSums r(fr, -window, window);
    return std::exp(detail::log_c0(r, 0, chi, window));
}

// Tempered regularity data for f^k(x), k in [-kmax, kmax], all read off one
// orbit computation so that neighbouring values are mutually consistent.
[[nodiscard]] inline std::vector<RegularityData> regularity_along_orbit(const SurfaceMap& f, const Splitting& split,
                                                                       const HyperbolicityParams& params,
                                                                       int window, int kmax) {
    if (window < 1) throw PreconditionError("window must be positive");
    if (kmax < 0) throw PreconditionError("kmax must be non-negative");
    if (!(params.epsilon > 0)) throw PreconditionError("epsilon must be positive");
    const double eps = params.epsilon;
    // Terms beyond |n| = N only matter where C0 exceeds 8 times its value at x.
    const int N = static_cast<int>(std::min(3000.0, std::ceil(std::log(8.0) / eps)));
    const int W = 2 * window;
    const int R = N + kmax;
    const OrbitFrames fr(f, split.base, R + W, R + W);
    const detail::RateSums sums(fr, -(R + W), R + W);
    const double c_half = std::exp(detail::log_c0(sums, 0, params.chi, window));
    const double c_full = std::exp(detail::log_c0(sums, 0, params.chi, W));
    if (c_full > 1.05 * c_half)
        throw ConvergenceError("C(x) keeps growing with the window (" + std::to_string(c_half) + " -> " +
                               std::to_string(c_full) + "): point not in any regular level at this chi");
    std::vector<double> logc0(static_cast<std::size_t>(2 * R + 1)), logk0(logc0.size());
    for (int m = -R; m <= R; ++m) {
        const double a = vector_angle(fr.e_s(m), fr.e_u(m));
        // Prefix sums carry ~1e-11 of rounding; log C below 1e-9 is C = 1.
        const double lc = detail::log_c0(sums, m, params.chi, W);
        logc0[static_cast<std::size_t>(m + R)] = lc < 1e-9 ? 0.0 : lc;
        logk0[static_cast<std::size_t>(m + R)] = std::log(std::min(a, std::numbers::pi - a));
    }
    std::vector<RegularityData> out;
    out.reserve(static_cast<std::size_t>(2 * kmax + 1));
    for (int k = -kmax; k <= kmax; ++k) {
        RegularityData r;
        r.base = k == 0 ? split.base : fr.point(k);
        r.window = window;
        r.temper_range = N;
        r.C_raw = std::exp(logc0[static_cast<std::size_t>(k + R)]);
        r.K_raw = std::exp(logk0[static_cast<std::size_t>(k + R)]);
        double logc = logc0[static_cast<std::size_t>(k + R)], logk = logk0[static_cast<std::size_t>(k + R)];
        for (int n = 1; n <= N; ++n) {
            for (int m : {k + n, k - n}) {
                logc = std::max(logc, logc0[static_cast<std::size_t>(m + R)] - eps * n);
                logk = std::min(logk, logk0[static_cast<std::size_t>(m + R)] + eps * n);
            }
        }
        r.C = std::exp(logc);
        r.K = std::exp(logk);
        r.level = regular_level(r.C, r.K, eps);
        out.push_back(r);
    }
    return out;
}

[[nodiscard]] inline RegularityData regularity_data(const SurfaceMap& f, const Splitting& split,
                                                    const HyperbolicityParams& params, int window = 30) {
    return regularity_along_orbit(f, split, params, window, 0).front();
}

[[nodiscard]] inline RegularityData regularity_at(const SurfaceMap& f, const TorusPoint& p,
                                                  const HyperbolicityParams& params, int window = 30) {
    return regularity_data(f, estimate_splitting(f, p, 30), params, window);
}

// chi for which C(x) = 1 on the builtin maps: exact exponent for linear maps,
// 0.98 x the smallest one-step rate on a grid otherwise.
[[nodiscard]] inline double auto_chi(const SurfaceMap& f, int grid = 64) {
    const EigenDirections lin = eigen_directions(f.linear_part());
    if (f.is_linear()) return std::log(std::abs(lin.mu_u));
    double best = 1e300;
    for (int i = 0; i < grid; ++i)
        for (int j = 0; j < grid; ++j) {
            const TorusPoint p((i + 0.5) / grid, (j + 0.5) / grid);
            const Splitting s = estimate_splitting(f, p, 30);
            const Mat2 d = f.derivative(p);
            best = std::min({best, -std::log(norm(d * s.e_s)), std::log(norm(d * s.e_u))});
        }
    return 0.98 * best;
}

// Level histogram over a sample (level -> count). Points whose C does not
// stabilise are counted under level 0.
[[nodiscard]] inline std::map<long, long> level_histogram(const SurfaceMap& f, const std::vector<TorusPoint>& pts,
                                                          const HyperbolicityParams& params, int window = 30) {
    std::map<long, long> h;
    for (const auto& p : pts) {
        try {
            ++h[regularity_at(f, p, params, window).level];
        } catch (const ConvergenceError&) {
            ++h[0];
        }
    }
    return h;
}

}  // namespace hypertower
