#pragma once

// Shadowing of two-sided pseudo-orbits by nested strip intersections in the
// chart of x_0, the bracket [x, y] as a special case, and periodic points
// obtained by shadowing a periodic pseudo-orbit and polishing with Newton.

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hypertower/charts.hpp"
#include "hypertower/parallel.hpp"
#include "hypertower/pseudo.hpp"
#include "hypertower/regularity.hpp"

namespace hypertower {

namespace detail {

// Charts and chart maps along x_{-m}, ..., x_n; index j is stored at j + m.
struct ChartChain {
    int m = 0, n = 0;
    std::vector<Chart> charts;
    std::vector<double> half;
    std::vector<ChartMap> steps;  // chart j -> chart j+1

    ChartChain(const SurfaceMap& f, std::vector<Chart> cs, int m_) : m(m_), charts(std::move(cs)) {
        n = static_cast<int>(charts.size()) - 1 - m;
        if (m < 0 || n < 0) throw PreconditionError("chart chain must contain index 0");
        for (const auto& c : charts) half.push_back(c.b_level);
        for (std::size_t j = 0; j + 1 < charts.size(); ++j)
            steps.emplace_back(f, charts[j], charts[j + 1], half[j], half[j + 1]);
    }

    [[nodiscard]] std::size_t at(int j) const { return static_cast<std::size_t>(j + m); }
    [[nodiscard]] const Chart& chart(int j) const { return charts[at(j)]; }
    [[nodiscard]] double box(int j) const { return half[at(j)]; }
    // Steps and boxes of x_i..x_{i+d}.
    [[nodiscard]] std::span<const ChartMap> forward_steps(int i, int d) const {
        return std::span<const ChartMap>(steps).subspan(at(i), static_cast<std::size_t>(d));
    }
    [[nodiscard]] std::span<const double> forward_boxes(int i, int d) const {
        return std::span<const double>(half).subspan(at(i), static_cast<std::size_t>(d + 1));
    }
    // Steps and boxes of x_{i-d}..x_i.
    [[nodiscard]] std::span<const ChartMap> backward_steps(int i, int d) const {
        return std::span<const ChartMap>(steps).subspan(at(i - d), static_cast<std::size_t>(d));
    }
    [[nodiscard]] std::span<const double> backward_boxes(int i, int d) const {
        return std::span<const double>(half).subspan(at(i - d), static_cast<std::size_t>(d + 1));
    }
};

// Corners are ordered (left,bottom), (right,bottom), (left,top), (right,top).
struct StripIntersection {
    std::array<Vec2, 4> corners;
    Vec2 centre;
    double diameter = 0;
};

// Intersection in chart i of the stable strip of x_i..x_{i+fwd} and the
// unstable strip of x_{i-bwd}..x_i. Each corner is the fixed point of
// v1 = side(v2), v2 = edge(v1), which converges at rate omega^2. With
// centre_only only the midline crossing is found (diameter left at 0).
[[nodiscard]] inline StripIntersection intersect_strips(const ChartChain& c, int i, int fwd, int bwd,
                                                        int rounds = 8, bool centre_only = false) {
    const double h = c.box(i);
    const auto fs = c.forward_steps(i, fwd);
    const auto fb = c.forward_boxes(i, fwd);
    const auto bs = c.backward_steps(i, bwd);
    const auto bb = c.backward_boxes(i, bwd);
    auto empty = [&](const char* which) {
        std::ostringstream w;
        w << "empty " << which << " strip at index " << i << " (depths " << fwd << ", " << bwd << ")";
        return ConvergenceError(w.str());
    };
    auto stable = [&](double v2) {
        const auto r = exit_interval([&](double v1) { return forward_exit(fs, fb, Vec2{v1, v2}); }, h);
        if (!r) throw empty("stable");
        return *r;
    };
    auto unstable = [&](double v1) {
        const auto r = exit_interval([&](double v2) { return backward_exit(bs, bb, Vec2{v1, v2}); }, h);
        if (!r) throw empty("unstable");
        return *r;
    };
    StripIntersection out;
    if (centre_only) {
        // the crossing of the two strips' midlines; a quarter of the work
        double v1 = 0, v2 = 0;
        for (int r = 0; r < rounds; ++r) {
            const auto s = stable(v2);
            const double n1 = 0.5 * (s.first + s.second);
            const auto u = unstable(n1);
            const double n2 = 0.5 * (u.first + u.second);
            const bool still = r > 0 && n1 == v1 && n2 == v2;
            v1 = n1;
            v2 = n2;
            if (still) break;
        }
        out.centre = Vec2{v1, v2};
        out.corners.fill(out.centre);
        return out;
    }
    for (int top = 0; top < 2; ++top)
        for (int right = 0; right < 2; ++right) {
            double v1 = 0, v2 = 0;
            for (int r = 0; r < rounds; ++r) {
                const auto s = stable(v2);
                const double n1 = right ? s.second : s.first;
                const auto u = unstable(n1);
                const double n2 = top ? u.second : u.first;
                const bool still = r > 0 && n1 == v1 && n2 == v2;
                v1 = n1;
                v2 = n2;
                if (still) break;
            }
            out.corners[static_cast<std::size_t>(2 * top + right)] = Vec2{v1, v2};
        }
    out.centre = 0.25 * (out.corners[0] + out.corners[1] + out.corners[2] + out.corners[3]);
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = a + 1; b < 4; ++b)
            out.diameter = std::max(out.diameter, norm(out.corners[a] - out.corners[b]));
    return out;
}

}  // namespace detail

struct ShadowOptions {
    double target_diameter = 1e-9;  // certification threshold in chart units
    bool log_contraction = true;    // record diam(n) for every n <= depth
    int track = 0;                  // also locate f^j(y) for |j| <= track
};

struct ShadowResult {
    TorusPoint point;
    Vec2 chart_point;  // in the chart of x_0
    long level0 = 1;
    long certified_level = 1;  // l_0 + l'
    int depth = 0;
    int certified_depth = -1;  // first logged depth with diameter <= target
    bool certified = false;
    double diameter = 0;
    double b0 = 0;
    std::vector<double> contraction_log;  // diam(n), n = 0..depth
    std::vector<double> diameter_bound;   // 4 b_0 e^{-lambda n/3}
    // Tracked indices j = first_index, first_index + 1, ...
    int first_index = 0;
    std::vector<Vec2> positions;          // chart coordinates of f^j(y) at x_j
    std::vector<double> per_index_error;  // |positions|_inf
    std::vector<double> box;              // b_{l_j}
    std::vector<double> ambient_offset;   // d(f^j(y), x_j)

    [[nodiscard]] bool within_boxes() const {
        for (std::size_t j = 0; j < per_index_error.size(); ++j)
            if (per_index_error[j] > box[j]) return false;
        return true;
    }
    [[nodiscard]] bool decay_ok() const {
        for (std::size_t n = 0; n < contraction_log.size(); ++n)
            if (contraction_log[n] > diameter_bound[n]) return false;
        return true;
    }
};

namespace detail {

// Intersections at x_0 with depth n on both sides; depth grows past the
// request until the diameter certifies or the data runs out. Tracked points
// use all available data on both sides of their index.
[[nodiscard]] inline ShadowResult shadow_chain(const ChartChain& c, const DerivedConstants& k, long level0, int depth,
                                               const ShadowOptions& opt) {
    const int available = std::min(c.m, c.n);
    if (depth < 0 || depth > available) {
        std::ostringstream w;
        w << "shadowing depth " << depth << " outside the available range 0.." << available;
        throw PreconditionError(w.str());
    }
    ShadowResult r;
    r.level0 = level0;
    r.certified_level = level0 + k.ell_prime;
    r.b0 = c.box(0);
    auto bound = [&](int n) { return 4 * r.b0 * std::exp(-k.lambda * n / 3); };
    auto log = [&](int n, double d) {
        r.contraction_log.push_back(d);
        r.diameter_bound.push_back(bound(n));
        if (r.certified_depth < 0 && d <= opt.target_diameter) r.certified_depth = n;
    };
    StripIntersection cur;
    if (opt.log_contraction) {
        const auto all = parallel_map<StripIntersection>(static_cast<std::size_t>(depth + 1), [&](std::size_t n) {
            return intersect_strips(c, 0, static_cast<int>(n), static_cast<int>(n));
        });
        for (int n = 0; n <= depth; ++n) log(n, all[static_cast<std::size_t>(n)].diameter);
        cur = all.back();
    } else {
        cur = intersect_strips(c, 0, depth, depth);
    }
    int d = depth;
    while (cur.diameter > opt.target_diameter && d < available) {
        ++d;
        cur = intersect_strips(c, 0, d, d);
        if (opt.log_contraction) log(d, cur.diameter);
    }
    r.depth = d;
    r.diameter = cur.diameter;
    r.certified = cur.diameter <= opt.target_diameter;
    if (!r.certified) {
        std::ostringstream w;
        w << "shadowing not certified: diameter " << cur.diameter << " > " << opt.target_diameter
          << " at maximal depth " << d;
        throw ConvergenceError(w.str());
    }
    r.chart_point = cur.centre;
    r.point = c.chart(0).psi(cur.centre);

    const int t = std::min({opt.track, c.m, c.n});
    r.first_index = -t;
    // Each index uses all the data on its side; a strip thinner than the
    // resolution at its centre can come out numerically empty, and then the
    // depths are shortened until it is not (never below the certified depth).
    const auto pos = parallel_map<Vec2>(static_cast<std::size_t>(2 * t + 1), [&](std::size_t s) {
        const int j = static_cast<int>(s) - t;
        if (j == 0 && t == 0) return cur.centre;
        int fwd = c.n - j, bwd = c.m + j;
        for (;;) {
            try {
                return intersect_strips(c, j, fwd, bwd, 8, true).centre;
            } catch (const ConvergenceError&) {
                if (std::max(fwd, bwd) <= d) throw;
                fwd = std::max(d, fwd - 4);
                bwd = std::max(d, bwd - 4);
            }
        }
    });
    // The full-depth position at index 0 is nested inside the certified
    // intersection and sharper, so it becomes the reported point.
    r.chart_point = pos[static_cast<std::size_t>(t)];
    r.point = c.chart(0).psi(r.chart_point);
    for (int j = -t; j <= t; ++j) {
        const Vec2& p = pos[static_cast<std::size_t>(j + t)];
        r.positions.push_back(p);
        r.per_index_error.push_back(norm_inf(p));
        r.box.push_back(c.box(j));
        r.ambient_offset.push_back(norm(c.chart(j).L * p));
    }
    return r;
}

struct ChartedOrbit {
    std::vector<Chart> charts;
    std::vector<long> measured;
};

[[nodiscard]] inline ChartedOrbit chart_points(const SurfaceMap& f, const std::vector<TorusPoint>& pts,
                                               const std::vector<long>& levels, const HyperbolicityParams& params,
                                               const DerivedConstants& k, const ChartSettings& cs) {
    const auto pcs = parallel_map<std::optional<PointChart>>(pts.size(), [&](std::size_t j) {
        std::optional<PointChart> r;
        try {
            r = point_chart(f, pts[j], levels[j], params, k, cs);
        } catch (const ConvergenceError&) {
        }
        return r;
    });
    ChartedOrbit out;
    for (std::size_t j = 0; j < pts.size(); ++j) {
        if (!pcs[j]) throw PreconditionError("no regularity data at pseudo-orbit point " + std::to_string(j));
        out.charts.push_back(pcs[j]->chart);
        out.measured.push_back(pcs[j]->reg.level);
    }
    return out;
}

}  // namespace detail

// Shadowing point of the two-sided pseudo-orbit x_{-m}..x_0..x_n given as
// backward = (x_{-m}, ..., x_0) and forward = (x_0, ..., x_n). Both halves are
// validated as pseudo-orbits.
[[nodiscard]] inline ShadowResult shadow(const SurfaceMap& f, const PseudoOrbit& forward, const PseudoOrbit& backward,
                                         const HyperbolicityParams& params, const DerivedConstants& k,
                                         const ChartSettings& cs, int depth, const ShadowOptions& opt = {}) {
    if (forward.points.empty() || backward.points.empty() ||
        distance(forward.points.front(), backward.points.back()) > 0 ||
        forward.levels.front() != backward.levels.back())
        throw PreconditionError("forward and backward pseudo-orbits must share x_0 and its level");
    const int m = backward.length();
    std::vector<TorusPoint> pts(backward.points.begin(), backward.points.end());
    pts.insert(pts.end(), forward.points.begin() + 1, forward.points.end());
    std::vector<long> lv(backward.levels.begin(), backward.levels.end());
    lv.insert(lv.end(), forward.levels.begin() + 1, forward.levels.end());
    const detail::ChartedOrbit co = detail::chart_points(f, pts, lv, params, k, cs);

    const std::vector<long> mb(co.measured.begin(), co.measured.begin() + m + 1);
    const std::vector<long> mf(co.measured.begin() + m, co.measured.end());
    (void)validate_pseudo_orbit(f, backward.points, backward.levels, backward.delta, params, k, mb).value();
    (void)validate_pseudo_orbit(f, forward.points, forward.levels, forward.delta, params, k, mf).value();
    return detail::shadow_chain(detail::ChartChain(f, co.charts, m), k, forward.levels.front(), depth, opt);
}

// Same with charts supplied by the caller (one per point, no validation).
[[nodiscard]] inline ShadowResult shadow(const SurfaceMap& f, const std::vector<Chart>& forward_charts,
                                         const std::vector<Chart>& backward_charts, long level0,
                                         const DerivedConstants& k, int depth, const ShadowOptions& opt = {}) {
    if (forward_charts.empty() || backward_charts.empty())
        throw PreconditionError("both chart sequences must contain x_0");
    std::vector<Chart> all(backward_charts.begin(), backward_charts.end());
    all.insert(all.end(), forward_charts.begin() + 1, forward_charts.end());
    return detail::shadow_chain(detail::ChartChain(f, std::move(all), static_cast<int>(backward_charts.size()) - 1),
                                k, level0, depth, opt);
}

// ---------------------------------------------------------------------------
// Bracket [x, y] = V^s_x ∩ V^u_y: the shadowing point of x_n = f^n(x) for
// n >= 0, x_n = f^n(y) for n < 0, with levels l + |n|.

struct BracketOptions {
    int depth = 24;      // intersection depth at x_0 (grows if not certified)
    int track = 0;       // indices located on each side, e.g. for rate tables
    int max_depth = 96;  // data length limit per side
    bool log_contraction = false;
    double target_diameter = 1e-9;
};

[[nodiscard]] inline double bracket_radius(double delta, long level, const DerivedConstants& k) {
    return delta * std::exp(-k.lambda * static_cast<double>(level));
}

[[nodiscard]] inline ShadowResult bracket(const SurfaceMap& f, const TorusPoint& x, const TorusPoint& y, long level,
                                          double delta, const HyperbolicityParams& params, const DerivedConstants& k,
                                          const ChartSettings& cs, const BracketOptions& opt = {}) {
    const double d = distance(x, y), rad = bracket_radius(delta, level, k);
    if (d > rad) {
        std::ostringstream w;
        w << "bracket needs d(x,y) <= delta e^{-lambda l} = " << rad << " (got " << d << ")";
        throw PreconditionError(w.str());
    }
    for (const TorusPoint* p : {&x, &y}) {
        long lv = 0;
        try {
            lv = regularity_at(f, *p, params).level;
        } catch (const ConvergenceError& e) {
            throw PreconditionError(std::string("bracket point has no regularity level: ") + e.what());
        }
        if (lv > level) throw PreconditionError("bracket point of level " + std::to_string(lv) + " > " + std::to_string(level));
    }
    ShadowOptions so{opt.target_diameter, opt.log_contraction, opt.track};
    for (int len = opt.depth + opt.track;; len = std::min(2 * len, opt.max_depth)) {
        PseudoOrbit fw = true_orbit(f, x, level, len, k);
        fw.delta = delta;
        PseudoOrbit bw;
        bw.delta = delta;
        bw.lambda = k.lambda;
        bw.points.assign(static_cast<std::size_t>(len + 1), x);
        bw.levels.assign(static_cast<std::size_t>(len + 1), level);
        TorusPoint p = y;
        for (int j = 1; j <= len; ++j) {
            p = f.inverse(p);
            bw.points[static_cast<std::size_t>(len - j)] = p;
            bw.levels[static_cast<std::size_t>(len - j)] = level + j;
        }
        try {
            return shadow(f, fw, bw, params, k, cs, std::min(opt.depth, len), so);
        } catch (const ConvergenceError&) {
            if (len >= opt.max_depth) throw;
        }
    }
}

// d(f^n z, f^n x) for n >= 0 and d(f^n z, f^n y) for n < 0, against
// Qhat^{-1} e^{2 eps l} e^{-lambda|n|/4} d(x, y).
struct RateRow {
    int n = 0;
    double distance = 0;
    double bound = 0;
};

[[nodiscard]] inline std::vector<RateRow> bracket_rates(const ShadowResult& r, const DerivedConstants& k, long level,
                                                        double d0) {
    std::vector<RateRow> rows;
    const double c = std::exp(2 * k.epsilon * static_cast<double>(level)) / k.Qhat;
    for (std::size_t s = 0; s < r.ambient_offset.size(); ++s) {
        const int n = r.first_index + static_cast<int>(s);
        rows.push_back({n, r.ambient_offset[s], c * std::exp(-k.lambda * std::abs(n) / 4) * d0});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Periodic points from periodic pseudo-orbits

struct ClosingOptions {
    double residual_tol = 1e-12;
    int max_newton = 30;
    int max_depth = 240;  // data length per side of the periodic extension
    double target_diameter = 1e-9;
};

struct ClosingResult {
    TorusPoint point;
    TorusPoint shadow_point;
    int period = 0;
    bool refined = false;  // Newton polishing beyond the shadowing point
    int newton_iterations = 0;
    double residual = 0;         // |f^P(p) - p| at the returned point
    double shadow_residual = 0;  // the same at the shadowing point
    std::string warning;
    ShadowResult shadow;
};

// The pattern x_0..x_{P-1} repeated with period P; the wrap-around jump
// d(f(x_{P-1}), x_0) must satisfy the pseudo-orbit bound.
[[nodiscard]] inline ClosingResult close_periodic(const SurfaceMap& f, const PseudoOrbit& pattern,
                                                  const HyperbolicityParams& params, const DerivedConstants& k,
                                                  const ChartSettings& cs, const ClosingOptions& opt = {}) {
    const int period = static_cast<int>(pattern.points.size());
    if (period < 1 || pattern.levels.size() != pattern.points.size())
        throw PreconditionError("periodic pattern needs at least one point and one level per point");
    const detail::ChartedOrbit co = detail::chart_points(f, pattern.points, pattern.levels, params, k, cs);
    {
        std::vector<TorusPoint> loop = pattern.points;
        std::vector<long> lv = pattern.levels, ms = co.measured;
        loop.push_back(pattern.points.front());
        lv.push_back(pattern.levels.front());
        ms.push_back(co.measured.front());
        (void)validate_pseudo_orbit(f, loop, lv, pattern.delta, params, k, ms).value();
    }
    const int depth = 3 * period;
    const int side = std::min(opt.max_depth, std::max(depth, 48));
    std::vector<Chart> chain;
    for (int j = -side; j <= side; ++j) chain.push_back(co.charts[static_cast<std::size_t>(((j % period) + period) % period)]);
    ClosingResult out;
    out.period = period;
    out.shadow = detail::shadow_chain(detail::ChartChain(f, std::move(chain), side), k, pattern.levels.front(),
                                      std::min(depth, side), ShadowOptions{opt.target_diameter, false, 0});
    out.shadow_point = out.point = out.shadow.point;

    auto residual = [&](const TorusPoint& p) { return displacement(p, iterate(f, p, period)); };
    const Chart& c0 = co.charts.front();
    Vec2 r = residual(out.point);
    out.shadow_residual = out.residual = norm(r);
    TorusPoint p = out.point;
    bool diverged = false;
    for (int it = 0; it < opt.max_newton && norm(r) > 0; ++it) {
        const Mat2 j = cocycle(f, p, period) - Mat2::identity();
        const TorusPoint q(p.vec() - solve(j, r));
        out.newton_iterations = it + 1;
        if (norm_inf(c0.psi_inverse(q)) > c0.b_level) {
            diverged = true;
            break;
        }
        const Vec2 rq = residual(q);
        if (norm(r) <= opt.residual_tol && norm(rq) >= norm(r)) break;  // no further progress
        p = q;
        r = rq;
    }
    if (!diverged && norm(r) <= opt.residual_tol) {
        out.point = p;
        out.residual = norm(r);
        out.refined = true;
    } else {
        std::ostringstream w;
        if (diverged)
            w << "Newton step left the shadowing box; returning the unrefined shadowing point";
        else
            w << "Newton residual " << norm(r) << " above " << opt.residual_tol
              << " after " << out.newton_iterations << " iterations; returning the unrefined shadowing point";
        out.warning = w.str();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Regularity of the shadowing point: (lambda/4, 2 eps, l_0 + l')-regular.

struct ShadowRegularityReport {
    long level = 0;
    long bound = 0;
    double C = 0, K = 0;
    bool ok = false;
    std::string message;
};

[[nodiscard]] inline ShadowRegularityReport verify_shadow_regularity(const SurfaceMap& f, const ShadowResult& r,
                                                                     const HyperbolicityParams& params,
                                                                     const DerivedConstants& k) {
    HyperbolicityParams p = params;
    p.chi = k.lambda / 4;
    p.lambda = k.lambda / 8;
    p.epsilon = 2 * k.epsilon;
    ShadowRegularityReport rep;
    rep.bound = r.certified_level;
    try {
        const RegularityData reg = regularity_at(f, r.point, p);
        rep.level = reg.level;
        rep.C = reg.C;
        rep.K = reg.K;
        rep.ok = reg.level <= rep.bound;
        if (!rep.ok) rep.message = "level " + std::to_string(reg.level) + " > " + std::to_string(rep.bound);
    } catch (const ConvergenceError& e) {
        rep.message = e.what();
    }
    return rep;
}

}  // namespace hypertower
