#pragma once

// Pseudo-orbits, the regular branch they determine in Lyapunov charts, and
// the overlapping-charts check between charts of nearby points.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "hypertower/charts.hpp"
#include "hypertower/parallel.hpp"
#include "hypertower/regularity.hpp"

namespace hypertower {

// ---------------------------------------------------------------------------
// Charts with a prescribed box level

// Chart at p whose box is B^{(level)}; b(x) is not needed here and left at 0.
struct PointChart {
    Chart chart;
    RegularityData reg;
};

[[nodiscard]] inline PointChart point_chart(const SurfaceMap& f, const TorusPoint& p, long box_level,
                                            const HyperbolicityParams& params, const DerivedConstants& k,
                                            const ChartSettings& cs = {}) {
    const Splitting sp = estimate_splitting(f, p, 30);
    PointChart pc;
    pc.reg = regularity_data(f, sp, params);
    Chart& c = pc.chart;
    c.base = p;
    c.split = sp;
    if (f.is_linear() && cs.closed_form_linear) {
        const EigenDirections ed = eigen_directions(f.linear_part());
        c.split = make_splitting(p, ed.e_s, ed.e_u);
    }
    std::tie(c.s, c.u) = lyapunov_norms(f, sp, pc.reg.C, k, cs);
    c.L = lyapunov_matrix(c.split, c.s, c.u);
    c.L_inv = c.L.inverse();
    c.level = box_level;
    c.b_level = b_level_value(cs.b, box_level, k);
    c.n_terms = f.is_linear() ? 0 : chart_truncation(pc.reg.C, k.lambda, k.chi, cs);
    return pc;
}

// ---------------------------------------------------------------------------
// Pseudo-orbits

struct PseudoOrbit {
    std::vector<TorusPoint> points;
    std::vector<long> levels;
    double delta = 0;
    double lambda = 0;
    std::vector<long> measured_levels;  // filled by validation

    [[nodiscard]] int length() const { return static_cast<int>(points.size()) - 1; }
};

struct PseudoOrbitRejection {
    int index = 0;
    std::string clause;  // "level-step", "jump" or "membership"
    double value = 0;
    double bound = 0;

    [[nodiscard]] std::string message() const {
        std::ostringstream o;
        o << "pseudo-orbit rejected at index " << index << " (" << clause << "): " << value << " > " << bound;
        return o.str();
    }
};

struct PseudoOrbitValidation {
    std::optional<PseudoOrbit> orbit;
    std::optional<PseudoOrbitRejection> rejection;
    [[nodiscard]] bool ok() const { return orbit.has_value(); }
    [[nodiscard]] const PseudoOrbit& value() const {
        if (!orbit) throw PreconditionError(rejection->message());
        return *orbit;
    }
};

// Checks |l_j - l_{j-1}| <= 1, d(f(x_{j-1}), x_j) <= delta e^{-lambda l_j} and
// x_j in Lambda_{l_j}, index by index; the first violation is returned.
inline constexpr double kJumpRoundingFloor = 4e-15;

// Measured levels may be supplied to skip the regularity computation.
[[nodiscard]] inline PseudoOrbitValidation validate_pseudo_orbit(const SurfaceMap& f,
                                                                 const std::vector<TorusPoint>& points,
                                                                 const std::vector<long>& levels, double delta,
                                                                 const HyperbolicityParams& params,
                                                                 const DerivedConstants& k,
                                                                 std::vector<long> measured = {}) {
    if (points.empty() || points.size() != levels.size())
        throw PreconditionError("pseudo-orbit needs one level per point and at least one point");
    if (measured.empty()) {
        measured = parallel_map<long>(points.size(), [&](std::size_t i) -> long {
            try {
                return regularity_at(f, points[i], params).level;
            } catch (const ConvergenceError&) {
                return std::numeric_limits<long>::max();
            }
        });
    }
    PseudoOrbitValidation v;
    auto reject = [&](int j, const char* clause, double value, double bound) {
        v.rejection = PseudoOrbitRejection{j, clause, value, bound};
        return v;
    };
    for (std::size_t j = 0; j < points.size(); ++j) {
        const int ij = static_cast<int>(j);
        if (levels[j] < 1) return reject(ij, "level-step", static_cast<double>(levels[j]), 1);
        if (j > 0) {
            const long step = std::labs(levels[j] - levels[j - 1]);
            if (step > 1) return reject(ij, "level-step", static_cast<double>(step), 1);
            const double gap = distance(f.forward(points[j - 1]), points[j]);
            const double bound = delta * std::exp(-k.lambda * static_cast<double>(levels[j]));
            // f itself is only evaluated to a few ulp; true orbits built with
            // f^{-1} must not be rejected for that at high levels.
            if (gap > std::max(bound, kJumpRoundingFloor)) return reject(ij, "jump", gap, bound);
        }
        if (measured[j] > levels[j])
            return reject(ij, "membership", static_cast<double>(measured[j]), static_cast<double>(levels[j]));
    }
    v.orbit = PseudoOrbit{points, levels, delta, k.lambda, std::move(measured)};
    return v;
}

[[nodiscard]] inline PseudoOrbitValidation validate_pseudo_orbit(const SurfaceMap& f, const PseudoOrbit& candidate,
                                                                 const HyperbolicityParams& params,
                                                                 const DerivedConstants& k) {
    return validate_pseudo_orbit(f, candidate.points, candidate.levels, candidate.delta, params, k,
                                 candidate.measured_levels);
}

// True orbit x, f(x), ..., f^n(x) with levels l, l+1, ..., l+n.
[[nodiscard]] inline PseudoOrbit true_orbit(const SurfaceMap& f, const TorusPoint& x, long level, int n,
                                            const DerivedConstants& k) {
    PseudoOrbit po;
    po.lambda = k.lambda;
    po.points.push_back(x);
    po.levels.push_back(level);
    for (int j = 1; j <= n; ++j) {
        po.points.push_back(f.forward(po.points.back()));
        po.levels.push_back(level + j);
    }
    return po;
}

// x_j = f^j(x) for j <= k/2, x_j = f^{j-k}(y) after, with tent levels
// l_j = min(l + j, l + k - j).
[[nodiscard]] inline PseudoOrbitValidation splice_orbits(const SurfaceMap& f, const TorusPoint& x,
                                                         const TorusPoint& y, long level, int k, double delta,
                                                         const HyperbolicityParams& params,
                                                         const DerivedConstants& kc) {
    if (k < 0 || k % 2 != 0) throw PreconditionError("splice length k must be even and non-negative");
    std::vector<TorusPoint> pts(static_cast<std::size_t>(k + 1));
    std::vector<long> lv(pts.size());
    pts[0] = x;
    for (int j = 1; j <= k / 2; ++j) pts[static_cast<std::size_t>(j)] = f.forward(pts[static_cast<std::size_t>(j - 1)]);
    pts[static_cast<std::size_t>(k)] = y;
    for (int j = k - 1; j > k / 2; --j) pts[static_cast<std::size_t>(j)] = f.inverse(pts[static_cast<std::size_t>(j + 1)]);
    for (int j = 0; j <= k; ++j) lv[static_cast<std::size_t>(j)] = std::min(level + j, level + k - j);
    return validate_pseudo_orbit(f, pts, lv, delta, params, kc);
}

// Concatenation: x̄ followed by ȳ with y_0 = x_k (the shared point is kept once).
[[nodiscard]] inline PseudoOrbit concatenate(const PseudoOrbit& a, const PseudoOrbit& b) {
    if (a.points.empty() || b.points.empty()) throw PreconditionError("cannot concatenate empty pseudo-orbits");
    if (distance(a.points.back(), b.points.front()) > 0 || a.levels.back() != b.levels.front())
        throw PreconditionError("concatenation needs the last point and level of the first orbit to start the second");
    PseudoOrbit c = a;
    c.points.insert(c.points.end(), b.points.begin() + 1, b.points.end());
    c.levels.insert(c.levels.end(), b.levels.begin() + 1, b.levels.end());
    if (!a.measured_levels.empty() && !b.measured_levels.empty())
        c.measured_levels.insert(c.measured_levels.end(), b.measured_levels.begin() + 1, b.measured_levels.end());
    else
        c.measured_levels.clear();
    c.delta = std::max(a.delta, b.delta);
    return c;
}

[[nodiscard]] inline std::vector<Chart> pseudo_orbit_charts(const SurfaceMap& f, const PseudoOrbit& po,
                                                            const HyperbolicityParams& params,
                                                            const DerivedConstants& k, const ChartSettings& cs) {
    return parallel_map<Chart>(po.points.size(), [&](std::size_t j) {
        return point_chart(f, po.points[j], po.levels[j], params, k, cs).chart;
    });
}

// ---------------------------------------------------------------------------
// Overlapping charts. On the flat torus Psi_y^{-1} o Psi_x is affine, with
// derivative L_y^{-1} L_x at every point.

struct OverlapReport {
    bool centres_ok = true;  // x, y in N_x ∩ N_y
    bool clause_a = true;
    bool clause_b = true;
    int grid_points = 0;
    double min_gain = 1e300;     // min |DT v| / |v| over tested cone vectors
    double max_cone_ratio = 0;   // aperture ratio of images w.r.t. the wide cones
    std::string witness;
    [[nodiscard]] bool ok() const { return centres_ok && clause_a && clause_b; }
};

namespace detail {

[[nodiscard]] inline Vec2 transition(const Chart& from, const Chart& to, const Vec2& v) {
    return to.L_inv * (displacement(to.base, from.base) + from.L * v);
}

}  // namespace detail

[[nodiscard]] inline OverlapReport check_overlap(const Chart& cx, const Chart& cy, const DerivedConstants& k,
                                                 int grid = 33) {
    OverlapReport rep;
    const double h = std::min(cx.b_level, cy.b_level);
    const double narrow = std::exp(-k.lambda / 3) * h;
    const double loss = std::exp(-k.lambda / 24);
    const Cone wide_u = Cone::make(ConeKind::unstable, false, k), wide_s = Cone::make(ConeKind::stable, false, k);
    auto fail = [&](bool& flag, const std::string& w) {
        flag = false;
        if (rep.witness.empty()) rep.witness = w;
    };
    if (norm_inf(cx.psi_inverse(cy.base)) > h || norm_inf(cy.psi_inverse(cx.base)) > h)
        fail(rep.centres_ok, "chart centres are not in both neighbourhoods");

    // Clause A, both orders: unstable vectors x -> y, stable vectors y -> x.
    const double sw = 0.999999 * k.strong_omega();
    const std::vector<double> slopes = {0.0, sw, -sw, 0.5 * sw};
    for (int order = 0; order < 2; ++order) {
        const Chart& a = order == 0 ? cx : cy;
        const Chart& b = order == 0 ? cy : cx;
        for (int i = 0; i < grid; ++i)
            for (int j = 0; j < grid; ++j) {
                const Vec2 z{-h + 2 * h * i / (grid - 1), -h + 2 * h * j / (grid - 1)};
                if (norm_inf(detail::transition(a, b, z)) > h) continue;  // outside N_a ∩ N_b
                ++rep.grid_points;
                const Mat2 dab = b.L_inv * a.L;  // D(Psi_b^{-1} o Psi_a), the same at every z
                const Mat2 dba = a.L_inv * b.L;
                for (double sl : slopes) {
                    const Vec2 vu = normalized(Vec2{1, sl}), vs = normalized(Vec2{sl, 1});
                    const Vec2 wu = dab * vu, ws = dba * vs;
                    rep.min_gain = std::min({rep.min_gain, norm(wu), norm(ws)});
                    rep.max_cone_ratio =
                        std::max({rep.max_cone_ratio, wide_u.aperture_ratio(wu), wide_s.aperture_ratio(ws)});
                    if (!wide_u.contains(wu) || norm(wu) < loss || !wide_s.contains(ws) || norm(ws) < loss) {
                        std::ostringstream w;
                        w << "clause A at z=(" << z.x << "," << z.y << ") slope " << sl << ": |Dv^u|=" << norm(wu)
                          << " |Dv^s|=" << norm(ws);
                        fail(rep.clause_a, w.str());
                    }
                }
            }
    }
    if (rep.grid_points == 0) fail(rep.clause_a, "chart neighbourhoods do not intersect on the grid");

    // Clause B. A full-length strongly stable curve of the narrow box
    // [-e^{-l/3}h, e^{-l/3}h] x [-h, h] crosses the partner's wide box
    // [-h, h] x [-e^{-l/3}h, e^{-l/3}h] iff, the transition being affine, the
    // narrow box lands inside |w1| <= h and its top/bottom edges land above/
    // below the wide box. The four corners are the extreme cases.
    for (int order = 0; order < 2; ++order) {
        const Chart& a = order == 0 ? cx : cy;
        const Chart& b = order == 0 ? cy : cx;
        for (int sx : {-1, 1})
            for (int sy : {-1, 1}) {
                // stable curves: corner (sx narrow, sy h)
                const Vec2 ws = detail::transition(a, b, Vec2{sx * narrow, sy * h});
                if (std::abs(ws.x) > h || sy * ws.y < narrow) {
                    std::ostringstream w;
                    w << "clause B stable corner (" << sx << "," << sy << ") maps to (" << ws.x / h << ","
                      << ws.y / h << ")*b_l";
                    fail(rep.clause_b, w.str());
                }
                // unstable curves: corner (sx h, sy narrow)
                const Vec2 wu = detail::transition(a, b, Vec2{sx * h, sy * narrow});
                if (std::abs(wu.y) > h || sx * wu.x < narrow) {
                    std::ostringstream w;
                    w << "clause B unstable corner (" << sx << "," << sy << ") maps to (" << wu.x / h << ","
                      << wu.y / h << ")*b_l";
                    fail(rep.clause_b, w.str());
                }
            }
    }
    return rep;
}

// delta from delta0 = b/10, halved until check_overlap passes on every pair of
// a same-level sample with d(x, y) <= delta e^{-lambda l}.
struct DeltaCalibration {
    double delta = 0;
    int halvings = 0;
    int pairs = 0;
    std::string last_failure;
};

[[nodiscard]] inline DeltaCalibration calibrate_delta(const SurfaceMap& f, const HyperbolicityParams& params,
                                                      const DerivedConstants& k, const ChartSettings& cs,
                                                      int n_pairs = 500, std::uint64_t seed = 5,
                                                      int max_halvings = 60) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    struct Draw {
        TorusPoint x;
        Vec2 dir;
        double frac;
    };
    std::vector<Draw> draws(static_cast<std::size_t>(n_pairs));
    for (auto& d : draws) {
        const double a = u01(rng), b = u01(rng), th = 2 * std::numbers::pi * u01(rng);
        d = {TorusPoint(a, b), Vec2{std::cos(th), std::sin(th)}, u01(rng)};
    }
    // Chart at x once; its level fixes the pair level.
    const auto base = parallel_map<std::optional<PointChart>>(draws.size(), [&](std::size_t i) {
        std::optional<PointChart> r;
        try {
            r = point_chart(f, draws[i].x, 1, params, k, cs);
        } catch (const ConvergenceError&) {
        }
        return r;
    });
    DeltaCalibration cal;
    double delta = cs.b / 10;
    for (int hv = 0; hv <= max_halvings; ++hv, delta *= 0.5) {
        const auto results = parallel_map<std::string>(draws.size(), [&](std::size_t i) -> std::string {
            if (!base[i]) return {};
            const long lv = base[i]->reg.level;
            const double r = draws[i].frac * delta * std::exp(-k.lambda * static_cast<double>(lv));
            const TorusPoint y(draws[i].x.vec() + r * draws[i].dir);
            try {
                const PointChart py = point_chart(f, y, lv, params, k, cs);
                if (py.reg.level > lv) return {};  // not a same-level pair
                Chart cx = base[i]->chart;
                cx.level = lv;
                cx.b_level = b_level_value(cs.b, lv, k);
                const OverlapReport o = check_overlap(cx, py.chart, k);
                return o.ok() ? std::string{} : o.witness;
            } catch (const ConvergenceError&) {
                return {};
            }
        });
        int used = 0;
        std::string failure;
        for (std::size_t i = 0; i < results.size(); ++i) {
            if (base[i]) ++used;
            if (!results[i].empty() && failure.empty()) failure = results[i];
        }
        if (failure.empty()) {
            cal.delta = delta;
            cal.halvings = hv;
            cal.pairs = used;
            return cal;
        }
        cal.last_failure = failure;
    }
    throw ConvergenceError("delta calibration failed: " + cal.last_failure);
}

// ---------------------------------------------------------------------------
// Curves and strips in a chart box

// Polyline graph: stable curves are v1 = g(v2), unstable ones v2 = g(v1).
// Samples are stored as chart points (v1, v2), increasing in the graph
// coordinate.
struct CurveGraph {
    ConeKind orientation = ConeKind::stable;
    bool strong = true;
    std::vector<Vec2> samples;

    [[nodiscard]] double graph_coord(const Vec2& p) const { return orientation == ConeKind::stable ? p.y : p.x; }
    [[nodiscard]] double value_coord(const Vec2& p) const { return orientation == ConeKind::stable ? p.x : p.y; }

    [[nodiscard]] double lipschitz() const {
        double m = 0;
        for (std::size_t i = 1; i < samples.size(); ++i)
            m = std::max(m, std::abs(value_coord(samples[i]) - value_coord(samples[i - 1])) /
                                (graph_coord(samples[i]) - graph_coord(samples[i - 1])));
        return m;
    }
    // Linear interpolation (constant extrapolation outside the samples).
    [[nodiscard]] double at(double t) const {
        if (samples.empty()) throw PreconditionError("empty curve");
        if (t <= graph_coord(samples.front())) return value_coord(samples.front());
        if (t >= graph_coord(samples.back())) return value_coord(samples.back());
        const auto it = std::lower_bound(samples.begin(), samples.end(), t,
                                         [&](const Vec2& p, double s) { return graph_coord(p) < s; });
        const Vec2& b = *it;
        const Vec2& a = *(it - 1);
        const double w = (t - graph_coord(a)) / (graph_coord(b) - graph_coord(a));
        return value_coord(a) + w * (value_coord(b) - value_coord(a));
    }
};

struct StripRegion {
    ConeKind kind = ConeKind::stable;
    double box_halfwidth = 0;
    CurveGraph lower, upper;  // left/right for stable strips, bottom/top for unstable ones

    // Largest crossing length along the value coordinate.
    [[nodiscard]] double width() const {
        double w = 0;
        for (std::size_t i = 0; i < lower.samples.size(); ++i)
            w = std::max(w, lower.value_coord(upper.samples[i]) - lower.value_coord(lower.samples[i]));
        return w;
    }
    [[nodiscard]] bool contains(const Vec2& v, double slack = 0) const {
        if (norm_inf(v) > box_halfwidth + slack) return false;
        const double t = lower.graph_coord(v), val = lower.value_coord(v);
        return val >= lower.at(t) - slack && val <= upper.at(t) + slack;
    }
};

// ---------------------------------------------------------------------------
// Regular branches

struct BranchOptions {
    int samples = 33;             // boundary samples per curve
    bool check_overlaps = true;   // overlap check between f(x_{j-1}) and x_j charts
    double slope_slack = 1e-7;
};

class RegularBranch {
public:
    PseudoOrbit porbit;
    std::vector<Chart> charts;
    std::vector<ChartMap> steps;  // steps[j]: chart x_j -> chart x_{j+1}
    std::vector<double> half;     // b_{l_j}
    StripRegion stable_strip;     // in B^{(l_0)}
    StripRegion unstable_strip;   // in B^{(l_k)}
    int overlap_checks = 0;

    [[nodiscard]] int length() const { return static_cast<int>(charts.size()) - 1; }

    // Chart points f^{0,j}(v), j = 0..k (no domain checks).
    [[nodiscard]] std::vector<Vec2> forward_walk(const Vec2& v) const {
        std::vector<Vec2> w{v};
        for (const auto& s : steps) w.push_back(s.evaluate_unchecked(w.back()));
        return w;
    }
    // Chart points f^{k,j}(w), returned indexed by j = 0..k.
    [[nodiscard]] std::vector<Vec2> backward_walk(const Vec2& w) const {
        std::vector<Vec2> out(charts.size());
        out.back() = w;
        for (int j = length() - 1; j >= 0; --j)
            out[static_cast<std::size_t>(j)] = steps[static_cast<std::size_t>(j)].inverse_unchecked(out[static_cast<std::size_t>(j + 1)]);
        return out;
    }
    [[nodiscard]] Vec2 apply(const Vec2& v) const { return forward_walk(v).back(); }
    [[nodiscard]] Vec2 apply_inverse(const Vec2& w) const { return backward_walk(w).front(); }

    // D f^{i,j} at the chart point p_i (index i of a forward walk), i <= j.
    [[nodiscard]] Mat2 derivative(const std::vector<Vec2>& walk, int i, int j) const {
        Mat2 d = Mat2::identity();
        for (int m = i; m < j; ++m) d = steps[static_cast<std::size_t>(m)].derivative(walk[static_cast<std::size_t>(m)]) * d;
        return d;
    }
    // Ambient point Psi_{x_j}(v).
    [[nodiscard]] TorusPoint ambient(int j, const Vec2& v) const { return charts[static_cast<std::size_t>(j)].psi(v); }
};

namespace detail {

// First box exit along the forward walk through steps[0..], checked against
// half[0..]: -1 left, +1 right, 0 none.
[[nodiscard]] inline int forward_exit(std::span<const ChartMap> steps, std::span<const double> half, Vec2 v) {
    for (std::size_t j = 0;; ++j) {
        if (v.x < -half[j]) return -1;
        if (v.x > half[j]) return 1;
        if (j == steps.size()) return 0;
        v = steps[j].evaluate_unchecked(v);
    }
}

// First box exit in the v2 coordinate along the backward walk from the last box.
[[nodiscard]] inline int backward_exit(std::span<const ChartMap> steps, std::span<const double> half, Vec2 w) {
    for (std::size_t j = steps.size();; --j) {
        if (w.y < -half[j]) return -1;
        if (w.y > half[j]) return 1;
        if (j == 0) return 0;
        w = steps[j - 1].inverse_unchecked(w);
    }
}

[[nodiscard]] inline int forward_exit(const RegularBranch& br, const Vec2& v) { return forward_exit(br.steps, br.half, v); }
[[nodiscard]] inline int backward_exit(const RegularBranch& br, const Vec2& w) {
    return backward_exit(br.steps, br.half, w);
}

// Boundary of {s : exit(s) == 0} on [-h, h] along one line. The exit sign is
// monotone in s because every step expands the tracked coordinate.
template <class Exit>
std::optional<std::pair<double, double>> exit_interval(Exit exit, double h) {
    auto edge = [&](int side) {
        // side -1: smallest s with exit != -1; side +1: largest s with exit != +1
        double lo = -h, hi = h;
        if (side < 0 && exit(-h) != -1) return -h;
        if (side > 0 && exit(h) != 1) return h;
        for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (mid <= lo || mid >= hi) break;
            const int e = exit(mid);
            if (side < 0)
                (e == -1 ? lo : hi) = mid;
            else
                (e == 1 ? hi : lo) = mid;
        }
        return side < 0 ? hi : lo;
    };
    const double a = edge(-1), b = edge(1);
    if (!(a <= b) || exit(0.5 * (a + b)) != 0) return std::nullopt;
    return std::pair{a, b};
}

}  // namespace detail

// Stable strip B^0 = {v in B_0 : f^{0,j}(v) in B_j for all j}, found one
// horizontal line at a time: the first box a point leaves along the walk says
// on which side of the strip it lies. This is the backward induction
// B^j = B_j ∩ f_j^{-1}(B^{j+1}) evaluated pointwise, without interpolating the
// intermediate strips. The unstable strip is the mirror image under the
// inverse steps.
[[nodiscard]] inline RegularBranch build_regular_branch(const SurfaceMap& f, const PseudoOrbit& po,
                                                        const std::vector<Chart>& charts, const DerivedConstants& k,
                                                        const BranchOptions& opt = {},
                                                        const HyperbolicityParams* params = nullptr,
                                                        const ChartSettings* cs = nullptr) {
    if (charts.size() != po.points.size()) throw PreconditionError("need one chart per pseudo-orbit point");
    if (opt.samples < 33) throw PreconditionError("curve graphs need at least 33 samples");
    RegularBranch br;
    br.porbit = po;
    br.charts = charts;
    const int n = po.length();
    for (int j = 0; j <= n; ++j) br.half.push_back(charts[static_cast<std::size_t>(j)].b_level);
    for (int j = 0; j < n; ++j)
        br.steps.emplace_back(f, charts[static_cast<std::size_t>(j)], charts[static_cast<std::size_t>(j + 1)],
                              br.half[static_cast<std::size_t>(j)], br.half[static_cast<std::size_t>(j + 1)]);

    if (opt.check_overlaps && n > 0 && params && cs) {
        const auto reports = parallel_map<std::string>(static_cast<std::size_t>(n), [&](std::size_t j) {
            const TorusPoint fx = f.forward(po.points[j]);
            const Chart cf = point_chart(f, fx, po.levels[j + 1], *params, k, *cs).chart;
            const OverlapReport o = check_overlap(cf, charts[j + 1], k);
            return o.ok() ? std::string{} : "junction " + std::to_string(j + 1) + ": " + o.witness;
        });
        for (const auto& r : reports)
            if (!r.empty()) throw PreconditionError("charts do not overlap at " + r + " (delta too large?)");
        br.overlap_checks = n;
    }

    const double h0 = br.half.front(), hk = br.half.back();
    const double strong = k.strong_omega();
    br.stable_strip = {ConeKind::stable, h0, {ConeKind::stable, true, {}}, {ConeKind::stable, true, {}}};
    br.unstable_strip = {ConeKind::unstable, hk, {ConeKind::unstable, true, {}}, {ConeKind::unstable, true, {}}};
    for (int i = 0; i < opt.samples; ++i) {
        const double t0 = -h0 + 2 * h0 * i / (opt.samples - 1);
        const auto s = detail::exit_interval([&](double v1) { return detail::forward_exit(br, Vec2{v1, t0}); }, h0);
        if (!s) {
            std::ostringstream w;
            w << "empty stable strip on the line v2 = " << t0 << " (pseudo-orbit of length " << n << ")";
            throw ConvergenceError(w.str());
        }
        br.stable_strip.lower.samples.push_back(Vec2{s->first, t0});
        br.stable_strip.upper.samples.push_back(Vec2{s->second, t0});
        const double tk = -hk + 2 * hk * i / (opt.samples - 1);
        const auto u = detail::exit_interval([&](double w2) { return detail::backward_exit(br, Vec2{tk, w2}); }, hk);
        if (!u) {
            std::ostringstream w;
            w << "empty unstable strip on the line w1 = " << tk;
            throw ConvergenceError(w.str());
        }
        br.unstable_strip.lower.samples.push_back(Vec2{tk, u->first});
        br.unstable_strip.upper.samples.push_back(Vec2{tk, u->second});
    }
    if (n > 0) {
        for (const CurveGraph* c : {&br.stable_strip.lower, &br.stable_strip.upper, &br.unstable_strip.lower,
                                    &br.unstable_strip.upper}) {
            if (c->lipschitz() > strong + opt.slope_slack) {
                std::ostringstream w;
                w << "strip boundary leaves the strong cone: slope " << c->lipschitz() << " > " << strong;
                throw ConvergenceError(w.str());
            }
        }
    }
    return br;
}

[[nodiscard]] inline RegularBranch build_regular_branch(const SurfaceMap& f, const PseudoOrbit& po,
                                                        const HyperbolicityParams& params, const DerivedConstants& k,
                                                        const ChartSettings& cs, const BranchOptions& opt = {}) {
    return build_regular_branch(f, po, pseudo_orbit_charts(f, po, params, k, cs), k, opt, &params, &cs);
}

// ---------------------------------------------------------------------------
// Branch verification

struct BranchReport {
    int length = 0;
    long samples = 0;
    long vectors = 0;
    long violations = 0;
    double min_growth_margin = 1e300;  // min |D f^{i,j} v| / (e^{lambda(j-i)/3} |v|)
    double max_cone_ratio = 0;         // images w.r.t. K^u / K^s
    double width = 0;                  // stable strip width
    double width_bound = 0;            // 2 b_{l_0} e^{-lambda k/3}
    double correspondence = 0;         // boundary correspondence error / b_{l_k}
    double max_crossing = 0;           // max |v2| / b_{l_j} of strip points along the walk
    std::string witness;
    [[nodiscard]] bool ok() const {
        return violations == 0 && width <= width_bound && correspondence <= 1e-7 && max_crossing <= 1 + 1e-9;
    }
};

// Chart-level estimates: for sample points of B^0 and all 0 <= i < j <= k,
// D f^{i,j} maps K^u into K^u with growth >= e^{lambda(j-i)/3}, and the
// inverse does the same on K^s from points of B^j.
[[nodiscard]] inline BranchReport verify_regular_branch(const RegularBranch& br, const DerivedConstants& k,
                                                        int n_samples = 20, std::uint64_t seed = 3) {
    BranchReport rep;
    const int n = br.length();
    rep.length = n;
    rep.width = br.stable_strip.width();
    rep.width_bound = 2 * br.half.front() * std::exp(-k.lambda * n / 3);
    const Cone ku = Cone::make(ConeKind::unstable, false, k), ks = Cone::make(ConeKind::stable, false, k);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto note = [&](const std::string& w) {
        ++rep.violations;
        if (rep.witness.empty()) rep.witness = w;
    };
    const auto& L = br.stable_strip.lower.samples;
    const auto& R = br.stable_strip.upper.samples;
    for (int s = 0; s < n_samples; ++s) {
        const std::size_t row = static_cast<std::size_t>(u01(rng) * static_cast<double>(L.size())) % L.size();
        const double a = u01(rng);
        const Vec2 y{L[row].x + a * (R[row].x - L[row].x), L[row].y};
        const auto walk = br.forward_walk(y);
        ++rep.samples;
        for (int j = 0; j <= n; ++j)
            rep.max_crossing = std::max(rep.max_crossing, norm_inf(walk[static_cast<std::size_t>(j)]) / br.half[static_cast<std::size_t>(j)]);
        const double w = k.omega * 0.999999;
        for (double sl : {0.0, w, -w, w * (2 * u01(rng) - 1)}) {
            // unstable vectors pushed forward from index i
            for (int i = 0; i < n; ++i) {
                Vec2 v = normalized(Vec2{1, sl});
                for (int j = i + 1; j <= n; ++j) {
                    v = br.steps[static_cast<std::size_t>(j - 1)].derivative(walk[static_cast<std::size_t>(j - 1)]) * v;
                    ++rep.vectors;
                    const double g = norm(v) / std::exp(k.lambda * (j - i) / 3);
                    rep.min_growth_margin = std::min(rep.min_growth_margin, g);
                    rep.max_cone_ratio = std::max(rep.max_cone_ratio, ku.aperture_ratio(v));
                    if (g < 1 || !ku.contains(v)) {
                        std::ostringstream o;
                        o << "unstable vector, " << i << "->" << j << ": margin " << g << " cone ratio "
                          << ku.aperture_ratio(v);
                        note(o.str());
                    }
                }
            }
            // stable vectors pulled back from index j
            for (int j = n; j > 0; --j) {
                Vec2 v = normalized(Vec2{sl, 1});
                for (int i = j - 1; i >= 0; --i) {
                    v = br.steps[static_cast<std::size_t>(i)].derivative(walk[static_cast<std::size_t>(i)]).inverse() * v;
                    ++rep.vectors;
                    const double g = norm(v) / std::exp(k.lambda * (j - i) / 3);
                    rep.min_growth_margin = std::min(rep.min_growth_margin, g);
                    rep.max_cone_ratio = std::max(rep.max_cone_ratio, ks.aperture_ratio(v));
                    if (g < 1 || !ks.contains(v)) {
                        std::ostringstream o;
                        o << "stable vector, " << j << "->" << i << ": margin " << g << " cone ratio "
                          << ks.aperture_ratio(v);
                        note(o.str());
                    }
                }
            }
        }
    }
    // Boundary correspondence: the top and bottom edges of B^0 map onto the
    // boundary curves of B^k.
    if (n > 0) {
        const double hk = br.half.back();
        for (const std::size_t row : {std::size_t{0}, L.size() - 1}) {
            for (double a : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                const Vec2 y{L[row].x + a * (R[row].x - L[row].x), L[row].y};
                const Vec2 z = br.apply(y);
                // the edge lands on one of the two boundary curves (which one depends on orientation)
                const double e = std::min(std::abs(z.y - br.unstable_strip.lower.at(z.x)),
                                          std::abs(z.y - br.unstable_strip.upper.at(z.x)));
                rep.correspondence = std::max(rep.correspondence, e / hk);
            }
        }
    }
    return rep;
}

// Ambient estimates: y in Psi_{x_0}(B^0), v in D Psi_{x_0}(K^u) grows under
// Df^i by at least Qhat e^{-2 eps l_0} e^{lambda i/3} and lands in the
// chart-i cone; dually for stable vectors under Df^{-i}. Derivatives are taken
// from the map directly at the tracked ambient points.
struct SurfaceReport {
    long samples = 0;
    long vectors = 0;
    long violations = 0;
    double min_margin = 1e300;
    std::string witness;
    [[nodiscard]] bool ok() const { return violations == 0; }
};

[[nodiscard]] inline SurfaceReport verify_branch_surface_estimates(const SurfaceMap& f, const RegularBranch& br,
                                                                   const DerivedConstants& k, int n_samples = 20,
                                                                   std::uint64_t seed = 9) {
    SurfaceReport rep;
    const int n = br.length();
    const double c0 = k.Qhat * std::exp(-2 * k.epsilon * static_cast<double>(br.porbit.levels.front()));
    const Cone ku = Cone::make(ConeKind::unstable, false, k), ks = Cone::make(ConeKind::stable, false, k);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto& L = br.stable_strip.lower.samples;
    const auto& R = br.stable_strip.upper.samples;
    for (int s = 0; s < n_samples; ++s) {
        const std::size_t row = static_cast<std::size_t>(u01(rng) * static_cast<double>(L.size())) % L.size();
        const Vec2 y{L[row].x + u01(rng) * (R[row].x - L[row].x), L[row].y};
        const auto walk = br.forward_walk(y);
        std::vector<TorusPoint> amb;
        for (int j = 0; j <= n; ++j) amb.push_back(br.ambient(j, walk[static_cast<std::size_t>(j)]));
        ++rep.samples;
        const double w = 0.999999 * k.omega;
        for (double sl : {0.0, w, -w}) {
            Vec2 v = br.charts[0].L * normalized(Vec2{1, sl});
            const double v0 = norm(v);
            for (int i = 1; i <= n; ++i) {
                v = f.derivative(amb[static_cast<std::size_t>(i - 1)]) * v;
                ++rep.vectors;
                const double m = norm(v) / (c0 * std::exp(k.lambda * i / 3) * v0);
                rep.min_margin = std::min(rep.min_margin, m);
                if (m < 1 || !ku.contains(br.charts[static_cast<std::size_t>(i)].L_inv * v)) {
                    ++rep.violations;
                    if (rep.witness.empty()) rep.witness = "ambient unstable estimate fails at i=" + std::to_string(i);
                }
            }
            for (int i = 1; i <= n; ++i) {
                Vec2 u = br.charts[static_cast<std::size_t>(i)].L * normalized(Vec2{sl, 1});
                const double u0 = norm(u);
                for (int j = i; j >= 1; --j) u = f.derivative(amb[static_cast<std::size_t>(j - 1)]).inverse() * u;
                ++rep.vectors;
                const double m = norm(u) / (c0 * std::exp(k.lambda * i / 3) * u0);
                rep.min_margin = std::min(rep.min_margin, m);
                if (m < 1 || !ks.contains(br.charts[0].L_inv * u)) {
                    ++rep.violations;
                    if (rep.witness.empty()) rep.witness = "ambient stable estimate fails at i=" + std::to_string(i);
                }
            }
        }
    }
    return rep;
}

}  // namespace hypertower
