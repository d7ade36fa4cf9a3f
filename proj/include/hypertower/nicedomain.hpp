#pragma once

// Nice domains: disks bounded by pieces of the invariant curves of two
// periodic points p, q whose stable sides never re-enter the interior under
// f^{nT} (and dually). Almost returns to the domain spawn hyperbolic branches
// f^i : C^s -> C^u between a stable and an unstable strip.
//
// Everything lives in one lift of the domain, R~ in R^2. A branch is named by
// its return time i and the integer label n with f~^i(C^s~) in R~ + n; labels
// are tracked modulo 2^64 along LiftedPoint orbits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hypertower/charts.hpp"
#include "hypertower/dynamics.hpp"
#include "hypertower/error.hpp"
#include "hypertower/geometry.hpp"
#include "hypertower/parallel.hpp"
#include "hypertower/pseudo.hpp"
#include "hypertower/regularity.hpp"
#include "hypertower/shadow.hpp"

namespace hypertower {

struct PeriodicPoint {
    TorusPoint point;
    int period = 1;
    long level = 1;
    double residual = 0;
};

// Axis-parallel rectangle of the plane (a region of lifted coordinates).
struct Region {
    Vec2 centre{0.5, 0.5};
    Vec2 half{0.5, 0.5};
    [[nodiscard]] bool contains(const Vec2& v) const {
        return std::abs(v.x - centre.x) <= half.x && std::abs(v.y - centre.y) <= half.y;
    }
};

struct NiceOptions {
    int max_period = 2;
    int seeds = 12;            // Newton seeds per axis of U
    int candidates = 10;       // (p, q) pairs tried
    int n_nice = 50;           // niceness tested for n in T*{1..n_nice}
    double tol = 1e-7;
    int side_samples = 256;    // points per side in the niceness test
    int per_domain = 4096;     // samples per fundamental domain of the invariant curves
    double growth = 3.0;       // invariant curves grow to growth * d(p, q)
    bool enforce_r = false;    // local construction: require d(p, q) < r
    int level_grid = 8;        // level sample of U per axis
};

struct NicenessReport {
    int n_checked = 0;
    long images = 0;
    long violations = 0;
    double max_penetration = 0;  // depth of the deepest interior image
    double max_drift = 0;        // distance of images from their invariant curve before re-centring
    bool ok = false;
    std::vector<std::string> log;
};

enum ManifoldIndex { kUp = 0, kSp = 1, kUq = 2, kSq = 3 };
enum SideIndex { kSideUp = 0, kSideSq = 1, kSideUq = 2, kSideSp = 3 };

struct NiceDomain {
    PeriodicPoint p, q;
    Vec2 p_lift, q_lift;
    Vec2 a, c;  // a = W^u_p ∩ W^s_q, c = W^s_p ∩ W^u_q
    int T = 1;
    // Boundary pieces in ring order: u_p (p->a), s_q (a->q), u_q (q->c), s_p (c->p).
    std::array<std::vector<Vec2>, 4> boundary;
    std::array<Curve, 4> manifolds;       // grown W^u_p, W^s_p, W^u_q, W^s_q
    std::array<double, 4> side_arc{};     // arc positions of a, c on their manifolds (see nice_domain_from)
    double diameter = 0, area = 0;
    double r = 0, C_ell = 0;
    NicenessReport niceness;
    Vec2 u_axis, s_axis;  // eigen-directions of the linear part
    double u_mid = 0, s_mid = 0;
    std::shared_ptr<const SegmentGrid> ring;
    std::shared_ptr<const std::array<SegmentGrid, 4>> side_grid;
    std::shared_ptr<const std::array<SegmentGrid, 4>> manifold_grid;

    [[nodiscard]] bool inside_lift(const Vec2& z) const { return ring->inside(z); }
    [[nodiscard]] double boundary_distance(const Vec2& z, double radius) const { return ring->distance(z, radius); }
    [[nodiscard]] double side_distance(int side, const Vec2& z, double radius) const {
        return (*side_grid)[static_cast<std::size_t>(side)].distance(z, radius);
    }

    // The lift of z inside R~, or within tol of its boundary when tol > 0.
    [[nodiscard]] std::optional<Vec2> lift_in(const TorusPoint& z, double tol = 0) const {
        const Box& b = ring->box();
        const Vec2 v = z.vec();
        const auto x0 = static_cast<long>(std::ceil(b.lo.x - tol - v.x)), x1 = static_cast<long>(std::floor(b.hi.x + tol - v.x));
        const auto y0 = static_cast<long>(std::ceil(b.lo.y - tol - v.y)), y1 = static_cast<long>(std::floor(b.hi.y + tol - v.y));
        std::optional<Vec2> near;
        for (long mx = x0; mx <= x1; ++mx)
            for (long my = y0; my <= y1; ++my) {
                const Vec2 w = v + Vec2{static_cast<double>(mx), static_cast<double>(my)};
                if (ring->inside(w)) return w;
                if (tol > 0 && !near && ring->distance(w, tol) < tol) near = w;
            }
        return near;
    }
    [[nodiscard]] bool contains(const TorusPoint& z) const { return lift_in(z).has_value(); }
};

namespace detail {

[[nodiscard]] inline int lcm_int(int a, int b) { return a / std::gcd(a, b) * b; }

[[nodiscard]] inline Vec2 apply_lift(const SurfaceMap& f, Vec2 z, long n) {
    if (n >= 0)
        for (long k = 0; k < n; ++k) z = f.lift(z);
    else
        for (long k = 0; k < -n; ++k) z = f.lift_inverse(z);
    return z;
}

[[nodiscard]] inline Vec2 round_vec(const Vec2& v) { return {std::round(v.x), std::round(v.y)}; }

[[nodiscard]] inline IVec2 round_ivec(const Vec2& v) {
    return {static_cast<std::int64_t>(std::llround(v.x)), static_cast<std::int64_t>(std::llround(v.y))};
}

[[nodiscard]] inline IMat2 ipow(IMat2 a, int n) {
    IMat2 r;
    for (int k = 0; k < n; ++k) r = a * r;
    return r;
}

// Eigenvalue of largest (unstable) or smallest (stable) modulus and its eigenvector.
[[nodiscard]] inline std::pair<double, Vec2> eigenpair(const Mat2& m, bool unstable) {
    const double tr = m.a + m.d, det = m.a * m.d - m.b * m.c;
    const double disc = 0.25 * tr * tr - det;
    if (!(disc > 0)) throw ConvergenceError("periodic point is not hyperbolic (complex eigenvalues)");
    const double r = std::sqrt(disc);
    const double big = tr >= 0 ? 0.5 * tr + r : 0.5 * tr - r;
    const double mu = unstable ? big : det / big;
    const Vec2 v1{m.b, mu - m.a}, v2{mu - m.d, m.c};
    return {mu, normalized(norm(v1) >= norm(v2) ? v1 : v2)};
}

}  // namespace detail

// Invariant curve of a periodic point through its lift: images of a
// fundamental domain of the linearisation (seed 1e-8 away from p), kept
// densely enough for a chord error well below 1e-7.
[[nodiscard]] inline Curve periodic_manifold(const SurfaceMap& f, const Vec2& p_lift, int period, bool unstable,
                                             double length, int per_domain = 4096) {
    const Mat2 m = cocycle(f, TorusPoint(p_lift), period);
    auto [mu, v] = detail::eigenpair(m, unstable);
    const int reps = mu < 0 ? 2 : 1;  // orientation-reversing: use f^{2P}
    const long steps = static_cast<long>(period) * reps * (unstable ? 1 : -1);
    const double factor = unstable ? std::pow(std::abs(mu), reps) : std::pow(std::abs(mu), -reps);
    const Vec2 shift = detail::round_vec(detail::apply_lift(f, p_lift, steps) - p_lift);
    const double s0 = 1e-8;

    auto branch = [&](double sign) {
        std::vector<Vec2> gen(static_cast<std::size_t>(per_domain));
        for (int k = 0; k < per_domain; ++k)
            gen[static_cast<std::size_t>(k)] =
                p_lift + (sign * s0 * std::pow(factor, static_cast<double>(k) / per_domain)) * v;
        std::vector<Vec2> out;
        Vec2 last = p_lift;
        double arc = 0;
        for (int g = 0; g < 400 && arc < length; ++g) {
            for (const Vec2& z : gen) {
                const double d = norm(z - last);
                const double from_p = arc + d;
                if (d < std::min(2e-4, 0.5 * from_p)) continue;
                out.push_back(z);
                arc += d;
                last = z;
                if (arc >= length) break;
            }
            for (Vec2& z : gen) z = detail::apply_lift(f, z, steps) - shift;
        }
        if (arc < length) throw ConvergenceError("invariant curve did not reach the requested length");
        return out;
    };
    const auto plus = branch(1.0), minus = branch(-1.0);
    Curve c;
    c.pts.assign(minus.rbegin(), minus.rend());
    c.origin = c.pts.size();
    c.pts.push_back(p_lift);
    c.pts.insert(c.pts.end(), plus.begin(), plus.end());
    c.finish();
    return c;
}

namespace detail {

// Curve through z along the stable (unstable) direction with about `half`
// arc length on each side: a short segment m steps in the future (past),
// pulled back (pushed forward) with cancellation-free increments.
[[nodiscard]] inline std::vector<Vec2> leaf_through(const SurfaceMap& f, const Vec2& z_lift, bool unstable,
                                                    double half, int n = 257, int m = 12) {
    std::vector<TorusPoint> orbit{TorusPoint(z_lift)};
    for (int k = 0; k < m; ++k) orbit.push_back(unstable ? f.inverse(orbit.back()) : f.forward(orbit.back()));
    const Splitting sp = estimate_splitting(f, orbit.back(), 30);
    const Vec2 e = unstable ? sp.e_u : sp.e_s;
    // growth of e back to z
    Vec2 w = e;
    for (int k = m; k >= 1; --k) {
        const Mat2 d = unstable ? f.derivative(orbit[static_cast<std::size_t>(k)])
                                : f.derivative(orbit[static_cast<std::size_t>(k - 1)]).inverse();
        w = d * w;
    }
    const double h = half / norm(w);
    std::vector<Vec2> out(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        Vec2 inc = ((2.0 * j) / (n - 1) - 1.0) * h * e;
        for (int k = m; k >= 1; --k) {
            const Vec2 base = orbit[static_cast<std::size_t>(k)].vec();
            inc = unstable ? f.lift_increment(base, inc) : f.lift_inverse_increment(base, inc);
        }
        out[static_cast<std::size_t>(j)] = z_lift + inc;
    }
    return out;
}

// A (forward) return of a lifted point: time, label and the image lift in R~.
struct ReturnEvent {
    int time = 0;
    IVec2 label;
    Vec2 image;
};

// Label of the lifted point w relative to R~ when its torus point lies in R~.
[[nodiscard]] inline std::optional<std::pair<IVec2, Vec2>> label_in(const NiceDomain& d, const LiftedPoint& w,
                                                                    double tol = 0) {
    const auto in = d.lift_in(w.torus(), tol);
    if (!in) return std::nullopt;
    const IVec2 shift = round_ivec(*in - w.frac);
    return std::pair{w.cell - shift, *in};
}

}  // namespace detail

// Newton on f^P(x) = x from a grid of seeds in U, minimal periods only.
[[nodiscard]] inline std::vector<PeriodicPoint> periodic_points_in(const SurfaceMap& f, const Region& U,
                                                                   int max_period, int seeds) {
    std::vector<PeriodicPoint> out;
    for (int P = 1; P <= max_period; ++P) {
        const auto found = parallel_map<std::optional<PeriodicPoint>>(
            static_cast<std::size_t>(seeds * seeds), [&](std::size_t s) -> std::optional<PeriodicPoint> {
                const int ix = static_cast<int>(s) % seeds, iy = static_cast<int>(s) / seeds;
                const Vec2 v = U.centre - U.half + Vec2{(ix + 0.5) / seeds * 2 * U.half.x, (iy + 0.5) / seeds * 2 * U.half.y};
                TorusPoint x(v);
                double res = 1;
                for (int it = 0; it < 40; ++it) {
                    const Vec2 r = displacement(x, iterate(f, x, P));
                    res = norm(r);
                    if (res <= 1e-14) break;
                    const Mat2 J = cocycle(f, x, P) - Mat2::identity();
                    x = TorusPoint(x.vec() - solve(J, r));
                }
                if (res > 1e-12) return std::nullopt;
                for (int d = 1; d < P; ++d)
                    if (P % d == 0 && distance(iterate(f, x, d), x) < 1e-9) return std::nullopt;
                return PeriodicPoint{x, P, 1, res};
            });
        for (const auto& c : found) {
            if (!c) continue;
            const bool dup = std::any_of(out.begin(), out.end(),
                                         [&](const PeriodicPoint& o) { return distance(o.point, c->point) < 1e-9; });
            if (!dup) out.push_back(*c);
        }
    }
    std::sort(out.begin(), out.end(), [](const PeriodicPoint& a, const PeriodicPoint& b) {
        return std::tie(a.period, a.point.x1, a.point.x2) < std::tie(b.period, b.point.x1, b.point.x2);
    });
    return out;
}

namespace detail {

// Images of the stable sides under f^{nT} (unstable sides under f^{-nT}) must
// stay out of the interior. After each T-block the images are re-centred on
// the invariant curve they belong to, which removes the rounding that f^T
// amplifies along the transverse direction.
[[nodiscard]] inline NicenessReport check_niceness(const SurfaceMap& f, const NiceDomain& d, int n_nice, double tol,
                                                   int samples) {
    NicenessReport rep;
    rep.n_checked = n_nice;
    struct SideJob {
        int side;
        int manifold;
        Vec2 base;
        long steps;
    };
    const std::array<SideJob, 4> jobs{SideJob{kSideSp, kSp, d.p_lift, d.T}, SideJob{kSideSq, kSq, d.q_lift, d.T},
                                      SideJob{kSideUp, kUp, d.p_lift, -d.T}, SideJob{kSideUq, kUq, d.q_lift, -d.T}};
    for (const SideJob& job : jobs) {
        const auto& piece = d.boundary[static_cast<std::size_t>(job.side)];
        Curve side;
        side.pts = piece;
        side.origin = 0;
        side.finish();
        std::vector<Vec2> pts(static_cast<std::size_t>(samples + 1));
        for (int j = 0; j <= samples; ++j)
            pts[static_cast<std::size_t>(j)] = side.at_arc(side.arc.back() * j / samples);
        const Vec2 shift = round_vec(apply_lift(f, job.base, job.steps) - job.base);
        const SegmentGrid& mg = (*d.manifold_grid)[static_cast<std::size_t>(job.manifold)];
        for (int n = 1; n <= n_nice; ++n) {
            for (Vec2& z : pts) {
                z = apply_lift(f, z, job.steps) - shift;
                ++rep.images;
                if (const auto w = d.lift_in(TorusPoint(z))) {
                    const double depth = d.boundary_distance(*w, 10 * tol);
                    if (depth > tol) {
                        ++rep.violations;
                        rep.max_penetration = std::max(rep.max_penetration, depth);
                        if (rep.log.size() < 20) {
                            std::ostringstream o;
                            o << (job.steps > 0 ? "forward" : "backward") << " image n=" << n * d.T << " of side "
                              << job.side << " at (" << z.x << ", " << z.y << ") enters the interior";
                            rep.log.push_back(o.str());
                        }
                    }
                }
                if (const auto nr = mg.nearest(z, 1e-3)) {
                    const auto [a, b] = mg.segment(nr->first);
                    const Vec2 on = a + nr->second * (b - a);
                    rep.max_drift = std::max(rep.max_drift, norm(z - on));
                    z = on;
                } else {
                    rep.max_drift = std::max(rep.max_drift, 1e-3);
                }
            }
        }
    }
    rep.ok = rep.violations == 0;
    return rep;
}

}  // namespace detail

// Disk with corners p, a, q, c from the invariant curves of p and q at the
// given lifts. Throws when the curves do not bound an embedded disk.
[[nodiscard]] inline NiceDomain nice_domain_from(const SurfaceMap& f, const PeriodicPoint& p, const Vec2& p_lift,
                                                 const PeriodicPoint& q, const Vec2& q_lift,
                                                 const NiceOptions& opt = {}, double r = 0, double C_ell = 0) {
    const double dpq = norm(q_lift - p_lift);
    if (distance(p.point, q.point) < 1e-9 || dpq < 1e-9)
        throw PreconditionError("nice domain needs p != q (degenerate disk)");
    if (distance(TorusPoint(p_lift), p.point) > 1e-9 || distance(TorusPoint(q_lift), q.point) > 1e-9)
        throw PreconditionError("lifts do not project to p and q");
    if (opt.enforce_r && !(dpq < r)) {
        std::ostringstream w;
        w << "d(p,q) = " << dpq << " is not below r = " << r;
        throw PreconditionError(w.str());
    }
    NiceDomain d;
    d.p = p;
    d.q = q;
    d.p_lift = p_lift;
    d.q_lift = q_lift;
    d.T = detail::lcm_int(p.period, q.period);
    d.r = r;
    d.C_ell = C_ell;
    const double len = opt.growth * dpq;
    d.manifolds[kUp] = periodic_manifold(f, p_lift, p.period, true, len, opt.per_domain);
    d.manifolds[kSp] = periodic_manifold(f, p_lift, p.period, false, len, opt.per_domain);
    d.manifolds[kUq] = periodic_manifold(f, q_lift, q.period, true, len, opt.per_domain);
    d.manifolds[kSq] = periodic_manifold(f, q_lift, q.period, false, len, opt.per_domain);
    auto grids = std::make_shared<std::array<SegmentGrid, 4>>();
    for (std::size_t i = 0; i < 4; ++i) (*grids)[i] = SegmentGrid(d.manifolds[i].pts, false);
    d.manifold_grid = grids;

    // Corner = crossing closest to the two periodic points along the curves.
    auto corner = [&](int from_p, int from_q, const char* name) {
        const auto xs = crossings(d.manifolds[static_cast<std::size_t>(from_p)], (*grids)[static_cast<std::size_t>(from_q)]);
        if (xs.empty()) throw ConvergenceError(std::string("invariant curves do not cross at corner ") + name);
        const Curve& cp = d.manifolds[static_cast<std::size_t>(from_p)];
        const Curve& cq = d.manifolds[static_cast<std::size_t>(from_q)];
        auto cost = [&](const CurveCrossing& x) {
            return std::abs(cp.arc_at(x.seg_a, x.t_a)) + std::abs(cq.arc_at(x.seg_b, x.t_b));
        };
        const auto best = *std::min_element(xs.begin(), xs.end(),
                                            [&](const auto& l, const auto& r2) { return cost(l) < cost(r2); });
        return std::tuple{best.point, cp.arc_at(best.seg_a, best.t_a), cq.arc_at(best.seg_b, best.t_b)};
    };
    const auto [a, a_on_up, a_on_sq] = corner(kUp, kSq, "a");
    const auto [c, c_on_sp, c_on_uq] = corner(kSp, kUq, "c");
    d.a = a;
    d.c = c;
    d.side_arc = {a_on_up, a_on_sq, c_on_uq, c_on_sp};
    d.boundary[kSideUp] = d.manifolds[kUp].piece(0, a_on_up);
    d.boundary[kSideSq] = d.manifolds[kSq].piece(a_on_sq, 0);
    d.boundary[kSideUq] = d.manifolds[kUq].piece(0, c_on_uq);
    d.boundary[kSideSp] = d.manifolds[kSp].piece(c_on_sp, 0);
    d.boundary[kSideUp].front() = p_lift;
    d.boundary[kSideSq].back() = q_lift;
    d.boundary[kSideUq].front() = q_lift;
    d.boundary[kSideSp].back() = p_lift;
    d.boundary[kSideUp].back() = d.boundary[kSideSq].front() = a;
    d.boundary[kSideUq].back() = d.boundary[kSideSp].front() = c;

    std::vector<Vec2> ring;
    for (const auto& piece : d.boundary) ring.insert(ring.end(), piece.begin(), piece.end() - 1);
    d.area = std::abs(signed_area(ring));
    if (!(d.area > 1e-12) || d.area >= 1.0) throw ConvergenceError("boundary does not enclose a disk of area in (0, 1)");

    auto ring_grid = std::make_shared<SegmentGrid>(ring, true);
    // embedded: no two non-adjacent boundary segments meet
    const std::size_t ns = ring_grid->segments();
    for (std::size_t s = 0; s < ns; ++s) {
        const auto [u0, u1] = ring_grid->segment(s);
        Box q2;
        q2.add(u0);
        q2.add(u1);
        bool bad = false;
        ring_grid->for_cells(q2, [&](int t) {
            const auto ts = static_cast<std::size_t>(t);
            if (ts == s || (ts + 1) % ns == s || (s + 1) % ns == ts) return;
            const auto [w0, w1] = ring_grid->segment(ts);
            if (segment_intersection(u0, u1, w0, w1)) bad = true;
        });
        if (bad) throw ConvergenceError("boundary curves cross themselves: not a topological disk");
    }
    // the disk must embed in the torus: no translate overlaps it
    const Box& bb = ring_grid->box();
    for (int mx = -2; mx <= 2; ++mx)
        for (int my = -2; my <= 2; ++my) {
            if (mx == 0 && my == 0) continue;
            const Vec2 m{static_cast<double>(mx), static_cast<double>(my)};
            if (!bb.overlaps(Box{bb.lo + m, bb.hi + m})) continue;
            for (std::size_t i = 0; i < ring.size(); i += 4)
                if (ring_grid->inside(ring[i] + m) && ring_grid->distance(ring[i] + m, opt.tol) >= opt.tol)
                    throw ConvergenceError("the disk overlaps one of its integer translates");
        }
    d.ring = ring_grid;
    auto sides = std::make_shared<std::array<SegmentGrid, 4>>();
    for (std::size_t i = 0; i < 4; ++i) (*sides)[i] = SegmentGrid(d.boundary[i], false, 64);
    d.side_grid = sides;

    for (std::size_t i = 0; i < ring.size(); i += 8)
        for (std::size_t j = i + 8; j < ring.size(); j += 8) d.diameter = std::max(d.diameter, norm(ring[i] - ring[j]));
    const EigenDirections ed = eigen_directions(f.linear_part());
    d.u_axis = ed.e_u;
    d.s_axis = ed.e_s;
    double ulo = 1e300, uhi = -1e300, slo = 1e300, shi = -1e300;
    for (const Vec2& v : ring) {
        ulo = std::min(ulo, dot(v, d.u_axis));
        uhi = std::max(uhi, dot(v, d.u_axis));
        slo = std::min(slo, dot(v, d.s_axis));
        shi = std::max(shi, dot(v, d.s_axis));
    }
    d.u_mid = 0.5 * (ulo + uhi);
    d.s_mid = 0.5 * (slo + shi);
    d.niceness = detail::check_niceness(f, d, opt.n_nice, opt.tol, opt.side_samples);
    return d;
}

// r = delta e^{-lambda l} e^{-c2} / (2 C_l).
[[nodiscard]] inline double nice_radius(double delta, long level, double C_ell, const DerivedConstants& k) {
    return delta * std::exp(-k.lambda * static_cast<double>(level)) * std::exp(-k.c2) / (2 * C_ell);
}

struct NiceSearch {
    NiceDomain domain;
    std::vector<PeriodicPoint> candidates;
    int tried = 0;
    std::vector<std::string> log;
};

// Periodic points of level <= l in U, closed and refined, then (p, q) pairs
// ranked by the area of the predicted disk inside U; the first nice one wins.
[[nodiscard]] inline NiceSearch find_nice_domain(const SurfaceMap& f, const HyperbolicityParams& params,
                                                 const DerivedConstants& k, const ChartSettings& cs, double delta,
                                                 const Region& U, long level, const NiceOptions& opt = {}) {
    NiceSearch out;
    // level sample and the distortion constant C_l
    const int g = opt.level_grid;
    const auto charts = parallel_map<std::optional<Chart>>(static_cast<std::size_t>(g * g), [&](std::size_t s) {
        std::optional<Chart> ch;
        const int ix = static_cast<int>(s) % g, iy = static_cast<int>(s) / g;
        const Vec2 v = U.centre - U.half + Vec2{(ix + 0.5) / g * 2 * U.half.x, (iy + 0.5) / g * 2 * U.half.y};
        try {
            const Chart c = chart_at(f, TorusPoint(v), params, k, cs);
            if (c.level <= level) ch = c;
        } catch (const ConvergenceError&) {
        }
        return ch;
    });
    double cmax = 0;
    for (const auto& ch : charts)
        if (ch) cmax = std::max(cmax, op_norm(ch->L) * op_norm(ch->L_inv));
    if (cmax == 0) throw PreconditionError("U contains no sampled point of level <= " + std::to_string(level));
    const double C_ell = 2 * cmax;
    const double r = nice_radius(delta, level, C_ell, k);

    for (PeriodicPoint pp : periodic_points_in(f, U, opt.max_period, opt.seeds)) {
        std::vector<TorusPoint> orbit{pp.point};
        for (int j = 1; j < pp.period; ++j) orbit.push_back(f.forward(orbit.back()));
        std::vector<long> lv;
        try {
            for (const auto& o : orbit) lv.push_back(regularity_at(f, o, params).level);
        } catch (const ConvergenceError&) {
            continue;
        }
        if (lv.front() > level) continue;
        PseudoOrbit pattern;
        pattern.points = orbit;
        pattern.levels.assign(orbit.size(), *std::max_element(lv.begin(), lv.end()));
        pattern.delta = delta;
        pattern.lambda = k.lambda;
        try {
            const ClosingResult cr = close_periodic(f, pattern, params, k, cs);
            if (!cr.refined) continue;
            pp.point = cr.point;
            pp.residual = cr.residual;
            pp.level = lv.front();
        } catch (const Error& e) {
            out.log.push_back(std::string("closing failed: ") + e.what());
            continue;
        }
        out.candidates.push_back(pp);
    }
    if (out.candidates.size() < 2) throw ConvergenceError("fewer than two periodic candidates in U");

    auto lifts = [&](const TorusPoint& z) {
        std::vector<Vec2> v;
        for (int mx = -3; mx <= 3; ++mx)
            for (int my = -3; my <= 3; ++my) {
                const Vec2 w = z.vec() + Vec2{static_cast<double>(mx), static_cast<double>(my)};
                if (U.contains(w)) v.push_back(w);
            }
        return v;
    };
    const EigenDirections ed = eigen_directions(f.linear_part());
    auto meet = [](const Vec2& x, const Vec2& ex, const Vec2& y, const Vec2& ey) {
        const double t = cross(y - x, ey) / cross(ex, ey);
        return x + t * ex;
    };
    struct Pair {
        std::size_t i, j;
        Vec2 pl, ql;
        double area;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < out.candidates.size(); ++i)
        for (std::size_t j = i + 1; j < out.candidates.size(); ++j)
            for (const Vec2& pl : lifts(out.candidates[i].point))
                for (const Vec2& ql : lifts(out.candidates[j].point)) {
                    const Vec2 a = meet(pl, ed.e_u, ql, ed.e_s), c = meet(pl, ed.e_s, ql, ed.e_u);
                    if (!U.contains(a) || !U.contains(c)) continue;
                    const double area = std::abs(cross(a - pl, c - pl));
                    if (area < 1e-9 || area > 0.9) continue;
                    pairs.push_back({i, j, pl, ql, area});
                }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.area > y.area; });
    for (const Pair& pr : pairs) {
        if (out.tried >= opt.candidates) break;
        ++out.tried;
        const PeriodicPoint& p = out.candidates[pr.i];
        const PeriodicPoint& q = out.candidates[pr.j];
        std::ostringstream tag;
        tag << "p=(" << pr.pl.x << "," << pr.pl.y << ") q=(" << pr.ql.x << "," << pr.ql.y << ")";
        try {
            NiceDomain d = nice_domain_from(f, p, pr.pl, q, pr.ql, opt, r, C_ell);
            const bool in_u = std::all_of(d.ring->points().begin(), d.ring->points().end(),
                                          [&](const Vec2& v) { return U.contains(v); });
            if (!in_u) {
                out.log.push_back(tag.str() + ": disk leaves U");
                continue;
            }
            if (!d.niceness.ok) {
                out.log.push_back(tag.str() + ": niceness fails (" + std::to_string(d.niceness.violations) +
                                  " interior images)");
                continue;
            }
            out.log.push_back(tag.str() + ": nice");
            out.domain = std::move(d);
            return out;
        } catch (const Error& e) {
            out.log.push_back(tag.str() + ": " + e.what());
        }
    }
    std::ostringstream w;
    w << "no nice domain among " << out.tried << " candidate pairs";
    for (const auto& l : out.log) w << "; " << l;
    throw ConvergenceError(w.str());
}

// ---------------------------------------------------------------------------
// Almost returns and branches

struct AlmostReturn {
    std::size_t x = 0, y = 0;  // indices into A
    int time = 0;
    Vec2 point;                // a point of f^i(W^s_x) ∩ W^u_y, lift in R~
};

// For x in A and i in T*{1..horizon/T} with f^i(x) in the domain: the stable
// curve f^i(W^s_x) is rebuilt through f^i(x) with its contracted extent (so
// rounding never accumulates along it) and tested against W^u_y, y in A.
[[nodiscard]] inline std::vector<AlmostReturn> detect_almost_returns(const SurfaceMap& f, const NiceDomain& d,
                                                                     const std::vector<TorusPoint>& A, int horizon,
                                                                     double tol = 1e-7) {
    if (horizon <= 0 || horizon % d.T != 0) {
        std::ostringstream w;
        w << "horizon " << horizon << " is not a positive multiple of T = " << d.T;
        throw PreconditionError(w.str());
    }
    std::vector<Vec2> lifts;
    for (const auto& z : A) {
        const auto l = d.lift_in(z, tol);
        if (!l) throw PreconditionError("almost-return set contains a point outside the nice domain");
        lifts.push_back(*l);
    }
    const double half = d.diameter;
    const auto wu = parallel_map<SegmentGrid>(A.size(), [&](std::size_t j) {
        return SegmentGrid(detail::leaf_through(f, lifts[j], true, half, 2049), false, 64);
    });
    const auto per_x = parallel_map<std::vector<AlmostReturn>>(A.size(), [&](std::size_t xi) {
        std::vector<AlmostReturn> hits;
        std::vector<TorusPoint> orbit{A[xi]};
        for (int i = 1; i <= horizon; ++i) orbit.push_back(f.forward(orbit.back()));
        for (int i = d.T; i <= horizon; i += d.T) {
            const auto at = d.lift_in(orbit[static_cast<std::size_t>(i)], tol);
            if (!at) continue;
            // contraction of W^s_x over i steps, measured by pulling e^s back
            const Splitting sp = estimate_splitting(f, orbit[static_cast<std::size_t>(i)], 30);
            Vec2 w = sp.e_s;
            for (int j = i; j >= 1; --j) w = f.derivative(orbit[static_cast<std::size_t>(j - 1)]).inverse() * w;
            const double ext = half / norm(w);
            Curve leaf;
            leaf.pts = detail::leaf_through(f, *at, false, ext, 257);
            leaf.origin = leaf.pts.size() / 2;
            leaf.finish();
            for (std::size_t yj = 0; yj < A.size(); ++yj) {
                const auto xs = crossings(leaf, wu[yj]);
                std::optional<Vec2> pt;
                for (const auto& x : xs)
                    if (d.inside_lift(x.point) || d.boundary_distance(x.point, tol) < tol) {
                        pt = x.point;
                        break;
                    }
                if (!pt)
                    for (const Vec2& e : {leaf.pts.front(), leaf.pts.back(), *at})
                        if (wu[yj].distance(e, tol) < tol) {
                            pt = e;
                            break;
                        }
                if (pt) hits.push_back({xi, yj, i, *pt});
            }
        }
        return hits;
    });
    std::vector<AlmostReturn> out;
    for (const auto& h : per_x) out.insert(out.end(), h.begin(), h.end());
    return out;
}

struct BranchFactor {
    int time = 0;
    IVec2 label;
};

// Cross-section of a strip along a straight line z0 + t e through the
// domain: the parameter interval of the strip and the chord of R~.
struct StripTrace {
    bool resolved = false;
    Vec2 origin, dir;
    double t0 = 0, t1 = 0;            // the strip
    double chord0 = 0, chord1 = 0;    // R~ on the same line
    [[nodiscard]] double length() const { return std::abs(t1 - t0); }
    [[nodiscard]] double chord() const { return std::abs(chord1 - chord0); }
    [[nodiscard]] Vec2 end0() const { return origin + t0 * dir; }
    [[nodiscard]] Vec2 end1() const { return origin + t1 * dir; }
};

struct BranchCheck {
    int samples = 0;
    double C_measured = 0;       // smallest C for which the growth bounds hold at the samples
    double cone_ratio = 0;       // max |b|/|a| of cone-boundary images (<= 1 means invariant)
    bool growth_ok = false;
    bool cone_ok = false;
    double boundary_error = -1;  // distance of the images of the trace ends from the sides; -1 if unchecked
    bool full_length = false;
    bool proper = false;         // both strips are strictly thinner than the domain
};

struct HyperbolicBranch {
    int return_time = 0;
    IVec2 label;
    std::vector<BranchFactor> factors;
    Vec2 witness;  // lift in R~ of a point of the stable strip
    double C_branch = 0;
    double lambda_branch = 0;
    StripTrace trace_s;  // stable strip along the unstable axis through the witness
    StripTrace trace_u;  // unstable strip along the stable axis through the witness image
    BranchCheck check;
};

// Strips are resolved in double precision up to this return time.
inline constexpr int kResolvedTime = 36;
// f^i of a resolved boundary point stays within 1e-7 of the side up to here.
inline constexpr int kBoundaryCheckTime = 21;

namespace detail {

[[nodiscard]] inline Vec2 stable_image(const SurfaceMap& f, const Vec2& z, int time, const IVec2& label) {
    return iterate_lifted(f, LiftedPoint::from(z), time).relative_to(label);
}

[[nodiscard]] inline Vec2 unstable_preimage(const SurfaceMap& f, const Vec2& w, int time, const IVec2& label) {
    LiftedPoint y = iterate_lifted(f, LiftedPoint::from(w), -time);
    y.cell = y.cell + ipow(f.linear_part().unimodular_inverse(), time) * label;
    return y.frac + y.cell.as_real();
}

// -1 / 0 / +1: image before, inside, after R~ along the unstable axis.
[[nodiscard]] inline int classify_stable(const SurfaceMap& f, const NiceDomain& d, int time, const IVec2& label,
                                         const Vec2& z) {
    const Vec2 w = stable_image(f, z, time, label);
    if (d.inside_lift(w)) return 0;
    return dot(w, d.u_axis) < d.u_mid ? -1 : 1;
}

[[nodiscard]] inline int classify_unstable(const SurfaceMap& f, const NiceDomain& d, int time, const IVec2& label,
                                           const Vec2& w) {
    const Vec2 y = unstable_preimage(f, w, time, label);
    if (d.inside_lift(y)) return 0;
    return dot(y, d.s_axis) < d.s_mid ? -1 : 1;
}

// Zero set of a monotone -1/0/+1 classification on [t0, t1], by bisection.
template <class Cls>
[[nodiscard]] std::optional<std::pair<double, double>> zero_interval(Cls cls, double t0, double t1) {
    const int c0 = cls(t0), c1 = cls(t1);
    if (c0 == 0 && c1 == 0) return std::pair{t0, t1};
    double tin = 0;
    if (c0 == 0) {
        tin = t0;
    } else if (c1 == 0) {
        tin = t1;
    } else {
        if (c0 == c1) return std::nullopt;
        double lo = t0, hi = t1;
        bool found = false;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (mid == lo || mid == hi) break;
            const int cm = cls(mid);
            if (cm == 0) {
                tin = mid;
                found = true;
                break;
            }
            (cm == c0 ? lo : hi) = mid;
        }
        if (!found) return std::nullopt;
    }
    auto edge = [&](double out, double in) {
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (out + in);
            if (mid == out || mid == in) break;
            (cls(mid) == 0 ? in : out) = mid;
        }
        return in;
    };
    const double left = c0 == 0 ? t0 : edge(t0, tin);
    const double right = c1 == 0 ? t1 : edge(t1, tin);
    return std::pair{std::min(left, right), std::max(left, right)};
}

// Chord of R~ through z along e: nearest ring crossings on either side.
[[nodiscard]] inline std::optional<std::pair<double, double>> chord_through(const NiceDomain& d, const Vec2& z,
                                                                           const Vec2& e) {
    const double h = 2 * d.diameter + 1;
    Curve line;
    line.pts = {z - h * e, z + h * e};
    line.origin = 0;
    line.finish();
    double lo = -h, hi = h;
    bool l = false, r = false;
    for (const auto& x : crossings(line, *d.ring)) {
        const double t = dot(x.point - z, e);
        if (t <= 0 && t >= lo) {
            lo = t;
            l = true;
        }
        if (t >= 0 && t <= hi) {
            hi = t;
            r = true;
        }
    }
    if (!l || !r) return std::nullopt;
    return std::pair{lo, hi};
}

template <class Cls>
[[nodiscard]] StripTrace trace_along(const NiceDomain& d, const Vec2& z, const Vec2& e, Cls cls) {
    StripTrace t;
    t.origin = z;
    t.dir = e;
    const auto ch = chord_through(d, z, e);
    if (!ch) return t;
    t.chord0 = ch->first;
    t.chord1 = ch->second;
    const auto iv = zero_interval([&](double s) { return cls(z + s * e); }, t.chord0, t.chord1);
    if (!iv) return t;
    t.resolved = true;
    t.t0 = iv->first;
    t.t1 = iv->second;
    return t;
}

[[nodiscard]] inline StripTrace stable_trace(const SurfaceMap& f, const NiceDomain& d, int time, const IVec2& label,
                                             const Vec2& z) {
    if (time > kResolvedTime) return {};
    return trace_along(d, z, d.u_axis, [&](const Vec2& w) { return classify_stable(f, d, time, label, w); });
}

[[nodiscard]] inline StripTrace unstable_trace(const SurfaceMap& f, const NiceDomain& d, int time, const IVec2& label,
                                               const Vec2& w) {
    if (time > kResolvedTime) return {};
    return trace_along(d, w, d.s_axis, [&](const Vec2& y) { return classify_unstable(f, d, time, label, y); });
}

struct GrowthSample {
    double C = 0;           // max ratio to the rate lambda_b
    double cone_ratio = 0;  // max |b|/|a| for cone-boundary images (forward K^u and backward K^s)
};

// Growth along the branch at z: ||v^u_j|| e^{lb (i-j)} / ||v^u_i|| and
// ||v^s_j|| e^{lb j} / ||v^s_0||, with v^u pushed forward from z and v^s
// pulled back from f^i(z) (the numerically stable direction for each).
[[nodiscard]] inline GrowthSample growth_at(const SurfaceMap& f, const Vec2& z, int time, double lambda_b) {
    GrowthSample g;
    const TorusPoint z0(z);
    const std::vector<TorusPoint> orbit = f.orbit_precise(z0, time);
    const Splitting s0 = estimate_splitting(f, z0, 30);
    const Splitting si = estimate_splitting(f, orbit.back(), 30);
    std::vector<double> nu(static_cast<std::size_t>(time + 1)), ns(static_cast<std::size_t>(time + 1));
    Vec2 u = s0.e_u;
    nu[0] = 1;
    for (int j = 1; j <= time; ++j) {
        u = f.derivative(orbit[static_cast<std::size_t>(j - 1)]) * u;
        nu[static_cast<std::size_t>(j)] = norm(u);
    }
    Vec2 s = si.e_s;
    ns[static_cast<std::size_t>(time)] = 1;
    for (int j = time; j >= 1; --j) {
        s = f.derivative(orbit[static_cast<std::size_t>(j - 1)]).inverse() * s;
        ns[static_cast<std::size_t>(j - 1)] = norm(s);
    }
    for (int j = 0; j <= time; ++j) {
        const auto js = static_cast<std::size_t>(j);
        g.C = std::max(g.C, nu[js] / nu[static_cast<std::size_t>(time)] * std::exp(lambda_b * (time - j)));
        g.C = std::max(g.C, ns[js] / ns[0] * std::exp(lambda_b * j));
    }
    // cones |b| <= |a| in the (e^u, e^s) frame at each end
    // for long times det M is lost to cancellation, so the inverse is a
    // product of one-step inverses
    Mat2 M = Mat2::identity(), M_inv = Mat2::identity();
    for (int j = 0; j < time; ++j) {
        const Mat2 D = f.derivative(orbit[static_cast<std::size_t>(j)]);
        M = D * M;
        M_inv = M_inv * D.inverse();
    }
    auto frame = [](const Splitting& sp, const Vec2& v) {
        const Mat2 B{sp.e_u.x, sp.e_s.x, sp.e_u.y, sp.e_s.y};
        return solve(B, v);
    };
    for (double sg : {1.0, -1.0}) {
        const Vec2 fw = frame(si, M * (s0.e_u + sg * s0.e_s));
        g.cone_ratio = std::max(g.cone_ratio, std::abs(fw.y) / std::abs(fw.x));
        const Vec2 bw = frame(s0, M_inv * (si.e_s + sg * si.e_u));
        g.cone_ratio = std::max(g.cone_ratio, std::abs(bw.x) / std::abs(bw.y));
    }
    return g;
}

}  // namespace detail

[[nodiscard]] inline bool in_stable_strip(const SurfaceMap& f, const NiceDomain& d, const HyperbolicBranch& b,
                                          const Vec2& z) {
    return d.inside_lift(z) && d.inside_lift(detail::stable_image(f, z, b.return_time, b.label));
}

[[nodiscard]] inline bool in_unstable_strip(const SurfaceMap& f, const NiceDomain& d, const HyperbolicBranch& b,
                                            const Vec2& w) {
    return d.inside_lift(w) && d.inside_lift(detail::unstable_preimage(f, w, b.return_time, b.label));
}

// Traces, boundary correspondence and the growth/cone estimates at sample
// points of the stable strip.
inline void finish_branch(const SurfaceMap& f, const NiceDomain& d, HyperbolicBranch& b, double tol = 1e-7) {
    b.trace_s = detail::stable_trace(f, d, b.return_time, b.label, b.witness);
    const Vec2 image = detail::stable_image(f, b.witness, b.return_time, b.label);
    b.trace_u = detail::unstable_trace(f, d, b.return_time, b.label, image);
    BranchCheck& ch = b.check;
    std::vector<Vec2> samples{b.witness};
    const StripTrace& ts = b.trace_s;
    const StripTrace& tu = b.trace_u;
    if (ts.resolved) {
        for (double w : {0.02, 0.5, 0.98}) samples.push_back(ts.origin + (ts.t0 + w * (ts.t1 - ts.t0)) * ts.dir);
    }
    ch.proper = ts.resolved && tu.resolved && ts.length() < 0.999 * ts.chord() && tu.length() < 0.999 * tu.chord();
    if (ts.resolved && tu.resolved && b.return_time <= kBoundaryCheckTime) {
        // f^i(trace_s) runs from one stable side to the other, f^{-i}(trace_u)
        // from one unstable side to the other
        auto across = [&](const Vec2& e0, const Vec2& e1, int side_a, int side_b) {
            const double r = 1.0;
            return std::min(std::max(d.side_distance(side_a, e0, r), d.side_distance(side_b, e1, r)),
                            std::max(d.side_distance(side_b, e0, r), d.side_distance(side_a, e1, r)));
        };
        ch.boundary_error = std::max(
            across(detail::stable_image(f, ts.end0(), b.return_time, b.label),
                   detail::stable_image(f, ts.end1(), b.return_time, b.label), kSideSp, kSideSq),
            across(detail::unstable_preimage(f, tu.end0(), b.return_time, b.label),
                   detail::unstable_preimage(f, tu.end1(), b.return_time, b.label), kSideUp, kSideUq));
        ch.full_length = ch.boundary_error <= tol;
    }
    ch.samples = static_cast<int>(samples.size());
    ch.C_measured = 0;
    ch.cone_ratio = 0;
    for (const Vec2& z : samples) {
        const auto g = detail::growth_at(f, z, b.return_time, b.lambda_branch);
        ch.C_measured = std::max(ch.C_measured, g.C);
        ch.cone_ratio = std::max(ch.cone_ratio, g.cone_ratio);
    }
    ch.growth_ok = ch.C_measured <= b.C_branch;
    ch.cone_ok = ch.cone_ratio <= 1.0;
}

[[nodiscard]] inline double branch_constant(const DerivedConstants& k, long level) {
    return std::exp(2 * k.epsilon * static_cast<double>(level)) / k.Qhat;
}

// The branch of the stable strip through x for the return at time i.
[[nodiscard]] inline HyperbolicBranch branch_at(const SurfaceMap& f, const NiceDomain& d, const Vec2& x_lift, int time,
                                                const DerivedConstants& k, long level, double tol = 1e-7) {
    if (time <= 0 || time % d.T != 0) {
        std::ostringstream w;
        w << "return time " << time << " must be a positive multiple of T = " << d.T;
        throw PreconditionError(w.str());
    }
    const LiftedPoint w = iterate_lifted(f, LiftedPoint::from(x_lift), time);
    const auto lab = detail::label_in(d, w, tol);
    if (!lab) throw PreconditionError("f^i(x) is not in the nice domain");
    HyperbolicBranch b;
    b.return_time = time;
    b.label = lab->first;
    b.factors = {BranchFactor{time, b.label}};
    b.witness = x_lift;
    b.C_branch = branch_constant(k, level);
    b.lambda_branch = k.lambda / 3;
    finish_branch(f, d, b, tol);
    return b;
}

[[nodiscard]] inline HyperbolicBranch extract_branch(const SurfaceMap& f, const NiceDomain& d, const AlmostReturn& r,
                                                     const std::vector<TorusPoint>& A, const DerivedConstants& k,
                                                     long level, double tol = 1e-7) {
    if (r.x >= A.size()) throw PreconditionError("almost return refers to a point outside A");
    const auto x = d.lift_in(A[r.x], tol);
    if (!x) throw PreconditionError("almost-return point outside the nice domain");
    return branch_at(f, d, *x, r.time, k, level, tol);
}

// Stable strip f^{-i1}(C^u_1 ∩ C^s_2): located by bisection along the
// unstable axis through the first branch's witness.
[[nodiscard]] inline HyperbolicBranch concatenate(const SurfaceMap& f, const NiceDomain& d, const HyperbolicBranch& b1,
                                                  const HyperbolicBranch& b2, double tol = 1e-7) {
    HyperbolicBranch b;
    b.return_time = b1.return_time + b2.return_time;
    b.label = b2.label + detail::ipow(f.linear_part(), b2.return_time) * b1.label;
    b.factors = b1.factors;
    b.factors.insert(b.factors.end(), b2.factors.begin(), b2.factors.end());
    b.C_branch = std::max(b1.C_branch, b2.C_branch);
    b.lambda_branch = std::min(b1.lambda_branch, b2.lambda_branch);
    if (b.return_time > kResolvedTime)
        throw PreconditionError("concatenation beyond return time " + std::to_string(kResolvedTime) +
                                " cannot be located in double precision");
    const double h = d.diameter;
    auto line = [&](double t) { return b1.witness + t * d.u_axis; };
    const auto iv = detail::zero_interval(
        [&](double t) { return detail::classify_stable(f, d, b.return_time, b.label, line(t)); }, -h, h);
    std::optional<Vec2> z;
    if (iv) {
        const Vec2 c = line(0.5 * (iv->first + iv->second));
        const Vec2 mid = detail::stable_image(f, c, b1.return_time, b1.label);
        if (d.inside_lift(c) && d.inside_lift(mid) &&
            d.inside_lift(detail::stable_image(f, mid, b2.return_time, b2.label)))
            z = c;
    }
    if (!z) throw ConvergenceError("empty intersection of the unstable strip of the first branch with the stable strip of the second");
    b.witness = *z;
    finish_branch(f, d, b, tol);
    return b;
}

}  // namespace hypertower
