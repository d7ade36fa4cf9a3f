#pragma once

// Plane polylines in lifted coordinates and a uniform segment grid for
// point-in-polygon, distance and intersection queries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "hypertower/linalg.hpp"

namespace hypertower {

struct Box {
    Vec2 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    Vec2 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};

    void add(const Vec2& v) {
        lo = {std::min(lo.x, v.x), std::min(lo.y, v.y)};
        hi = {std::max(hi.x, v.x), std::max(hi.y, v.y)};
    }
    [[nodiscard]] bool overlaps(const Box& o, double pad = 0) const {
        return lo.x - pad <= o.hi.x && o.lo.x <= hi.x + pad && lo.y - pad <= o.hi.y && o.lo.y <= hi.y + pad;
    }
    [[nodiscard]] bool contains(const Vec2& v, double pad = 0) const {
        return v.x >= lo.x - pad && v.x <= hi.x + pad && v.y >= lo.y - pad && v.y <= hi.y + pad;
    }
};

[[nodiscard]] inline Box bounding_box(const std::vector<Vec2>& pts) {
    Box b;
    for (const auto& p : pts) b.add(p);
    return b;
}

[[nodiscard]] inline double segment_distance(const Vec2& z, const Vec2& a, const Vec2& b) {
    const Vec2 d = b - a;
    const double l2 = dot(d, d);
    double t = l2 > 0 ? dot(z - a, d) / l2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return norm(z - (a + t * d));
}

// Closest point of segment [a,b] to z, as a parameter in [0,1].
[[nodiscard]] inline double segment_parameter(const Vec2& z, const Vec2& a, const Vec2& b) {
    const Vec2 d = b - a;
    const double l2 = dot(d, d);
    return l2 > 0 ? std::clamp(dot(z - a, d) / l2, 0.0, 1.0) : 0.0;
}

// Proper or touching intersection of [a,b] and [c,d]: parameters (s, t).
[[nodiscard]] inline std::optional<std::pair<double, double>> segment_intersection(const Vec2& a, const Vec2& b,
                                                                                   const Vec2& c, const Vec2& d) {
    const Vec2 r = b - a, s = d - c;
    const double den = cross(r, s);
    if (den == 0) return std::nullopt;
    const Vec2 ac = c - a;
    const double t = cross(ac, s) / den, u = cross(ac, r) / den;
    if (t < 0 || t > 1 || u < 0 || u > 1) return std::nullopt;
    // nearly parallel pieces of one line give garbage parameters: both
    // parameterisations must name the same point
    if (norm(a + t * r - (c + u * s)) > 1e-9 * (norm(r) + norm(s))) return std::nullopt;
    return std::pair{t, u};
}

// A polyline with a marked origin vertex and cumulative arc length
// (negative before the origin).
struct Curve {
    std::vector<Vec2> pts;
    std::size_t origin = 0;
    std::vector<double> arc;

    void finish() {
        arc.assign(pts.size(), 0.0);
        for (std::size_t i = origin + 1; i < pts.size(); ++i) arc[i] = arc[i - 1] + norm(pts[i] - pts[i - 1]);
        for (std::size_t i = origin; i-- > 0;) arc[i] = arc[i + 1] - norm(pts[i + 1] - pts[i]);
    }
    [[nodiscard]] double arc_at(std::size_t seg, double t) const { return arc[seg] + t * (arc[seg + 1] - arc[seg]); }
    [[nodiscard]] Vec2 at(std::size_t seg, double t) const { return pts[seg] + t * (pts[seg + 1] - pts[seg]); }
    // Point at signed arc length s (clamped to the ends).
    [[nodiscard]] Vec2 at_arc(double s) const {
        if (s <= arc.front()) return pts.front();
        if (s >= arc.back()) return pts.back();
        const auto it = std::upper_bound(arc.begin(), arc.end(), s);
        const std::size_t i = static_cast<std::size_t>(it - arc.begin()) - 1;
        const double len = arc[i + 1] - arc[i];
        return at(i, len > 0 ? (s - arc[i]) / len : 0.0);
    }
    // Vertices strictly between two arc positions, with the end points.
    [[nodiscard]] std::vector<Vec2> piece(double s0, double s1) const {
        std::vector<Vec2> out{at_arc(s0)};
        if (s0 < s1) {
            for (std::size_t i = 0; i < pts.size(); ++i)
                if (arc[i] > s0 && arc[i] < s1) out.push_back(pts[i]);
        } else {
            for (std::size_t i = pts.size(); i-- > 0;)
                if (arc[i] < s0 && arc[i] > s1) out.push_back(pts[i]);
        }
        out.push_back(at_arc(s1));
        return out;
    }
};

[[nodiscard]] inline double polyline_length(const std::vector<Vec2>& v) {
    double l = 0;
    for (std::size_t i = 1; i < v.size(); ++i) l += norm(v[i] - v[i - 1]);
    return l;
}

// Segments of one polyline (open or closed) bucketed on a uniform grid.
class SegmentGrid {
public:
    SegmentGrid() = default;
    SegmentGrid(std::vector<Vec2> pts, bool closed, int cells = 256) : pts_(std::move(pts)), closed_(closed) {
        box_ = bounding_box(pts_);
        const double pad = 1e-9 + 1e-9 * std::max(box_.hi.x - box_.lo.x, box_.hi.y - box_.lo.y);
        box_.lo = box_.lo - Vec2{pad, pad};
        box_.hi = box_.hi + Vec2{pad, pad};
        nx_ = ny_ = std::max(1, cells);
        cw_ = (box_.hi.x - box_.lo.x) / nx_;
        ch_ = (box_.hi.y - box_.lo.y) / ny_;
        cell_.assign(static_cast<std::size_t>(nx_ * ny_), {});
        for (std::size_t s = 0; s < segments(); ++s) {
            const auto [a, b] = segment(s);
            const int x0 = col(std::min(a.x, b.x)), x1 = col(std::max(a.x, b.x));
            const int y0 = row(std::min(a.y, b.y)), y1 = row(std::max(a.y, b.y));
            for (int iy = y0; iy <= y1; ++iy)
                for (int ix = x0; ix <= x1; ++ix) cell_[idx(ix, iy)].push_back(static_cast<int>(s));
        }
    }

    [[nodiscard]] const Box& box() const { return box_; }
    [[nodiscard]] const std::vector<Vec2>& points() const { return pts_; }
    [[nodiscard]] std::size_t segments() const {
        if (pts_.size() < 2) return 0;
        return closed_ ? pts_.size() : pts_.size() - 1;
    }
    [[nodiscard]] std::pair<Vec2, Vec2> segment(std::size_t s) const {
        return {pts_[s], pts_[(s + 1) % pts_.size()]};
    }

    // Crossing-number test for a closed polyline.
    [[nodiscard]] bool inside(const Vec2& z) const {
        if (!box_.contains(z)) return false;
        const int iy = row(z.y);
        bool in = false;
        for (int ix = col(z.x); ix < nx_; ++ix)
            for (int s : cell_[idx(ix, iy)]) {
                const auto [a, b] = segment(static_cast<std::size_t>(s));
                if ((a.y > z.y) == (b.y > z.y)) continue;
                const double xc = a.x + (z.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if (xc <= z.x || col(xc) != ix) continue;
                in = !in;
            }
        return in;
    }

    // Distance from z to the polyline if below radius, otherwise radius.
    [[nodiscard]] double distance(const Vec2& z, double radius) const {
        double best = radius;
        if (!box_.contains(z, radius)) return best;
        for_cells(Box{z - Vec2{radius, radius}, z + Vec2{radius, radius}}, [&](int s) {
            const auto [a, b] = segment(static_cast<std::size_t>(s));
            best = std::min(best, segment_distance(z, a, b));
        });
        return best;
    }

    // Nearest point on the polyline within radius: (segment, parameter).
    [[nodiscard]] std::optional<std::pair<std::size_t, double>> nearest(const Vec2& z, double radius) const {
        double best = radius;
        std::optional<std::pair<std::size_t, double>> out;
        if (!box_.contains(z, radius)) return out;
        for_cells(Box{z - Vec2{radius, radius}, z + Vec2{radius, radius}}, [&](int s) {
            const auto [a, b] = segment(static_cast<std::size_t>(s));
            const double t = segment_parameter(z, a, b);
            const double d = norm(z - (a + t * (b - a)));
            if (d <= best) {
                best = d;
                out = std::pair{static_cast<std::size_t>(s), t};
            }
        });
        return out;
    }

    template <class Fn>
    void for_cells(const Box& q, Fn&& fn) const {
        if (!box_.overlaps(q)) return;
        const int x0 = col(q.lo.x), x1 = col(q.hi.x), y0 = row(q.lo.y), y1 = row(q.hi.y);
        for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix)
                for (int s : cell_[idx(ix, iy)]) fn(s);
    }

private:
    [[nodiscard]] int col(double x) const {
        return std::clamp(static_cast<int>(std::floor((x - box_.lo.x) / cw_)), 0, nx_ - 1);
    }
    [[nodiscard]] int row(double y) const {
        return std::clamp(static_cast<int>(std::floor((y - box_.lo.y) / ch_)), 0, ny_ - 1);
    }
    [[nodiscard]] std::size_t idx(int ix, int iy) const { return static_cast<std::size_t>(iy * nx_ + ix); }

    std::vector<Vec2> pts_;
    bool closed_ = false;
    Box box_;
    int nx_ = 1, ny_ = 1;
    double cw_ = 1, ch_ = 1;
    std::vector<std::vector<int>> cell_;
};

struct CurveCrossing {
    std::size_t seg_a = 0, seg_b = 0;
    double t_a = 0, t_b = 0;
    Vec2 point;
};

// All crossings of curve a with the curve indexed by grid b.
[[nodiscard]] inline std::vector<CurveCrossing> crossings(const Curve& a, const SegmentGrid& b) {
    std::vector<CurveCrossing> out;
    for (std::size_t i = 0; i + 1 < a.pts.size(); ++i) {
        Box q;
        q.add(a.pts[i]);
        q.add(a.pts[i + 1]);
        std::vector<int> seen;
        b.for_cells(q, [&](int s) { seen.push_back(s); });
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
        for (int s : seen) {
            const auto [c, d] = b.segment(static_cast<std::size_t>(s));
            if (const auto hit = segment_intersection(a.pts[i], a.pts[i + 1], c, d))
                out.push_back({i, static_cast<std::size_t>(s), hit->first, hit->second, a.at(i, hit->first)});
        }
    }
    return out;
}

[[nodiscard]] inline double signed_area(const std::vector<Vec2>& ring) {
    double s = 0;
    for (std::size_t i = 0; i < ring.size(); ++i) s += cross(ring[i], ring[(i + 1) % ring.size()]);
    return 0.5 * s;
}

}  // namespace hypertower
