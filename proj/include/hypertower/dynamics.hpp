#pragma once

// Surface diffeomorphisms of the flat 2-torus R^2 / Z^2.
//
// Every map is given by a lift F: R^2 -> R^2 with F(x + k) = F(x) + A k for
// an integer matrix A (the linear part). Keeping the lift around lets the
// higher layers talk about "which copy of a region" an orbit lands in.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <quadmath.h>

#include "hypertower/linalg.hpp"

namespace hypertower {

[[nodiscard]] inline double wrap_unit(double t) {
    double w = t - std::floor(t);
    if (w >= 1.0) w = 0.0;
    return w;
}

// Representative of v modulo Z^2 with components in [-1/2, 1/2).
[[nodiscard]] inline Vec2 min_image(const Vec2& v) {
    return {v.x - std::floor(v.x + 0.5), v.y - std::floor(v.y + 0.5)};
}

struct TorusPoint {
    double x1 = 0.0;
    double x2 = 0.0;

    constexpr TorusPoint() = default;
    TorusPoint(double a, double b) : x1(wrap_unit(a)), x2(wrap_unit(b)) {}
    explicit TorusPoint(const Vec2& v) : TorusPoint(v.x, v.y) {}

    [[nodiscard]] Vec2 vec() const { return {x1, x2}; }
    friend bool operator==(const TorusPoint&, const TorusPoint&) = default;
};

// Flat-torus metric.
[[nodiscard]] inline double distance(const TorusPoint& p, const TorusPoint& q) {
    return norm(min_image(q.vec() - p.vec()));
}

// Shortest displacement from p to q.
[[nodiscard]] inline Vec2 displacement(const TorusPoint& p, const TorusPoint& q) {
    return min_image(q.vec() - p.vec());
}

struct TangentVector {
    TorusPoint base;
    double v1 = 0.0;
    double v2 = 0.0;

    [[nodiscard]] Vec2 vec() const { return {v1, v2}; }
    [[nodiscard]] double norm() const { return std::hypot(v1, v2); }
};

class SurfaceMap {
public:
    virtual ~SurfaceMap() = default;

    [[nodiscard]] virtual std::string name() const = 0;
    [[nodiscard]] virtual Vec2 lift(const Vec2& x) const = 0;
    [[nodiscard]] virtual Vec2 lift_inverse(const Vec2& y) const = 0;
    [[nodiscard]] virtual Mat2 derivative(const Vec2& x) const = 0;
    [[nodiscard]] virtual IMat2 linear_part() const = 0;
    [[nodiscard]] virtual bool is_linear() const = 0;
    [[nodiscard]] virtual double hoelder_exponent() const { return 1.0; }

    // F(x + w) - F(x), evaluated without cancellation when |w| is tiny.
    [[nodiscard]] virtual Vec2 lift_increment(const Vec2& x, const Vec2& w) const {
        return lift(x + w) - lift(x);
    }
    [[nodiscard]] virtual Vec2 lift_inverse_increment(const Vec2& y, const Vec2& w) const {
        return lift_inverse(y + w) - lift_inverse(y);
    }

    // D(f^{-1}) at y, i.e. the inverse of Df at f^{-1}(y).
    [[nodiscard]] Mat2 inverse_derivative(const Vec2& y) const { return derivative(lift_inverse(y)).inverse(); }

    // f^n(p) evaluated with enough precision that chaotic error growth stays
    // invisible for |n| <= 50 (round trips return within 1e-9).
    // Orbit p, f^{s}(p), ..., f^{n}(p) with s = sign(n), |n| + 1 points.
    [[nodiscard]] virtual std::vector<TorusPoint> orbit_precise(TorusPoint p, long n) const {
        std::vector<TorusPoint> out{p};
        for (long k = 0; k < n; ++k) out.push_back(p = forward(p));
        for (long k = 0; k < -n; ++k) out.push_back(p = inverse(p));
        return out;
    }
    [[nodiscard]] TorusPoint iterate_precise(const TorusPoint& p, long n) const { return orbit_precise(p, n).back(); }

    [[nodiscard]] TorusPoint forward(const TorusPoint& p) const { return TorusPoint(lift(p.vec())); }
    [[nodiscard]] TorusPoint inverse(const TorusPoint& p) const { return TorusPoint(lift_inverse(p.vec())); }
    [[nodiscard]] Mat2 derivative(const TorusPoint& p) const { return derivative(p.vec()); }
    [[nodiscard]] Mat2 inverse_derivative(const TorusPoint& p) const { return inverse_derivative(p.vec()); }
};

using MapPtr = std::shared_ptr<const SurfaceMap>;

// Hyperbolic toral automorphism x -> A x with A in GL(2, Z), |det| = 1, |tr| > 2.
class LinearAutomorphism final : public SurfaceMap {
public:
    LinearAutomorphism(const IMat2& a, std::string name) : a_(a), name_(std::move(name)) {
        if (a.det() != 1 && a.det() != -1)
            throw std::invalid_argument("linear part must have determinant +-1");
        const double tr = static_cast<double>(a.trace());
        const double dt = static_cast<double>(a.det());
        const double disc = tr * tr - 4.0 * dt;
        if (disc <= 0.0) throw std::invalid_argument("matrix is not hyperbolic (complex eigenvalues)");
        // Eigenvalues (tr +- sqrt(disc))/2; the unstable one has modulus > 1.
        const double r = std::sqrt(disc);
        const double l1 = tr >= 0 ? 0.5 * (tr + r) : 0.5 * (tr - r);
        const double l2 = dt / l1;
        if (std::abs(l1) <= 1.0 || std::abs(l2) >= 1.0)
            throw std::invalid_argument("matrix is not hyperbolic");
        mu_u_ = l1;
        mu_s_ = l2;
        am_ = a.as_real();
        am_inv_ = am_.inverse();
        eu_ = eigenvector(mu_u_);
        es_ = eigenvector(mu_s_);
    }

    [[nodiscard]] std::string name() const override { return name_; }
    [[nodiscard]] Vec2 lift(const Vec2& x) const override { return am_ * x; }
    [[nodiscard]] Vec2 lift_inverse(const Vec2& y) const override { return am_inv_ * y; }
    [[nodiscard]] Mat2 derivative(const Vec2&) const override { return am_; }
    [[nodiscard]] IMat2 linear_part() const override { return a_; }
    [[nodiscard]] bool is_linear() const override { return true; }
    [[nodiscard]] Vec2 lift_increment(const Vec2&, const Vec2& w) const override { return am_ * w; }
    [[nodiscard]] Vec2 lift_inverse_increment(const Vec2&, const Vec2& w) const override { return am_inv_ * w; }

    // Exact arithmetic: coordinates as 64-bit fixed point, where wrap-around of
    // unsigned integers is precisely reduction mod 1.
    [[nodiscard]] std::vector<TorusPoint> orbit_precise(TorusPoint p, long n) const override {
        const IMat2 m = n >= 0 ? a_ : a_.unimodular_inverse();
        auto to_fixed = [](double t) { return static_cast<std::uint64_t>(std::ldexp(t, 64)); };
        auto from_fixed = [](std::uint64_t t) { return std::ldexp(static_cast<double>(t), -64); };
        std::uint64_t u = to_fixed(p.x1), v = to_fixed(p.x2);
        const auto ma = static_cast<std::uint64_t>(m.a), mb = static_cast<std::uint64_t>(m.b);
        const auto mc = static_cast<std::uint64_t>(m.c), md = static_cast<std::uint64_t>(m.d);
        std::vector<TorusPoint> out{p};
        for (long k = 0; k < (n >= 0 ? n : -n); ++k) {
            const std::uint64_t u2 = ma * u + mb * v;
            const std::uint64_t v2 = mc * u + md * v;
            u = u2;
            v = v2;
            out.emplace_back(from_fixed(u), from_fixed(v));
        }
        return out;
    }

    [[nodiscard]] double unstable_eigenvalue() const { return mu_u_; }
    [[nodiscard]] double stable_eigenvalue() const { return mu_s_; }
    [[nodiscard]] double lyapunov_exponent() const { return std::log(std::abs(mu_u_)); }
    [[nodiscard]] const Vec2& unstable_direction() const { return eu_; }
    [[nodiscard]] const Vec2& stable_direction() const { return es_; }

private:
    // Unit eigenvector with nonnegative first component (or positive second if vertical).
    [[nodiscard]] Vec2 eigenvector(double mu) const {
        // (A - mu I) v = 0: take v = (b, mu - a) or (mu - d, c), whichever is better conditioned.
        const Vec2 c1{am_.b, mu - am_.a};
        const Vec2 c2{mu - am_.d, am_.c};
        Vec2 v = norm(c1) >= norm(c2) ? c1 : c2;
        v = normalized(v);
        if (v.x < 0 || (v.x == 0 && v.y < 0)) v = -v;
        return v;
    }

    IMat2 a_;
    std::string name_;
    Mat2 am_, am_inv_;
    double mu_u_ = 0, mu_s_ = 0;
    Vec2 eu_, es_;
};

// f(x) = A x + (eps sin(2 pi x2), 0) mod 1. The inverse is found by Newton.
class PerturbedAutomorphism final : public SurfaceMap {
public:
    static constexpr double kMaxAmplitude = 0.05;

    PerturbedAutomorphism(const IMat2& a, double eps, std::string name) : a_(a), eps_(eps), name_(std::move(name)) {
        if (!(eps >= 0.0 && eps <= kMaxAmplitude))
            throw std::invalid_argument("perturbation amplitude must lie in [0, 0.05]");
        if (a.det() != 1 && a.det() != -1) throw std::invalid_argument("linear part must have determinant +-1");
        am_ = a.as_real();
        am_inv_ = am_.inverse();
    }

    [[nodiscard]] std::string name() const override { return name_; }
    [[nodiscard]] double amplitude() const { return eps_; }

    [[nodiscard]] Vec2 lift(const Vec2& x) const override {
        Vec2 y = am_ * x;
        y.x += eps_ * std::sin(kTwoPi * x.y);
        return y;
    }

    [[nodiscard]] Vec2 lift_inverse(const Vec2& y) const override {
        // x = A^{-1}(y - eps sin(2 pi x2) e1); solve the scalar equation for x2.
        const Vec2 base = am_inv_ * y;
        const double c1 = am_inv_.a, c2 = am_inv_.c;
        double x2 = base.y;
        for (int it = 0; it < 60; ++it) {
            const double g = x2 + eps_ * c2 * std::sin(kTwoPi * x2) - base.y;
            const double dg = 1.0 + eps_ * c2 * kTwoPi * std::cos(kTwoPi * x2);
            const double step = g / dg;
            x2 -= step;
            if (std::abs(step) <= 1e-17 * std::max(1.0, std::abs(x2))) break;
        }
        return {base.x - eps_ * c1 * std::sin(kTwoPi * x2), x2};
    }

    [[nodiscard]] Mat2 derivative(const Vec2& x) const override {
        Mat2 m = am_;
        m.b += eps_ * kTwoPi * std::cos(kTwoPi * x.y);
        return m;
    }

    [[nodiscard]] IMat2 linear_part() const override { return a_; }
    [[nodiscard]] bool is_linear() const override { return eps_ == 0.0; }

    // Quadruple precision orbit: 113-bit mantissas absorb e^{chi n} growth for n <= 50.
    [[nodiscard]] std::vector<TorusPoint> orbit_precise(TorusPoint p, long n) const override {
        using Q = __float128;
        const Q two_pi = 2 * acosq(Q(-1));
        const Q a = Q(am_.a), b = Q(am_.b), c = Q(am_.c), d = Q(am_.d);
        const Q ia = Q(am_inv_.a), ib = Q(am_inv_.b), ic = Q(am_inv_.c), id = Q(am_inv_.d);
        const Q e = Q(eps_);
        Q x1 = p.x1, x2 = p.x2;
        auto reduce = [](Q t) { return t - floorq(t); };
        std::vector<TorusPoint> out{p};
        for (long k = 0; k < n; ++k) {
            const Q y1 = a * x1 + b * x2 + e * sinq(two_pi * x2);
            const Q y2 = c * x1 + d * x2;
            x1 = reduce(y1);
            x2 = reduce(y2);
            out.emplace_back(static_cast<double>(x1), static_cast<double>(x2));
        }
        for (long k = 0; k < -n; ++k) {
            const Q b1 = ia * x1 + ib * x2, b2 = ic * x1 + id * x2;
            Q t = b2;
            for (int it = 0; it < 40; ++it) {
                const Q g = t + e * ic * sinq(two_pi * t) - b2;
                const Q dg = 1 + e * ic * two_pi * cosq(two_pi * t);
                const Q step = g / dg;
                t -= step;
                if (fabsq(step) < Q(1e-33)) break;
            }
            x1 = reduce(b1 - e * ia * sinq(two_pi * t));
            x2 = reduce(t);
            out.emplace_back(static_cast<double>(x1), static_cast<double>(x2));
        }
        return out;
    }

    [[nodiscard]] Vec2 lift_increment(const Vec2& x, const Vec2& w) const override {
        Vec2 d = am_ * w;
        d.x += eps_ * sin_difference(x.y, w.y);
        return d;
    }

    [[nodiscard]] Vec2 lift_inverse_increment(const Vec2& y, const Vec2& w) const override {
        // u = F^{-1}(y + w) - F^{-1}(y) solves A u + eps (sin(2pi(x2+u2)) - sin(2pi x2)) e1 = w.
        const double x2 = lift_inverse(y).y;
        const Vec2 base = am_inv_ * w;
        const double c1 = am_inv_.a, c2 = am_inv_.c;
        double u2 = base.y;
        for (int it = 0; it < 60; ++it) {
            const double g = u2 + eps_ * c2 * sin_difference(x2, u2) - base.y;
            const double dg = 1.0 + eps_ * c2 * kTwoPi * std::cos(kTwoPi * (x2 + u2));
            const double step = g / dg;
            u2 -= step;
            if (std::abs(step) <= 1e-17 * std::max(std::abs(u2), 1e-300)) break;
        }
        return {base.x - eps_ * c1 * sin_difference(x2, u2), u2};
    }

private:
    static constexpr double kTwoPi = 2.0 * std::numbers::pi;

    // sin(2 pi (t + h)) - sin(2 pi t) without cancellation.
    [[nodiscard]] static double sin_difference(double t, double h) {
        return 2.0 * std::cos(kTwoPi * t + std::numbers::pi * h) * std::sin(std::numbers::pi * h);
    }

    IMat2 a_;
    double eps_;
    std::string name_;
    Mat2 am_, am_inv_;
};

inline constexpr IMat2 kCatMatrix{2, 1, 1, 1};

[[nodiscard]] inline MapPtr make_cat_map() { return std::make_shared<LinearAutomorphism>(kCatMatrix, "cat"); }

[[nodiscard]] inline MapPtr make_perturbed_cat_map(double eps) {
    return std::make_shared<PerturbedAutomorphism>(kCatMatrix, eps, "perturbed-cat");
}

// Any SL(2,Z) (or GL(2,Z)) matrix with |trace| > 2.
[[nodiscard]] inline MapPtr make_linear_map(const IMat2& a) {
    if (std::abs(a.trace()) <= 2) throw std::invalid_argument("matrix is not hyperbolic: |trace| <= 2");
    return std::make_shared<LinearAutomorphism>(a, "linear");
}

// The standard catalogue: cat, perturbed cat, and one further hyperbolic automorphism.
[[nodiscard]] inline std::vector<MapPtr> builtin_maps(double perturbation = 0.03) {
    return {make_cat_map(), make_perturbed_cat_map(perturbation), make_linear_map(IMat2{3, 1, 2, 1})};
}

[[nodiscard]] inline MapPtr make_map(const std::string& name, double perturbation = 0.03,
                                     const IMat2& matrix = kCatMatrix) {
    if (name == "cat") return make_cat_map();
    if (name == "perturbed-cat") return make_perturbed_cat_map(perturbation);
    if (name == "linear") return make_linear_map(matrix);
    throw std::invalid_argument("unknown map '" + name + "' (expected cat, perturbed-cat or linear)");
}

// f^n(p); uses the inverse for n < 0.
[[nodiscard]] inline TorusPoint iterate(const SurfaceMap& f, const TorusPoint& p, long n) {
    return f.iterate_precise(p, n);
}

// Df^n at p by the chain rule along the (precisely evaluated) orbit.
[[nodiscard]] inline Mat2 cocycle(const SurfaceMap& f, const TorusPoint& p, long n) {
    const std::vector<TorusPoint> orbit = f.orbit_precise(p, n);
    Mat2 m = Mat2::identity();
    for (std::size_t k = 0; k + 1 < orbit.size(); ++k)
        m = (n >= 0 ? f.derivative(orbit[k]) : f.derivative(orbit[k + 1]).inverse()) * m;
    return m;
}

// A point of R^2 stored as fractional part in [0,1)^2 plus an integer cell, so
// that long lifted orbits keep full precision.
struct LiftedPoint {
    Vec2 frac;
    IVec2 cell;

    [[nodiscard]] static LiftedPoint from(const Vec2& v) {
        LiftedPoint p{v, {}};
        p.normalize();
        return p;
    }
    [[nodiscard]] TorusPoint torus() const { return TorusPoint(frac); }
    // Lift relative to a reference cell; exact as long as the difference is moderate.
    [[nodiscard]] Vec2 relative_to(const IVec2& ref) const { return frac + (cell - ref).as_real(); }

    void normalize() {
        const IVec2 fl = floor_vec(frac);
        frac -= fl.as_real();
        cell = cell + fl;
        if (frac.x >= 1.0) { frac.x = 0.0; cell.x += 1; }
        if (frac.y >= 1.0) { frac.y = 0.0; cell.y += 1; }
    }
};

[[nodiscard]] inline LiftedPoint advance(const SurfaceMap& f, const LiftedPoint& p) {
    LiftedPoint q{f.lift(p.frac), f.linear_part() * p.cell};
    q.normalize();
    return q;
}

[[nodiscard]] inline LiftedPoint retreat(const SurfaceMap& f, const LiftedPoint& p) {
    LiftedPoint q{f.lift_inverse(p.frac), f.linear_part().unimodular_inverse() * p.cell};
    q.normalize();
    return q;
}

[[nodiscard]] inline LiftedPoint iterate_lifted(const SurfaceMap& f, LiftedPoint p, long n) {
    if (n >= 0)
        for (long k = 0; k < n; ++k) p = advance(f, p);
    else
        for (long k = 0; k < -n; ++k) p = retreat(f, p);
    return p;
}

}  // namespace hypertower
