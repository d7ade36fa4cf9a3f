#pragma once

// Fixed-size 2D vectors and matrices. Everything in this library lives on the
// flat 2-torus, so nothing larger than 2x2 is ever needed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace hypertower {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    constexpr Vec2() = default;
    constexpr Vec2(double a, double b) : x(a), y(b) {}

    constexpr double operator[](int i) const { return i == 0 ? x : y; }
    constexpr double& operator[](int i) { return i == 0 ? x : y; }

    constexpr Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
    constexpr Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
    constexpr Vec2& operator*=(double s) { x *= s; y *= s; return *this; }
    constexpr Vec2& operator/=(double s) { x /= s; y /= s; return *this; }

    friend constexpr Vec2 operator+(Vec2 a, const Vec2& b) { return a += b; }
    friend constexpr Vec2 operator-(Vec2 a, const Vec2& b) { return a -= b; }
    friend constexpr Vec2 operator-(const Vec2& a) { return {-a.x, -a.y}; }
    friend constexpr Vec2 operator*(double s, Vec2 a) { return a *= s; }
    friend constexpr Vec2 operator*(Vec2 a, double s) { return a *= s; }
    friend constexpr Vec2 operator/(Vec2 a, double s) { return a /= s; }
    friend constexpr bool operator==(const Vec2&, const Vec2&) = default;
};

[[nodiscard]] inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
[[nodiscard]] inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }
[[nodiscard]] inline double norm(const Vec2& a) { return std::hypot(a.x, a.y); }
[[nodiscard]] inline double norm_inf(const Vec2& a) { return std::max(std::abs(a.x), std::abs(a.y)); }

[[nodiscard]] inline Vec2 normalized(const Vec2& a) {
    const double n = norm(a);
    if (n == 0.0) throw std::invalid_argument("cannot normalize the zero vector");
    return a / n;
}

// Angle in [0, pi/2] between the lines spanned by a and b.
[[nodiscard]] inline double line_angle(const Vec2& a, const Vec2& b) {
    const double c = std::abs(dot(a, b));
    const double s = std::abs(cross(a, b));
    return std::atan2(s, c);
}

// Angle in [0, pi] between the vectors a and b.
[[nodiscard]] inline double vector_angle(const Vec2& a, const Vec2& b) {
    return std::atan2(std::abs(cross(a, b)), dot(a, b));
}

// Row-major 2x2 matrix [[a, b], [c, d]].
struct Mat2 {
    double a = 1.0, b = 0.0, c = 0.0, d = 1.0;

    constexpr Mat2() = default;
    constexpr Mat2(double a_, double b_, double c_, double d_) : a(a_), b(b_), c(c_), d(d_) {}

    [[nodiscard]] static constexpr Mat2 identity() { return {}; }
    [[nodiscard]] static constexpr Mat2 diag(double p, double q) { return {p, 0.0, 0.0, q}; }
    [[nodiscard]] static constexpr Mat2 columns(const Vec2& c0, const Vec2& c1) {
        return {c0.x, c1.x, c0.y, c1.y};
    }

    [[nodiscard]] constexpr Vec2 col(int j) const { return j == 0 ? Vec2{a, c} : Vec2{b, d}; }
    [[nodiscard]] constexpr double det() const { return a * d - b * c; }
    [[nodiscard]] constexpr double trace() const { return a + d; }
    [[nodiscard]] constexpr Mat2 transposed() const { return {a, c, b, d}; }

    [[nodiscard]] Mat2 inverse() const {
        const double dt = det();
        if (dt == 0.0) throw std::domain_error("singular 2x2 matrix");
        return {d / dt, -b / dt, -c / dt, a / dt};
    }

    friend constexpr Vec2 operator*(const Mat2& m, const Vec2& v) {
        return {m.a * v.x + m.b * v.y, m.c * v.x + m.d * v.y};
    }
    friend constexpr Mat2 operator*(const Mat2& m, const Mat2& n) {
        return {m.a * n.a + m.b * n.c, m.a * n.b + m.b * n.d,
                m.c * n.a + m.d * n.c, m.c * n.b + m.d * n.d};
    }
    friend constexpr Mat2 operator+(const Mat2& m, const Mat2& n) {
        return {m.a + n.a, m.b + n.b, m.c + n.c, m.d + n.d};
    }
    friend constexpr Mat2 operator-(const Mat2& m, const Mat2& n) {
        return {m.a - n.a, m.b - n.b, m.c - n.c, m.d - n.d};
    }
    friend constexpr Mat2 operator*(double s, const Mat2& m) { return {s * m.a, s * m.b, s * m.c, s * m.d}; }
    friend constexpr bool operator==(const Mat2&, const Mat2&) = default;
};

[[nodiscard]] inline double frobenius(const Mat2& m) {
    return std::sqrt(m.a * m.a + m.b * m.b + m.c * m.c + m.d * m.d);
}

// Largest singular value.
[[nodiscard]] inline double op_norm(const Mat2& m) {
    const double f2 = m.a * m.a + m.b * m.b + m.c * m.c + m.d * m.d;
    const double dt = m.det();
    const double disc = std::sqrt(std::max(0.0, f2 * f2 - 4.0 * dt * dt));
    return std::sqrt(0.5 * (f2 + disc));
}

// Smallest singular value, i.e. ||m^{-1}||^{-1}.
[[nodiscard]] inline double conorm(const Mat2& m) {
    const double s = op_norm(m);
    return s == 0.0 ? 0.0 : std::abs(m.det()) / s;
}

[[nodiscard]] inline Vec2 solve(const Mat2& m, const Vec2& rhs) { return m.inverse() * rhs; }

// Integer vectors and matrices for lifts. Arithmetic is modulo 2^64 by
// design: labels only ever get compared for equality.
struct IVec2 {
    std::int64_t x = 0;
    std::int64_t y = 0;

    friend constexpr IVec2 operator+(const IVec2& a, const IVec2& b) {
        return {static_cast<std::int64_t>(static_cast<std::uint64_t>(a.x) + static_cast<std::uint64_t>(b.x)),
                static_cast<std::int64_t>(static_cast<std::uint64_t>(a.y) + static_cast<std::uint64_t>(b.y))};
    }
    friend constexpr IVec2 operator-(const IVec2& a, const IVec2& b) {
        return {static_cast<std::int64_t>(static_cast<std::uint64_t>(a.x) - static_cast<std::uint64_t>(b.x)),
                static_cast<std::int64_t>(static_cast<std::uint64_t>(a.y) - static_cast<std::uint64_t>(b.y))};
    }
    friend constexpr bool operator==(const IVec2&, const IVec2&) = default;
    friend constexpr auto operator<=>(const IVec2&, const IVec2&) = default;

    [[nodiscard]] constexpr Vec2 as_real() const { return {static_cast<double>(x), static_cast<double>(y)}; }
};

struct IMat2 {
    std::int64_t a = 1, b = 0, c = 0, d = 1;

    [[nodiscard]] constexpr std::int64_t det() const { return a * d - b * c; }
    [[nodiscard]] constexpr std::int64_t trace() const { return a + d; }
    [[nodiscard]] constexpr Mat2 as_real() const {
        return {static_cast<double>(a), static_cast<double>(b), static_cast<double>(c), static_cast<double>(d)};
    }
    // Valid for det = +-1 only.
    [[nodiscard]] constexpr IMat2 unimodular_inverse() const {
        const std::int64_t dt = det();
        return {d * dt, -b * dt, -c * dt, a * dt};
    }

    friend constexpr IVec2 operator*(const IMat2& m, const IVec2& v) {
        auto mul = [](std::int64_t p, std::int64_t q) {
            return static_cast<std::uint64_t>(p) * static_cast<std::uint64_t>(q);
        };
        return {static_cast<std::int64_t>(mul(m.a, v.x) + mul(m.b, v.y)),
                static_cast<std::int64_t>(mul(m.c, v.x) + mul(m.d, v.y))};
    }
    friend constexpr IMat2 operator*(const IMat2& m, const IMat2& n) {
        auto dot2 = [](std::int64_t p, std::int64_t q, std::int64_t r, std::int64_t s) {
            return static_cast<std::int64_t>(static_cast<std::uint64_t>(p) * static_cast<std::uint64_t>(q) +
                                             static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(s));
        };
        return {dot2(m.a, n.a, m.b, n.c), dot2(m.a, n.b, m.b, n.d), dot2(m.c, n.a, m.d, n.c),
                dot2(m.c, n.b, m.d, n.d)};
    }
    friend constexpr bool operator==(const IMat2&, const IMat2&) = default;
};

[[nodiscard]] inline IVec2 floor_vec(const Vec2& v) {
    return {static_cast<std::int64_t>(std::floor(v.x)), static_cast<std::int64_t>(std::floor(v.y))};
}

}  // namespace hypertower
