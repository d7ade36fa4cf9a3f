#pragma once

// Lyapunov charts Psi_x = translation o L_x on the flat torus, chart-plane
// maps between them, the cone fields and the one-step hyperbolicity check.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hypertower/dynamics.hpp"
#include "hypertower/error.hpp"
#include "hypertower/regularity.hpp"

namespace hypertower {

struct ChartSettings {
    double b = 0.05;          // the global small constant
    double tail_tol = 1e-10;  // relative tail tolerance for all truncated series
    int max_terms = 10000;
    bool closed_form_linear = true;
};

struct Chart {
    TorusPoint base;
    Splitting split;
    double s = 0, u = 0;
    Mat2 L, L_inv;
    double b_x = 0;
    long level = 1;
    double b_level = 0;
    int n_terms = 0;  // N_t actually used for s, u

    // Psi_x(v) on the torus.
    [[nodiscard]] TorusPoint psi(const Vec2& v) const { return TorusPoint(base.vec() + L * v); }
    // Psi_x^{-1}(y) for y near x.
    [[nodiscard]] Vec2 psi_inverse(const TorusPoint& y) const { return L_inv * displacement(base, y); }
};

// Sum over k in Z of e^{-c|k|}.
[[nodiscard]] inline double two_sided_geometric(double c) { return (1 + std::exp(-c)) / (1 - std::exp(-c)); }

[[nodiscard]] inline double b_level_value(double b, long level, const DerivedConstants& k) {
    const double core = 3 * k.Q0 / k.Qhat * std::exp(2 * k.epsilon * level) * two_sided_geometric(k.epsilon);
    return b * std::pow(core, -1.0 / k.alpha);
}

// Smallest N with 2 C^2 q^N / (1 - q) < tol * 2, q = e^{2(lambda - chi)}.
[[nodiscard]] inline int chart_truncation(double C, double lambda, double chi, const ChartSettings& cs) {
    const double q = std::exp(2 * (lambda - chi));
    const double need = std::log(cs.tail_tol * (1 - q) / (C * C)) / std::log(q);
    const int n = std::max(1, static_cast<int>(std::ceil(need)));
    if (n > cs.max_terms)
        throw ConvergenceError("chart series tail cannot reach " + std::to_string(cs.tail_tol) + " within " +
                               std::to_string(cs.max_terms) + " terms (needs " + std::to_string(n) + ")");
    return n;
}

// Number of terms on each side for the two-sided b(x) sum, from the envelope
// ||L^{-1}_{f^k x}|| <= 3 Q0 Qhat^{-1} e^{2 eps (l + |k|)}.
[[nodiscard]] inline int bx_truncation(long level, const DerivedConstants& k, const ChartSettings& cs) {
    const double eps = k.epsilon;
    const double env = 2 * 3 * k.Q0 / k.Qhat * std::exp(2 * eps * level) / (1 - std::exp(-eps));
    const int n = static_cast<int>(std::ceil(std::log(env / cs.tail_tol) / eps));
    if (n > 20 * cs.max_terms) throw ConvergenceError("b(x) sum truncation exceeds the term budget");
    return std::max(n, 1);
}

[[nodiscard]] inline Mat2 lyapunov_matrix(const Splitting& sp, double s, double u) {
    return Mat2::columns(sp.e_u / u, sp.e_s / s);
}

namespace detail {

inline void finish_chart(Chart& c, const ChartSettings& cs, const DerivedConstants& k, double lsum) {
    c.L = lyapunov_matrix(c.split, c.s, c.u);
    c.L_inv = c.L.inverse();
    c.b_x = cs.b * std::pow(lsum, -1.0 / k.alpha);
    c.b_level = b_level_value(cs.b, c.level, k);
}

}  // namespace detail

// Charts at f^j(x), j in [-kmax, kmax], from one orbit computation.
[[nodiscard]] inline std::vector<Chart> charts_along_orbit(const SurfaceMap& f, const Splitting& split,
                                                           const std::vector<RegularityData>& regs,
                                                           const DerivedConstants& k, const ChartSettings& cs,
                                                           int kmax) {
    if (regs.size() != static_cast<std::size_t>(2 * kmax + 1))
        throw PreconditionError("need one RegularityData per orbit point");
    const double lam = k.lambda, eps = k.epsilon;
    double cmax = 1.0;
    long lmax = 1;
    for (const auto& r : regs) {
        cmax = std::max(cmax, r.C);
        lmax = std::max(lmax, r.level);
    }
    const int nt = chart_truncation(cmax, lam, k.chi, cs);
    std::vector<Chart> out;
    out.reserve(regs.size());

    if (f.is_linear() && cs.closed_form_linear) {
        const EigenDirections ed = eigen_directions(f.linear_part());
        const double s = std::sqrt(2 / (1 - std::exp(2 * lam) * ed.mu_s * ed.mu_s));
        const double u = std::sqrt(2 / (1 - std::exp(2 * lam) / (ed.mu_u * ed.mu_u)));
        const Splitting sp = make_splitting(split.base, ed.e_s, ed.e_u);
        const double linv = op_norm(lyapunov_matrix(sp, s, u).inverse());
        for (int j = -kmax; j <= kmax; ++j) {
            Chart c;
            c.base = j == 0 ? split.base : iterate(f, split.base, j);
            c.split = sp;
            c.split.base = c.base;
            c.s = s;
            c.u = u;
            c.level = regs[static_cast<std::size_t>(j + kmax)].level;
            c.n_terms = 0;
            detail::finish_chart(c, cs, k, linv * two_sided_geometric(3 * eps));
            out.push_back(c);
        }
        return out;
    }

    const int nb = bx_truncation(lmax, k, cs);
    const int R = nb + kmax;  // points whose L^{-1} is needed
    const int ext = R + nt;   // points whose rates feed s, u
    const OrbitFrames fr(f, split.base, ext, ext);
    // s_j^2 = 2 + e^{2 lambda} ||Df e^s_j||^2 s_{j+1}^2, started at 2 beyond the window,
    // is the truncated series; likewise for u from the past.
    const std::size_t n = static_cast<std::size_t>(2 * ext + 1);
    std::vector<double> s2(n), u2(n);
    const double e2l = std::exp(2 * lam);
    s2[n - 1] = 2.0;
    for (std::size_t i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(i) - 1 - ext;
        const double r = fr.stable_rate(j);
        s2[i - 1] = 2.0 + e2l * r * r * s2[i];
    }
    u2[0] = 2.0;
    for (std::size_t i = 1; i < n; ++i) {
        const int j = static_cast<int>(i) - ext;
        const double r = 1.0 / fr.unstable_rate(j - 1);  // ||Df^{-1} e^u_j||
        u2[i] = 2.0 + e2l * r * r * u2[i - 1];
    }
    auto at = [&](const std::vector<double>& v, int j) { return v[static_cast<std::size_t>(j + ext)]; };
    std::vector<double> linv(static_cast<std::size_t>(2 * R + 1));
    for (int j = -R; j <= R; ++j) {
        const Splitting sp = make_splitting(fr.point(j), fr.e_s(j), fr.e_u(j));
        linv[static_cast<std::size_t>(j + R)] =
            op_norm(lyapunov_matrix(sp, std::sqrt(at(s2, j)), std::sqrt(at(u2, j))).inverse());
    }
    for (int j = -kmax; j <= kmax; ++j) {
        Chart c;
        c.base = j == 0 ? split.base : fr.point(j);
        c.split = j == 0 ? split : make_splitting(fr.point(j), fr.e_s(j), fr.e_u(j));
        c.s = std::sqrt(at(s2, j));
        c.u = std::sqrt(at(u2, j));
        c.level = regs[static_cast<std::size_t>(j + kmax)].level;
        c.n_terms = nt;
        double lsum = 0;
        for (int m = -nb; m <= nb; ++m) lsum += std::exp(-3.0 * eps * std::abs(m)) * linv[static_cast<std::size_t>(j + m + R)];
        detail::finish_chart(c, cs, k, lsum);
        out.push_back(c);
    }
    return out;
}

[[nodiscard]] inline Chart build_chart(const SurfaceMap& f, const Splitting& split, const RegularityData& reg,
                                       const DerivedConstants& k, const ChartSettings& cs = {}) {
    return charts_along_orbit(f, split, {reg}, k, cs, 0).front();
}

// Splitting, tempered regularity and chart at p.
[[nodiscard]] inline Chart chart_at(const SurfaceMap& f, const TorusPoint& p, const HyperbolicityParams& params,
                                    const DerivedConstants& k, const ChartSettings& cs = {}) {
    const Splitting sp = estimate_splitting(f, p, 30);
    return build_chart(f, sp, regularity_data(f, sp, params), k, cs);
}

// s(x), u(x) alone (no b(x) sum), for sampling studies.
[[nodiscard]] inline std::pair<double, double> lyapunov_norms(const SurfaceMap& f, const Splitting& split, double C,
                                                              const DerivedConstants& k,
                                                              const ChartSettings& cs = {}) {
    const double e2l = std::exp(2 * k.lambda);
    if (f.is_linear() && cs.closed_form_linear) {
        const EigenDirections ed = eigen_directions(f.linear_part());
        return {std::sqrt(2 / (1 - e2l * ed.mu_s * ed.mu_s)), std::sqrt(2 / (1 - e2l / (ed.mu_u * ed.mu_u)))};
    }
    const int nt = chart_truncation(C, k.lambda, k.chi, cs);
    const OrbitFrames fr(f, split.base, nt, nt);
    double s2 = 2.0, u2 = 2.0;
    for (int j = nt - 1; j >= 0; --j) s2 = 2.0 + e2l * fr.stable_rate(j) * fr.stable_rate(j) * s2;
    for (int j = -nt + 1; j <= 0; ++j) {
        const double r = 1.0 / fr.unstable_rate(j - 1);
        u2 = 2.0 + e2l * r * r * u2;
    }
    return {std::sqrt(s2), std::sqrt(u2)};
}

[[nodiscard]] inline Chart rescaled(const Chart& c, double old_b, double new_b) {
    Chart r = c;
    r.b_x *= new_b / old_b;
    r.b_level *= new_b / old_b;
    return r;
}

// ---------------------------------------------------------------------------
// Oseledets-Pesin reduction

struct OseledetsPesinReport {
    double A = 0, B = 0;
    double offdiag_rel = 0;
    bool ok = false;
    std::string message;
};

[[nodiscard]] inline Mat2 conjugated_derivative(const SurfaceMap& f, const Chart& cx, const Chart& cfx) {
    return cfx.L_inv * f.derivative(cx.base) * cx.L;
}

[[nodiscard]] inline OseledetsPesinReport oseledets_pesin_check(const SurfaceMap& f, const Chart& cx,
                                                               const Chart& cfx, double lambda,
                                                               double offdiag_tol = 1e-8) {
    const Mat2 m = conjugated_derivative(f, cx, cfx);
    OseledetsPesinReport r;
    r.A = m.a;
    r.B = m.d;
    const double diag = std::max(std::abs(m.a), std::abs(m.d));
    r.offdiag_rel = std::max(std::abs(m.b), std::abs(m.c)) / diag;
    std::ostringstream why;
    if (r.offdiag_rel >= offdiag_tol) why << "off-diagonal " << r.offdiag_rel << " >= " << offdiag_tol << "; ";
    if (!(std::abs(r.A) >= std::exp(lambda))) why << "A = " << r.A << " < e^lambda; ";
    if (!(std::abs(r.B) <= std::exp(-lambda))) why << "B = " << r.B << " > e^-lambda; ";
    r.message = why.str();
    r.ok = r.message.empty();
    return r;
}

// ---------------------------------------------------------------------------
// Cones

enum class ConeKind { stable, unstable };

struct Cone {
    ConeKind kind = ConeKind::unstable;
    bool strong = false;
    double width = 0;

    [[nodiscard]] static Cone make(ConeKind kind, bool strong, const DerivedConstants& k) {
        return {kind, strong, strong ? k.strong_omega() : k.omega};
    }
    [[nodiscard]] bool contains(const Vec2& v) const {
        return kind == ConeKind::stable ? std::abs(v.x) < width * std::abs(v.y) : std::abs(v.y) < width * std::abs(v.x);
    }
    // |minor| / |major| relative to the cone width (< 1 inside).
    [[nodiscard]] double aperture_ratio(const Vec2& v) const {
        return kind == ConeKind::stable ? std::abs(v.x) / (width * std::abs(v.y))
                                        : std::abs(v.y) / (width * std::abs(v.x));
    }
};

// ---------------------------------------------------------------------------
// Chart-plane maps f_{x,y} = Psi_y^{-1} o f o Psi_x, with y = f(x) + offset.

class ChartMap {
public:
    ChartMap(const SurfaceMap& f, Chart source, Chart target, double src_half, double tgt_half)
        : f_(&f), src_(std::move(source)), tgt_(std::move(target)), src_half_(src_half), tgt_half_(tgt_half) {
        fx_ = f.lift(src_.base.vec());
        offset_ = min_image(tgt_.base.vec() - fx_);
    }

    [[nodiscard]] const Chart& source() const { return src_; }
    [[nodiscard]] const Chart& target() const { return tgt_; }
    [[nodiscard]] double source_half() const { return src_half_; }
    [[nodiscard]] double target_half() const { return tgt_half_; }
    // Displacement from f(x) to the target chart centre.
    [[nodiscard]] const Vec2& offset() const { return offset_; }

    [[nodiscard]] bool in_source(const Vec2& v, double slack = 1e-12) const {
        return norm_inf(v) <= src_half_ * (1 + slack);
    }
    [[nodiscard]] bool in_target(const Vec2& v, double slack = 1e-12) const {
        return norm_inf(v) <= tgt_half_ * (1 + slack);
    }

    [[nodiscard]] Vec2 evaluate(const Vec2& v) const {
        if (!in_source(v)) throw PreconditionError("chart point outside the source box");
        return evaluate_unchecked(v);
    }
    [[nodiscard]] Vec2 evaluate_unchecked(const Vec2& v) const {
        return tgt_.L_inv * (f_->lift_increment(src_.base.vec(), src_.L * v) - offset_);
    }
    [[nodiscard]] Vec2 inverse_unchecked(const Vec2& w) const {
        return src_.L_inv * f_->lift_inverse_increment(fx_, offset_ + tgt_.L * w);
    }
    [[nodiscard]] Mat2 derivative(const Vec2& v) const {
        return tgt_.L_inv * f_->derivative(src_.base.vec() + src_.L * v) * src_.L;
    }
    [[nodiscard]] Mat2 inverse_derivative(const Vec2& w) const { return derivative(inverse_unchecked(w)).inverse(); }

private:
    const SurfaceMap* f_;
    Chart src_, tgt_;
    double src_half_, tgt_half_;
    Vec2 fx_, offset_;
};

[[nodiscard]] inline ChartMap chart_map(const SurfaceMap& f, const Chart& cx, const Chart& cfx) {
    return ChartMap(f, cx, cfx, cx.b_level, cfx.b_level);
}

// ---------------------------------------------------------------------------
// One-step hyperbolicity

struct OneStepReport {
    long samples = 0;
    long vectors = 0;
    long violations = 0;
    double min_expansion_u = 1e300, min_expansion_s = 1e300;
    double max_cone_ratio_u = 0, max_cone_ratio_s = 0;
    double max_strip_extent = 0;  // max |v1| on the strip boundary / b_{l0}
    double max_strip_slope = 0;   // max |dv1/dv2| of the boundary curves
    bool strip_ok = true;
    std::string witness;
    [[nodiscard]] bool ok() const { return violations == 0 && strip_ok; }
};

namespace detail {

// v1 with f_x(v1, v2)_1 = target; the first component is increasing or
// decreasing in v1 along the unstable direction.
inline std::optional<double> solve_first_component(const ChartMap& m, double v2, double target, double half) {
    auto g = [&](double v1) { return m.evaluate_unchecked(Vec2{v1, v2}).x - target; };
    double lo = -half, hi = half;
    double glo = g(lo), ghi = g(hi);
    if (glo * ghi > 0) return std::nullopt;
    for (int it = 0; it < 200 && hi - lo > 1e-17 * half; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double gm = g(mid);
        if ((gm > 0) == (ghi > 0)) {
            hi = mid;
            ghi = gm;
        } else {
            lo = mid;
            glo = gm;
        }
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Stable strip B^{s,1}: boundary curves v1 = g_pm(v2) where f_x hits v1' = +-b_{l1}.
struct StripBoundary {
    std::vector<double> v2;
    std::vector<double> left, right;
    bool ok = true;
};

[[nodiscard]] inline StripBoundary one_step_strip(const ChartMap& m, int n_samples = 33) {
    StripBoundary sb;
    const double h = m.source_half(), t = m.target_half();
    for (int i = 0; i < n_samples; ++i) {
        const double v2 = -h + 2 * h * i / (n_samples - 1);
        const auto a = detail::solve_first_component(m, v2, -t, h);
        const auto b = detail::solve_first_component(m, v2, t, h);
        if (!a || !b) {
            sb.ok = false;
            return sb;
        }
        sb.v2.push_back(v2);
        sb.left.push_back(std::min(*a, *b));
        sb.right.push_back(std::max(*a, *b));
    }
    return sb;
}

[[nodiscard]] inline OneStepReport verify_one_step_hyperbolicity(const ChartMap& m, const DerivedConstants& k,
                                                                int n_samples, std::uint64_t seed = 1) {
    OneStepReport rep;
    const double lam = k.lambda;
    const Cone ku = Cone::make(ConeKind::unstable, false, k), kus = Cone::make(ConeKind::unstable, true, k);
    const Cone kss = Cone::make(ConeKind::stable, true, k);
    const double grow = std::exp(lam / 2);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double h = m.source_half();
    auto note = [&](const std::string& w) {
        ++rep.violations;
        if (rep.witness.empty()) rep.witness = w;
    };
    long tries = 0;
    while (rep.samples < n_samples && tries < 200L * n_samples) {
        ++tries;
        const Vec2 y{h * unit(rng), h * unit(rng)};
        const Vec2 z = m.evaluate_unchecked(y);
        if (!m.in_target(z)) continue;  // y outside B^{s,1}
        ++rep.samples;
        const Mat2 d = m.derivative(y);
        const Mat2 di = d.inverse();
        // boundary, axis and random directions of each cone
        std::vector<double> slopes = {0.0, 0.999999 * k.omega, -0.999999 * k.omega};
        for (int r = 0; r < 3; ++r) slopes.push_back(k.omega * unit(rng) * 0.999999);
        for (double sl : slopes) {
            const Vec2 vu = normalized(Vec2{1.0, sl});
            const Vec2 wu = d * vu;
            ++rep.vectors;
            rep.min_expansion_u = std::min(rep.min_expansion_u, norm(wu));
            rep.max_cone_ratio_u = std::max(rep.max_cone_ratio_u, kus.aperture_ratio(wu));
            if (!ku.contains(vu)) continue;
            if (!kus.contains(wu) || norm(wu) < grow) {
                std::ostringstream w;
                w << "unstable cone at y=(" << y.x << "," << y.y << ") slope " << sl << ": |Dv|=" << norm(wu)
                  << " ratio " << kus.aperture_ratio(wu);
                note(w.str());
            }
            const Vec2 vs = normalized(Vec2{sl, 1.0});
            const Vec2 ws = di * vs;
            ++rep.vectors;
            rep.min_expansion_s = std::min(rep.min_expansion_s, norm(ws));
            rep.max_cone_ratio_s = std::max(rep.max_cone_ratio_s, kss.aperture_ratio(ws));
            if (!kss.contains(ws) || norm(ws) < grow) {
                std::ostringstream w;
                w << "stable cone at z=(" << z.x << "," << z.y << ") slope " << sl << ": |Dv|=" << norm(ws)
                  << " ratio " << kss.aperture_ratio(ws);
                note(w.str());
            }
        }
    }
    if (rep.samples < n_samples) {
        rep.strip_ok = false;
        rep.witness += " only " + std::to_string(rep.samples) + " chart points found in B^{s,1}";
    }
    // Strip containment: boundaries strongly stable and inside the narrow box.
    const StripBoundary sb = one_step_strip(m);
    if (!sb.ok) {
        rep.strip_ok = false;
        if (rep.witness.empty()) rep.witness = "strip boundary does not cross the source box";
        return rep;
    }
    const double limit = std::exp(-lam / 3) * h;
    for (std::size_t i = 0; i < sb.v2.size(); ++i) {
        rep.max_strip_extent = std::max({rep.max_strip_extent, std::abs(sb.left[i]) / h, std::abs(sb.right[i]) / h});
        if (i > 0) {
            const double dv2 = sb.v2[i] - sb.v2[i - 1];
            rep.max_strip_slope = std::max({rep.max_strip_slope, std::abs(sb.left[i] - sb.left[i - 1]) / dv2,
                                            std::abs(sb.right[i] - sb.right[i - 1]) / dv2});
        }
        // The top and bottom of the strip must land inside the target box.
        for (double v1 : {sb.left[i], sb.right[i]}) {
            const Vec2 z = m.evaluate_unchecked(Vec2{v1, sb.v2[i]});
            if (std::abs(z.y) > m.target_half() * (1 + 1e-9)) rep.strip_ok = false;
        }
    }
    if (rep.max_strip_extent * h > limit || rep.max_strip_slope > k.strong_omega()) rep.strip_ok = false;
    if (!rep.strip_ok && rep.witness.empty()) {
        std::ostringstream w;
        w << "strip extent " << rep.max_strip_extent << " (limit " << std::exp(-lam / 3) << "), slope "
          << rep.max_strip_slope << " (limit " << k.strong_omega() << ")";
        rep.witness = w.str();
    }
    return rep;
}

// Halve b from b0 until the one-step check passes at every sampled base
// point (n_points bases, samples_per_point chart points each).
struct BCalibration {
    double b = 0;
    int halvings = 0;
    long samples = 0;
    std::string last_failure;
};

[[nodiscard]] inline BCalibration calibrate_b(const SurfaceMap& f, const HyperbolicityParams& params,
                                              const DerivedConstants& k, int n_points = 100,
                                              int samples_per_point = 5, std::uint64_t seed = 7,
                                              double b0 = 0.05, int max_halvings = 40) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    ChartSettings cs;
    cs.b = 1.0;
    std::vector<std::pair<Chart, Chart>> charts;
    for (int i = 0; i < n_points; ++i) {
        const TorusPoint p(u01(rng), u01(rng));
        const Splitting sp = estimate_splitting(f, p, 30);
        const auto regs = regularity_along_orbit(f, sp, params, 30, 1);
        const auto cc = charts_along_orbit(f, sp, regs, k, cs, 1);
        charts.emplace_back(cc[1], cc[2]);
    }
    BCalibration cal;
    double b = b0;
    for (int h = 0; h <= max_halvings; ++h, b *= 0.5) {
        bool pass = true;
        long samples = 0;
        for (std::size_t i = 0; i < charts.size() && pass; ++i) {
            const ChartMap m = chart_map(f, rescaled(charts[i].first, 1.0, b), rescaled(charts[i].second, 1.0, b));
            const OneStepReport r = verify_one_step_hyperbolicity(m, k, samples_per_point, seed + i);
            samples += r.samples;
            if (!r.ok()) {
                pass = false;
                cal.last_failure = r.witness;
            }
        }
        if (pass) {
            cal.b = b;
            cal.halvings = h;
            cal.samples = samples;
            return cal;
        }
    }
    throw ConvergenceError("b calibration failed after " + std::to_string(max_halvings) +
                           " halvings: " + cal.last_failure);
}

}  // namespace hypertower
