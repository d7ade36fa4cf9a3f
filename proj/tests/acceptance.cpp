// Acceptance run: both maps through every suite, then one PASS/FAIL line per
// criterion. The checks read the emitted tables and compare them with
// closed-form oracles computed here, not with the library's own verdicts.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hypertower/hypertower.hpp"

using namespace hypertower;
namespace fs = std::filesystem;

namespace {

const double kMu = (3 + std::sqrt(5.0)) / 2;
const double kChi = std::log(kMu);

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------------------
// reading the artifacts

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::size_t col(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw std::runtime_error("no column " + name);
    }
    [[nodiscard]] double num(std::size_t r, const std::string& name) const {
        const std::string& s = rows[r][col(name)];
        if (s == "nan" || s == "-nan") return NAN;
        if (s == "inf") return INFINITY;
        if (s == "-inf") return -INFINITY;
        return std::stod(s);
    }
    [[nodiscard]] const std::string& str(std::size_t r, const std::string& name) const { return rows[r][col(name)]; }
};

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream in(line);
    std::string cell;
    while (std::getline(in, cell, ',')) out.push_back(cell);
    return out;
}

Csv read_csv(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing " + p.string());
    Csv c;
    std::string line;
    std::getline(in, line);
    c.header = split(line);
    while (std::getline(in, line))
        if (!line.empty()) c.rows.push_back(split(line));
    return c;
}

double value(const Json& j) { return tagged_value(j, "metric"); }

// ---------------------------------------------------------------------------
// oracles

// Bracket of the cat map: z = x + a e^s with y - z along e^u.
TorusPoint cat_bracket(const TorusPoint& x, const TorusPoint& y) {
    const double phi = (1 + std::sqrt(5.0)) / 2;
    const double nu = std::hypot(1.0, phi - 1), ns = std::hypot(1.0, phi);
    const double eux = 1 / nu, euy = (phi - 1) / nu, esx = 1 / ns, esy = -phi / ns;
    double dx = y.x1 - x.x1, dy = y.x2 - x.x2;
    dx -= std::round(dx);
    dy -= std::round(dy);
    const double a = (dx * euy - dy * eux) / (esx * euy - esy * eux);
    return TorusPoint(x.x1 + a * esx, x.x2 + a * esy);
}

// Cat-map periodic points are (A^P - I)^{-1} m: rationals checked in
// integer arithmetic.
struct Rational {
    std::int64_t n1, n2, den;
};

std::array<std::int64_t, 4> cat_power_minus_identity(int period) {
    std::int64_t a = 1, b = 0, c = 0, d = 1;
    for (int i = 0; i < period; ++i) {
        const std::int64_t na = 2 * a + c, nb = 2 * b + d, nc = a + c, nd = b + d;
        a = na, b = nb, c = nc, d = nd;
    }
    return {a - 1, b, c, d - 1};
}

Rational nearest_periodic(double x1, double x2, int period) {
    const auto [a, b, c, d] = cat_power_minus_identity(period);
    const auto m1 = std::llround(static_cast<double>(a) * x1 + static_cast<double>(b) * x2);
    const auto m2 = std::llround(static_cast<double>(c) * x1 + static_cast<double>(d) * x2);
    std::int64_t det = a * d - b * c;
    Rational r{d * m1 - b * m2, -c * m1 + a * m2, det};
    if (det < 0) r = {-r.n1, -r.n2, -det};
    return r;
}

bool exactly_periodic(const Rational& q, int period) {
    const std::int64_t D = q.den;
    std::int64_t a = ((q.n1 % D) + D) % D, b = ((q.n2 % D) + D) % D;
    const std::int64_t a0 = a, b0 = b;
    for (int i = 0; i < period; ++i) {
        const std::int64_t na = (2 * a + b) % D, nb = (a + b) % D;
        a = na, b = nb;
    }
    return a == a0 && b == b0;
}

double torus_distance(double x1, double x2, double y1, double y2) {
    double dx = x1 - y1, dy = x2 - y2;
    dx -= std::round(dx);
    dy -= std::round(dy);
    return std::hypot(dx, dy);
}

double rational_distance(const Rational& q, double x1, double x2) {
    auto red = [&](std::int64_t v) { return static_cast<double>(((v % q.den) + q.den) % q.den) / static_cast<double>(q.den); };
    return torus_distance(red(q.n1), red(q.n2), x1, x2);
}

// least-squares slope of y against x
double slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// tail rate refitted from tail.csv over [lo, hi]
double refit_tail(const Csv& tail, double lo, double hi) {
    std::vector<double> x, y;
    for (std::size_t r = 0; r < tail.rows.size(); ++r) {
        const double n = tail.num(r, "n"), f = tail.num(r, "fraction");
        if (n < lo || n > hi || !(f > 0)) continue;
        x.push_back(n);
        y.push_back(std::log(f));
    }
    return x.size() < 2 ? NAN : slope(x, y);
}

// ---------------------------------------------------------------------------

struct Outcome {
    bool pass = true;
    std::ostringstream note;  // measured values
    std::vector<std::string> failed;
    void require(bool ok, const std::string& why) {
        if (!ok) {
            pass = false;
            failed.push_back(why);
        }
    }
    [[nodiscard]] std::string text() const {
        std::string t = note.str();
        for (const auto& f : failed) t += (t.empty() ? "" : "; ") + std::string("FAILED ") + f;
        return t;
    }
};

struct MapRun {
    std::string label;
    std::unique_ptr<Pipeline> pipe;
    fs::path dir;
    SuiteResult constants, charts, shadow, close, nice, tower, stats;
};

std::string fmt(double v, int prec = 3) {
    std::ostringstream o;
    o << std::setprecision(prec) << v;
    return o.str();
}

}  // namespace

int main() {
    const fs::path root = fs::temp_directory_path() / "hypertower_acceptance";
    fs::remove_all(root);

    MapRun runs[2];
    runs[0].label = "cat";
    runs[1].label = "perturbed-cat";
    for (MapRun& m : runs) {
        RunConfig c;
        c.map = m.label;
        m.dir = root / m.label;
        c.output = m.dir.string();
        // the bracket oracle is for the cat map; the perturbed map only needs
        // the decay and self-shadowing runs of the shadow suite
        if (m.label != "cat") c.bracket_pairs = 100;
        m.pipe = std::make_unique<Pipeline>(c, EmitOptions{}, &std::cerr);
        m.constants = m.pipe->run_constants();
    }
    MapRun& cat = runs[0];
    MapRun& pert = runs[1];

    std::vector<std::tuple<int, std::string, bool, std::string, double>> lines;
    auto report = [&](int id, const std::string& name, Outcome& o, double seconds) {
        lines.emplace_back(id, name, o.pass, o.text(), seconds);
        std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << std::setw(2) << id << "] " << name << " ("
                  << std::fixed << std::setprecision(1) << seconds << " s)" << std::defaultfloat;
        if (!o.text().empty()) std::cout << ": " << o.text();
        std::cout << std::endl;
    };

    // 1 ----------------------------------------------------------------------
    {
        Outcome o;
        const auto t0 = Clock::now();
        const ResolvedParams& rp = cat.pipe->resolved();
        const SurfaceMap& f = *rp.f;
        std::mt19937_64 rng(101);
        std::uniform_real_distribution<double> U(0, 1);
        double worst_diag = 0, worst_off = 0, minA = 1e300, maxB = 0;
        for (int i = 0; i < 50; ++i) {
            const TorusPoint x(U(rng), U(rng));
            const Splitting sp = estimate_splitting(f, x, 30);
            const auto cs = charts_along_orbit(f, sp, regularity_along_orbit(f, sp, rp.params, 30, 1), rp.k,
                                               cat.pipe->chart_settings(), 1);
            const Mat2 m = conjugated_derivative(f, cs[1], cs[2]);
            worst_diag = std::max({worst_diag, std::abs(m.a - kMu), std::abs(m.d - 1 / kMu)});
            worst_off = std::max({worst_off, std::abs(m.b), std::abs(m.c)});
            minA = std::min(minA, std::abs(m.a));
            maxB = std::max(maxB, std::abs(m.d));
        }
        const double secs = since(t0);
        const double lam = kChi / 2;
        o.require(worst_diag <= 1e-6, "diagonal off diag(2.618034, 0.381966) by " + fmt(worst_diag));
        o.require(worst_off < 1e-10, "off-diagonal " + fmt(worst_off));
        o.require(minA >= std::exp(lam) && maxB <= std::exp(-lam), "A or B outside e^{+-lambda}");
        o.require(std::abs(rp.params.lambda - lam) < 1e-8, "lambda is not chi/2");
        o.require(secs < 1, "runtime " + fmt(secs) + " s");
        o.note << "50 points, |diag - eig| " << fmt(worst_diag) << ", offdiag " << fmt(worst_off)
               << ", A " << fmt(minA, 7) << " >= " << fmt(std::exp(lam), 7) << ", B " << fmt(maxB, 7);
        report(1, "Oseledets-Pesin reduction on the cat map", o, secs);
    }

    // 2, 3 -------------------------------------------------------------------
    {
        double secs = 0;
        for (MapRun& m : runs) {
            m.charts = m.pipe->run_charts();
            secs += m.charts.seconds;
        }
        Outcome o2, o3;
        for (const MapRun& m : runs) {
            const Csv c = read_csv(m.dir / "charts.csv");
            long samples = 0, viol = 0, strip = 0, pesin = 0;
            for (std::size_t r = 0; r < c.rows.size(); ++r) {
                samples += static_cast<long>(c.num(r, "samples"));
                viol += static_cast<long>(c.num(r, "violations"));
                strip += c.str(r, "strip_ok") == "true" ? 0 : 1;
                pesin += c.str(r, "pesin_ok") == "true" ? 0 : 1;
            }
            o2.require(samples >= 500, m.label + ": only " + std::to_string(samples) + " chart samples");
            o2.require(viol == 0, m.label + ": " + std::to_string(viol) + " cone violations");
            o2.require(strip == 0, m.label + ": " + std::to_string(strip) + " strip failures");
            o2.require(pesin == 0, m.label + ": " + std::to_string(pesin) + " reduction failures");
            o2.note << (o2.note.str().empty() ? "" : ", ") << m.label << " " << samples << " samples/" << viol
                    << " violations";

            const Csv b = read_csv(m.dir / "branches.csv");
            long bad = 0, maxlen = 0;
            double worst_width = 0, min_margin = 1e300;
            for (std::size_t r = 0; r < b.rows.size(); ++r) {
                maxlen = std::max(maxlen, static_cast<long>(b.num(r, "length")));
                worst_width = std::max(worst_width, b.num(r, "width") / b.num(r, "width_bound"));
                min_margin = std::min(min_margin, b.num(r, "min_growth_margin"));
                bad += b.str(r, "ok") == "true" ? 0 : 1;
            }
            o3.require(b.rows.size() == 100, m.label + ": " + std::to_string(b.rows.size()) + " branches");
            o3.require(maxlen <= 30, m.label + ": branch longer than 30");
            o3.require(bad == 0, m.label + ": " + std::to_string(bad) + " branches fail");
            o3.require(worst_width <= 1, m.label + ": width over 2 b e^{-lambda k/3}");
            o3.require(min_margin >= 0, m.label + ": expansion below e^{lambda k/3}");
            o3.note << (o3.note.str().empty() ? "" : ", ") << m.label << " 100 branches, width/bound "
                    << fmt(worst_width) << ", growth margin " << fmt(min_margin);
        }
        o2.require(secs < 30, "runtime " + fmt(secs) + " s");
        o3.require(secs < 120, "runtime " + fmt(secs) + " s");
        report(2, "One-step chart hyperbolicity", o2, secs);
        report(3, "Regular branches", o3, secs);
    }

    // 4 ----------------------------------------------------------------------
    {
        double secs = 0;
        for (MapRun& m : runs) {
            m.shadow = m.pipe->run_shadow();
            secs += m.shadow.seconds;
        }
        Outcome o;
        for (const MapRun& m : runs) {
            const double lam = m.pipe->resolved().k.lambda;
            const Csv d = read_csv(m.dir / "shadow_decay.csv");
            std::map<long, double> first_bound;
            std::map<long, long> depth;
            long over = 0, shape = 0;
            for (std::size_t r = 0; r < d.rows.size(); ++r) {
                const long run = static_cast<long>(d.num(r, "run")), n = static_cast<long>(d.num(r, "n"));
                if (n == 0) first_bound[run] = d.num(r, "bound");
                depth[run] = std::max(depth[run], n);
                if (d.num(r, "diameter") > d.num(r, "bound")) ++over;
                // the bound is 4 b0 e^{-lambda n/3}
                const double expect = first_bound[run] * std::exp(-lam * static_cast<double>(n) / 3);
                if (std::abs(d.num(r, "bound") / expect - 1) > 1e-9) ++shape;
            }
            long shallow = 0;
            for (const auto& [run, n] : depth) shallow += n < 30 ? 1 : 0;
            o.require(depth.size() == 20, m.label + ": " + std::to_string(depth.size()) + " shadowing runs");
            o.require(shallow == 0, m.label + ": runs stop before depth 30");
            o.require(over == 0, m.label + ": " + std::to_string(over) + " diameters over 4 b0 e^{-lambda n/3}");
            o.require(shape == 0, m.label + ": bound does not decay as e^{-lambda n/3}");
            const double self = value(m.shadow.metrics.at("self_shadow_max_error"));
            o.require(self <= 1e-9, m.label + ": true orbit shadowed at distance " + fmt(self));
            o.note << (o.note.str().empty() ? "" : ", ") << m.label << " self-shadow " << fmt(self);
        }
        const Csv b = read_csv(cat.dir / "bracket.csv");
        double worst = 0;
        long uncertified = 0;
        for (std::size_t r = 0; r < b.rows.size(); ++r) {
            const TorusPoint z = cat_bracket(TorusPoint(b.num(r, "x1"), b.num(r, "x2")), TorusPoint(b.num(r, "y1"), b.num(r, "y2")));
            worst = std::max(worst, torus_distance(z.x1, z.x2, b.num(r, "z1"), b.num(r, "z2")));
            uncertified += b.str(r, "certified") == "true" ? 0 : 1;
        }
        o.require(b.rows.size() == 1000, "cat: " + std::to_string(b.rows.size()) + " of 1000 pairs bracketed");
        o.require(uncertified == 0, "cat: " + std::to_string(uncertified) + " uncertified brackets");
        o.require(worst <= 1e-9, "cat bracket off the linear solve by " + fmt(worst));
        o.require(secs < 60, "runtime " + fmt(secs) + " s");
        o.note << ", cat bracket oracle error " << fmt(worst) << " over " << b.rows.size() << " pairs";
        report(4, "Shadowing and bracket", o, secs);
    }

    // 5 ----------------------------------------------------------------------
    {
        double secs = 0;
        for (MapRun& m : runs) {
            m.close = m.pipe->run_close();
            secs += m.close.seconds;
        }
        Outcome o;
        for (const MapRun& m : runs) {
            const SurfaceMap& f = *m.pipe->resolved().f;
            const Csv c = read_csv(m.dir / "closing.csv");
            double worst_res = 0, worst_rat = 0;
            long not_exact = 0;
            for (std::size_t r = 0; r < c.rows.size(); ++r) {
                const int period = static_cast<int>(c.num(r, "period"));
                const double x1 = c.num(r, "x1"), x2 = c.num(r, "x2");
                TorusPoint p(x1, x2);
                for (int i = 0; i < period; ++i) p = f.forward(p);
                worst_res = std::max(worst_res, torus_distance(p.x1, p.x2, x1, x2));
                if (m.label == "cat") {
                    const Rational q = nearest_periodic(x1, x2, period);
                    if (!exactly_periodic(q, period)) ++not_exact;
                    worst_rat = std::max(worst_rat, rational_distance(q, x1, x2));
                }
            }
            o.require(c.rows.size() == 50, m.label + ": " + std::to_string(c.rows.size()) + " closed patterns");
            o.require(worst_res <= 1e-12, m.label + ": |f^P(p) - p| = " + fmt(worst_res));
            o.note << (o.note.str().empty() ? "" : ", ") << m.label << " residual " << fmt(worst_res);
            if (m.label == "cat") {
                o.require(not_exact == 0, "cat: rounded rational is not periodic");
                o.require(worst_rat <= 1e-9, "cat: rational oracle error " + fmt(worst_rat));
                o.note << ", rational error " << fmt(worst_rat);
            }
        }
        o.require(secs < 60, "runtime " + fmt(secs) + " s");
        report(5, "Closing", o, secs);
    }

    // 6 ----------------------------------------------------------------------
    {
        double secs = 0;
        for (MapRun& m : runs) {
            m.nice = m.pipe->run_nice();
            secs += m.nice.seconds;
        }
        Outcome o;
        for (const MapRun& m : runs) {
            const Json n = m.nice.metrics.at("niceness");
            o.require(m.nice.pass && n.at("ok").get<bool>(), m.label + ": niceness check fails");
            o.require(value(n.at("n_checked")) == 50, m.label + ": " + fmt(value(n.at("n_checked"))) + " multiples of T checked");
            o.require(value(n.at("violations")) == 0, m.label + ": interior re-entry");
            o.note << (o.note.str().empty() ? "" : ", ") << m.label << " T = " << m.pipe->domain().T << ", "
                   << std::llround(value(n.at("images"))) << " images";
        }
        // Cat map: each boundary side lies on an eigenline through p or q and
        // ends there, so f^{nT} (f^{-nT} for unstable sides) moves it along
        // itself toward that end. In eigen-coordinates about the anchor the
        // image of s e_s is s mu^{-nT} e_s, so the check is exact.
        if (cat.nice.pass) {
            const NiceDomain& d = cat.pipe->domain();
            const double phi = (1 + std::sqrt(5.0)) / 2;
            const Vec2 eu = normalized(Vec2{1, phi - 1}), es = normalized(Vec2{1, -phi});
            // sides in ring order: u_p (p->a), s_q (a->q), u_q (q->c), s_p (c->p)
            const std::array<Vec2, 4> anchor = {d.p_lift, d.q_lift, d.q_lift, d.p_lift};
            const std::array<bool, 4> stable = {false, true, false, true};
            long escaped = 0;
            double worst_off = 0, worst_end = 0;
            for (std::size_t side = 0; side < 4; ++side) {
                const auto& poly = d.boundary[side];
                const Vec2 along = stable[side] ? es : eu, across = stable[side] ? eu : es;
                // coordinates (t along the eigenline, o across it) of w = z - anchor
                auto coords = [&](const Vec2& w) {
                    const double det = along.x * across.y - along.y * across.x;
                    return std::pair{(w.x * across.y - w.y * across.x) / det, (along.x * w.y - along.y * w.x) / det};
                };
                const Vec2 far_end = norm(poly.front() - anchor[side]) > norm(poly.back() - anchor[side]) ? poly.front() : poly.back();
                const Vec2 near_end = far_end.x == poly.front().x && far_end.y == poly.front().y ? poly.back() : poly.front();
                worst_end = std::max(worst_end, norm(near_end - anchor[side]));
                const double t_end = coords(far_end - anchor[side]).first;
                for (const Vec2& z : poly) {
                    const auto [t, off] = coords(z - anchor[side]);
                    worst_off = std::max(worst_off, std::abs(off));
                    for (int k = 1; k <= 50; ++k) {
                        const double tk = t * std::pow(kMu, -static_cast<double>(k * d.T));
                        if (tk * t_end < 0 || std::abs(tk) > std::abs(t_end) * (1 + 1e-12)) ++escaped;
                    }
                }
            }
            o.require(worst_end <= 1e-9, "cat: a side does not end at its periodic point (" + fmt(worst_end) + ")");
            o.require(worst_off <= 1e-9, "cat: a side leaves its eigenline by " + fmt(worst_off));
            o.require(escaped == 0, "cat: " + std::to_string(escaped) + " boundary images leave their side");
            o.note << ", cat sides on eigenlines within " << fmt(worst_off) << ", invariant under f^{+-nT}";
        }
        report(6, "Niceness of the constructed domain", o, secs);
    }

    // 7, 8 -------------------------------------------------------------------
    {
        Outcome o7, o8;
        double secs = 0;
        for (MapRun& m : runs) {
            m.tower = m.pipe->run_tower();
            secs = std::max(secs, m.tower.seconds);
            const Json& M = m.tower.metrics;
            if (!M.contains("axioms")) {
                o7.require(false, m.label + ": tower failed: " + (m.tower.failures.empty() ? "" : m.tower.failures[0]));
                o8.require(false, m.label + ": tower failed");
                continue;
            }
            const double entries = value(M.at("catalog").at("entries"));
            const double lam_viol = value(M.at("laminar_stable").at("violations")) + value(M.at("laminar_unstable").at("violations"));
            o7.require(entries >= 50, m.label + ": catalog of " + fmt(entries) + " branches");
            o7.require(lam_viol == 0, m.label + ": " + fmt(lam_viol) + " nesting violations");
            o7.note << (o7.note.str().empty() ? "" : ", ") << m.label << " " << std::llround(entries) << " branches, "
                    << std::llround(value(M.at("laminar_stable").at("nested")) + value(M.at("laminar_unstable").at("nested")))
                    << " nested pairs";

            const Json& Y = M.at("axioms");
            const Json& P = M.at("partition");
            // Y0: elements keyed by (tau, label) are distinct and account for every assigned sample
            const Csv part = read_csv(m.dir / "partition.csv");
            std::map<std::tuple<long, long, long>, int> keys;
            double members = 0;
            for (std::size_t r = 0; r < part.rows.size(); ++r) {
                ++keys[{static_cast<long>(part.num(r, "tau")), static_cast<long>(part.num(r, "label_x")),
                        static_cast<long>(part.num(r, "label_y"))}];
                members += part.num(r, "samples");
            }
            o8.require(keys.size() == part.rows.size(), m.label + ": repeated partition element");
            o8.require(members == value(P.at("assigned")), m.label + ": elements do not partition the assigned samples");
            o8.require(value(Y.at("markov_checked")) > 0 && value(Y.at("markov_failures")) == 0, m.label + ": Markov failures");
            const double checked = value(Y.at("first_return_checked")), amb = value(Y.at("first_return_ambiguous"));
            o8.require(value(Y.at("first_return_hard")) == 0, m.label + ": first-return mismatches");
            o8.require(amb <= 0.005 * checked, m.label + ": " + fmt(amb) + " ambiguous first returns");
            o8.require(Y.at("first_return_log").size() == static_cast<std::size_t>(amb), m.label + ": ambiguous returns not logged");
            const double b1 = std::max(value(Y.at("beta1_stable")), value(Y.at("beta1_unstable")));
            o8.require(b1 < 1, m.label + ": beta1 = " + fmt(b1));
            const Csv dist = read_csv(m.dir / "distortion.csv");
            o8.require(dist.rows.size() >= 8, m.label + ": distortion over fewer than 8 F-steps");
            if (m.label == "cat") {
                const double T = value(P.at("T"));
                o8.require(std::abs(b1 - std::pow(kMu, -T)) < 1e-6, "cat: beta1 is not mu^-T");
                for (std::size_t r = 0; r < dist.rows.size(); ++r)
                    o8.require(dist.num(r, "max_log_ratio") == 0, "cat: nonzero distortion at step " + dist.str(r, "n"));
                o8.note << "cat beta1 " << fmt(b1) << " = mu^-" << T << ", distortion 0";
            } else {
                std::vector<double> x, y;
                for (std::size_t r = 0; r < dist.rows.size(); ++r)
                    if (dist.num(r, "max_log_ratio") > 0) {
                        x.push_back(dist.num(r, "n"));
                        y.push_back(std::log(dist.num(r, "max_log_ratio")));
                    }
                const double beta2 = x.size() >= 2 ? std::exp(slope(x, y)) : NAN;
                const double first = dist.num(0, "max_log_ratio"), last = dist.num(dist.rows.size() - 1, "max_log_ratio");
                o8.require(beta2 < 1, m.label + ": refitted beta2 = " + fmt(beta2));
                o8.require(last < first, m.label + ": no decay over the F-steps");
                o8.note << ", " << m.label << " beta1 " << fmt(b1) << ", beta2 " << fmt(beta2) << " (" << fmt(first)
                        << " -> " << fmt(last) << ")";
            }
            o8.note << ", " << std::llround(amb) << "/" << std::llround(checked) << " ambiguous";
            o8.require(m.tower.seconds < 600, m.label + ": runtime " + fmt(m.tower.seconds) + " s");
        }
        report(7, "Branch dichotomy over the catalog", o7, secs);
        report(8, "Tower axioms at the 512^2 grid", o8, secs);
    }

    // 9, 10, 11 ---------------------------------------------------------------
    {
        double stats_secs = 0;
        for (MapRun& m : runs) {
            m.stats = m.pipe->run_stats();
            stats_secs += m.stats.seconds;
        }
        Outcome o9;
        const auto t0 = Clock::now();
        for (MapRun& m : runs) {
            const Json& M = m.stats.metrics;
            if (!M.contains("fitted_rate")) {
                o9.require(false, m.label + ": no return statistics");
                continue;
            }
            const double T = value(M.at("T")), H = value(M.at("horizon"));
            const double rate = value(M.at("fitted_rate"));
            const Csv tail = read_csv(m.dir / "tail.csv");
            const double refit = refit_tail(tail, 5 * T, H / 2);
            o9.require(std::abs(refit - rate) <= 1e-9 * std::abs(rate), m.label + ": tail refit " + fmt(refit) + " vs " + fmt(rate));
            o9.require(rate <= -0.05 / T, m.label + ": tail rate " + fmt(rate) + " above -0.05/T");

            // same domain, horizon doubled
            const RunConfig& c = m.pipe->config();
            TowerOptions opt;
            opt.grid = c.grid;
            opt.depth = c.depth;
            opt.horizon = static_cast<int>(2 * H);
            opt.tol = c.tol;
            opt.band = c.band;
            const ResolvedParams& rp = m.pipe->resolved();
            const NiceDomain& d = m.pipe->domain();
            const Saturation sat = saturate(*rp.f, d, detail::domain_anchors(d), rp.k, c.level, opt);
            const TowerPartition P = build_partition(sat.catalog, sat.rect);
            const double rate2 = return_stats(sat.rect, P).fitted_rate;
            o9.require(std::abs(rate2 / rate - 1) <= 0.25, m.label + ": rate " + fmt(rate) + " -> " + fmt(rate2) + " under horizon doubling");
            o9.note << (o9.note.str().empty() ? "" : ", ") << m.label << " rate " << fmt(rate) << " (bound " << fmt(-0.05 / T)
                    << "), doubled horizon " << fmt(rate2);

            if (m.label == "cat") {
                // Kac: E[tau] = T / mu(Gamma) for Lebesgue
                const Csv hist = read_csv(m.dir / "histogram.csv");
                double sum = 0, count = 0;
                for (std::size_t r = 0; r < hist.rows.size(); ++r) {
                    sum += hist.num(r, "tau") * hist.num(r, "count");
                    count += hist.num(r, "count");
                }
                const double kac = T / value(M.at("gamma_measure"));
                const double ratio = (sum / count) / kac;
                o9.require(std::abs(ratio - 1) <= 0.1, "cat: mean return " + fmt(sum / count) + " vs Kac " + fmt(kac));
                o9.note << ", cat mean return / Kac " << fmt(ratio, 5);
            }
        }
        report(9, "Return-time tail and Kac", o9, since(t0) + stats_secs);

        Outcome o10;
        {
            const Csv pin = read_csv(cat.dir / "pinheiro.csv");
            long within = 0;
            for (std::size_t r = 0; r < pin.rows.size(); ++r) {
                const double v = pin.num(r, "v"), R = pin.num(r, "R"), N = pin.num(r, "N");
                o10.require(N == 100000, "N = " + fmt(N));
                // lhs rhs = (v/N)(R/v)
                const double prod = v > 0 ? R / N : NAN;
                if (prod >= 0.95 && prod <= 1.05) ++within;
            }
            const double frac = pin.rows.empty() ? 0 : static_cast<double>(within) / static_cast<double>(pin.rows.size());
            // recount v along the first orbits
            const NiceDomain& d = cat.pipe->domain();
            const SurfaceMap& f = *cat.pipe->resolved().f;
            long recount_bad = 0;
            for (std::size_t r = 0; r < std::min<std::size_t>(5, pin.rows.size()); ++r) {
                TorusPoint p(pin.num(r, "x1"), pin.num(r, "x2"));
                long v = 0;
                const long N = static_cast<long>(pin.num(r, "N"));
                for (long i = 1; i <= N; ++i) {
                    p = f.forward(p);
                    if (i % d.T == 0 && d.contains(p)) ++v;
                }
                if (v != static_cast<long>(pin.num(r, "v"))) ++recount_bad;
            }
            o10.require(pin.rows.size() >= 100, std::to_string(pin.rows.size()) + " samples");
            o10.require(frac >= 0.9, "only " + fmt(frac) + " of samples within 5%");
            o10.require(recount_bad == 0, std::to_string(recount_bad) + " return counts differ on recount");
            o10.note << within << "/" << pin.rows.size() << " samples within [0.95, 1.05] at N = 1e5";
        }
        report(10, "Return-frequency relation", o10, stats_secs);

        Outcome o11;
        for (const MapRun& m : runs) {
            const Csv e = read_csv(m.dir / "estimates.csv");
            for (std::size_t r = 0; r < e.rows.size(); ++r) {
                const std::string name = e.str(r, "observable");
                const double t = e.num(r, "tower"), ts = e.num(r, "tower_se"), b = e.num(r, "birkhoff"), bs = e.num(r, "birkhoff_se");
                if (m.label == "cat" && (name == "cos1" || name == "cos2")) {
                    // exact Lebesgue mean 0
                    o11.require(std::abs(t) <= 2 * ts, "cat " + name + " = " + fmt(t) + " +- " + fmt(ts));
                    o11.note << (o11.note.str().empty() ? "" : ", ") << "cat " << name << " " << fmt(t) << " +- " << fmt(ts);
                }
                if (m.label != "cat") {
                    // a constant observable has no spread on either side
                    const double se = std::hypot(ts, bs);
                    const double z = se > 0 ? std::abs(t - b) / se : (t == b ? 0 : INFINITY);
                    o11.require(z <= 3, m.label + " " + name + ": " + fmt(z) + " combined SE");
                    o11.note << ", " << name << " z " << fmt(z, 2);
                }
            }
        }
        o11.require(stats_secs < 300, "runtime " + fmt(stats_secs) + " s");
        report(11, "SRB estimates", o11, stats_secs);
    }

    // 12 ---------------------------------------------------------------------
    {
        Outcome o;
        const auto t0 = Clock::now();
        {
            const ResolvedParams& rp = cat.pipe->resolved();
            const HoelderReport a = verify_splitting_hoelder(*rp.f, rp.params, rp.k, 1, 500);
            const HoelderReport b = verify_su_hoelder(*rp.f, rp.params, rp.k, 1, 500);
            o.require(a.max_ratio == 0 && b.max_ratio == 0, "cat ratios " + fmt(a.max_ratio) + ", " + fmt(b.max_ratio));
            // the splitting is the pair of eigenlines everywhere
            int rejected = 0;
            const auto pts = detail::level_sample(*rp.f, rp.params, rp.k, 1, 100, 11, false, rejected);
            const double phi = (1 + std::sqrt(5.0)) / 2;
            double off = 0;
            for (const auto& h : pts) {
                off = std::max(off, std::abs(h.e_s.x * phi + h.e_s.y) / std::hypot(h.e_s.x, h.e_s.y));
                off = std::max(off, std::abs(h.e_u.x * (phi - 1) - h.e_u.y) / std::hypot(h.e_u.x, h.e_u.y));
            }
            o.require(off < 1e-12, "cat splitting off the eigenlines by " + fmt(off));
            o.note << "cat ratios 0 over " << a.pairs << " pairs";
        }
        {
            const ResolvedParams& rp = pert.pipe->resolved();
            const long level = 200;
            const HoelderReport a = verify_splitting_hoelder(*rp.f, rp.params, rp.k, level, 2000);
            const HoelderReport b = verify_splitting_hoelder(*rp.f, rp.params, rp.k, level, 4000);
            const HoelderReport c = verify_su_hoelder(*rp.f, rp.params, rp.k, level, 2000);
            const HoelderReport d = verify_su_hoelder(*rp.f, rp.params, rp.k, level, 4000);
            for (const auto& [x, y, what] : {std::tuple{a, b, "splitting"}, std::tuple{c, d, "s,u"}}) {
                o.require(x.max_ratio > 0 && std::isfinite(x.max_ratio) && std::isfinite(y.max_ratio),
                          std::string("perturbed ") + what + " ratio not finite");
                o.require(std::abs(y.max_ratio / x.max_ratio - 1) <= 0.2, std::string("perturbed ") + what + " ratio " +
                                                                          fmt(x.max_ratio) + " -> " + fmt(y.max_ratio));
                o.note << ", perturbed " << what << " " << fmt(x.max_ratio) << " -> " << fmt(y.max_ratio);
            }
        }
        report(12, "Hoelder continuity of the splitting and norms", o, since(t0));
    }

    int passed = 0;
    for (const auto& l : lines) passed += std::get<2>(l) ? 1 : 0;
    std::cout << "acceptance: " << passed << "/" << lines.size() << " criteria pass" << std::endl;
    return passed == static_cast<int>(lines.size()) ? 0 : 1;
}
