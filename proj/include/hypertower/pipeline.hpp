#pragma once

// Suites in dependency order: constants (with the b and delta calibration),
// charts, shadowing, closing, nice domain, tower, statistics. Each suite
// writes its dumps under the output directory and can run standalone from
// the dumps of the suites before it.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hypertower/config.hpp"
#include "hypertower/report.hpp"
#include "hypertower/shadow.hpp"
#include "hypertower/stats.hpp"

namespace hypertower {

class MissingPrerequisite : public PreconditionError {
public:
    using PreconditionError::PreconditionError;
};

struct EmitOptions {
    bool csv = true;
    bool jsonl = true;
};

struct SuiteResult {
    std::string name;
    bool pass = true;
    Json metrics = Json::object();
    Json tables = Json::array();
    std::vector<std::string> failures;
    double seconds = 0;  // reported on the console only

    void fail(const std::string& why) {
        pass = false;
        failures.push_back(why);
    }
    [[nodiscard]] Json to_json() const {
        Json j;
        j["suite"] = name;
        j["pass"] = pass;
        j["failures"] = failures;
        j["metrics"] = metrics;
        j["tables"] = tables;
        return j;
    }
};

// A table written as name.csv and/or name.jsonl. CSV cells are plain; JSONL
// numbers carry the column's provenance.
class Table {
public:
    using Cell = std::variant<long long, double, std::string, bool>;
    struct Column {
        std::string name;
        Provenance provenance = Provenance::measured;
    };

    Table(std::string stem, std::vector<Column> columns) : stem_(std::move(stem)), columns_(std::move(columns)) {}

    void add(std::vector<Cell> row) {
        if (row.size() != columns_.size()) throw PreconditionError("table " + stem_ + ": row width mismatch");
        rows_.push_back(std::move(row));
    }
    [[nodiscard]] std::size_t size() const { return rows_.size(); }

    void write(const std::filesystem::path& dir, const EmitOptions& emit) const {
        if (emit.csv) {
            std::ofstream out(dir / (stem_ + ".csv"));
            if (!out) throw PreconditionError("cannot write " + (dir / (stem_ + ".csv")).string());
            out << std::setprecision(17);
            for (std::size_t c = 0; c < columns_.size(); ++c) out << (c ? "," : "") << columns_[c].name;
            out << '\n';
            for (const auto& row : rows_) {
                for (std::size_t c = 0; c < row.size(); ++c) {
                    if (c) out << ',';
                    std::visit(
                        [&](const auto& v) {
                            using V = std::decay_t<decltype(v)>;
                            if constexpr (std::is_same_v<V, bool>) out << (v ? "true" : "false");
                            else out << v;
                        },
                        row[c]);
                }
                out << '\n';
            }
        }
        if (emit.jsonl) {
            std::vector<Json> lines;
            lines.reserve(rows_.size());
            for (const auto& row : rows_) {
                Json j;
                for (std::size_t c = 0; c < row.size(); ++c) {
                    const Column& col = columns_[c];
                    std::visit(
                        [&](const auto& v) {
                            using V = std::decay_t<decltype(v)>;
                            if constexpr (std::is_same_v<V, std::string> || std::is_same_v<V, bool>) j[col.name] = v;
                            else j[col.name] = tagged(v, col.provenance);
                        },
                        row[c]);
                }
                lines.push_back(std::move(j));
            }
            write_jsonl(dir / (stem_ + ".jsonl"), lines);
        }
    }

    [[nodiscard]] Json describe(const EmitOptions& emit) const {
        Json j;
        j["table"] = stem_;
        Json files = Json::array();
        if (emit.csv) files.push_back(stem_ + ".csv");
        if (emit.jsonl) files.push_back(stem_ + ".jsonl");
        j["files"] = files;
        j["rows"] = measured(rows_.size());
        Json cols;
        for (const auto& c : columns_) cols[c.name] = provenance_name(c.provenance);
        j["columns"] = cols;
        return j;
    }

private:
    std::string stem_;
    std::vector<Column> columns_;
    std::vector<std::vector<Cell>> rows_;
};

namespace detail {

[[nodiscard]] inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

[[nodiscard]] inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

[[nodiscard]] inline TorusPoint random_torus_point(std::mt19937_64& rng) {
    const double a = unit(rng);
    return {a, unit(rng)};
}

// Forward orbit with jumps of relative size rel of the allowed bound and
// levels doing a lazy walk in {-1, 0, 1}.
[[nodiscard]] inline PseudoOrbit random_pseudo_orbit(const SurfaceMap& f, const DerivedConstants& k, double delta,
                                                     const TorusPoint& x, int n, double rel, std::mt19937_64& rng) {
    PseudoOrbit po;
    po.delta = delta;
    po.lambda = k.lambda;
    po.points.push_back(x);
    po.levels.push_back(1);
    for (int j = 1; j <= n; ++j) {
        const long step = static_cast<long>(rng() % 3) - 1;
        const long lv = std::max(1L, po.levels.back() + step);
        const double r = rel * delta * std::exp(-k.lambda * static_cast<double>(lv)) / std::sqrt(2.0);
        const Vec2 jump{r * (2 * unit(rng) - 1), r * (2 * unit(rng) - 1)};
        po.points.push_back(TorusPoint(f.forward(po.points.back()).vec() + jump));
        po.levels.push_back(lv);
    }
    return po;
}

// x_{-n}..x_n as backward and forward halves sharing x_0 = po[centre].
[[nodiscard]] inline std::pair<PseudoOrbit, PseudoOrbit> split_orbit(const PseudoOrbit& po, int centre) {
    PseudoOrbit bw = po, fw = po;
    bw.points.resize(static_cast<std::size_t>(centre + 1));
    bw.levels.resize(static_cast<std::size_t>(centre + 1));
    fw.points.erase(fw.points.begin(), fw.points.begin() + centre);
    fw.levels.erase(fw.levels.begin(), fw.levels.begin() + centre);
    bw.measured_levels.clear();
    fw.measured_levels.clear();
    return {fw, bw};
}

[[nodiscard]] inline std::pair<PseudoOrbit, PseudoOrbit> true_two_sided(const SurfaceMap& f, const DerivedConstants& k,
                                                                        double delta, const TorusPoint& x, long level,
                                                                        int n) {
    PseudoOrbit fw = true_orbit(f, x, level, n, k), bw;
    fw.delta = delta;
    bw.delta = delta;
    bw.lambda = k.lambda;
    bw.points.assign(static_cast<std::size_t>(n + 1), x);
    bw.levels.assign(static_cast<std::size_t>(n + 1), level);
    TorusPoint p = x;
    for (int j = 1; j <= n; ++j) {
        p = f.inverse(p);
        bw.points[static_cast<std::size_t>(n - j)] = p;
        bw.levels[static_cast<std::size_t>(n - j)] = level + j;
    }
    return {fw, bw};
}

// Linear maps: [x, y] solves x + a e^s = y + b e^u.
[[nodiscard]] inline TorusPoint linear_bracket(const IMat2& A, const TorusPoint& x, const TorusPoint& y) {
    const EigenDirections ed = eigen_directions(A);
    const Vec2 d = displacement(x, y);
    const double a = cross(d, ed.e_u) / cross(ed.e_s, ed.e_u);
    return TorusPoint(x.vec() + a * ed.e_s);
}

// Periodic points of a linear automorphism: (A^P - I) p = m, p = adj(N) m / det N.
struct RationalPoint {
    std::int64_t n1 = 0, n2 = 0, den = 1;
    [[nodiscard]] TorusPoint point() const {
        auto red = [&](std::int64_t v) { return static_cast<double>(((v % den) + den) % den) / static_cast<double>(den); };
        return {red(n1), red(n2)};
    }
};

[[nodiscard]] inline IMat2 power_minus_identity(const IMat2& A, int period) {
    IMat2 m;
    for (int i = 0; i < period; ++i) m = A * m;
    return IMat2{m.a - 1, m.b, m.c, m.d - 1};
}

[[nodiscard]] inline RationalPoint rational_periodic(const IMat2& A, int period, std::int64_t m1, std::int64_t m2) {
    const IMat2 n = power_minus_identity(A, period);
    RationalPoint r{n.d * m1 - n.b * m2, -n.c * m1 + n.a * m2, n.det()};
    if (r.den < 0) r = {-r.n1, -r.n2, -r.den};
    return r;
}

[[nodiscard]] inline RationalPoint nearest_rational_periodic(const IMat2& A, const TorusPoint& p, int period) {
    const IMat2 n = power_minus_identity(A, period);
    const auto m1 = std::llround(static_cast<double>(n.a) * p.x1 + static_cast<double>(n.b) * p.x2);
    const auto m2 = std::llround(static_cast<double>(n.c) * p.x1 + static_cast<double>(n.d) * p.x2);
    return rational_periodic(A, period, m1, m2);
}

// A^P q = q mod 1, in integer arithmetic.
[[nodiscard]] inline bool rational_is_periodic(const IMat2& A, const RationalPoint& q, int period) {
    const std::int64_t D = q.den;
    std::int64_t a = ((q.n1 % D) + D) % D, b = ((q.n2 % D) + D) % D;
    const std::int64_t a0 = a, b0 = b;
    auto mod = [D](std::int64_t v) { return ((v % D) + D) % D; };
    for (int i = 0; i < period; ++i) {
        const std::int64_t na = mod(mod(A.a) * a + mod(A.b) * b), nb = mod(mod(A.c) * a + mod(A.d) * b);
        a = na;
        b = nb;
    }
    return a == a0 && b == b0;
}

// Newton on f^P(p) = p from p0; nullopt unless the residual reaches 1e-13.
[[nodiscard]] inline std::optional<TorusPoint> newton_periodic(const SurfaceMap& f, TorusPoint p, int period) {
    for (int it = 0; it < 40; ++it) {
        const Vec2 r = displacement(p, iterate(f, p, period));
        if (norm(r) < 1e-15) break;
        p = TorusPoint(p.vec() - solve(cocycle(f, p, period) - Mat2::identity(), r));
    }
    if (distance(iterate(f, p, period), p) > 1e-13) return std::nullopt;
    return p;
}

// Almost-return anchors: five interior points of the parallelogram spanned
// at p by the corners a and c.
[[nodiscard]] inline std::vector<TorusPoint> domain_anchors(const NiceDomain& d) {
    std::vector<TorusPoint> A;
    for (const auto& [s, t] : {std::pair{0.3, 0.3}, {0.7, 0.3}, {0.3, 0.7}, {0.7, 0.7}, {0.5, 0.5}}) {
        const Vec2 z = d.p_lift + s * (d.a - d.p_lift) + t * (d.c - d.p_lift);
        if (d.inside_lift(z)) A.push_back(TorusPoint(z));
    }
    return A;
}

[[nodiscard]] inline Json vec_json(const Vec2& v, Provenance p = Provenance::measured) {
    return Json::array({tagged(v.x, p), tagged(v.y, p)});
}

[[nodiscard]] inline Vec2 vec_from(const Json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 2) throw PreconditionError("dump lacks the point '" + what + "'");
    return {tagged_value(j[0], what), tagged_value(j[1], what)};
}

[[nodiscard]] inline Json config_json(const RunConfig& c) {
    Json j;
    for (const auto& k : config_keys()) j[k.name] = k.show(c);
    return j;
}

}  // namespace detail

// Text block of the configured and derived constants.
[[nodiscard]] inline std::string describe_constants(const ResolvedParams& rp) {
    const DerivedConstants& k = rp.k;
    std::ostringstream o;
    o << std::setprecision(10);
    o << "map        " << rp.f->name() << "\n";
    o << "chi        " << k.chi << (rp.chi_auto ? "  (auto)" : "") << "\n";
    o << "lambda     " << k.lambda << "\n";
    o << "epsilon    " << k.epsilon << "\n";
    o << "alpha      " << k.alpha << "\n";
    o << "epsilon0   " << k.epsilon0 << "\n";
    o << "c1 c2 c3   " << k.c1 << " " << k.c2 << " " << k.c3 << "\n";
    o << "gamma      " << k.gamma << "\n";
    o << "beta       " << k.beta << "\n";
    o << "iota       " << k.iota << "\n";
    o << "eta        " << k.eta << "\n";
    o << "zeta       " << k.zeta << "\n";
    o << "eps1       " << k.eps1 << "\n";
    o << "Q0         " << k.Q0 << "\n";
    o << "Qhat       " << k.Qhat << "\n";
    o << "Q1         " << k.Q1 << "\n";
    o << "omega      " << k.omega << "\n";
    o << "ell'       " << k.ell_prime << "\n";
    return o.str();
}

class Pipeline {
public:
    explicit Pipeline(RunConfig cfg, EmitOptions emit = {}, std::ostream* log = nullptr)
        : cfg_(std::move(cfg)), emit_(emit), log_(log) {}

    [[nodiscard]] const RunConfig& config() const { return cfg_; }
    [[nodiscard]] std::filesystem::path out_dir() const { return cfg_.output; }

    // --------------------------------------------------------------------
    SuiteResult run_constants() {
        SuiteResult s = start("constants");
        calibrate();
        const ResolvedParams& rp = *rp_;

        Json j;
        j["config"] = detail::config_json(cfg_);
        j["map"] = rp.f->name();
        j["chi_auto"] = rp.chi_auto;
        j["params"] = params_json(rp);
        j["derived"] = derived_json(rp.k);
        Json cal;
        cal["b"] = calibrated(bcal_.b);
        cal["b_halvings"] = measured(bcal_.halvings);
        cal["b_samples"] = measured(bcal_.samples);
        cal["delta"] = calibrated(delta_);
        cal["delta_halvings"] = measured(dcal_.halvings);
        cal["delta_pairs"] = measured(dcal_.pairs);
        j["calibration"] = cal;
        ensure_dir();
        write_json(out_dir() / "constants.json", j);
        s.metrics = j;
        s.metrics.erase("config");
        return finish(s);
    }

    // Charts, one-step hyperbolicity and regular branches.
    SuiteResult run_charts() {
        need_constants("charts");
        SuiteResult s = start("charts");
        const ResolvedParams& rp = *rp_;
        const SurfaceMap& f = *rp.f;
        const int n_points = std::max(1, cfg_.chart_samples / 5);
        std::mt19937_64 rng(detail::sub_seed(cfg_.seed, 3));
        std::vector<TorusPoint> pts;
        for (int i = 0; i < n_points; ++i) pts.push_back(detail::random_torus_point(rng));
        struct Row {
            bool ok = false;
            long level = 0;
            OseledetsPesinReport op;
            OneStepReport one;
            std::string error;
        };
        const auto rows = parallel_map<Row>(pts.size(), [&](std::size_t i) {
            Row r;
            try {
                const Splitting sp = estimate_splitting(f, pts[i], 30);
                const auto cs = charts_along_orbit(f, sp, regularity_along_orbit(f, sp, rp.params, 30, 1), rp.k, cs_, 1);
                r.level = cs[1].level;
                r.op = oseledets_pesin_check(f, cs[1], cs[2], rp.k.lambda);
                r.one = verify_one_step_hyperbolicity(chart_map(f, cs[1], cs[2]), rp.k, 5,
                                                      detail::sub_seed(cfg_.seed, 1000 + i));
                r.ok = true;
            } catch (const ConvergenceError& e) {
                r.error = e.what();
            }
            return r;
        });
        Table t("charts", {{"index"}, {"x1"}, {"x2"}, {"level"}, {"A"}, {"B"}, {"offdiag_rel"}, {"pesin_ok"},
                           {"samples"}, {"violations"}, {"strip_ok"}, {"strip_extent"}});
        long rejected = 0, op_fail = 0, violations = 0, samples = 0, strip_fail = 0;
        double max_off = 0, min_A = 1e300, max_B = 0, max_extent = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const Row& r = rows[i];
            if (!r.ok) {
                ++rejected;
                continue;
            }
            if (!r.op.ok) {
                ++op_fail;
                if (s.failures.size() < 20) s.fail("Oseledets-Pesin at point " + std::to_string(i) + ": " + r.op.message);
            }
            if (!r.one.ok()) {
                if (s.failures.size() < 20) s.fail("one-step hyperbolicity at point " + std::to_string(i) + ": " + r.one.witness);
            }
            violations += r.one.violations;
            strip_fail += r.one.strip_ok ? 0 : 1;
            samples += r.one.samples;
            max_off = std::max(max_off, r.op.offdiag_rel);
            min_A = std::min(min_A, std::abs(r.op.A));
            max_B = std::max(max_B, std::abs(r.op.B));
            max_extent = std::max(max_extent, r.one.max_strip_extent);
            t.add({static_cast<long long>(i), pts[i].x1, pts[i].x2, static_cast<long long>(r.level), r.op.A, r.op.B,
                   r.op.offdiag_rel, r.op.ok, static_cast<long long>(r.one.samples),
                   static_cast<long long>(r.one.violations), r.one.strip_ok, r.one.max_strip_extent});
        }
        if (rejected * 10 > n_points) s.fail(std::to_string(rejected) + " of " + std::to_string(n_points) +
                                             " chart points had no regularity level");
        s.metrics["points"] = measured(n_points);
        s.metrics["rejected"] = measured(rejected);
        s.metrics["pesin_failures"] = measured(op_fail);
        s.metrics["max_offdiag_rel"] = measured(max_off);
        s.metrics["min_A"] = measured(min_A);
        s.metrics["max_B"] = measured(max_B);
        s.metrics["e_lambda"] = bound(std::exp(rp.k.lambda));
        s.metrics["one_step_samples"] = measured(samples);
        s.metrics["one_step_violations"] = measured(violations);
        s.metrics["strip_failures"] = measured(strip_fail);
        s.metrics["max_strip_extent"] = measured(max_extent);
        emit(s, t);

        // regular branches from random pseudo-orbits
        std::mt19937_64 brng(detail::sub_seed(cfg_.seed, 4));
        std::vector<PseudoOrbit> orbits;
        for (int i = 0; i < cfg_.branch_orbits; ++i) {
            const int n = 1 + static_cast<int>(brng() % 30);
            const TorusPoint x = detail::random_torus_point(brng);
            orbits.push_back(detail::random_pseudo_orbit(f, rp.k, delta_, x, n, 0.9, brng));
        }
        struct BRow {
            std::string error;
            BranchReport rep;
            SurfaceReport surf;
        };
        const auto brows = parallel_map<BRow>(orbits.size(), [&](std::size_t i) {
            BRow r;
            try {
                const PseudoOrbit& c = orbits[i];
                const auto v = validate_pseudo_orbit(f, c.points, c.levels, delta_, rp.params, rp.k);
                if (!v.ok()) {
                    r.error = v.rejection->message();
                    return r;
                }
                const RegularBranch br = build_regular_branch(f, v.value(), rp.params, rp.k, cs_);
                r.rep = verify_regular_branch(br, rp.k, 5, detail::sub_seed(cfg_.seed, 2000 + i));
                r.surf = verify_branch_surface_estimates(f, br, rp.k, 20, detail::sub_seed(cfg_.seed, 3000 + i));
            } catch (const Error& e) {
                r.error = e.what();
            }
            return r;
        });
        Table bt("branches", {{"index"}, {"length"}, {"width"}, {"width_bound", Provenance::bound},
                              {"min_growth_margin"}, {"max_cone_ratio"}, {"surface_violations"}, {"ok"}});
        long bfail = 0;
        double min_margin = 1e300, max_width_ratio = 0;
        for (std::size_t i = 0; i < brows.size(); ++i) {
            const BRow& r = brows[i];
            const bool ok = r.error.empty() && r.rep.ok() && r.surf.ok();
            if (!ok) {
                ++bfail;
                if (s.failures.size() < 40)
                    s.fail("branch " + std::to_string(i) + ": " +
                           (r.error.empty() ? r.rep.witness + " " + r.surf.witness : r.error));
            }
            if (r.error.empty()) {
                min_margin = std::min(min_margin, r.rep.min_growth_margin);
                if (r.rep.width_bound > 0) max_width_ratio = std::max(max_width_ratio, r.rep.width / r.rep.width_bound);
            }
            bt.add({static_cast<long long>(i), static_cast<long long>(orbits[i].length()), r.rep.width,
                    r.rep.width_bound, r.rep.min_growth_margin, r.rep.max_cone_ratio,
                    static_cast<long long>(r.surf.violations), ok});
        }
        s.metrics["branches"] = measured(cfg_.branch_orbits);
        s.metrics["branch_failures"] = measured(bfail);
        s.metrics["min_growth_margin"] = measured(min_margin);
        s.metrics["max_width_ratio"] = measured(max_width_ratio);
        emit(s, bt);
        return finish(s);
    }

    // Shadowing decay, self-shadowing of true orbits and the bracket.
    SuiteResult run_shadow() {
        need_constants("shadow");
        SuiteResult s = start("shadow");
        const ResolvedParams& rp = *rp_;
        const SurfaceMap& f = *rp.f;
        const int depth = cfg_.shadow_depth;
        std::mt19937_64 rng(detail::sub_seed(cfg_.seed, 5));

        constexpr int kRuns = 20;
        std::vector<PseudoOrbit> orbits;
        for (int i = 0; i < kRuns; ++i) {
            const TorusPoint x = detail::random_torus_point(rng);
            orbits.push_back(detail::random_pseudo_orbit(f, rp.k, delta_, x, 2 * depth, 0.8, rng));
        }
        const auto runs = parallel_map<std::optional<ShadowResult>>(orbits.size(), [&](std::size_t i) {
            const auto [fw, bw] = detail::split_orbit(orbits[i], depth);
            std::optional<ShadowResult> r;
            try {
                r = shadow(f, fw, bw, rp.params, rp.k, cs_, depth, ShadowOptions{cfg_.target_diameter, true, 0});
            } catch (const Error&) {
            }
            return r;
        });
        Table dt("shadow_decay", {{"run"}, {"n"}, {"diameter"}, {"bound", Provenance::bound}});
        long decay_fail = 0, shadow_errors = 0;
        double worst_ratio = 0;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            if (!runs[i]) {
                ++shadow_errors;
                s.fail("shadowing run " + std::to_string(i) + " did not converge");
                continue;
            }
            const ShadowResult& r = *runs[i];
            if (!r.decay_ok()) {
                ++decay_fail;
                s.fail("shadowing run " + std::to_string(i) + " exceeds 4 b0 e^{-lambda n/3}");
            }
            for (std::size_t n = 0; n < r.contraction_log.size(); ++n) {
                worst_ratio = std::max(worst_ratio, r.contraction_log[n] / r.diameter_bound[n]);
                dt.add({static_cast<long long>(i), static_cast<long long>(n), r.contraction_log[n], r.diameter_bound[n]});
            }
        }
        s.metrics["decay_runs"] = measured(kRuns);
        s.metrics["decay_failures"] = measured(decay_fail);
        s.metrics["shadow_errors"] = measured(shadow_errors);
        s.metrics["max_diameter_over_bound"] = measured(worst_ratio);
        emit(s, dt);

        // a true orbit shadows itself
        std::vector<TorusPoint> xs;
        for (int i = 0; i < kRuns; ++i) xs.push_back(detail::random_torus_point(rng));
        const auto self = parallel_map<double>(xs.size(), [&](std::size_t i) {
            const auto [fw, bw] = detail::true_two_sided(f, rp.k, delta_, xs[i], 1, 20);
            try {
                return distance(shadow(f, fw, bw, rp.params, rp.k, cs_, 12).point, xs[i]);
            } catch (const Error&) {
                return std::numeric_limits<double>::infinity();
            }
        });
        double self_err = 0;
        for (double e : self) self_err = std::max(self_err, e);
        if (!(self_err <= 1e-9)) s.fail("true orbit shadowing point differs from its start by " + std::to_string(self_err));
        s.metrics["self_shadow_max_error"] = measured(self_err);

        // bracket on random admissible pairs
        struct Pair {
            TorusPoint x;
            Vec2 dir;
            double frac = 0;
        };
        std::vector<Pair> pairs;
        for (int i = 0; i < cfg_.bracket_pairs; ++i) {
            const TorusPoint x = detail::random_torus_point(rng);
            const double th = 2 * std::numbers::pi * detail::unit(rng);
            pairs.push_back({x, Vec2{std::cos(th), std::sin(th)}, 0.999 * detail::unit(rng)});
        }
        struct BRes {
            std::optional<ShadowResult> r;
            std::string error;
            long level = 1;
            TorusPoint y;
        };
        const bool linear = f.is_linear();
        const auto br = parallel_map<BRes>(pairs.size(), [&](std::size_t i) {
            BRes out;
            try {
                // the admissible radius scales with the level of x
                const long lv = std::max(regularity_at(f, pairs[i].x, rp.params).level, 1L);
                out.level = lv;
                const double rad = bracket_radius(delta_, lv, rp.k);
                out.y = TorusPoint(pairs[i].x.vec() + rad * pairs[i].frac * pairs[i].dir);
                BracketOptions o;
                o.target_diameter = cfg_.target_diameter;
                if (i < 10) o.track = 30;
                out.r = bracket(f, pairs[i].x, out.y, lv, delta_, rp.params, rp.k, cs_, o);
            } catch (const Error& e) {
                out.error = e.what();
            }
            return out;
        });
        Table bt("bracket", {{"pair"}, {"x1"}, {"x2"}, {"y1"}, {"y2"}, {"level"}, {"z1"}, {"z2"}, {"certified"},
                             {"oracle_error"}});
        Table rt("bracket_rates", {{"pair"}, {"n"}, {"distance"}, {"bound", Provenance::bound}});
        long inadmissible = 0, uncertified = 0, rate_fail = 0;
        double oracle_err = 0;
        for (std::size_t i = 0; i < br.size(); ++i) {
            if (!br[i].r) {
                ++inadmissible;
                continue;
            }
            const ShadowResult& r = *br[i].r;
            if (!r.certified) ++uncertified;
            double err = std::numeric_limits<double>::quiet_NaN();
            if (linear) {
                err = distance(r.point, detail::linear_bracket(f.linear_part(), pairs[i].x, br[i].y));
                oracle_err = std::max(oracle_err, err);
            }
            bt.add({static_cast<long long>(i), pairs[i].x.x1, pairs[i].x.x2, br[i].y.x1, br[i].y.x2,
                    static_cast<long long>(br[i].level), r.point.x1, r.point.x2, r.certified, err});
            if (!r.ambient_offset.empty()) {
                for (const RateRow& row : bracket_rates(r, rp.k, br[i].level, distance(pairs[i].x, br[i].y))) {
                    if (row.distance > row.bound) ++rate_fail;
                    rt.add({static_cast<long long>(i), static_cast<long long>(row.n), row.distance, row.bound});
                }
            }
        }
        if (inadmissible * 10 > cfg_.bracket_pairs)
            s.fail(std::to_string(inadmissible) + " bracket pairs could not be bracketed");
        if (uncertified) s.fail(std::to_string(uncertified) + " brackets were not certified");
        if (linear && !(oracle_err <= 1e-9)) s.fail("bracket differs from the linear solve by " + std::to_string(oracle_err));
        if (rate_fail) s.fail(std::to_string(rate_fail) + " bracket rate rows exceed their bound");
        s.metrics["bracket_pairs"] = measured(cfg_.bracket_pairs);
        s.metrics["bracket_inadmissible"] = measured(inadmissible);
        s.metrics["bracket_uncertified"] = measured(uncertified);
        if (linear) s.metrics["bracket_oracle_max_error"] = measured(oracle_err);
        s.metrics["bracket_rate_violations"] = measured(rate_fail);
        emit(s, bt);
        emit(s, rt);
        return finish(s);
    }

    struct BracketRun {
        ShadowResult result;
        std::vector<RateRow> rates;
        long level = 1;
        double delta = 0, b = 0;
        double scale = 1;  // common factor applied to the calibrated b and delta
        double radius = 0;
    };

    // A single bracket at the calibrated scale (from constants.json, or
    // calibrated in memory). Linear maps have global linear charts and every
    // estimate is homogeneous in (b, delta), so a pair beyond the admissible
    // radius is handled by scaling both by the same factor.
    BracketRun bracket_once(const TorusPoint& x, const TorusPoint& y, std::optional<double> delta, int track) {
        if (!calibrated_) {
            if (std::filesystem::exists(out_dir() / "constants.json")) load_constants("bracket");
            else calibrate();
        }
        const SurfaceMap& f = *rp_->f;
        BracketRun out;
        out.delta = delta ? *delta : delta_;
        out.b = cs_.b;
        out.level = std::max(regularity_at(f, x, rp_->params).level, regularity_at(f, y, rp_->params).level);
        out.radius = bracket_radius(out.delta, out.level, rp_->k);
        const double d = distance(x, y);
        if (d > out.radius && f.is_linear() && !delta) {
            out.scale = d / out.radius * (1 + 1e-6);
            out.delta *= out.scale;
            out.b *= out.scale;
            out.radius *= out.scale;
        }
        ChartSettings cs = cs_;
        cs.b = out.b;
        BracketOptions o;
        o.track = track;
        o.target_diameter = cfg_.target_diameter;
        out.result = bracket(f, x, y, out.level, out.delta, rp_->params, rp_->k, cs, o);
        out.rates = bracket_rates(out.result, rp_->k, out.level, d);
        return out;
    }

    // Periodic points from periodic pseudo-orbits.
    SuiteResult run_close() {
        need_constants("close");
        SuiteResult s = start("close");
        const ResolvedParams& rp = *rp_;
        const SurfaceMap& f = *rp.f;
        const IMat2 A = f.linear_part();
        std::mt19937_64 rng(detail::sub_seed(cfg_.seed, 6));
        struct Job {
            int period = 1;
            TorusPoint p0;  // periodic point the pattern follows
            PseudoOrbit pattern;
        };
        std::vector<Job> jobs;
        long newton_misses = 0;
        for (int attempt = 0; static_cast<int>(jobs.size()) < cfg_.closing_patterns && attempt < 20 * cfg_.closing_patterns;
             ++attempt) {
            Job j;
            j.period = 1 + static_cast<int>(rng() % 6);
            const std::int64_t det = std::abs(detail::power_minus_identity(A, j.period).det());
            const auto m1 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(det));
            const auto m2 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(det));
            const TorusPoint start = detail::rational_periodic(A, j.period, m1, m2).point();
            const auto p0 = f.is_linear() ? std::optional<TorusPoint>(start) : detail::newton_periodic(f, start, j.period);
            if (!p0) {
                ++newton_misses;
                continue;
            }
            j.p0 = *p0;
            std::vector<TorusPoint> orbit{j.p0};
            for (int i = 1; i < j.period; ++i) orbit.push_back(f.forward(orbit.back()));
            long lv = 1;
            try {
                for (const auto& o : orbit) lv = std::max(lv, regularity_at(f, o, rp.params).level);
            } catch (const ConvergenceError&) {
                continue;
            }
            const double r = 0.3 * bracket_radius(delta_, lv, rp.k) / std::sqrt(2.0);
            j.pattern.delta = delta_;
            j.pattern.lambda = rp.k.lambda;
            for (const auto& o : orbit) {
                j.pattern.points.push_back(TorusPoint(o.vec() + Vec2{r * (2 * detail::unit(rng) - 1), r * (2 * detail::unit(rng) - 1)}));
                j.pattern.levels.push_back(lv);
            }
            jobs.push_back(std::move(j));
        }
        if (static_cast<int>(jobs.size()) < cfg_.closing_patterns)
            s.fail("only " + std::to_string(jobs.size()) + " periodic patterns could be generated");
        ClosingOptions co;
        co.residual_tol = cfg_.residual_tol;
        co.target_diameter = cfg_.target_diameter;
        struct Res {
            std::optional<ClosingResult> c;
            std::string error;
        };
        const auto res = parallel_map<Res>(jobs.size(), [&](std::size_t i) {
            Res r;
            try {
                r.c = close_periodic(f, jobs[i].pattern, rp.params, rp.k, cs_, co);
            } catch (const Error& e) {
                r.error = e.what();
            }
            return r;
        });
        Table t("closing", {{"index"}, {"period"}, {"x1"}, {"x2"}, {"residual"}, {"refined"}, {"newton_iterations"},
                            {"orbit_error"}, {"rational_error"}});
        double max_res = 0, max_err = 0, max_rat = 0;
        long unrefined = 0;
        for (std::size_t i = 0; i < res.size(); ++i) {
            if (!res[i].c) {
                s.fail("closing pattern " + std::to_string(i) + ": " + res[i].error);
                continue;
            }
            const ClosingResult& c = *res[i].c;
            if (!c.refined || c.residual > cfg_.residual_tol) {
                ++unrefined;
                s.fail("closing pattern " + std::to_string(i) + " not refined: " + c.warning);
            }
            max_res = std::max(max_res, c.residual);
            const double err = distance(c.point, jobs[i].p0);
            max_err = std::max(max_err, err);
            double rat = std::numeric_limits<double>::quiet_NaN();
            if (f.is_linear()) {
                const auto q = detail::nearest_rational_periodic(A, c.point, jobs[i].period);
                rat = detail::rational_is_periodic(A, q, jobs[i].period) ? distance(c.point, q.point())
                                                                         : std::numeric_limits<double>::infinity();
                max_rat = std::max(max_rat, rat);
            }
            t.add({static_cast<long long>(i), static_cast<long long>(jobs[i].period), c.point.x1, c.point.x2,
                   c.residual, c.refined, static_cast<long long>(c.newton_iterations), err, rat});
        }
        if (!(max_err <= 1e-9)) s.fail("closed points differ from their periodic orbits by " + std::to_string(max_err));
        if (f.is_linear() && !(max_rat <= 1e-9)) s.fail("closed points differ from rational periodic points by " + std::to_string(max_rat));
        s.metrics["patterns"] = measured(jobs.size());
        s.metrics["newton_misses"] = measured(newton_misses);
        s.metrics["unrefined"] = measured(unrefined);
        s.metrics["max_residual"] = measured(max_res);
        s.metrics["max_orbit_error"] = measured(max_err);
        if (f.is_linear()) s.metrics["max_rational_error"] = measured(max_rat);
        emit(s, t);
        return finish(s);
    }

    SuiteResult run_nice() {
        need_constants("nice");
        SuiteResult s = start("nice");
        const ResolvedParams& rp = *rp_;
        const Region U{{cfg_.region_x, cfg_.region_y}, {cfg_.region_hx, cfg_.region_hy}};
        NiceSearch found;
        try {
            found = find_nice_domain(*rp.f, rp.params, rp.k, cs_, delta_, U, cfg_.level, nice_options());
        } catch (const Error& e) {
            s.fail(std::string("nice domain search: ") + e.what());
            return finish(s);
        }
        domain_ = std::move(found.domain);
        const NiceDomain& d = *domain_;
        if (!d.niceness.ok) s.fail("constructed domain fails the niceness check");
        Json j;
        j["config"] = detail::config_json(cfg_);
        j["domain"] = domain_json(d);
        Json nj;
        nj["n_checked"] = measured(d.niceness.n_checked);
        nj["images"] = measured(d.niceness.images);
        nj["violations"] = measured(d.niceness.violations);
        nj["max_penetration"] = measured(d.niceness.max_penetration);
        nj["max_drift"] = measured(d.niceness.max_drift);
        nj["ok"] = d.niceness.ok;
        j["niceness"] = nj;
        j["candidates"] = measured(found.candidates.size());
        j["tried"] = measured(found.tried);
        j["search_log"] = found.log;
        write_json(out_dir() / "nice.json", j);
        Table t("nice_boundary", {{"side"}, {"x"}, {"y"}});
        for (std::size_t side = 0; side < 4; ++side)
            for (const Vec2& v : d.boundary[side]) t.add({static_cast<long long>(side), v.x, v.y});
        s.metrics = j;
        s.metrics.erase("config");
        s.metrics.erase("search_log");
        emit(s, t);
        return finish(s);
    }

    SuiteResult run_tower() {
        need_domain("tower");
        SuiteResult s = start("tower");
        const ResolvedParams& rp = *rp_;
        const SurfaceMap& f = *rp.f;
        const NiceDomain& d = *domain_;
        const TowerOptions opt = tower_options();
        const auto A = detail::domain_anchors(d);
        if (A.empty()) {
            s.fail("no almost-return anchor lies inside the domain");
            return finish(s);
        }
        try {
            sat_ = saturate(f, d, A, rp.k, cfg_.level, opt);
            part_ = build_partition(sat_->catalog, sat_->rect);
            Y_ = verify_Y_axioms(f, d, sat_->rect, *part_, rp.k, cfg_.level, opt);
        } catch (const Error& e) {
            s.fail(std::string("tower construction: ") + e.what());
            return finish(s);
        }
        const BranchCatalog& cat = sat_->catalog;
        const TowerPartition& P = *part_;
        const YReport& Y = *Y_;

        Json cj;
        cj["entries"] = measured(cat.entries.size());
        cj["seeds"] = measured(cat.seeds.size());
        cj["almost_returns"] = measured(cat.almost_returns.size());
        Json kappa;
        for (const auto& [time, n] : cat.kappa()) kappa[std::to_string(time)] = measured(n);
        cj["kappa"] = kappa;
        s.metrics["catalog"] = cj;
        s.metrics["laminar_stable"] = laminar_json(P.stable);
        s.metrics["laminar_unstable"] = laminar_json(P.unstable);
        Json pj;
        pj["T"] = measured(P.T);
        pj["horizon"] = measured(P.horizon);
        pj["grid"] = measured(sat_->rect.grid);
        pj["depth"] = measured(sat_->rect.depth);
        pj["samples"] = measured(sat_->rect.samples.size());
        pj["elements"] = measured(P.elements.size());
        pj["gamma_samples"] = measured(P.gamma_samples);
        pj["assigned"] = measured(P.assigned);
        pj["tail"] = measured(P.tail);
        pj["quarantined_assignments"] = measured(P.quarantined_assignments);
        pj["coverage_ok"] = P.coverage_ok;
        s.metrics["partition"] = pj;
        Json yj;
        yj["markov_checked"] = measured(Y.markov.checked);
        yj["markov_failures"] = measured(Y.markov.failures);
        yj["markov_skipped_long"] = measured(Y.markov.skipped_long);
        yj["max_boundary_error"] = measured(Y.markov.max_boundary_error);
        yj["first_return_checked"] = measured(Y.first_return.checked);
        yj["first_return_ambiguous"] = measured(Y.first_return.ambiguous);
        yj["first_return_hard"] = measured(Y.first_return.hard);
        yj["first_return_log"] = Y.first_return.log;
        yj["beta1_stable"] = measured(Y.beta1_stable);
        yj["beta1_unstable"] = measured(Y.beta1_unstable);
        yj["y1_samples"] = measured(Y.y1_samples);
        yj["beta2"] = measured(Y.y2.beta2);
        yj["distortion_c"] = measured(Y.y2.c);
        yj["distortion_exact_zero"] = Y.y2.exact_zero;
        yj["bounded_dist_constant"] = measured(Y.y2.holder_c);
        yj["image_coverage"] = measured(Y.image_coverage);
        s.metrics["axioms"] = yj;

        if (P.stable.violations || P.unstable.violations)
            s.fail(std::to_string(P.stable.violations + P.unstable.violations) + " laminarity violations");
        if (!P.coverage_ok) s.fail("partition does not cover the assigned samples");
        if (Y.markov.failures) s.fail(std::to_string(Y.markov.failures) + " Markov failures");
        if (Y.first_return.hard) s.fail(std::to_string(Y.first_return.hard) + " hard first-return mismatches");
        if (Y.first_return.ambiguous_fraction() > 0.005) s.fail("first-return ambiguity above 0.5%");
        if (!Y.y1_ok()) s.fail("beta1 >= 1");
        if (!Y.y2_ok()) s.fail("no distortion decay (beta2 outside (0, 1))");
        for (const auto& l : P.stable.log) s.failures.push_back("stable: " + l);
        for (const auto& l : P.unstable.log) s.failures.push_back("unstable: " + l);

        // partition dump: strip extents along the unstable and stable axes
        struct Ext {
            double u0 = 1e300, u1 = -1e300, s0 = 1e300, s1 = -1e300;
        };
        std::vector<Ext> ext(P.elements.size());
        for (std::size_t si = 0; si < sat_->rect.samples.size(); ++si) {
            const int e = P.element_of[si];
            if (e < 0) continue;
            const Vec2 z = sat_->rect.samples[si].z - d.p_lift;
            const double u = dot(z, d.u_axis), v = dot(z, d.s_axis);
            Ext& x = ext[static_cast<std::size_t>(e)];
            x.u0 = std::min(x.u0, u);
            x.u1 = std::max(x.u1, u);
            x.s0 = std::min(x.s0, v);
            x.s1 = std::max(x.s1, v);
        }
        Table pt("partition", {{"element"}, {"tau"}, {"label_x"}, {"label_y"}, {"samples"}, {"u_min"}, {"u_max"},
                               {"s_min"}, {"s_max"}, {"rep_x"}, {"rep_y"}});
        for (std::size_t e = 0; e < P.elements.size(); ++e) {
            const PartitionElement& el = P.elements[e];
            const Vec2 rep = sat_->rect.samples[el.representative].z;
            pt.add({static_cast<long long>(e), static_cast<long long>(el.time), static_cast<long long>(el.label.x),
                    static_cast<long long>(el.label.y), static_cast<long long>(el.samples), ext[e].u0, ext[e].u1,
                    ext[e].s0, ext[e].s1, rep.x, rep.y});
        }
        emit(s, pt);
        Table dt("distortion", {{"n"}, {"max_log_ratio"}, {"pairs"}, {"bound", Provenance::bound}});
        for (std::size_t n = 0; n < Y.y2.max_log_ratio.size(); ++n)
            dt.add({static_cast<long long>(n), Y.y2.max_log_ratio[n], static_cast<long long>(Y.y2.pairs[n]),
                    Y.y2.c * std::pow(Y.y2.beta2, static_cast<double>(n))});
        emit(s, dt);
        Json dump = s.to_json();
        dump["config"] = detail::config_json(cfg_);
        write_json(out_dir() / "tower.json", dump);
        return finish(s);
    }

    SuiteResult run_stats() {
        need_tower("stats");
        SuiteResult s = start("stats");
        const ResolvedParams& rp = *rp_;
        const SurfaceMap& f = *rp.f;
        const NiceDomain& d = *domain_;
        const RectanglePoints& rect = sat_->rect;
        const TowerPartition& P = *part_;

        ReturnStats st;
        try {
            st = return_stats(rect, P);
        } catch (const Error& e) {
            s.fail(std::string("return statistics: ") + e.what());
            return finish(s);
        }
        const double rate_bound = -0.05 / st.T;
        if (!(st.fitted_rate <= rate_bound)) s.fail("tail rate " + std::to_string(st.fitted_rate) + " above -0.05/T");
        s.metrics["T"] = measured(st.T);
        s.metrics["horizon"] = measured(st.horizon);
        s.metrics["gamma_samples"] = measured(st.n);
        s.metrics["tail_bucket"] = measured(st.tail_bucket);
        s.metrics["fitted_rate"] = measured(st.fitted_rate);
        s.metrics["rate_bound"] = bound(rate_bound);
        s.metrics["fit_window"] = Json::array({measured(st.window_lo), measured(st.window_hi)});
        s.metrics["mean_tau"] = measured(st.mean_tau);
        s.metrics["gamma_measure"] = measured(st.gamma_measure);
        s.metrics["kac_product"] = measured(st.kac_product());
        if (f.is_linear()) {
            // area-preserving: E[tau] mu(Gamma) = T
            const double ratio = st.kac_product() / st.T;
            s.metrics["kac_ratio"] = measured(ratio);
            if (!(ratio >= 0.9 && ratio <= 1.1)) s.fail("Kac product off by more than 10%");
        }
        Table tt("tail", {{"n"}, {"fraction"}, {"log_fraction"}});
        for (const auto& [n, frac] : st.tail)
            tt.add({static_cast<long long>(n), frac, frac > 0 ? std::log(frac) : -std::numeric_limits<double>::infinity()});
        emit(s, tt);
        Table ht("histogram", {{"tau"}, {"count"}});
        for (const auto& [tau, c] : st.histogram) ht.add({static_cast<long long>(tau), static_cast<long long>(c)});
        emit(s, ht);

        // return frequency along orbits of assigned samples
        std::vector<std::size_t> assigned;
        for (std::size_t si = 0; si < rect.samples.size(); ++si)
            if (P.element_of[si] >= 0) assigned.push_back(si);
        const auto pick = detail::spread(assigned.size(), static_cast<std::size_t>(cfg_.pinheiro_samples));
        const auto pin = parallel_map<std::optional<PinheiroResult>>(pick.size(), [&](std::size_t i) {
            std::optional<PinheiroResult> r;
            try {
                r = pinheiro_check(f, d, rect.samples[assigned[pick[i]]].z, cfg_.pinheiro_n);
            } catch (const Error&) {
            }
            return r;
        });
        Table pt("pinheiro", {{"sample"}, {"x1"}, {"x2"}, {"N"}, {"v"}, {"R"}, {"lhs"}, {"rhs"}, {"product"}});
        long within = 0, defined = 0;
        for (std::size_t i = 0; i < pin.size(); ++i) {
            const Vec2 z = rect.samples[assigned[pick[i]]].z;
            if (!pin[i] || !pin[i]->defined()) {
                pt.add({static_cast<long long>(i), z.x, z.y, static_cast<long long>(cfg_.pinheiro_n), 0LL, 0LL, 0.0,
                        std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()});
                continue;
            }
            const PinheiroResult& r = *pin[i];
            ++defined;
            if (r.product() >= 0.95 && r.product() <= 1.05) ++within;
            pt.add({static_cast<long long>(i), z.x, z.y, static_cast<long long>(r.N), static_cast<long long>(r.v),
                    static_cast<long long>(r.R), r.lhs, r.rhs, r.product()});
        }
        const double pin_frac = pin.empty() ? 0 : static_cast<double>(within) / static_cast<double>(pin.size());
        if (pin_frac < 0.9) s.fail("return-frequency relation holds on only " + std::to_string(pin_frac) + " of samples");
        s.metrics["pinheiro_samples"] = measured(pin.size());
        s.metrics["pinheiro_defined"] = measured(defined);
        s.metrics["pinheiro_within_5pct"] = measured(pin_frac);
        emit(s, pt);

        // SRB averages
        SrbOptions so;
        so.birkhoff_samples = static_cast<std::size_t>(cfg_.birkhoff_samples);
        so.birkhoff_iterations = cfg_.birkhoff_iterations;
        so.seed = detail::sub_seed(cfg_.seed, 7);
        Table et("estimates", {{"observable"}, {"tower"}, {"tower_se"}, {"birkhoff"}, {"birkhoff_se"}, {"z"}});
        Json ej = Json::array();
        std::stringstream names(cfg_.observables);
        std::string name;
        while (std::getline(names, name, ',')) {
            name = std::string(detail::trim(name));
            if (name.empty()) continue;
            const MeasureEstimate e = srb_estimate(f, d, rect, P, builtin_observable(name), so);
            const double se = e.combined_se();
            const double z = se > 0 ? std::abs(e.tower_estimate - e.birkhoff_estimate) / se
                                    : (e.tower_estimate == e.birkhoff_estimate ? 0 : INFINITY);
            if (!(z <= 3)) s.fail("observable " + name + ": tower and Birkhoff differ by " + std::to_string(z) + " SE");
            et.add({name, e.tower_estimate, e.tower_se, e.birkhoff_estimate, e.birkhoff_se, z});
            Json o;
            o["observable"] = name;
            o["tower"] = measured(e.tower_estimate);
            o["tower_se"] = measured(e.tower_se);
            o["birkhoff"] = measured(e.birkhoff_estimate);
            o["birkhoff_se"] = measured(e.birkhoff_se);
            o["n_samples"] = measured(e.n_samples);
            o["unassigned_fraction"] = measured(e.unassigned_fraction);
            o["low_confidence"] = e.low_confidence;
            ej.push_back(o);
        }
        s.metrics["estimates"] = ej;
        emit(s, et);
        write_json(out_dir() / "stats.json", s.to_json());
        return finish(s);
    }

    // All suites in order; the first failure stops the run. Returns the
    // process exit status.
    int run_all() {
        Json summary;
        summary["config"] = detail::config_json(cfg_);
        Json suites = Json::array();
        bool ok = true;
        std::string failed;
        using Step = SuiteResult (Pipeline::*)();
        const std::vector<Step> steps = {&Pipeline::run_constants, &Pipeline::run_charts, &Pipeline::run_shadow,
                                         &Pipeline::run_close,     &Pipeline::run_nice,   &Pipeline::run_tower,
                                         &Pipeline::run_stats};
        for (Step step : steps) {
            const SuiteResult r = (this->*step)();
            Json sj;
            sj["suite"] = r.name;
            sj["pass"] = r.pass;
            sj["failures"] = r.failures;
            suites.push_back(sj);
            if (!r.pass) {
                ok = false;
                failed = r.name;
                const auto witness = out_dir() / (r.name + "_witness.txt");
                std::ofstream w(witness);
                for (const auto& l : r.failures) w << l << '\n';
                summary["aborted_at"] = r.name;
                summary["witness"] = witness.filename().string();
                say("suite " + r.name + " failed; witness: " + witness.string());
                break;
            }
        }
        if (calibrated_) {
            Json h;
            h["b"] = calibrated(cs_.b);
            h["delta"] = calibrated(delta_);
            h["omega"] = bound(rp_->k.omega);
            if (domain_) h["r"] = bound(domain_->r);
            summary["headline"] = h;
        }
        summary["suites"] = suites;
        summary["pass"] = ok;
        ensure_dir();
        write_json(out_dir() / "summary.json", summary);
        return ok ? 0 : 1;
    }

    [[nodiscard]] const ResolvedParams& resolved() const { return *rp_; }
    [[nodiscard]] double delta() const { return delta_; }
    [[nodiscard]] const ChartSettings& chart_settings() const { return cs_; }
    [[nodiscard]] const NiceDomain& domain() const { return *domain_; }

private:
    RunConfig cfg_;
    EmitOptions emit_;
    std::ostream* log_ = nullptr;
    std::optional<ResolvedParams> rp_;
    ChartSettings cs_;
    BCalibration bcal_;
    DeltaCalibration dcal_;
    double delta_ = 0;
    bool calibrated_ = false;
    std::optional<NiceDomain> domain_;
    std::optional<Saturation> sat_;
    std::optional<TowerPartition> part_;
    std::optional<YReport> Y_;
    std::chrono::steady_clock::time_point t0_;

    void say(const std::string& m) const {
        if (log_) *log_ << m << std::endl;
    }
    void ensure_dir() const { std::filesystem::create_directories(out_dir()); }

    SuiteResult start(const std::string& name) {
        ensure_dir();
        say("[" + name + "] running");
        t0_ = std::chrono::steady_clock::now();
        SuiteResult s;
        s.name = name;
        return s;
    }
    SuiteResult finish(SuiteResult s) const {
        s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        std::ostringstream o;
        o << "[" << s.name << "] " << (s.pass ? "pass" : "FAIL") << " (" << std::fixed << std::setprecision(1)
          << s.seconds << " s)";
        say(o.str());
        for (std::size_t i = 0; i < s.failures.size() && i < 5; ++i) say("  " + s.failures[i]);
        if (s.name != "constants" && s.name != "nice" && s.name != "tower" && s.name != "stats")
            write_json(out_dir() / (s.name + ".json"), s.to_json());
        return s;
    }
    void emit(SuiteResult& s, const Table& t) const {
        t.write(out_dir(), emit_);
        s.tables.push_back(t.describe(emit_));
    }

    [[nodiscard]] NiceOptions nice_options() const {
        NiceOptions o;
        o.max_period = cfg_.max_period;
        o.n_nice = cfg_.n_nice;
        o.tol = cfg_.tol;
        return o;
    }
    [[nodiscard]] TowerOptions tower_options() const {
        TowerOptions o;
        o.grid = cfg_.grid;
        o.depth = cfg_.depth;
        o.horizon = cfg_.horizon;
        o.tol = cfg_.tol;
        o.band = cfg_.band;
        o.markov_elements = cfg_.markov_elements;
        o.y1_samples = cfg_.y1_samples;
        o.y2_pairs = cfg_.y2_pairs;
        o.y2_steps = cfg_.y2_steps;
        return o;
    }

    // Keys a stage's dump depends on; a dump written under other values is stale.
    void check_config(const Json& dump, const std::vector<std::string>& keys, const std::string& file,
                      const std::string& producer) const {
        const Json now = detail::config_json(cfg_);
        if (!dump.contains("config")) throw MissingPrerequisite(file + " has no config record; rerun `hypertower " + producer + "`");
        for (const auto& k : keys)
            if (!dump["config"].contains(k) || dump["config"][k] != now[k])
                throw MissingPrerequisite(file + " was written with a different '" + k + "'; rerun `hypertower " +
                                          producer + "`");
    }

    [[nodiscard]] std::filesystem::path prerequisite(const std::string& file, const std::string& producer,
                                                     const std::string& consumer) const {
        const auto p = out_dir() / file;
        if (!std::filesystem::exists(p))
            throw MissingPrerequisite("`" + consumer + "` needs " + p.string() + "; run `hypertower " + producer +
                                      "` first (or `hypertower all`)");
        return p;
    }

    static inline const std::vector<std::string> kConstantKeys = {
        "map", "perturbation", "matrix", "chi", "lambda", "epsilon", "epsilon0", "alpha", "b_points", "delta_pairs", "seed"};
    static inline const std::vector<std::string> kNiceKeys = {"region_x", "region_y", "region_hx", "region_hy",
                                                              "level", "max_period", "n_nice", "tol"};
    static inline const std::vector<std::string> kTowerKeys = {"grid", "horizon", "depth", "band"};

    void calibrate() {
        rp_ = resolve_params(cfg_);
        const ResolvedParams& rp = *rp_;
        bcal_ = calibrate_b(*rp.f, rp.params, rp.k, cfg_.b_points, 5, detail::sub_seed(cfg_.seed, 1));
        cs_ = ChartSettings{};
        cs_.b = bcal_.b;
        dcal_ = calibrate_delta(*rp.f, rp.params, rp.k, cs_, cfg_.delta_pairs, detail::sub_seed(cfg_.seed, 2));
        delta_ = dcal_.delta;
        calibrated_ = true;
    }

    void load_constants(const std::string& consumer) {
        const auto path = prerequisite("constants.json", "constants", consumer);
        const Json j = read_json(path);
        check_config(j, kConstantKeys, path.string(), "constants");
        rp_ = resolve_params(cfg_);
        cs_ = ChartSettings{};
        cs_.b = tagged_value(j.at("calibration").at("b"), "b");
        delta_ = tagged_value(j.at("calibration").at("delta"), "delta");
        calibrated_ = true;
    }
    void need_constants(const std::string& consumer) {
        if (!calibrated_) load_constants(consumer);
    }

    void need_domain(const std::string& consumer) {
        need_constants(consumer);
        if (domain_) return;
        const auto path = prerequisite("nice.json", "nice", consumer);
        const Json j = read_json(path);
        auto keys = kConstantKeys;
        keys.insert(keys.end(), kNiceKeys.begin(), kNiceKeys.end());
        check_config(j, keys, path.string(), "nice");
        const Json& dj = j.at("domain");
        auto periodic = [&](const Json& pj, const std::string& w) {
            PeriodicPoint p;
            p.point = TorusPoint(detail::vec_from(pj.at("point"), w));
            p.period = static_cast<int>(tagged_value(pj.at("period"), w));
            p.level = static_cast<long>(tagged_value(pj.at("level"), w));
            p.residual = tagged_value(pj.at("residual"), w);
            return p;
        };
        const PeriodicPoint p = periodic(dj.at("p"), "p"), q = periodic(dj.at("q"), "q");
        // the domain is rebuilt from its corners, which reproduces it exactly
        domain_ = nice_domain_from(*rp_->f, p, detail::vec_from(dj.at("p_lift"), "p_lift"), q,
                                   detail::vec_from(dj.at("q_lift"), "q_lift"), nice_options(),
                                   tagged_value(dj.at("r"), "r"), tagged_value(dj.at("C_ell"), "C_ell"));
        const double area = tagged_value(dj.at("area"), "area");
        if (std::abs(domain_->area - area) > 1e-12 * std::max(1.0, area))
            throw MissingPrerequisite(path.string() + " does not reproduce its domain; rerun `hypertower nice`");
    }

    void need_tower(const std::string& consumer) {
        if (part_) return;
        const auto path = prerequisite("tower.json", "tower", consumer);
        need_domain(consumer);
        const Json j = read_json(path);
        auto keys = kConstantKeys;
        keys.insert(keys.end(), kNiceKeys.begin(), kNiceKeys.end());
        keys.insert(keys.end(), kTowerKeys.begin(), kTowerKeys.end());
        check_config(j, keys, path.string(), "tower");
        if (!j.value("pass", false))
            throw MissingPrerequisite(path.string() + " records a failed tower; fix and rerun `hypertower tower`");
        // the grid saturation is deterministic, so it is recomputed rather than stored
        say("rebuilding the tower from " + path.string());
        const TowerOptions opt = tower_options();
        sat_ = saturate(*rp_->f, *domain_, detail::domain_anchors(*domain_), rp_->k, cfg_.level, opt);
        part_ = build_partition(sat_->catalog, sat_->rect);
    }

    [[nodiscard]] static Json params_json(const ResolvedParams& rp) {
        Json j;
        j["chi"] = tagged(rp.params.chi, rp.chi_auto ? Provenance::measured : Provenance::bound);
        j["lambda"] = bound(rp.params.lambda);
        j["epsilon"] = bound(rp.params.epsilon);
        j["alpha"] = bound(rp.params.alpha);
        j["epsilon0"] = bound(rp.params.epsilon0);
        return j;
    }
    [[nodiscard]] static Json derived_json(const DerivedConstants& k) {
        Json j;
        j["c1"] = bound(k.c1);
        j["c2"] = bound(k.c2);
        j["c3"] = bound(k.c3);
        j["gamma"] = bound(k.gamma);
        j["beta"] = bound(k.beta);
        j["iota"] = bound(k.iota);
        j["eta"] = bound(k.eta);
        j["zeta"] = bound(k.zeta);
        j["eps1"] = bound(k.eps1);
        j["Q0"] = bound(k.Q0);
        j["Qhat"] = bound(k.Qhat);
        j["Q1"] = bound(k.Q1);
        j["omega"] = bound(k.omega);
        j["ell_prime"] = bound(k.ell_prime);
        return j;
    }
    [[nodiscard]] static Json domain_json(const NiceDomain& d) {
        auto periodic = [](const PeriodicPoint& p) {
            Json j;
            j["point"] = detail::vec_json(p.point.vec());
            j["period"] = measured(p.period);
            j["level"] = measured(p.level);
            j["residual"] = measured(p.residual);
            return j;
        };
        Json j;
        j["p"] = periodic(d.p);
        j["q"] = periodic(d.q);
        j["p_lift"] = detail::vec_json(d.p_lift);
        j["q_lift"] = detail::vec_json(d.q_lift);
        j["a"] = detail::vec_json(d.a);
        j["c"] = detail::vec_json(d.c);
        j["T"] = measured(d.T);
        j["area"] = measured(d.area);
        j["diameter"] = measured(d.diameter);
        j["r"] = bound(d.r);
        j["C_ell"] = bound(d.C_ell);
        return j;
    }
    [[nodiscard]] static Json laminar_json(const LaminarReport& r) {
        Json j;
        j["branches"] = measured(r.branches);
        j["pairs"] = measured(r.pairs);
        j["nested"] = measured(r.nested);
        j["reverse"] = measured(r.reverse);
        j["quarantined"] = measured(r.quarantined);
        j["violations"] = measured(r.violations);
        return j;
    }
};

}  // namespace hypertower
