#pragma once

// First-T-return tower over a nice domain R~.
//
// Grid samples of R~ carry their lifted forward and backward orbits. A return
// of z at time t (a multiple of T) with f~^t(z) in R~ + n puts z in the stable
// strip of branch (t, n); a backward return puts it in the unstable strip.
// The catalog is the set of all branches realised by the sample orbits up to
// the horizon, which is the concatenation closure of the first-return
// branches, plus the branches extracted at almost returns of A.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hypertower/nicedomain.hpp"

namespace hypertower {

struct TowerOptions {
    int grid = 512;          // samples per axis over the bounding box of R~
    int depth = 3;           // witness depth D
    int horizon = 0;         // 0: 40 T
    double tol = 1e-7;
    double band = 1e-6;      // quarantine band around the boundary
    int markov_elements = 300;
    int y1_samples = 20000;
    int y2_pairs = 400;
    int y2_steps = 8;
    double y2_separation = 1e-3;
    int chunk = 8192;
    [[nodiscard]] int horizon_for(int T) const { return horizon > 0 ? horizon : 40 * T; }
};

struct BranchKey {
    int time = 0;
    IVec2 label;
    friend bool operator==(const BranchKey&, const BranchKey&) = default;
};

struct BranchKeyHash {
    std::size_t operator()(const BranchKey& k) const {
        auto mix = [](std::uint64_t x) {
            x += 0x9e3779b97f4a7c15ULL;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
            return x ^ (x >> 31);
        };
        return mix(mix(static_cast<std::uint64_t>(k.label.x)) ^ static_cast<std::uint64_t>(k.label.y) ^
                   (static_cast<std::uint64_t>(k.time) << 48));
    }
};

struct CatalogEntry {
    int time = 0;
    IVec2 label;
    std::uint32_t stable_samples = 0;    // samples in the stable strip
    std::uint32_t unstable_samples = 0;  // samples in the unstable strip
    bool seeded = false;                 // extracted at an almost return of A
};

struct BranchCatalog {
    std::vector<CatalogEntry> entries;
    std::vector<HyperbolicBranch> seeds;
    std::vector<AlmostReturn> almost_returns;
    std::unordered_map<BranchKey, std::uint32_t, BranchKeyHash> index;

    std::uint32_t intern(int time, const IVec2& label) {
        const auto [it, fresh] = index.try_emplace(BranchKey{time, label}, static_cast<std::uint32_t>(entries.size()));
        if (fresh) entries.push_back({time, label, 0, 0, false});
        return it->second;
    }
    [[nodiscard]] std::optional<std::uint32_t> find(int time, const IVec2& label) const {
        const auto it = index.find(BranchKey{time, label});
        if (it == index.end()) return std::nullopt;
        return it->second;
    }
    // kappa_i: branches per return time
    [[nodiscard]] std::map<int, std::size_t> kappa() const {
        std::map<int, std::size_t> k;
        for (const auto& e : entries) ++k[e.time];
        return k;
    }
};

struct TowerSample {
    Vec2 z;
    std::vector<std::uint32_t> forward, backward;   // catalog ids of returns up to the horizon, by time
    std::vector<std::uint16_t> near_forward, near_backward;  // check times within the band of the boundary
    std::vector<std::uint16_t> witness_forward, witness_backward;  // greedy first-return gaps
    bool in_gamma = false;          // complete backward witness of depth D
    bool complete_forward = false;  // complete forward witness of depth D
    int tau = 0;                    // first T-return time, 0 if beyond the horizon
    IVec2 tau_label;

    [[nodiscard]] bool near_f(int t) const {
        return std::find(near_forward.begin(), near_forward.end(), t) != near_forward.end();
    }
    [[nodiscard]] bool near_b(int t) const {
        return std::find(near_backward.begin(), near_backward.end(), t) != near_backward.end();
    }
};

struct RectanglePoints {
    int grid = 0, depth = 0, horizon = 0, T = 1;
    Box box;
    double cell_area = 0;
    std::vector<TowerSample> samples;  // all grid points of R~

    [[nodiscard]] std::size_t gamma_count() const {
        return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                      [](const TowerSample& s) { return s.in_gamma; }));
    }
    [[nodiscard]] double gamma_measure() const { return static_cast<double>(gamma_count()) * cell_area; }
};

struct Saturation {
    BranchCatalog catalog;
    RectanglePoints rect;
};

namespace detail {

struct Located {
    std::optional<Vec2> in;  // lift inside R~
    bool near = false;       // some lift within band of the boundary
};

[[nodiscard]] inline Located locate(const NiceDomain& d, const Vec2& v, double band) {
    Located out;
    const Box& b = d.ring->box();
    const auto x0 = static_cast<long>(std::ceil(b.lo.x - band - v.x)), x1 = static_cast<long>(std::floor(b.hi.x + band - v.x));
    const auto y0 = static_cast<long>(std::ceil(b.lo.y - band - v.y)), y1 = static_cast<long>(std::floor(b.hi.y + band - v.y));
    for (long mx = x0; mx <= x1; ++mx)
        for (long my = y0; my <= y1; ++my) {
            const Vec2 w = v + Vec2{static_cast<double>(mx), static_cast<double>(my)};
            if (!out.in && d.inside_lift(w)) out.in = w;
            if (!out.near && d.boundary_distance(w, band) < band) out.near = true;
        }
    return out;
}

struct RawEvent {
    int time;
    IVec2 label;
};

struct RawTrace {
    std::vector<RawEvent> fwd, bwd;
    std::vector<std::uint16_t> near_f, near_b, wit_f, wit_b;
};

// Lifted orbit of z in one direction: returns up to the horizon (catalog)
// and greedy first-return gaps until depth + 1 of them are known.
template <class Step, class Label>
void walk(const SurfaceMap& f, const NiceDomain& d, const Vec2& z, int horizon, int depth, double band, Step step,
          Label label, std::vector<RawEvent>& events, std::vector<std::uint16_t>& near,
          std::vector<std::uint16_t>& witness) {
    LiftedPoint w = LiftedPoint::from(z);
    int last = 0;
    for (int t = 1;; ++t) {
        w = step(f, w);
        if (t % d.T != 0) continue;
        if (t - last > horizon) break;
        const Located loc = locate(d, w.frac, band);
        if (t <= horizon && loc.near) near.push_back(static_cast<std::uint16_t>(t));
        if (loc.in) {
            if (static_cast<int>(witness.size()) <= depth) witness.push_back(static_cast<std::uint16_t>(t - last));
            last = t;
            if (t <= horizon) events.push_back({t, label(t, w.cell - round_ivec(*loc.in - w.frac))});
        }
        if (t >= horizon && static_cast<int>(witness.size()) > depth) break;
    }
}

[[nodiscard]] inline RawTrace trace_sample(const SurfaceMap& f, const NiceDomain& d, const Vec2& z, int horizon,
                                           int depth, double band, const std::vector<IMat2>& apow) {
    RawTrace r;
    walk(f, d, z, horizon, depth, band, advance, [](int, const IVec2& m) { return m; }, r.fwd, r.near_f, r.wit_f);
    // z in the unstable strip of (t, n) iff f~^{-t}(z) + A^{-t} n lies in R~
    walk(f, d, z, horizon, depth, band, retreat,
         [&](int t, const IVec2& m) { return IVec2{} - apow[static_cast<std::size_t>(t)] * m; }, r.bwd, r.near_b,
         r.wit_b);
    return r;
}

}  // namespace detail

// Catalog seeded at the almost returns of A and closed over the sample
// orbits; grid samples of R~ with their depth-D witnesses.
[[nodiscard]] inline Saturation saturate(const SurfaceMap& f, const NiceDomain& d, const std::vector<TorusPoint>& A,
                                         const DerivedConstants& k, long level, const TowerOptions& opt = {}) {
    if (A.empty()) throw PreconditionError("saturation needs a nonempty almost-return set A");
    if (opt.grid < 2 || opt.depth < 0) throw PreconditionError("grid must be >= 2 and depth >= 0");
    const int horizon = opt.horizon_for(d.T);
    if (horizon % d.T != 0) throw PreconditionError("horizon must be a multiple of T");
    Saturation out;
    BranchCatalog& cat = out.catalog;

    cat.almost_returns = detect_almost_returns(f, d, A, horizon, opt.tol);
    for (const AlmostReturn& ar : cat.almost_returns) {
        HyperbolicBranch b;
        try {
            b = extract_branch(f, d, ar, A, k, level, opt.tol);
        } catch (const PreconditionError&) {
            continue;
        }
        if (cat.find(b.return_time, b.label)) continue;
        cat.entries[cat.intern(b.return_time, b.label)].seeded = true;
        cat.seeds.push_back(std::move(b));
    }

    std::vector<IMat2> apow(static_cast<std::size_t>(horizon + 1));
    for (std::size_t t = 1; t < apow.size(); ++t) apow[t] = f.linear_part() * apow[t - 1];

    RectanglePoints& rect = out.rect;
    rect.grid = opt.grid;
    rect.depth = opt.depth;
    rect.horizon = horizon;
    rect.T = d.T;
    rect.box = d.ring->box();
    const double hx = (rect.box.hi.x - rect.box.lo.x) / opt.grid, hy = (rect.box.hi.y - rect.box.lo.y) / opt.grid;
    rect.cell_area = hx * hy;
    std::vector<Vec2> pts;
    for (int iy = 0; iy < opt.grid; ++iy)
        for (int ix = 0; ix < opt.grid; ++ix) {
            const Vec2 z = rect.box.lo + Vec2{(ix + 0.5) * hx, (iy + 0.5) * hy};
            if (d.inside_lift(z)) pts.push_back(z);
        }
    if (pts.empty()) throw ConvergenceError("no grid sample inside the domain");

    rect.samples.reserve(pts.size());
    const auto chunk = static_cast<std::size_t>(std::max(1, opt.chunk));
    for (std::size_t lo = 0; lo < pts.size(); lo += chunk) {
        const std::size_t n = std::min(chunk, pts.size() - lo);
        const auto raw = parallel_map<detail::RawTrace>(n, [&](std::size_t i) {
            return detail::trace_sample(f, d, pts[lo + i], horizon, opt.depth, opt.band, apow);
        });
        for (std::size_t i = 0; i < n; ++i) {
            const detail::RawTrace& r = raw[i];
            TowerSample s;
            s.z = pts[lo + i];
            for (const auto& e : r.fwd) {
                const std::uint32_t id = cat.intern(e.time, e.label);
                ++cat.entries[id].stable_samples;
                s.forward.push_back(id);
            }
            for (const auto& e : r.bwd) {
                const std::uint32_t id = cat.intern(e.time, e.label);
                ++cat.entries[id].unstable_samples;
                s.backward.push_back(id);
            }
            s.near_forward = r.near_f;
            s.near_backward = r.near_b;
            s.witness_forward = r.wit_f;
            s.witness_backward = r.wit_b;
            s.complete_forward = static_cast<int>(r.wit_f.size()) > opt.depth;
            s.in_gamma = static_cast<int>(r.wit_b.size()) > opt.depth;
            if (!r.fwd.empty()) {
                s.tau = r.fwd.front().time;
                s.tau_label = r.fwd.front().label;
            }
            rect.samples.push_back(std::move(s));
        }
    }
    if (rect.gamma_count() == 0)
        throw ConvergenceError("empty rectangle sample: no grid point has a backward witness within the horizon");
    return out;
}

struct LaminarReport {
    std::size_t branches = 0;     // catalog entries with samples on this side
    std::size_t pairs = 0;        // distinct overlapping pairs tested
    std::size_t nested = 0;
    std::size_t reverse = 0;      // later strip contains the earlier one
    std::size_t quarantined = 0;  // memberships skipped inside the band
    std::size_t violations = 0;   // overlapping but not nested
    std::vector<std::string> log;
    [[nodiscard]] bool ok() const { return violations == 0; }
};

struct PartitionElement {
    std::uint32_t branch = 0;
    int time = 0;
    IVec2 label;
    std::size_t samples = 0;
    std::size_t representative = 0;  // sample index nearest to the element's mean
};

struct TowerPartition {
    int T = 1, horizon = 0;
    std::vector<PartitionElement> elements;
    std::vector<std::int32_t> element_of;  // per rectangle sample, -1 if unassigned or outside Gamma
    std::vector<std::uint8_t> maximal;     // per catalog entry (stable side)
    LaminarReport stable, unstable;
    std::size_t gamma_samples = 0, assigned = 0, tail = 0;
    std::size_t quarantined_assignments = 0;
    bool coverage_ok = false;

    [[nodiscard]] std::map<int, std::size_t> kappa() const {
        std::map<int, std::size_t> k;
        for (const auto& e : elements) ++k[e.time];
        return k;
    }
};

namespace detail {

// Nested-or-disjoint test on sample sets. Every overlapping pair that is
// consecutive in some sample's chain is tested; if all of them nest with the
// later strip inside the earlier one, every overlapping pair does.
template <class Chain, class Near>
[[nodiscard]] LaminarReport laminar_check(const BranchCatalog& cat, const std::vector<TowerSample>& samples,
                                          Chain chain, Near near, std::vector<std::uint8_t>& has_container) {
    LaminarReport rep;
    const std::size_t nb = cat.entries.size();
    has_container.assign(nb, 0);
    std::vector<std::uint32_t> count(nb + 1, 0);
    for (const auto& s : samples)
        for (std::uint32_t id : chain(s)) ++count[id + 1];
    for (std::size_t i = 0; i < nb; ++i) {
        if (count[i + 1] > 0) ++rep.branches;
        count[i + 1] += count[i];
    }
    std::vector<std::uint32_t> members(count[nb]);
    {
        std::vector<std::uint32_t> fill(count.begin(), count.end() - 1);
        for (std::size_t si = 0; si < samples.size(); ++si)
            for (std::uint32_t id : chain(samples[si])) members[fill[id]++] = static_cast<std::uint32_t>(si);
    }
    auto in_chain = [&](std::size_t si, std::uint32_t id) {
        const auto& c = chain(samples[si]);
        return std::find(c.begin(), c.end(), id) != c.end();
    };
    // S_b subset of S_c, skipping memberships inside the band
    auto subset = [&](std::uint32_t b, std::uint32_t c, std::size_t& skipped, std::size_t& witness) {
        const int tb = cat.entries[b].time, tc = cat.entries[c].time;
        for (std::uint32_t k = count[b]; k < count[b + 1]; ++k) {
            const std::size_t w = members[k];
            if (near(samples[w], tb) || near(samples[w], tc)) {
                ++skipped;
                continue;
            }
            if (!in_chain(w, c)) {
                witness = w;
                return false;
            }
        }
        return true;
    };
    std::unordered_set<std::uint64_t> seen;
    for (std::size_t si = 0; si < samples.size(); ++si) {
        const auto& c = chain(samples[si]);
        for (std::size_t j = 1; j < c.size(); ++j) {
            const std::uint64_t key = (static_cast<std::uint64_t>(c[j - 1]) << 32) | c[j];
            if (!seen.insert(key).second) continue;
            ++rep.pairs;
            std::size_t skipped = 0, w1 = 0, w2 = 0;
            if (subset(c[j], c[j - 1], skipped, w1)) {
                ++rep.nested;
                has_container[c[j]] = 1;
            } else if (subset(c[j - 1], c[j], skipped, w2)) {
                ++rep.reverse;
            } else {
                ++rep.violations;
                if (rep.log.size() < 20) {
                    const auto& eb = cat.entries[c[j]];
                    const auto& ec = cat.entries[c[j - 1]];
                    std::ostringstream o;
                    o << "strips (" << ec.time << "; " << ec.label.x << "," << ec.label.y << ") and (" << eb.time
                      << "; " << eb.label.x << "," << eb.label.y << ") overlap at sample " << si
                      << " without nesting (witnesses " << w1 << ", " << w2 << ")";
                    rep.log.push_back(o.str());
                }
            }
            rep.quarantined += skipped;
        }
    }
    return rep;
}

}  // namespace detail

// Maximal strips (no container in the catalog) form the partition; each
// Gamma sample with a complete forward witness is assigned to the maximal
// strip of its first return.
[[nodiscard]] inline TowerPartition build_partition(const BranchCatalog& cat, const RectanglePoints& rect) {
    TowerPartition P;
    P.T = rect.T;
    P.horizon = rect.horizon;
    std::vector<std::uint8_t> contained_s, contained_u;
    P.stable = detail::laminar_check(
        cat, rect.samples, [](const TowerSample& s) -> const std::vector<std::uint32_t>& { return s.forward; },
        [](const TowerSample& s, int t) { return s.near_f(t); }, contained_s);
    P.unstable = detail::laminar_check(
        cat, rect.samples, [](const TowerSample& s) -> const std::vector<std::uint32_t>& { return s.backward; },
        [](const TowerSample& s, int t) { return s.near_b(t); }, contained_u);
    P.maximal.assign(cat.entries.size(), 0);
    for (std::size_t i = 0; i < cat.entries.size(); ++i) P.maximal[i] = contained_s[i] ? 0 : 1;

    P.element_of.assign(rect.samples.size(), -1);
    std::unordered_map<std::uint32_t, std::int32_t> element_index;
    std::size_t double_max = 0;
    std::string first_double;
    for (std::size_t si = 0; si < rect.samples.size(); ++si) {
        const TowerSample& s = rect.samples[si];
        if (!s.in_gamma) continue;
        ++P.gamma_samples;
        if (!s.complete_forward || s.forward.empty()) {
            ++P.tail;
            continue;
        }
        const std::uint32_t b = s.forward.front();
        std::size_t nmax = 0;
        bool quarantined = false;
        for (std::uint32_t id : s.forward) {
            if (!P.maximal[id]) continue;
            if (s.near_f(cat.entries[id].time)) {
                quarantined = true;
                continue;
            }
            ++nmax;
        }
        if (nmax > 1) {
            ++double_max;
            if (first_double.empty()) first_double = "sample " + std::to_string(si);
        }
        if (!P.maximal[b] || quarantined) ++P.quarantined_assignments;
        auto [it, fresh] = element_index.try_emplace(b, static_cast<std::int32_t>(P.elements.size()));
        if (fresh) {
            const auto& e = cat.entries[b];
            P.elements.push_back({b, e.time, e.label, 0, si});
        }
        ++P.elements[static_cast<std::size_t>(it->second)].samples;
        P.element_of[si] = it->second;
        ++P.assigned;
    }
    if (double_max > 0)
        throw VerificationError(std::to_string(double_max) + " samples lie in two maximal strips (first: " +
                                first_double + ")");
    // representative: the member nearest to the element's mean
    std::vector<Vec2> mean(P.elements.size());
    for (std::size_t si = 0; si < rect.samples.size(); ++si)
        if (P.element_of[si] >= 0) mean[static_cast<std::size_t>(P.element_of[si])] += rect.samples[si].z;
    for (std::size_t e = 0; e < P.elements.size(); ++e) mean[e] = mean[e] / static_cast<double>(P.elements[e].samples);
    std::vector<double> best(P.elements.size(), 1e300);
    for (std::size_t si = 0; si < rect.samples.size(); ++si) {
        if (P.element_of[si] < 0) continue;
        const auto e = static_cast<std::size_t>(P.element_of[si]);
        const double dd = norm(rect.samples[si].z - mean[e]);
        if (dd < best[e]) {
            best[e] = dd;
            P.elements[e].representative = si;
        }
    }
    P.coverage_ok = P.assigned + P.tail == P.gamma_samples;
    return P;
}

// ---------------------------------------------------------------------------
// Induced map

struct FirstReturn {
    int tau = 0;
    IVec2 label;
    Vec2 image;  // f~^tau(z) - label, in R~
};

// First T-return of a lifted point of R~ within the horizon.
[[nodiscard]] inline std::optional<FirstReturn> first_return(const SurfaceMap& f, const NiceDomain& d, const Vec2& z,
                                                             int horizon) {
    LiftedPoint w = LiftedPoint::from(z);
    for (int t = 1; t <= horizon; ++t) {
        w = advance(f, w);
        if (t % d.T != 0) continue;
        if (const auto lab = detail::label_in(d, w)) return FirstReturn{t, lab->first, lab->second};
    }
    return std::nullopt;
}

struct InducedImage {
    TorusPoint point;
    Vec2 lift;
    int tau = 0;
    double jac_u = 0;
};

// ||Df^tau(z) e^u(z)||
[[nodiscard]] inline double unstable_jacobian(const SurfaceMap& f, const Vec2& z, int tau) {
    const TorusPoint z0(z);
    Vec2 v = estimate_splitting(f, z0, 30).e_u;
    TorusPoint p = z0;
    double logj = 0;
    for (int j = 0; j < tau; ++j) {
        v = f.derivative(p) * v;
        const double n = norm(v);
        logj += std::log(n);
        v = v / n;
        p = f.forward(p);
    }
    return std::exp(logj);
}

[[nodiscard]] inline InducedImage induced_map(const SurfaceMap& f, const NiceDomain& d, const RectanglePoints& rect,
                                              const TowerPartition& P, std::size_t sample) {
    if (sample >= rect.samples.size() || P.element_of[sample] < 0)
        throw PreconditionError("induced map is defined on assigned samples only");
    const TowerSample& s = rect.samples[sample];
    const int tau = P.elements[static_cast<std::size_t>(P.element_of[sample])].time;
    const LiftedPoint w = iterate_lifted(f, LiftedPoint::from(s.z), tau);
    InducedImage im;
    im.tau = tau;
    im.lift = w.relative_to(s.tau_label);
    im.point = w.torus();
    im.jac_u = unstable_jacobian(f, s.z, tau);
    (void)d;
    return im;
}

// ---------------------------------------------------------------------------
// Verification of (Y0)-(Y2)

struct MarkovReport {
    std::size_t checked = 0, failures = 0, skipped_long = 0, label_mismatch = 0;
    double max_boundary_error = 0;
    double max_growth_constant = 0;
    std::size_t growth_failures = 0, cone_failures = 0;
    std::vector<std::string> log;
};

struct FirstReturnReport {
    std::size_t checked = 0, ambiguous = 0, hard = 0;
    std::vector<std::string> log;  // every exception
    [[nodiscard]] double ambiguous_fraction() const { return checked ? static_cast<double>(ambiguous) / checked : 0; }
};

struct DistortionReport {
    std::vector<double> max_log_ratio;  // per F-step n
    std::vector<std::size_t> pairs;     // pairs alive at step n
    double beta2 = 0, c = 0;
    bool exact_zero = false;
    double holder_c = 0;  // max one-step |log Jac ratio| / d(z, w) over the stable pairs, exponent 1
};

struct YReport {
    MarkovReport markov;
    FirstReturnReport first_return;
    double beta1_stable = 0, beta1_unstable = 0;
    std::size_t y1_samples = 0;
    DistortionReport y2;
    double image_coverage = 0;  // fraction of F-images with a first return within the horizon
    [[nodiscard]] double beta1() const { return std::max(beta1_stable, beta1_unstable); }
    [[nodiscard]] bool y0_ok() const { return markov.failures == 0 && first_return.hard == 0; }
    [[nodiscard]] bool y1_ok() const { return beta1() < 1; }
    [[nodiscard]] bool y2_ok() const { return y2.exact_zero || (y2.beta2 > 0 && y2.beta2 < 1); }
};

namespace detail {

[[nodiscard]] inline std::vector<std::size_t> spread(std::size_t n, std::size_t want) {
    std::vector<std::size_t> out;
    if (n == 0) return out;
    want = std::min(want, n);
    for (std::size_t k = 0; k < want; ++k) out.push_back(k * n / want);
    return out;
}

// log ||Df^tau e^u|| at z.
[[nodiscard]] inline double log_jac(const SurfaceMap& f, const Vec2& z, int tau) {
    return std::log(unstable_jacobian(f, z, tau));
}

}  // namespace detail

[[nodiscard]] inline YReport verify_Y_axioms(const SurfaceMap& f, const NiceDomain& d, const RectanglePoints& rect,
                                             const TowerPartition& P, const DerivedConstants& k, long level,
                                             const TowerOptions& opt = {}) {
    YReport R;
    const int horizon = rect.horizon;
    std::vector<std::size_t> assigned;
    for (std::size_t si = 0; si < rect.samples.size(); ++si)
        if (P.element_of[si] >= 0) assigned.push_back(si);
    if (assigned.empty()) throw PreconditionError("partition has no assigned samples");

    // (Y0) Markov: images of the stable boundaries of each element land on the stable sides
    {
        std::vector<std::size_t> order(P.elements.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return P.elements[a].samples > P.elements[b].samples;
        });
        std::vector<std::size_t> todo;
        for (std::size_t e : order) {
            if (P.elements[e].time > kBoundaryCheckTime) {
                ++R.markov.skipped_long;
                continue;
            }
            if (static_cast<int>(todo.size()) < opt.markov_elements) todo.push_back(e);
        }
        const auto res = parallel_map<HyperbolicBranch>(todo.size(), [&](std::size_t i) {
            const PartitionElement& el = P.elements[todo[i]];
            return branch_at(f, d, rect.samples[el.representative].z, el.time, k, level, opt.tol);
        });
        for (std::size_t i = 0; i < todo.size(); ++i) {
            const PartitionElement& el = P.elements[todo[i]];
            const HyperbolicBranch& b = res[i];
            ++R.markov.checked;
            if (!(b.label == el.label)) ++R.markov.label_mismatch;
            R.markov.max_boundary_error = std::max(R.markov.max_boundary_error, b.check.boundary_error);
            R.markov.max_growth_constant = std::max(R.markov.max_growth_constant, b.check.C_measured);
            if (!b.check.growth_ok) ++R.markov.growth_failures;
            if (!b.check.cone_ok) ++R.markov.cone_failures;
            if (!b.check.full_length || !b.check.proper || !(b.label == el.label)) {
                ++R.markov.failures;
                if (R.markov.log.size() < 20) {
                    std::ostringstream o;
                    o << "element " << todo[i] << " (tau " << el.time << "): boundary error "
                      << b.check.boundary_error << (b.check.proper ? "" : ", not proper");
                    R.markov.log.push_back(o.str());
                }
            }
        }
    }

    // (Y0) first return: an independent simulation on the torus
    {
        struct FR {
            int kind = 0;  // 0 ok, 1 ambiguous, 2 hard
            std::string msg;
        };
        const auto res = parallel_map<FR>(assigned.size(), [&](std::size_t i) {
            const std::size_t si = assigned[i];
            const TowerSample& s = rect.samples[si];
            const int tau = P.elements[static_cast<std::size_t>(P.element_of[si])].time;
            TorusPoint p(s.z);
            FR r;
            for (int t = 1; t <= tau; ++t) {
                p = f.forward(p);
                if (t % d.T != 0) continue;
                const bool in = d.lift_in(p).has_value();
                if (in == (t == tau)) continue;
                const bool amb = detail::locate(d, p.vec(), opt.band).near;
                r.kind = amb ? std::max(r.kind, 1) : 2;
                std::ostringstream o;
                o << "sample " << si << " (" << s.z.x << ", " << s.z.y << "), tau " << tau << ": "
                  << (in ? "returns at " : "misses the return at ") << t << (amb ? " [boundary band]" : "");
                r.msg = o.str();
            }
            return r;
        });
        for (const auto& r : res) {
            ++R.first_return.checked;
            if (r.kind == 1) ++R.first_return.ambiguous;
            if (r.kind == 2) ++R.first_return.hard;
            if (r.kind != 0) R.first_return.log.push_back(r.msg);
        }
    }

    // (Y1) contraction along stable pairs, expansion along unstable pairs
    {
        const auto pick = detail::spread(assigned.size(), static_cast<std::size_t>(opt.y1_samples));
        struct B1 {
            double s = 0, u = 0;
        };
        const auto res = parallel_map<B1>(pick.size(), [&](std::size_t i) {
            const std::size_t si = assigned[pick[i]];
            const TowerSample& s = rect.samples[si];
            const int tau = P.elements[static_cast<std::size_t>(P.element_of[si])].time;
            const double h = 1e-8;
            std::vector<Vec2> orbit{s.z};
            for (int t = 0; t < tau; ++t) orbit.push_back(f.lift(orbit.back()));
            // y on V^s_x: F(y) - F(x) = h e^s(F x), pulled back without cancellation
            Vec2 w = h * estimate_splitting(f, TorusPoint(orbit.back()), 30).e_s;
            for (int t = tau; t >= 1; --t) w = f.lift_inverse_increment(orbit[static_cast<std::size_t>(t)], w);
            B1 b;
            b.s = h / norm(w);
            // y on V^u_x: y - x = h e^u(x), pushed forward
            Vec2 v = h * estimate_splitting(f, TorusPoint(s.z), 30).e_u;
            for (int t = 0; t < tau; ++t) v = f.lift_increment(orbit[static_cast<std::size_t>(t)], v);
            b.u = h / norm(v);
            return b;
        });
        for (const auto& b : res) {
            R.beta1_stable = std::max(R.beta1_stable, b.s);
            R.beta1_unstable = std::max(R.beta1_unstable, b.u);
        }
        R.y1_samples = pick.size();
    }

    // (Y2)(a) distortion along F-orbits of stable pairs, and the one-step
    // bound |log Jac ratio| <= c d(z, w) at every step
    {
        const int steps = opt.y2_steps;
        const auto pick = detail::spread(assigned.size(), static_cast<std::size_t>(opt.y2_pairs));
        struct Pair {
            std::vector<double> D;  // per step, negative once the pair is gone
            double holder = 0;
            bool image_returns = false;
        };
        const auto res = parallel_map<Pair>(pick.size(), [&](std::size_t i) {
            Pair out;
            out.D.assign(static_cast<std::size_t>(steps), -1.0);
            const std::size_t si = assigned[pick[i]];
            Vec2 x = rect.samples[si].z;
            double dn = opt.y2_separation;
            const double h = 1e-6;
            for (int n = 0; n < steps; ++n) {
                const auto fr = first_return(f, d, x, horizon);
                if (!fr) break;
                if (n == 0) out.image_returns = first_return(f, d, fr->image, horizon).has_value();
                const Splitting sp = estimate_splitting(f, TorusPoint(x), 30);
                const double lx = detail::log_jac(f, x, fr->tau);
                auto same = [&](const Vec2& y) {
                    const auto g = first_return(f, d, y, fr->tau);
                    return g && g->tau == fr->tau && g->label == fr->label;
                };
                double D = -1;
                if (dn >= h) {
                    const Vec2 y = x + dn * sp.e_s;
                    if (same(y)) D = std::abs(lx - detail::log_jac(f, y, fr->tau));
                } else {
                    const Vec2 yp = x + h * sp.e_s, ym = x - h * sp.e_s;
                    if (same(yp) && same(ym))
                        D = std::abs(detail::log_jac(f, yp, fr->tau) - detail::log_jac(f, ym, fr->tau)) / (2 * h) * dn;
                }
                if (D < 0) break;
                out.D[static_cast<std::size_t>(n)] = D;
                out.holder = std::max(out.holder, D / dn);
                // contraction of the stable pair over this return
                std::vector<TorusPoint> orbit{TorusPoint(x)};
                for (int t = 0; t < fr->tau; ++t) orbit.push_back(f.forward(orbit.back()));
                Vec2 s = estimate_splitting(f, orbit.back(), 30).e_s;
                for (int t = fr->tau; t >= 1; --t)
                    s = f.derivative(orbit[static_cast<std::size_t>(t - 1)]).inverse() * s;
                dn /= norm(s);
                x = fr->image;
            }
            return out;
        });
        DistortionReport& y2 = R.y2;
        y2.max_log_ratio.assign(static_cast<std::size_t>(steps), 0.0);
        y2.pairs.assign(static_cast<std::size_t>(steps), 0);
        std::size_t returning = 0;
        for (const auto& p : res) {
            for (int n = 0; n < steps; ++n) {
                const double D = p.D[static_cast<std::size_t>(n)];
                if (D < 0) continue;
                ++y2.pairs[static_cast<std::size_t>(n)];
                y2.max_log_ratio[static_cast<std::size_t>(n)] = std::max(y2.max_log_ratio[static_cast<std::size_t>(n)], D);
            }
            y2.holder_c = std::max(y2.holder_c, p.holder);
            if (p.image_returns) ++returning;
        }
        R.image_coverage = pick.empty() ? 0 : static_cast<double>(returning) / static_cast<double>(pick.size());
        y2.exact_zero = std::all_of(y2.max_log_ratio.begin(), y2.max_log_ratio.end(), [](double v) { return v == 0; });
        if (!y2.exact_zero) {
            // least squares of log max ratio against n
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            int m = 0;
            for (int n = 0; n < steps; ++n) {
                const double v = y2.max_log_ratio[static_cast<std::size_t>(n)];
                if (!(v > 0)) continue;
                sx += n;
                sy += std::log(v);
                sxx += static_cast<double>(n) * n;
                sxy += n * std::log(v);
                ++m;
            }
            if (m >= 2) {
                const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
                y2.beta2 = std::exp(slope);
                for (int n = 0; n < steps; ++n)
                    y2.c = std::max(y2.c, y2.max_log_ratio[static_cast<std::size_t>(n)] / std::pow(y2.beta2, n));
            }
        }
    }
    return R;
}

}  // namespace hypertower
