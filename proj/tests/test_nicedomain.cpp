#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "hypertower/nicedomain.hpp"
#include "support.hpp"

using namespace hypertower;
using namespace test_support;

namespace {

const double kMu = (3 + std::sqrt(5.0)) / 2;  // unstable eigenvalue of [[2,1],[1,1]]
const Region kU{{0.2, 0.4}, {0.45, 0.45}};

PeriodicPoint pp(double x, double y, int period) { return {TorusPoint(x, y), period, 1, 0}; }

const NiceDomain& cat_domain() {
    static const NiceDomain d = nice_domain_from(*cat().f, pp(0, 0, 1), {0, 0}, pp(0.4, 0.8, 2), {0.4, 0.8});
    return d;
}

const NiceSearch& perturbed_search() {
    static const NiceSearch s = [] {
        const MapSetup& m = perturbed();
        return find_nice_domain(*m.f, m.params, m.k, m.cs, m.delta, kU, 1);
    }();
    return s;
}

// Eigen-directions of the cat matrix from the characteristic polynomial.
Vec2 cat_eu() { return normalized({1, kMu - 2}); }
Vec2 cat_es() { return normalized({1, 1 / kMu - 2}); }

// Coefficients of v in the basis (e_u, e_s), by Cramer's rule.
std::pair<double, double> in_eigenbasis(const Vec2& v) {
    const Vec2 eu = cat_eu(), es = cat_es();
    const double det = eu.x * es.y - eu.y * es.x;
    return {(v.x * es.y - v.y * es.x) / det, (eu.x * v.y - eu.y * v.x) / det};
}

HyperbolicBranch fixed_point_branch() {
    const NiceDomain& d = cat_domain();
    const Vec2 x = d.p_lift + 0.01 * (d.a - d.p_lift) + 0.01 * (d.c - d.p_lift);
    return branch_at(*cat().f, d, x, d.T, cat().k, 1);
}

}  // namespace

TEST(Periodic, CatPointsOfPeriodAtMostTwo) {
    const auto pts = periodic_points_in(*cat().f, Region{}, 2, 12);
    // A - I and A^2 - I have determinants -1 and -5
    ASSERT_EQ(pts.size(), 5u);
    EXPECT_EQ(pts[0].period, 1);
    EXPECT_LT(distance(pts[0].point, TorusPoint(0, 0)), 1e-12);
    const std::vector<TorusPoint> two{{0.2, 0.4}, {0.4, 0.8}, {0.6, 0.2}, {0.8, 0.6}};
    for (std::size_t i = 1; i < 5; ++i) {
        EXPECT_EQ(pts[i].period, 2);
        EXPECT_LT(distance(pts[i].point, two[i - 1]), 1e-12);
    }
}

TEST(Manifold, CatCurvesAreEigenLines) {
    const Curve c = periodic_manifold(*cat().f, {0.4, 0.8}, 2, false, 1.0);
    const Vec2 es = cat_es();
    for (const Vec2& v : c.pts) EXPECT_LT(std::abs(cross(v - Vec2{0.4, 0.8}, es)), 1e-12);
    EXPECT_GE(c.arc.back(), 1.0);
    EXPECT_LE(c.arc.front(), -1.0);
}

TEST(NiceDomain, CatDomainGeometry) {
    const NiceDomain& d = cat_domain();
    EXPECT_EQ(d.T, 2);
    const auto [al, be] = in_eigenbasis(d.q_lift - d.p_lift);
    const Vec2 eu = cat_eu(), es = cat_es();
    EXPECT_LT(norm(d.a - (d.p_lift + al * eu)), 1e-9);
    EXPECT_LT(norm(d.c - (d.p_lift + be * es)), 1e-9);
    EXPECT_NEAR(d.area, std::abs(al * be * cross(eu, es)), 1e-9);
    EXPECT_NEAR(d.diameter, std::max(norm(d.q_lift - d.p_lift), norm(d.a - d.c)), 1e-3);
}

TEST(NiceDomain, CatDomainIsNice) {
    const NicenessReport& n = cat_domain().niceness;
    EXPECT_TRUE(n.ok);
    EXPECT_EQ(n.violations, 0);
    EXPECT_EQ(n.n_checked, 50);
    EXPECT_GT(n.images, 0);
    EXPECT_LT(n.max_drift, 1e-12);
}

TEST(NiceDomain, SideImagesStayOutsideProperty) {
    // independent of the report: sample the stable sides and push them with
    // the integer matrix
    const NiceDomain& d = cat_domain();
    std::mt19937_64 rng(7);
    for (int k = 0; k < 200; ++k) {
        const double t = uniform(rng);
        const Vec2 z = d.p_lift + t * (d.c - d.p_lift);
        const IMat2 A2 = cat().f->linear_part() * cat().f->linear_part();
        Vec2 w = z;
        for (int n = 1; n <= 6; ++n) {
            w = A2.as_real() * w;
            const auto in = d.lift_in(TorusPoint(w));
            if (in) {
                EXPECT_LT(d.boundary_distance(*in, 1e-6), 1e-9) << "n=" << n << " t=" << t;
            }
        }
    }
}

TEST(NiceDomain, DegenerateDiskRejected) {
    EXPECT_THROW((void)nice_domain_from(*cat().f, pp(0, 0, 1), {0, 0}, pp(0, 0, 1), {0, 0}), PreconditionError);
    EXPECT_THROW((void)nice_domain_from(*cat().f, pp(0, 0, 1), {0, 0}, pp(0.4, 0.8, 2), {0.4, 0.9}),
                 PreconditionError);
}

TEST(NiceDomain, RadiusEnforced) {
    NiceOptions o;
    o.enforce_r = true;
    const double dpq = norm(Vec2{0.4, 0.8});
    EXPECT_THROW((void)nice_domain_from(*cat().f, pp(0, 0, 1), {0, 0}, pp(0.4, 0.8, 2), {0.4, 0.8}, o, dpq / 2),
                 PreconditionError);
}

TEST(NiceDomain, RadiusFormula) {
    const auto& k = cat().k;
    const double r = nice_radius(1e-5, 3, 4.0, k);
    EXPECT_NEAR(r, 1e-5 * std::exp(-3 * k.lambda - k.c2) / 8, 1e-18);
}

TEST(NiceDomain, LiftInRoundTrip) {
    const NiceDomain& d = cat_domain();
    std::mt19937_64 rng(3);
    int hits = 0;
    for (int k = 0; k < 500; ++k) {
        const TorusPoint z = random_point(rng);
        const auto l = d.lift_in(z);
        if (!l) continue;
        ++hits;
        EXPECT_TRUE(d.inside_lift(*l));
        EXPECT_LT(distance(TorusPoint(*l), z), 1e-15);
    }
    // the disk has area d.area in a torus of area 1
    EXPECT_NEAR(hits / 500.0, d.area, 0.07);
}

TEST(NiceDomain, SearchFindsCatDomain) {
    const MapSetup& m = cat();
    const NiceSearch s = find_nice_domain(*m.f, m.params, m.k, m.cs, m.delta, kU, 1);
    EXPECT_EQ(s.candidates.size(), 5u);
    EXPECT_TRUE(s.domain.niceness.ok);
    EXPECT_GT(s.domain.area, 0.3);
    EXPECT_GT(s.domain.r, 0);
    EXPECT_GE(s.domain.C_ell, 2.0);
}

TEST(NiceDomain, SearchFindsPerturbedDomain) {
    const NiceSearch& s = perturbed_search();
    EXPECT_TRUE(s.domain.niceness.ok);
    EXPECT_LT(s.domain.niceness.max_drift, 1e-7);
    for (const Vec2& v : s.domain.ring->points()) EXPECT_TRUE(kU.contains(v));
}

TEST(NiceDomain, SearchWithoutRegularPointsFails) {
    const MapSetup& m = cat();
    EXPECT_THROW((void)find_nice_domain(*m.f, m.params, m.k, m.cs, m.delta, kU, 0), PreconditionError);
}

TEST(AlmostReturn, PeriodicPointReturnsToItself) {
    const NiceDomain& d = cat_domain();
    const std::vector<TorusPoint> A{d.p.point, d.q.point};
    const auto hits = detect_almost_returns(*cat().f, d, A, 2 * d.T);
    bool pp_found = false, qq_found = false;
    for (const auto& h : hits) {
        EXPECT_EQ(h.time % d.T, 0);
        if (h.x == 0 && h.y == 0 && h.time == d.T) pp_found = true;
        if (h.x == 1 && h.y == 1 && h.time == d.T) qq_found = true;
    }
    EXPECT_TRUE(pp_found);
    EXPECT_TRUE(qq_found);
}

TEST(AlmostReturn, HorizonMustBeMultipleOfT) {
    const NiceDomain& d = cat_domain();
    EXPECT_THROW((void)detect_almost_returns(*cat().f, d, {d.p.point}, 3), PreconditionError);
    EXPECT_THROW((void)detect_almost_returns(*cat().f, d, {d.p.point}, 0), PreconditionError);
}

TEST(Branch, FixedPointStripWidth) {
    const NiceDomain& d = cat_domain();
    const HyperbolicBranch b = fixed_point_branch();
    EXPECT_EQ(b.label, (IVec2{0, 0}));
    ASSERT_TRUE(b.trace_s.resolved);
    ASSERT_TRUE(b.trace_u.resolved);
    // R~ is the parallelogram p, a, q, c: chords along the axes are its side
    // lengths, and near p the strip is the part that f^T does not push out
    const double Lu = norm(d.a - d.p_lift), Ls = norm(d.c - d.p_lift);
    EXPECT_NEAR(b.trace_s.chord(), Lu, 1e-9);
    EXPECT_NEAR(b.trace_u.chord(), Ls, 1e-9);
    EXPECT_NEAR(b.trace_s.length(), Lu * std::pow(kMu, -d.T), 1e-9);
    EXPECT_NEAR(b.trace_u.length(), Ls * std::pow(kMu, -d.T), 1e-9);
    EXPECT_TRUE(b.check.proper);
    EXPECT_TRUE(b.check.full_length);
    EXPECT_LT(b.check.boundary_error, 1e-9);
}

TEST(Branch, CatGrowthAndCones) {
    const NiceDomain& d = cat_domain();
    const HyperbolicBranch b = fixed_point_branch();
    // both ratios peak at 1 (j = i for the unstable one, j = 0 for the stable one)
    EXPECT_NEAR(b.check.C_measured, 1.0, 1e-9);
    EXPECT_TRUE(b.check.growth_ok);
    EXPECT_NEAR(b.check.cone_ratio, std::pow(kMu, -2.0 * d.T), 1e-9);
    EXPECT_TRUE(b.check.cone_ok);
    EXPECT_NEAR(b.lambda_branch, cat().k.lambda / 3, 1e-15);
    EXPECT_NEAR(b.C_branch, std::exp(2 * cat().k.epsilon) / cat().k.Qhat, 1e-12);
}

TEST(Branch, ReturnTimeValidated) {
    const NiceDomain& d = cat_domain();
    const Vec2 x = d.p_lift + 0.01 * (d.a - d.p_lift) + 0.01 * (d.c - d.p_lift);
    EXPECT_THROW((void)branch_at(*cat().f, d, x, 0, cat().k, 1), PreconditionError);
    EXPECT_THROW((void)branch_at(*cat().f, d, x, 3, cat().k, 1), PreconditionError);
}

TEST(Branch, ExtractFromAlmostReturn) {
    const NiceDomain& d = cat_domain();
    const std::vector<TorusPoint> A{TorusPoint(d.p_lift + 0.01 * (d.a - d.p_lift) + 0.01 * (d.c - d.p_lift))};
    const auto hits = detect_almost_returns(*cat().f, d, A, d.T);
    ASSERT_FALSE(hits.empty());
    const HyperbolicBranch b = extract_branch(*cat().f, d, hits.front(), A, cat().k, 1);
    EXPECT_EQ(b.return_time, d.T);
    EXPECT_TRUE(in_stable_strip(*cat().f, d, b, b.witness));
}

TEST(Branch, ConcatenationWidths) {
    const NiceDomain& d = cat_domain();
    const HyperbolicBranch b = fixed_point_branch();
    const HyperbolicBranch bb = concatenate(*cat().f, d, b, b);
    const HyperbolicBranch bbb = concatenate(*cat().f, d, bb, b);
    EXPECT_EQ(bb.return_time, 2 * d.T);
    EXPECT_EQ(bbb.return_time, 3 * d.T);
    EXPECT_EQ(bbb.factors.size(), 3u);
    const double Lu = norm(d.a - d.p_lift);
    ASSERT_TRUE(bb.trace_s.resolved && bbb.trace_s.resolved);
    EXPECT_NEAR(bb.trace_s.length() / (Lu * std::pow(kMu, -2.0 * d.T)), 1.0, 0.01);
    EXPECT_NEAR(bbb.trace_s.length() / (Lu * std::pow(kMu, -3.0 * d.T)), 1.0, 0.01);
    EXPECT_TRUE(in_stable_strip(*cat().f, d, bbb, bbb.witness));
    EXPECT_TRUE(in_stable_strip(*cat().f, d, b, bbb.witness));
}

TEST(Branch, ConcatenationLabelsCompose) {
    // q-strip: f~^T(q~) = q~ + (4, 2)
    const NiceDomain& d = cat_domain();
    const Vec2 y = d.q_lift + 0.01 * (d.c - d.q_lift) + 0.01 * (d.a - d.q_lift);
    const HyperbolicBranch bq = branch_at(*cat().f, d, y, d.T, cat().k, 1);
    EXPECT_EQ(bq.label, (IVec2{4, 2}));
    const HyperbolicBranch bp = fixed_point_branch();
    const HyperbolicBranch pq = concatenate(*cat().f, d, bp, bq);
    EXPECT_EQ(pq.label, (IVec2{4, 2}));
    const HyperbolicBranch qp = concatenate(*cat().f, d, bq, bp);
    // A^T (4, 2) with A^2 = [[5,3],[3,2]]
    EXPECT_EQ(qp.label, (IVec2{26, 16}));
}

TEST(Branch, DisjointConcatenationRejected) {
    const NiceDomain& d = cat_domain();
    const HyperbolicBranch b = fixed_point_branch();
    HyperbolicBranch bogus = b;
    bogus.label = {1000, -1000};
    EXPECT_THROW((void)concatenate(*cat().f, d, b, bogus), ConvergenceError);
}

TEST(Branch, PerturbedBranchHyperbolic) {
    const NiceDomain& d = perturbed_search().domain;
    const MapSetup& m = perturbed();
    const Vec2 x = d.p_lift + 0.01 * (d.a - d.p_lift) + 0.01 * (d.c - d.p_lift);
    const HyperbolicBranch b = branch_at(*m.f, d, x, d.T, m.k, 1);
    EXPECT_TRUE(b.check.growth_ok) << b.check.C_measured << " vs " << b.C_branch;
    EXPECT_TRUE(b.check.cone_ok) << b.check.cone_ratio;
    EXPECT_TRUE(b.check.full_length) << b.check.boundary_error;
    EXPECT_TRUE(b.check.proper);
}
