#include <gtest/gtest.h>

#include <cmath>

#include "hypertower/tower.hpp"
#include "support.hpp"
#include "tower_fixture.hpp"

using namespace hypertower;
using namespace test_support;

namespace {

const double kMu = (3 + std::sqrt(5.0)) / 2;

}  // namespace

TEST(Saturation, EmptyAlmostReturnSetRejected) {
    const Built& t = cat_tower();
    EXPECT_THROW((void)saturate(*cat().f, t.d, {}, cat().k, 1, small(16)), PreconditionError);
}

TEST(Saturation, CatalogIsLargeAndLaminar) {
    for (const Built* t : {&cat_tower(), &perturbed_tower()}) {
        EXPECT_GE(t->sat.catalog.entries.size(), 50u);
        EXPECT_EQ(t->P.stable.violations, 0u);
        EXPECT_EQ(t->P.unstable.violations, 0u);
        EXPECT_GT(t->P.stable.nested, 0u);
        std::size_t total = 0;
        for (const auto& [time, n] : t->sat.catalog.kappa()) {
            EXPECT_EQ(time % t->d.T, 0);
            total += n;
        }
        EXPECT_EQ(total, t->sat.catalog.entries.size());
    }
}

TEST(Saturation, SeedsAreInTheCatalog) {
    const Built& t = cat_tower();
    ASSERT_FALSE(t.sat.catalog.seeds.empty());
    for (const auto& b : t.sat.catalog.seeds) {
        const auto id = t.sat.catalog.find(b.return_time, b.label);
        ASSERT_TRUE(id.has_value());
        EXPECT_TRUE(t.sat.catalog.entries[*id].seeded);
    }
}

TEST(Saturation, DeeperWitnessShrinksGamma) {
    const Built& t = perturbed_tower();
    const MapSetup& m = perturbed();
    TowerOptions o = small(48);
    o.depth = 3;
    const Saturation s3 = saturate(*m.f, t.d, interior_points(t.d), m.k, 1, o);
    o.depth = 4;
    const Saturation s4 = saturate(*m.f, t.d, interior_points(t.d), m.k, 1, o);
    ASSERT_EQ(s3.rect.samples.size(), s4.rect.samples.size());
    for (std::size_t i = 0; i < s3.rect.samples.size(); ++i)
        if (s4.rect.samples[i].in_gamma) {
            EXPECT_TRUE(s3.rect.samples[i].in_gamma) << i;
        }
}

TEST(Saturation, WitnessShiftsUnderTheInducedMap) {
    // the forward witness of F(z) is the forward witness of z without its
    // first gap
    const Built& t = cat_tower();
    const auto& f = *cat().f;
    int checked = 0;
    for (std::size_t si = 0; si < t.sat.rect.samples.size() && checked < 200; si += 37) {
        const TowerSample& s = t.sat.rect.samples[si];
        if (!s.complete_forward) continue;
        Vec2 x = s.z;
        for (std::size_t g = 0; g + 1 < s.witness_forward.size(); ++g) {
            const auto fr = first_return(f, t.d, x, t.sat.rect.horizon);
            ASSERT_TRUE(fr.has_value());
            EXPECT_EQ(fr->tau, s.witness_forward[g]);
            x = fr->image;
        }
        ++checked;
    }
    EXPECT_GT(checked, 100);
}

TEST(Partition, AssignmentIsTheFirstReturn) {
    const Built& t = cat_tower();
    const auto& f = *cat().f;
    std::size_t members = 0;
    for (const auto& e : t.P.elements) members += e.samples;
    EXPECT_EQ(members, t.P.assigned);
    EXPECT_EQ(t.P.assigned + t.P.tail, t.P.gamma_samples);
    EXPECT_TRUE(t.P.coverage_ok);
    for (std::size_t si = 0; si < t.sat.rect.samples.size(); si += 11) {
        if (t.P.element_of[si] < 0) continue;
        const PartitionElement& e = t.P.elements[static_cast<std::size_t>(t.P.element_of[si])];
        const auto fr = first_return(f, t.d, t.sat.rect.samples[si].z, t.sat.rect.horizon);
        ASSERT_TRUE(fr.has_value());
        EXPECT_EQ(fr->tau, e.time);
        EXPECT_EQ(fr->label, e.label);
        EXPECT_TRUE(t.d.inside_lift(fr->image));
        EXPECT_TRUE(t.P.maximal[e.branch]);
    }
}

TEST(Partition, KacRelation) {
    // Lebesgue is invariant for the cat map: E[tau] mu(Gamma) = T
    const Built& t = cat_tower();
    double sum = 0;
    std::size_t n = 0;
    for (const auto& s : t.sat.rect.samples)
        if (s.in_gamma && s.tau > 0) {
            sum += s.tau;
            ++n;
        }
    EXPECT_NEAR(sum / n * t.sat.rect.gamma_measure(), t.d.T, 0.05 * t.d.T);
}

TEST(Axioms, CatFirstReturnAndMarkov) {
    const Built& t = cat_tower();
    EXPECT_EQ(t.Y.first_return.hard, 0u);
    EXPECT_LE(t.Y.first_return.ambiguous_fraction(), 0.005);
    EXPECT_GT(t.Y.markov.checked, 0u);
    EXPECT_EQ(t.Y.markov.failures, 0u);
    EXPECT_TRUE(t.Y.y0_ok());
}

TEST(Axioms, CatContractionIsTheEigenvalue) {
    // every return time is a multiple of T, and one return contracts by mu^-tau
    const Built& t = cat_tower();
    EXPECT_NEAR(t.Y.beta1_stable, std::pow(kMu, -t.d.T), 1e-6);
    EXPECT_NEAR(t.Y.beta1_unstable, std::pow(kMu, -t.d.T), 1e-6);
    EXPECT_TRUE(t.Y.y1_ok());
}

TEST(Axioms, CatHasNoDistortion) {
    const Built& t = cat_tower();
    EXPECT_TRUE(t.Y.y2.exact_zero);
    for (double v : t.Y.y2.max_log_ratio) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(t.Y.y2.holder_c, 0.0);
    EXPECT_TRUE(t.Y.y2_ok());
}

TEST(Axioms, PerturbedDistortionDecays) {
    const Built& t = perturbed_tower();
    EXPECT_TRUE(t.Y.y0_ok());
    EXPECT_LT(t.Y.beta1(), 1.0);
    EXPECT_FALSE(t.Y.y2.exact_zero);
    EXPECT_GT(t.Y.y2.beta2, 0.0);
    EXPECT_LT(t.Y.y2.beta2, 1.0);
    const auto& D = t.Y.y2.max_log_ratio;
    EXPECT_LT(D.back(), 1e-3 * D.front());
    for (std::size_t n = 0; n < D.size(); ++n) EXPECT_LE(D[n], t.Y.y2.c * std::pow(t.Y.y2.beta2, n) * (1 + 1e-12));
    EXPECT_GE(t.Y.image_coverage, 0.95);
}

TEST(InducedMap, CatJacobianIsExponential) {
    const Built& t = cat_tower();
    int checked = 0;
    for (std::size_t si = 0; si < t.sat.rect.samples.size() && checked < 100; si += 13) {
        if (t.P.element_of[si] < 0) continue;
        const InducedImage im = induced_map(*cat().f, t.d, t.sat.rect, t.P, si);
        EXPECT_NEAR(im.jac_u / std::pow(kMu, im.tau), 1.0, 1e-9);
        EXPECT_TRUE(t.d.inside_lift(im.lift));
        EXPECT_LT(distance(TorusPoint(im.lift), im.point), 1e-12);
        ++checked;
    }
    EXPECT_EQ(checked, 100);
}

TEST(InducedMap, UnassignedSampleRejected) {
    const Built& t = cat_tower();
    EXPECT_THROW((void)induced_map(*cat().f, t.d, t.sat.rect, t.P, t.sat.rect.samples.size()), PreconditionError);
}
