#include <gtest/gtest.h>

#include <cmath>
#include <iostream>
#include <numbers>
#include <random>

#include "hypertower/regularity.hpp"
#include "support.hpp"

using namespace hypertower;

namespace {

constexpr double kCatChi = 0.9624236501192069;

HyperbolicityParams cat_params(double epsilon = 0.008) {
    HyperbolicityParams p;
    p.chi = kCatChi;
    p.lambda = kCatChi / 2;
    p.epsilon = epsilon;
    return p;
}

}  // namespace

TEST(DerivedConstants, CatMapValues) {
    const auto cat = make_cat_map();
    const DerivedConstants k = derive_constants(*cat, cat_params());
    EXPECT_NEAR(k.c2, kCatChi, 1e-12);
    EXPECT_NEAR(k.c1, -kCatChi, 1e-12);
    EXPECT_NEAR(k.c3, 2.1 * kCatChi, 1e-12);
    EXPECT_NEAR(k.gamma, 1.0, 1e-12);
    // beta = 2 chi / (2.1 chi + chi) = 2 / 3.1
    EXPECT_NEAR(k.beta, 2.0 / 3.1, 1e-12);
    EXPECT_NEAR(k.beta, 0.6452, 1e-4);
    EXPECT_DOUBLE_EQ(k.Q0, 0.125);
    // Q0 * (2 * sum_i e^{-chi i})^{-1/2} by direct summation.
    double series = 0;
    for (int i = 0; i < 2000; ++i) series += std::exp(-kCatChi * i);
    EXPECT_NEAR(k.Qhat, 0.125 / std::sqrt(2 * series), 1e-12);
    EXPECT_NEAR(k.Qhat, 0.069487, 1e-6);
}

TEST(DerivedConstants, EpsilonOneAndInvariants) {
    const auto cat = make_cat_map();
    const DerivedConstants k = derive_constants(*cat, cat_params());
    // iota, eta, zeta recomputed independently from the definitions.
    const double chi = kCatChi, lam = chi / 2;
    const double iota = 2 * (chi - lam) / (6 * 0.01 * 1.0 + (2 + 2.0 / 3.1) * chi + 2 * chi);
    EXPECT_NEAR(k.iota, iota, 1e-12);
    EXPECT_NEAR(k.eta, 6 * iota + 2, 1e-12);
    EXPECT_NEAR(k.zeta, 2.0 / 3.1 * iota, 1e-12);
    EXPECT_DOUBLE_EQ(k.eps1, 0.01);
    EXPECT_GE(k.gamma, 1.0);
    EXPECT_GT(k.eta, 1.0);
    for (double v : {k.beta, k.iota, k.zeta}) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_LT(k.c2, k.c3 / (1 + k.alpha));
}

TEST(DerivedConstants, EllPrimeFormula) {
    const auto cat = make_cat_map();
    const DerivedConstants k = derive_constants(*cat, cat_params());
    EXPECT_EQ(static_cast<long>(std::ceil(std::abs(std::log(0.069487)) / (2 * 0.01))), 134);
    EXPECT_EQ(k.ell_prime, static_cast<long>(std::ceil(std::abs(std::log(k.Qhat)) / (2 * 0.008))));
}

TEST(DerivedConstants, OmegaIsLargestAdmissible) {
    const auto cat = make_cat_map();
    const DerivedConstants k = derive_constants(*cat, cat_params());
    const auto at = omega_conditions(k.omega, k.lambda, k.epsilon, k.alpha);
    for (bool b : at) EXPECT_TRUE(b);
    EXPECT_FALSE(omega_admissible(k.omega + 1e-9, k.lambda, k.epsilon, k.alpha));
    // Condition 5 alone caps omega at (1 - e^{-7 lambda/24}) / 2.
    EXPECT_LE(k.omega, (1 - std::exp(-7 * k.lambda / 24)) / 2);
    EXPECT_NEAR(k.strong_omega(), std::exp(-k.lambda) * k.omega, 1e-15);
}

TEST(DerivedConstants, RejectsBadParameters) {
    const auto cat = make_cat_map();
    HyperbolicityParams p = cat_params();
    p.lambda = p.chi;
    EXPECT_THROW((void)derive_constants(*cat, p), PreconditionError);
    p = cat_params(0.01);
    const DerivedConstants k = derive_constants(*cat, p);
    EXPECT_THROW(validate(p, k), PreconditionError);
    // The first cone inequality at omega = 0 needs epsilon < lambda alpha / 18.
    EXPECT_THROW((void)largest_omega(0.5, 0.1, 1.0), PreconditionError);
    EXPECT_NO_THROW((void)largest_omega(0.5, 0.02, 1.0));
}

TEST(DerivedConstants, PerturbedMapMargin) {
    const auto f = make_perturbed_cat_map(0.03);
    HyperbolicityParams p = cat_params();
    p.chi = auto_chi(*f);
    p.lambda = p.chi / 2;
    const DerivedConstants k = derive_constants(*f, p);
    double grid_max = 0;
    for (int i = 0; i < 256; ++i)
        for (int j = 0; j < 256; ++j)
            grid_max = std::max(grid_max, std::log(op_norm(f->derivative(Vec2{(i + 0.5) / 256, (j + 0.5) / 256}))));
    EXPECT_GE(k.c2, grid_max);
    EXPECT_GT(k.eps1, 0.0);
}

TEST(Splitting, CatEigenvectors) {
    const auto cat = make_cat_map();
    std::mt19937_64 rng(1);
    const double phi = (std::sqrt(5.0) - 1) / 2;
    const Vec2 eu = normalized(Vec2{1, phi});
    const Vec2 es = normalized(Vec2{1, -(1 + std::sqrt(5.0)) / 2});
    for (int t = 0; t < 20; ++t) {
        const Splitting s = estimate_splitting(*cat, test_support::random_point(rng), 10 + t);
        EXPECT_NEAR(s.e_u.x, eu.x, 1e-14);
        EXPECT_NEAR(s.e_u.y, eu.y, 1e-14);
        EXPECT_NEAR(s.e_s.x, es.x, 1e-14);
        EXPECT_NEAR(s.e_s.y, es.y, 1e-14);
        EXPECT_NEAR(s.angle, std::numbers::pi / 2, 1e-12);
        EXPECT_NEAR(norm(s.e_u), 1.0, 1e-12);
    }
    EXPECT_THROW((void)estimate_splitting(*cat, TorusPoint(0, 0), 9), PreconditionError);
}

TEST(Splitting, ZeroPerturbationMatchesCat) {
    const auto cat = make_cat_map();
    const auto f0 = make_perturbed_cat_map(0.0);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        const TorusPoint p = test_support::random_point(rng);
        const Splitting a = estimate_splitting(*cat, p, 30), b = estimate_splitting(*f0, p, 30);
        EXPECT_LT(norm(a.e_s - b.e_s), 1e-10);
        EXPECT_LT(norm(a.e_u - b.e_u), 1e-10);
    }
}

TEST(Splitting, PerturbedHorizonConvergence) {
    const auto f = make_perturbed_cat_map(0.03);
    std::mt19937_64 rng(3);
    for (int t = 0; t < 100; ++t) {
        const TorusPoint p = test_support::random_point(rng);
        const Splitting a = estimate_splitting(*f, p, 30), b = estimate_splitting(*f, p, 60);
        EXPECT_LE(line_angle(a.e_s, b.e_s), 1e-8);
        EXPECT_LE(line_angle(a.e_u, b.e_u), 1e-8);
        EXPECT_NEAR(a.angle, vector_angle(a.e_s, a.e_u), 1e-10);
    }
}

TEST(Splitting, DfInvarianceProperty) {
    std::mt19937_64 rng(4);
    for (const auto& f : builtin_maps()) {
        for (int t = 0; t < 100; ++t) {
            const TorusPoint p = test_support::random_point(rng);
            const Splitting s = estimate_splitting(*f, p, 40);
            const Splitting s1 = estimate_splitting(*f, f->forward(p), 40);
            const Mat2 d = f->derivative(p);
            EXPECT_LE(line_angle(d * s.e_u, s1.e_u), 1e-7) << f->name();
            EXPECT_LE(line_angle(d * s.e_s, s1.e_s), 1e-7) << f->name();
        }
    }
}

TEST(Splitting, LinearHorizonIndependenceProperty) {
    const auto f = make_linear_map(IMat2{3, 1, 2, 1});
    const TorusPoint p(0.3, 0.7);
    const Splitting a = estimate_splitting(*f, p, 10);
    for (int h : {11, 25, 80}) {
        const Splitting b = estimate_splitting(*f, p, h);
        EXPECT_EQ(a.e_s.x, b.e_s.x);
        EXPECT_EQ(a.e_s.y, b.e_s.y);
        EXPECT_EQ(a.e_u.x, b.e_u.x);
        EXPECT_EQ(a.e_u.y, b.e_u.y);
    }
}

TEST(Regularity, CatMapLevelOne) {
    const auto cat = make_cat_map();
    std::mt19937_64 rng(5);
    for (double eps : {0.001, 0.008, 0.5}) {
        const RegularityData r = regularity_at(*cat, test_support::random_point(rng), cat_params(eps));
        EXPECT_NEAR(r.C, 1.0, 1e-12);
        EXPECT_NEAR(r.K, std::numbers::pi / 2, 1e-12);
        EXPECT_EQ(r.level, 1);
    }
    HyperbolicityParams slack = cat_params();
    slack.chi = 0.9 * kCatChi;
    slack.lambda = slack.chi / 2;
    const RegularityData r = regularity_at(*cat, TorusPoint(0.3, 0.1), slack);
    EXPECT_DOUBLE_EQ(r.C, 1.0);
    EXPECT_EQ(r.level, 1);
}

TEST(Regularity, LevelIsMinimalMembership) {
    // Oracle: scan l upward until both membership inequalities hold.
    for (double C : {1.0, 1.01, 1.3, 4.0})
        for (double K : {1.5, 0.8, 0.2})
            for (double eps : {0.008, 0.05}) {
                long l = 1;
                while (!(C <= std::exp(eps * l) && K >= std::exp(-eps * l))) ++l;
                EXPECT_EQ(regular_level(C, K, eps), l);
            }
}

TEST(Regularity, PerturbedLevelsFiniteWithHistogram) {
    const auto f = make_perturbed_cat_map(0.03);
    HyperbolicityParams p = cat_params();
    // Larger than the uniform rate so that C(x) is nontrivial.
    p.chi = 0.85;
    p.lambda = 0.425;
    std::mt19937_64 rng(6);
    std::vector<TorusPoint> pts;
    for (int i = 0; i < 500; ++i) pts.push_back(test_support::random_point(rng));
    const auto hist = level_histogram(*f, pts, p);
    long total = 0, max_level = 0;
    for (const auto& [level, count] : hist) {
        EXPECT_GE(level, 1);
        total += count;
        max_level = std::max(max_level, level);
    }
    EXPECT_EQ(total, 500);
    std::cout << "perturbed level histogram (chi=0.85, eps=0.008):";
    for (const auto& [level, count] : hist) std::cout << " " << level << ":" << count;
    std::cout << "\n";
    EXPECT_GT(max_level, 1);
}

TEST(Regularity, NestingInEpsilonProperty) {
    const auto f = make_perturbed_cat_map(0.03);
    std::mt19937_64 rng(7);
    HyperbolicityParams p = cat_params(0.004), q = cat_params(0.008);
    p.chi = q.chi = 0.85;
    p.lambda = q.lambda = 0.425;
    for (int t = 0; t < 200; ++t) {
        const TorusPoint x = test_support::random_point(rng);
        const RegularityData a = regularity_at(*f, x, p), b = regularity_at(*f, x, q);
        EXPECT_LE(b.level, a.level);
    }
}

TEST(Regularity, OrbitLevelGrowthProperty) {
    // If x has level l then f^{+-k}(x) has level at most l + k.
    const auto f = make_perturbed_cat_map(0.03);
    std::mt19937_64 rng(8);
    HyperbolicityParams p = cat_params();
    p.chi = 0.85;
    p.lambda = 0.425;
    for (int t = 0; t < 30; ++t) {
        const TorusPoint x = test_support::random_point(rng);
        const auto orbit = regularity_along_orbit(*f, estimate_splitting(*f, x, 30), p, 30, 10);
        const long l = orbit[10].level;
        for (int k = 1; k <= 10; ++k) {
            EXPECT_LE(orbit[10 + k].level, l + k);
            EXPECT_LE(orbit[10 - k].level, l + k);
        }
    }
}

TEST(Regularity, SlowVariationProperty) {
    const auto cat = make_cat_map();
    const RegularityData a = regularity_at(*cat, TorusPoint(0.1, 0.2), cat_params());
    const RegularityData b = regularity_at(*cat, cat->forward(TorusPoint(0.1, 0.2)), cat_params());
    EXPECT_EQ(a.C, b.C);
    EXPECT_EQ(a.K, b.K);

    const auto f = make_perturbed_cat_map(0.03);
    HyperbolicityParams p = cat_params();
    p.chi = 0.85;
    p.lambda = 0.425;
    std::mt19937_64 rng(9);
    double worst_c = 0, worst_k = 0, worst_raw = 0;
    for (int t = 0; t < 100; ++t) {
        const TorusPoint x = test_support::random_point(rng);
        const auto orbit = regularity_along_orbit(*f, estimate_splitting(*f, x, 30), p, 30, 5);
        for (std::size_t k = 0; k + 1 < orbit.size(); ++k) {
            worst_c = std::max(worst_c, std::abs(std::log(orbit[k + 1].C / orbit[k].C)));
            worst_k = std::max(worst_k, std::abs(std::log(orbit[k + 1].K / orbit[k].K)));
            worst_raw = std::max(worst_raw, std::abs(std::log(orbit[k + 1].C_raw / orbit[k].C_raw)));
        }
    }
    std::cout << "max |log C(fx)/C(x)| = " << worst_c << ", max |log K(fx)/K(x)| = " << worst_k
              << ", untempered " << worst_raw << "\n";
    EXPECT_LE(worst_c, p.epsilon + 1e-12);
    EXPECT_LE(worst_k, p.epsilon + 1e-12);
}

TEST(Regularity, NonStabilisingWindowIsRejected) {
    // Declaring chi above the true exponent makes C grow without bound.
    const auto cat = make_cat_map();
    HyperbolicityParams p = cat_params();
    p.chi = 1.2;
    p.lambda = 0.5;
    EXPECT_THROW((void)regularity_at(*cat, TorusPoint(0.3, 0.3), p), ConvergenceError);
}
