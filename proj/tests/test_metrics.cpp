#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mwe/metrics.hpp"
#include "oracles.hpp"

using namespace mwe;

namespace {

const CostMatrix& grid_costs()
{
    static const CostMatrix M = build_geodesic_costs(grid_mesh(6, 5));
    return M;
}

Vector sparse_truth(int p, std::initializer_list<std::pair<int, double>> entries)
{
    Vector x = Vector::Zero(p);
    for (auto [j, v] : entries) x[j] = v;
    return x;
}

std::vector<bool> support(const Vector& x)
{
    std::vector<bool> s(static_cast<std::size_t>(x.size()));
    for (int i = 0; i < x.size(); ++i) s[i] = x[i] != 0.0;
    return s;
}

} // namespace

TEST(PrAuc, MatchesBruteForceWithTies)
{
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> level(0, 4);
    std::bernoulli_distribution pos(0.3);
    for (int t = 0; t < 200; ++t) {
        const int p = 3 + t % 20;
        Vector scores(p);
        std::vector<bool> truth(p);
        bool any = false;
        for (int i = 0; i < p; ++i) {
            scores[i] = level(rng) * 0.5;
            truth[i] = pos(rng);
            any = any || truth[i];
        }
        if (!any) truth[0] = true;
        EXPECT_NEAR(pr_auc(scores, truth), oracle::pr_auc(scores, truth), 1e-14);
    }
}

TEST(SignedAuc, PerfectEstimate)
{
    const Vector x = sparse_truth(30, {{3, 25.0}, {10, -22.0}, {17, 28.0}});
    EXPECT_DOUBLE_EQ(signed_pr_auc(x, x), 1.0);
}

TEST(SignedAuc, ZeroEstimateIsBaseRate)
{
    const Vector x = sparse_truth(30, {{3, 25.0}, {10, -22.0}, {17, 28.0}});
    const double expected = 0.5 * oracle::pr_auc(Vector::Zero(30), support(positive_part(x))) +
                            0.5 * oracle::pr_auc(Vector::Zero(30), support(negative_part(x)));
    EXPECT_NEAR(signed_pr_auc(Vector::Zero(30), x), expected, 1e-15);
    // All scores tie: one threshold at full recall with precision = base rate.
    EXPECT_NEAR(pr_auc(Vector::Zero(30), support(positive_part(x))), 2.0 / 30.0, 1e-15);
}

TEST(SignedAuc, SignFlippedEstimateOfPositiveTruth)
{
    const Vector x = sparse_truth(30, {{3, 25.0}, {17, 28.0}});
    const auto r = signed_pr_auc_detail(-x, x);
    EXPECT_EQ(r.skipped_halves, 1);
    // The positive half sees an all-zero score vector; the negative half is skipped.
    EXPECT_NEAR(r.value, oracle::pr_auc(Vector::Zero(30), support(x)), 1e-15);
    EXPECT_NEAR(r.value, 2.0 / 30.0, 1e-15);
}

TEST(SignedAuc, InvariantUnderMonotoneRescaling)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    const Vector truth = sparse_truth(30, {{1, 21.0}, {8, -24.0}, {20, 29.0}, {25, -20.0}});
    for (int t = 0; t < 20; ++t) {
        Vector est(30);
        for (int j = 0; j < 30; ++j) est[j] = g(rng);
        Vector warped = est;
        for (int j = 0; j < 30; ++j) warped[j] = (est[j] > 0 ? 1 : -1) * (std::exp(std::abs(est[j])) - 1.0) * 3.0;
        EXPECT_DOUBLE_EQ(signed_pr_auc(est, truth), signed_pr_auc(warped, truth));
        const double v = signed_pr_auc(est, truth);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(SignedAuc, AllZeroTruthRejected)
{
    EXPECT_THROW(signed_pr_auc(Vector::Ones(4), Vector::Zero(4)), DomainError);
}

TEST(SignedEmd, IdenticalIsZero)
{
    const Vector x = sparse_truth(30, {{3, 25.0}, {10, -22.0}, {17, 28.0}});
    EXPECT_NEAR(signed_emd(x, x, grid_costs()), 0.0, 1e-12);
}

TEST(SignedEmd, DisplacedSingleSource)
{
    const auto& M = grid_costs();
    for (auto [i, j] : {std::pair{0, 29}, std::pair{4, 7}, std::pair{12, 13}}) {
        const Vector truth = sparse_truth(30, {{i, 25.0}});
        const Vector est = sparse_truth(30, {{j, 3.0}});
        EXPECT_NEAR(signed_emd(est, truth, M), 0.5 * M(i, j), 1e-12);
    }
}

TEST(SignedEmd, OneEmptyPartIsWorstCase)
{
    const auto& M = grid_costs();
    const Vector truth = sparse_truth(30, {{3, 25.0}, {10, -22.0}});
    const Vector est = sparse_truth(30, {{3, 25.0}});
    const auto r = signed_emd_detail(est, truth, M);
    EXPECT_EQ(r.worst_case_halves, 1);
    EXPECT_NEAR(r.value, 0.5 * M.max(), 1e-12);
}

TEST(SignedEmd, MatchesLpOracleOnSparsePairs)
{
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> pick(0, 4);
    std::uniform_real_distribution<double> amp(0.5, 3.0);
    for (int t = 0; t < 50; ++t) {
        const CostMatrix M{oracle::random_metric(5, rng)};
        Vector a = Vector::Zero(5), b = Vector::Zero(5);
        for (int k = 0; k < 2; ++k) {
            a[pick(rng)] += amp(rng);
            b[pick(rng)] += amp(rng);
        }
        const double ref = 0.5 * oracle::kantorovich_lp(a / a.sum(), b / b.sum(), M.values);
        EXPECT_NEAR(signed_emd(a, b, M), ref, 1e-9);
    }
}

TEST(SignedEmd, Symmetric)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    const auto& M = grid_costs();
    for (int t = 0; t < 10; ++t) {
        Vector a(30), b(30);
        for (int j = 0; j < 30; ++j) {
            a[j] = j % 3 ? 0.0 : g(rng);
            b[j] = j % 4 ? 0.0 : g(rng);
        }
        EXPECT_NEAR(signed_emd(a, b, M), signed_emd(b, a, M), 1e-12);
        EXPECT_GE(signed_emd(a, b, M), 0.0);
    }
}

TEST(Mse, Examples)
{
    const Vector x = Vector::LinSpaced(5, -2.0, 2.0);
    EXPECT_EQ(mse(x, x), 0.0);
    EXPECT_NEAR(mse(x + Vector::Constant(5, 1.5), x), 2.25, 1e-15);
    EXPECT_DOUBLE_EQ(mse((Vector(2) << 3.0, 4.0).finished(), Vector::Zero(2)), 12.5);
}

TEST(Evaluate, AveragesAcrossSubjects)
{
    const auto& M = grid_costs();
    const Vector t0 = sparse_truth(30, {{3, 25.0}, {10, -22.0}});
    const Vector t1 = sparse_truth(30, {{5, 21.0}});
    const Vector e1 = sparse_truth(30, {{6, 21.0}});
    const auto r = evaluate({t0, e1}, {t0, t1}, M);
    EXPECT_NEAR(r.auc, 0.5 * (1.0 + signed_pr_auc(e1, t1)), 1e-15);
    EXPECT_NEAR(r.emd, 0.5 * signed_emd(e1, t1, M), 1e-12);
    EXPECT_NEAR(r.mse, 0.5 * mse(e1, t1), 1e-12);
    EXPECT_EQ(r.auc_skipped_halves, 1);
    std::ostringstream os;
    write_metric_header(os);
    write_metric_row(os, {2, "mwe", 1, r.per_subject_auc[1], r.per_subject_emd[1], r.per_subject_mse[1]});
    EXPECT_EQ(os.str().substr(0, 36), "trial,model,subject,auc,emd_cm,mse\n2");
}
