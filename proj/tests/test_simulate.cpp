#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "mwe/io.hpp"
#include "mwe/simulate.hpp"

using namespace mwe;

namespace {

const Geometry& grid_geometry()
{
    static const Geometry g = build_geometry(grid_mesh(20, 10), 8, 5);
    return g;
}

SimConfig config(int S, std::uint64_t seed)
{
    SimConfig c;
    c.S = S;
    c.n = 30;
    c.q = 3;
    c.seed = seed;
    return c;
}

std::vector<double> ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < order.size(); ++k) r[order[k]] = static_cast<double>(k);
    return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST(Leadfields, SharedModeReturnsOneMatrix)
{
    SimConfig c = config(4, 1);
    c.shared_leadfield = true;
    const auto Ls = generate_leadfields(c, grid_geometry());
    ASSERT_EQ(Ls.size(), 4u);
    for (const auto& L : Ls) EXPECT_EQ(*L, *Ls[0]);
}

TEST(Leadfields, UnitColumnsAndIndividualDifferences)
{
    const auto Ls = generate_leadfields(config(3, 2), grid_geometry());
    for (const auto& L : Ls) {
        EXPECT_EQ(L->rows(), 30);
        EXPECT_EQ(L->cols(), 200);
        for (int j = 0; j < 200; ++j) EXPECT_NEAR(L->col(j).norm(), 1.0, 1e-12);
    }
    EXPECT_GT((*Ls[0] - *Ls[1]).cwiseAbs().maxCoeff(), 1e-3);
    // Individual columns stay correlated with each other: same underlying anatomy.
    double mean_cos = 0.0;
    for (int j = 0; j < 200; ++j) mean_cos += Ls[0]->col(j).dot(Ls[1]->col(j)) / 200.0;
    EXPECT_GT(mean_cos, 0.5);
}

TEST(Leadfields, CorrelationDecaysWithDistance)
{
    const auto& g = grid_geometry();
    const auto Ls = generate_leadfields(config(1, 3), g);
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> pick(0, 199);
    std::vector<double> dist, corr;
    for (int t = 0; t < 3000; ++t) {
        const int j = pick(rng), k = pick(rng);
        if (j == k) continue;
        dist.push_back(g.costs(j, k));
        corr.push_back(Ls[0]->col(j).dot(Ls[0]->col(k)));
    }
    EXPECT_LT(pearson(ranks(dist), ranks(corr)), 0.0);
}

TEST(Leadfields, Deterministic)
{
    const auto a = generate_leadfields(config(3, 9), grid_geometry());
    const auto b = generate_leadfields(config(3, 9), grid_geometry());
    for (int s = 0; s < 3; ++s) EXPECT_EQ(*a[s], *b[s]);
}

TEST(Sources, FullOverlapSharesSupports)
{
    SimConfig c = config(5, 10);
    c.overlap_fraction = 1.0;
    const auto truth = generate_sources(c, grid_geometry().labels);
    for (int s = 1; s < 5; ++s) EXPECT_EQ(truth.indices[s], truth.indices[0]);
}

TEST(Sources, HalfOverlapWithSixSubjects)
{
    const auto& labels = grid_geometry().labels;
    int differing = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SimConfig c = config(6, seed);
        c.overlap_fraction = 0.5;
        const auto truth = generate_sources(c, labels);
        for (int s = 1; s < 3; ++s) EXPECT_EQ(truth.indices[s], truth.indices[0]);
        for (int s = 3; s < 6; ++s) {
            differing += truth.indices[s] != truth.indices[0];
            for (std::size_t k = 0; k < truth.indices[s].size(); ++k)
                EXPECT_EQ(labels.labels[truth.indices[s][k]], truth.active_labels[k]);
        }
    }
    EXPECT_GT(differing, 20);
}

TEST(Sources, InvariantsOverManySeeds)
{
    const auto& labels = grid_geometry().labels;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SimConfig c = config(4, seed);
        const auto truth = generate_sources(c, labels);
        ASSERT_EQ(truth.sources.size(), 4u);
        std::set<int> distinct(truth.active_labels.begin(), truth.active_labels.end());
        EXPECT_EQ(distinct.size(), 3u);
        for (int s = 0; s < 4; ++s) {
            const Vector& x = truth.sources[s];
            int nonzeros = 0;
            for (int j = 0; j < x.size(); ++j) {
                if (x[j] == 0.0) continue;
                ++nonzeros;
                EXPECT_GE(std::abs(x[j]), 20.0);
                EXPECT_LE(std::abs(x[j]), 30.0);
            }
            EXPECT_EQ(nonzeros, 3);
            for (std::size_t k = 0; k < 3; ++k) {
                const int v = truth.indices[s][k];
                EXPECT_EQ(labels.labels[v], truth.active_labels[k]);
                EXPECT_EQ(x[v] > 0 ? 1 : -1, truth.label_signs[k]);
            }
        }
        for (int s = 0; s < c.num_shared(); ++s) EXPECT_EQ(truth.indices[s], truth.indices[0]);
    }
}

TEST(Sources, TooManyActiveSourcesRejected)
{
    SimConfig c = config(2, 0);
    c.q = 9;
    EXPECT_THROW(generate_sources(c, grid_geometry().labels), ParameterError);
}

TEST(Noise, SnrInvertsExactly)
{
    std::vector<Vector> B{Vector::LinSpaced(40, -1.0, 3.0), Vector::Constant(40, 0.5), Vector::Zero(40)};
    const auto out = add_noise(B, 4.0, 12);
    double total = 0.0;
    for (const auto& b : B) total += b.norm();
    EXPECT_NEAR(total / (3.0 * out.sigma), 4.0, 1e-14);
}

TEST(Noise, InfiniteSnrIsNoiseless)
{
    std::vector<Vector> B{Vector::LinSpaced(10, -1.0, 3.0)};
    const auto out = add_noise(B, std::numeric_limits<double>::infinity(), 1);
    EXPECT_EQ(out.sigma, 0.0);
    EXPECT_EQ(out.Y[0], B[0]);
    const auto tiny = add_noise(B, 1e12, 1);
    EXPECT_LE((tiny.Y[0] - B[0]).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Noise, EmpiricalStandardDeviation)
{
    std::vector<Vector> B(10, Vector::Constant(2000, 1.0));
    const auto out = add_noise(B, 4.0, 77);
    double ss = 0.0;
    for (int s = 0; s < 10; ++s) ss += (out.Y[s] - B[s]).squaredNorm();
    EXPECT_NEAR(std::sqrt(ss / 20000.0), out.sigma, 0.05 * out.sigma);
}

TEST(Noise, AllZeroSignalsRejected)
{
    EXPECT_THROW(add_noise({Vector::Zero(5)}, 4.0, 0), DomainError);
    EXPECT_THROW(add_noise({Vector::Ones(5)}, 0.0, 0), ParameterError);
}

TEST(Simulate, FullPipelineDeterministicAndSerializable)
{
    SimConfig c = config(3, 21);
    const auto a = simulate(c, grid_geometry());
    const auto b = simulate(c, grid_geometry());
    for (int s = 0; s < 3; ++s) {
        EXPECT_EQ(a.dataset.observation(s), b.dataset.observation(s));
        EXPECT_EQ(a.truth.sources[s], b.truth.sources[s]);
    }
    double snr = 0.0;
    for (int s = 0; s < 3; ++s) snr += (a.dataset.leadfield(s) * a.truth.sources[s]).norm();
    EXPECT_NEAR(snr / (3.0 * a.truth.noise_sigma), c.snr, 1e-12);

    const auto dir = std::filesystem::temp_directory_path() / "mwe_sim_test";
    std::filesystem::remove_all(dir);
    save_simulation(dir, c, a);
    EXPECT_EQ(io::load_matrix(dir / "leadfield_1.bin"), a.dataset.leadfield(1));
    EXPECT_EQ(io::load_matrix(dir / "truth_2.bin").col(0), a.truth.sources[2]);
    std::ifstream js(dir / "simulation.json");
    const auto side = nlohmann::json::parse(js);
    EXPECT_EQ(side["seed"].get<std::uint64_t>(), 21u);
    EXPECT_DOUBLE_EQ(side["noise_sigma"].get<double>(), a.truth.noise_sigma);
    EXPECT_EQ(sim_config_from_json(side["config"]).S, 3);
    std::filesystem::remove_all(dir);
}

TEST(Simulate, ConfigValidation)
{
    SimConfig c = config(2, 0);
    c.n = 200;
    EXPECT_THROW(simulate(c, grid_geometry()), ParameterError);
    c = config(2, 0);
    c.snr = -1.0;
    EXPECT_THROW(simulate(c, grid_geometry()), ParameterError);
}
