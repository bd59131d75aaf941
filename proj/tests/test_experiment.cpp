#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mwe/experiment.hpp"
#include "oracles.hpp"

using namespace mwe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("mwe_experiment_" + name);
    fs::remove_all(dir);
    return dir;
}

ExperimentSpec small_spec(const fs::path& out)
{
    ExperimentSpec s;
    s.seed = 11;
    s.trials = 2;
    s.subject_counts = {2, 3};
    s.geometry.nx = 6;
    s.geometry.ny = 5;
    s.geometry.labels = 4;
    s.sim.n = 12;
    s.sim.q = 2;
    s.output_dir = out;
    s.models.push_back({"lasso", {0.3, 0.6}, {}, {}, {}, {}});
    s.models.push_back({"mwe", {0.4}, {1.0}, {0.2}, {5.0}, {}});
    return s;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

CellResult make_cell(int trial, int S, const std::string& model, int gp, std::vector<double> auc, double emd, double mse)
{
    CellResult c;
    c.key = {trial, S, model, gp};
    c.ok = true;
    c.auc = std::move(auc);
    c.emd.assign(c.auc.size(), emd);
    c.mse.assign(c.auc.size(), mse);
    return c;
}

} // namespace

TEST(ExperimentSpec, JsonRoundTripAndValidation)
{
    auto s = small_spec("out");
    const auto back = experiment_spec_from_json(to_json(s));
    EXPECT_EQ(to_json(back).dump(), to_json(s).dump());

    auto j = to_json(s);
    j["trials"] = 0;
    EXPECT_THROW(experiment_spec_from_json(j), ParameterError);
    j = to_json(s);
    j["models"][0]["name"] = "elastic_net";
    EXPECT_THROW(experiment_spec_from_json(j), ParameterError);
    j = to_json(s);
    j["models"][1]["mu_ratios"] = nlohmann::json::array();
    EXPECT_THROW(experiment_spec_from_json(j), ParameterError);
    j = to_json(s);
    j["leadfield_mode"] = "mixed";
    EXPECT_THROW(experiment_spec_from_json(j), ParameterError);
    j = to_json(s);
    j["models"] = "lasso";
    EXPECT_THROW(experiment_spec_from_json(j), ParameterError);
}

TEST(ExperimentSpec, GridExpansion)
{
    const ModelSpec m{"mwe", {0.1, 0.2}, {1.0, 2.0, 4.0}, {0.1}, {1.0, 5.0}, {}};
    const auto grid = expand_grid(m);
    ASSERT_EQ(grid.size(), 12u);
    for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_EQ(grid[k].index, static_cast<int>(k));
    EXPECT_EQ(expand_grid({"dirty", {0.1, 0.2}, {}, {}, {}, {0.3, 0.5, 0.7}}).size(), 6u);
    EXPECT_EQ(expand_grid({"lasso", {0.1, 0.2, 0.3}, {}, {}, {}, {}}).size(), 3u);
}

TEST(RunExperiment, OneGridPointGivesOneRowPerSubjectCount)
{
    auto s = small_spec(scratch("counting"));
    s.trials = 1;
    s.subject_counts = {2, 3, 5};
    s.models = {{"lasso", {0.5}, {}, {}, {}, {}}};
    const auto report = run_experiment(s);
    EXPECT_EQ(report.aggregate.size(), 3u);
    EXPECT_EQ(count_lines(slurp(s.output_dir / "aggregate.csv")), 1 + 3);
    // One row per subject for every cell.
    EXPECT_EQ(count_lines(slurp(s.output_dir / "cells.csv")), 1 + 2 + 3 + 5);
    fs::remove_all(s.output_dir);
}

TEST(RunExperiment, EveryCellPresentAndThreadedRerunIsByteIdentical)
{
    auto a = small_spec(scratch("det_a"));
    auto b = small_spec(scratch("det_b"));
    const auto ra = run_experiment(a);
    RunOptions threaded;
    threaded.threads = 4;
    run_experiment(b, threaded);
    // (lasso 2 + mwe 1 grid points) x 2 subject counts x 2 trials
    EXPECT_EQ(ra.cells.size(), 12u);
    int cell_files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(a.output_dir / "cells")) ++cell_files;
    EXPECT_EQ(cell_files, 12);
    for (const char* f : {"aggregate.csv", "cells.csv", "grid.csv", "best_auc.csv", "best_emd.csv", "best_mse.csv"})
        EXPECT_EQ(slurp(a.output_dir / f), slurp(b.output_dir / f)) << f;
    const auto manifest = nlohmann::json::parse(slurp(a.output_dir / "manifest.json"));
    EXPECT_EQ(manifest["cells"]["total"].get<int>(), 12);
    EXPECT_TRUE(manifest["timings_seconds"].contains("total"));
    EXPECT_EQ(manifest["trial_seeds"].size(), 2u);
    fs::remove_all(a.output_dir);
    fs::remove_all(b.output_dir);
}

TEST(RunExperiment, CriticalLambdaRowsUseEmptyEstimateConvention)
{
    auto s = small_spec(scratch("critical"));
    s.models = {{"lasso", {1.0}, {}, {}, {}, {}}};
    const auto report = run_experiment(s);
    const Geometry geometry = make_experiment_geometry(s);
    const int p = geometry.size();
    for (const auto& cell : report.cells) {
        ASSERT_TRUE(cell.ok);
        const auto sim = simulate(trial_config(s, cell.key.trial, cell.key.subject_count), geometry);
        for (int sub = 0; sub < cell.key.subject_count; ++sub) {
            const Vector& x = sim.truth.sources[static_cast<std::size_t>(sub)];
            std::vector<bool> pos(p), neg(p);
            bool any_pos = false, any_neg = false;
            for (int j = 0; j < p; ++j) {
                pos[j] = x[j] > 0;
                neg[j] = x[j] < 0;
                any_pos = any_pos || pos[j];
                any_neg = any_neg || neg[j];
            }
            const Vector zero = Vector::Zero(p);
            double expected;
            if (any_pos && any_neg)
                expected = 0.5 * oracle::pr_auc(zero, pos) + 0.5 * oracle::pr_auc(zero, neg);
            else
                expected = oracle::pr_auc(zero, any_pos ? pos : neg);
            EXPECT_NEAR(cell.auc[static_cast<std::size_t>(sub)], expected, 1e-11);
            // Both estimate halves are empty while the truth is not: worst case on each nonempty half.
            const double worst = geometry.costs.max();
            const double emd_expected = 0.5 * ((any_pos ? worst : 0.0) + (any_neg ? worst : 0.0));
            EXPECT_NEAR(cell.emd[static_cast<std::size_t>(sub)], emd_expected, 1e-9);
        }
    }
    fs::remove_all(s.output_dir);
}

TEST(RunExperiment, SolverFailuresBecomeErrorRows)
{
    auto s = small_spec(scratch("errors"));
    s.trials = 1;
    s.subject_counts = {2};
    s.models = {{"lasso", {0.5}, {}, {}, {}, {}}, {"mwe", {0.5}, {1.0}, {0.2}, {-1.0}, {}}};
    const auto report = run_experiment(s);
    ASSERT_EQ(report.cells.size(), 2u);
    EXPECT_TRUE(report.cells[0].ok);
    EXPECT_FALSE(report.cells[1].ok);
    EXPECT_NE(report.cells[1].message.find("gamma"), std::string::npos);
    const auto cells = slurp(s.output_dir / "cells.csv");
    EXPECT_NE(cells.find(",mwe,0,,nan,nan,nan,error,"), std::string::npos);
    EXPECT_EQ(report.aggregate[1].trials_ok, 0);
    fs::remove_all(s.output_dir);
}

TEST(RunExperiment, ResumeSkipsFinishedCells)
{
    auto s = small_spec(scratch("resume"));
    run_experiment(s);
    const auto first = slurp(s.output_dir / "aggregate.csv");

    // Remove one cell: only that one is recomputed, the result is unchanged.
    const auto victim = fs::directory_iterator(s.output_dir / "cells")->path();
    fs::remove(victim);
    RunOptions opts;
    opts.resume = true;
    run_experiment(s, opts);
    EXPECT_EQ(slurp(s.output_dir / "aggregate.csv"), first);
    auto manifest = nlohmann::json::parse(slurp(s.output_dir / "manifest.json"));
    EXPECT_EQ(manifest["cells"]["resumed"].get<int>(), 11);

    // A finished cell is trusted as-is when resuming: tamper with one and see it flow through.
    std::string text = slurp(victim);
    const auto comma = text.find(",ok,");
    ASSERT_NE(comma, std::string::npos);
    {
        std::ofstream os(victim, std::ios::binary);
        os << text.substr(0, comma) << ",ok,edited" << text.substr(comma + 4);
    }
    run_experiment(s, opts);
    EXPECT_NE(slurp(s.output_dir / "cells.csv").find("edited"), std::string::npos);

    // Without resume everything is recomputed.
    run_experiment(s);
    EXPECT_EQ(slurp(s.output_dir / "cells.csv").find("edited"), std::string::npos);
    fs::remove_all(s.output_dir);
}

TEST(RunExperiment, LoadReportMatchesInMemoryReport)
{
    auto s = small_spec(scratch("load"));
    const auto report = run_experiment(s);
    const auto loaded = load_report(s.output_dir);
    EXPECT_EQ(loaded.models, report.models);
    EXPECT_EQ(loaded.subject_counts, report.subject_counts);
    for (const char* metric : {"auc", "emd", "mse"}) {
        std::ostringstream a, b;
        write_best_csv(a, best_scores(report, metric), metric);
        write_best_csv(b, best_scores(loaded, metric), metric);
        EXPECT_EQ(a.str(), b.str());
    }
    fs::remove_all(s.output_dir);
}

TEST(BestScores, SingleGridPointPassesThrough)
{
    ExperimentReport r;
    r.models = {"lasso"};
    r.subject_counts = {2};
    r.grid = {{"lasso", GridPoint{}}};
    r.cells = {make_cell(0, 2, "lasso", 0, {0.5, 0.7}, 3.0, 1.0), make_cell(1, 2, "lasso", 0, {0.2, 0.4}, 5.0, 2.0)};
    r.aggregate = aggregate_cells(r);
    const auto best = best_scores(r, "auc");
    ASSERT_EQ(best.size(), 1u);
    EXPECT_DOUBLE_EQ(best[0].mean, r.aggregate[0].auc_mean);
    EXPECT_DOUBLE_EQ(best[0].ci_low, r.aggregate[0].auc_lo);
    EXPECT_DOUBLE_EQ(best_scores(r, "emd")[0].mean, 4.0);
}

TEST(BestScores, MaxForAucMinForDistances)
{
    ExperimentReport r;
    r.models = {"mwe"};
    r.subject_counts = {4};
    r.cells = {make_cell(0, 4, "mwe", 0, {0.6}, 2.0, 9.0), make_cell(0, 4, "mwe", 1, {0.9}, 3.0, 8.0)};
    EXPECT_DOUBLE_EQ(best_scores(r, "auc")[0].mean, 0.9);
    EXPECT_DOUBLE_EQ(best_scores(r, "emd")[0].mean, 2.0);
    EXPECT_DOUBLE_EQ(best_scores(r, "mse")[0].mean, 8.0);
}

TEST(BestScores, MatchesExhaustiveScan)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ExperimentReport r;
    r.models = {"lasso", "mwe"};
    r.subject_counts = {2, 4};
    const int trials = 6, grid = 5;
    for (const auto& m : r.models)
        for (int S : r.subject_counts)
            for (int g = 0; g < grid; ++g)
                for (int t = 0; t < trials; ++t) {
                    std::vector<double> auc(static_cast<std::size_t>(S));
                    for (auto& a : auc) a = u(rng);
                    r.cells.push_back(make_cell(t, S, m, g, auc, 10 * u(rng), 100 * u(rng)));
                }
    // One failed cell is ignored by the selection.
    r.cells[3].ok = false;
    r.cells[3].auc.clear();
    for (const std::string metric : {"auc", "emd", "mse"}) {
        const auto best = best_scores(r, metric);
        ASSERT_EQ(best.size(), 4u);
        for (const auto& b : best) {
            double total = 0.0;
            for (int t = 0; t < trials; ++t) {
                double pick = metric == "auc" ? -1e300 : 1e300;
                for (const auto& c : r.cells) {
                    if (!c.ok || c.key.model != b.model || c.key.subject_count != b.subject_count || c.key.trial != t)
                        continue;
                    double v = 0.0;
                    const auto& vals = metric == "auc" ? c.auc : (metric == "emd" ? c.emd : c.mse);
                    for (double x : vals) v += x / static_cast<double>(vals.size());
                    pick = metric == "auc" ? std::max(pick, v) : std::min(pick, v);
                }
                total += pick;
            }
            EXPECT_NEAR(b.mean, total / trials, 1e-12);
            EXPECT_EQ(b.trials, trials);
            EXPECT_LT(b.ci_low, b.mean);
            EXPECT_GT(b.ci_high, b.mean);
        }
    }
}

TEST(BestScores, UnknownMetricAndEmptyReportRejected)
{
    ExperimentReport r;
    r.models = {"lasso"};
    r.subject_counts = {2};
    EXPECT_THROW(best_scores(r, "auc"), ParameterError);
    r.cells = {make_cell(0, 2, "lasso", 0, {0.5}, 1.0, 1.0)};
    EXPECT_THROW(best_scores(r, "f1"), ParameterError);
}

TEST(ConfidenceInterval, MatchesStudentT)
{
    // Four values with mean 2.5 and sd sqrt(5/3); t(0.975, 3) = 3.182446305284263.
    const auto ci = detail::mean_ci({1.0, 2.0, 3.0, 4.0});
    const double half = 3.182446305284263 * std::sqrt(5.0 / 3.0) / 2.0;
    EXPECT_DOUBLE_EQ(ci[0], 2.5);
    EXPECT_NEAR(ci[1], 2.5 - half, 1e-12);
    EXPECT_NEAR(ci[2], 2.5 + half, 1e-12);
    EXPECT_TRUE(std::isnan(detail::mean_ci({1.0})[1]));
}
