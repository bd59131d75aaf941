#pragma once

// Benchmark harness: simulate trials, fit every model over its grid, score,
// persist one CSV per cell and aggregate across trials.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"
#include "mwe/io.hpp"
#include "mwe/metrics.hpp"
#include "mwe/simulate.hpp"
#include "mwe/solvers.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mwe {

inline constexpr const char* kVersion = "0.1.0";

struct GeometrySpec {
    int nx = 20;
    int ny = 10;
    double spacing = 1.0; // cm
    std::filesystem::path mesh; // optional OFF file, overrides the grid
    int labels = 10;
};

struct ModelSpec {
    std::string name; // lasso | group_lasso | dirty | mtw | mwe
    std::vector<double> lambda_fractions;
    std::vector<double> mu_ratios;         // mu * gamma / S as a multiple of the critical lambda
    std::vector<double> epsilon_fractions; // of median(M)
    std::vector<double> gamma;
    std::vector<double> specific_fractions; // dirty only
};

struct GridPoint {
    int index = 0;
    double lambda_fraction = 0.0;
    double mu_ratio = 0.0;
    double epsilon_fraction = 0.0;
    double gamma = 0.0;
    double specific_fraction = 0.0;

    [[nodiscard]] nlohmann::json to_json() const
    {
        return {{"lambda_fraction", lambda_fraction},
                {"mu_ratio", mu_ratio},
                {"epsilon_fraction", epsilon_fraction},
                {"gamma", gamma},
                {"specific_fraction", specific_fraction}};
    }
};

struct SolverSpec {
    double outer_tol = 1e-5;
    int outer_max_iter = 100;
    double cd_tol = 1e-6;
    int cd_max_iter = 2000;
    double sinkhorn_tol = 1e-6;
    int sinkhorn_max_iter = 2000;
    double alpha = 0.01;
    bool warm_start = false;
};

struct ExperimentSpec {
    std::string name = "experiment";
    SimConfig sim;
    GeometrySpec geometry;
    std::vector<ModelSpec> models;
    int trials = 1;
    std::vector<int> subject_counts{2};
    std::string leadfield_mode = "individual";
    std::filesystem::path output_dir = "results";
    std::uint64_t seed = 0;
    SolverSpec solver;

    void validate() const
    {
        if (trials < 1) throw ParameterError("experiment: trials must be >= 1");
        if (subject_counts.empty()) throw ParameterError("experiment: subject_counts is empty");
        for (int S : subject_counts)
            if (S < 1) throw ParameterError("experiment: subject counts must be >= 1");
        if (leadfield_mode != "shared" && leadfield_mode != "individual")
            throw ParameterError("experiment: leadfield_mode must be shared or individual");
        if (models.empty()) throw ParameterError("experiment: no models");
        std::set<std::string> seen;
        for (const auto& m : models) {
            static const std::set<std::string> known{"lasso", "group_lasso", "dirty", "mtw", "mwe"};
            if (!known.count(m.name)) throw ParameterError("experiment: unknown model '" + m.name + "'");
            if (!seen.insert(m.name).second) throw ParameterError("experiment: model '" + m.name + "' listed twice");
            auto need = [&](const std::vector<double>& v, const char* what) {
                if (v.empty()) throw ParameterError("experiment: model '" + m.name + "' has an empty " + what + " grid");
            };
            need(m.lambda_fractions, "lambda");
            for (double f : m.lambda_fractions)
                if (!(f >= 0.0)) throw ParameterError("experiment: lambda fractions must be >= 0");
            if (m.name == "dirty") need(m.specific_fractions, "specific lambda");
            if (m.name == "mtw" || m.name == "mwe") {
                need(m.mu_ratios, "mu");
                need(m.epsilon_fractions, "epsilon");
                need(m.gamma, "gamma");
            }
        }
        if (geometry.mesh.empty() && (geometry.nx < 1 || geometry.ny < 1))
            throw ParameterError("experiment: bad grid geometry");
        if (geometry.labels < 1) throw ParameterError("experiment: labels must be >= 1");
    }
};

inline std::vector<GridPoint> expand_grid(const ModelSpec& m)
{
    const std::vector<double> none{0.0};
    const bool ot = m.name == "mtw" || m.name == "mwe";
    const auto& mus = ot ? m.mu_ratios : none;
    const auto& eps = ot ? m.epsilon_fractions : none;
    const auto& gam = ot ? m.gamma : none;
    const auto& spec = m.name == "dirty" ? m.specific_fractions : none;
    std::vector<GridPoint> out;
    for (double l : m.lambda_fractions)
        for (double mu : mus)
            for (double e : eps)
                for (double g : gam)
                    for (double sf : spec) {
                        GridPoint gp;
                        gp.index = static_cast<int>(out.size());
                        gp.lambda_fraction = l;
                        gp.mu_ratio = mu;
                        gp.epsilon_fraction = e;
                        gp.gamma = g;
                        gp.specific_fraction = sf;
                        out.push_back(gp);
                    }
    return out;
}

inline nlohmann::json to_json(const ExperimentSpec& s)
{
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : s.models) {
        nlohmann::json j{{"name", m.name}, {"lambda_fractions", m.lambda_fractions}};
        if (!m.mu_ratios.empty()) j["mu_ratios"] = m.mu_ratios;
        if (!m.epsilon_fractions.empty()) j["epsilon_fractions"] = m.epsilon_fractions;
        if (!m.gamma.empty()) j["gamma"] = m.gamma;
        if (!m.specific_fractions.empty()) j["specific_fractions"] = m.specific_fractions;
        models.push_back(j);
    }
    nlohmann::json geo{{"labels", s.geometry.labels}};
    if (s.geometry.mesh.empty()) {
        geo["grid"] = {s.geometry.nx, s.geometry.ny};
        geo["spacing"] = s.geometry.spacing;
    } else {
        geo["mesh"] = s.geometry.mesh.generic_string();
    }
    auto sim = to_json(s.sim);
    sim.erase("S");
    sim.erase("seed");
    sim.erase("shared_leadfield");
    return {{"name", s.name},
            {"seed", s.seed},
            {"trials", s.trials},
            {"subject_counts", s.subject_counts},
            {"leadfield_mode", s.leadfield_mode},
            {"output_dir", s.output_dir.generic_string()},
            {"geometry", geo},
            {"sim", sim},
            {"models", models},
            {"solver",
             {{"outer_tol", s.solver.outer_tol},
              {"outer_max_iter", s.solver.outer_max_iter},
              {"cd_tol", s.solver.cd_tol},
              {"cd_max_iter", s.solver.cd_max_iter},
              {"sinkhorn_tol", s.solver.sinkhorn_tol},
              {"sinkhorn_max_iter", s.solver.sinkhorn_max_iter},
              {"alpha", s.solver.alpha},
              {"warm_start", s.solver.warm_start}}}};
}

/// A relative mesh path is resolved against base_dir; output_dir is taken as given.
inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {})
{
    try {
        ExperimentSpec s;
        s.name = j.value("name", s.name);
        s.seed = j.value("seed", s.seed);
        s.trials = j.value("trials", s.trials);
        if (j.contains("subject_counts")) s.subject_counts = j.at("subject_counts").get<std::vector<int>>();
        s.leadfield_mode = j.value("leadfield_mode", s.leadfield_mode);
        if (j.contains("output_dir")) s.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("geometry")) {
            const auto& g = j.at("geometry");
            if (g.contains("grid")) {
                s.geometry.nx = g.at("grid").at(0).get<int>();
                s.geometry.ny = g.at("grid").at(1).get<int>();
            }
            s.geometry.spacing = g.value("spacing", s.geometry.spacing);
            s.geometry.labels = g.value("labels", s.geometry.labels);
            if (g.contains("mesh")) {
                std::filesystem::path mesh = g.at("mesh").get<std::string>();
                s.geometry.mesh = mesh.is_relative() && !base_dir.empty() ? base_dir / mesh : mesh;
            }
        }
        if (j.contains("sim")) s.sim = sim_config_from_json(j.at("sim"));
        for (const auto& mj : j.at("models")) {
            ModelSpec m;
            m.name = mj.at("name").get<std::string>();
            auto list = [&](const char* key, std::vector<double>& dst) {
                if (mj.contains(key)) dst = mj.at(key).get<std::vector<double>>();
            };
            list("lambda_fractions", m.lambda_fractions);
            list("mu_ratios", m.mu_ratios);
            list("epsilon_fractions", m.epsilon_fractions);
            list("gamma", m.gamma);
            list("specific_fractions", m.specific_fractions);
            s.models.push_back(std::move(m));
        }
        if (j.contains("solver")) {
            const auto& o = j.at("solver");
            s.solver.outer_tol = o.value("outer_tol", s.solver.outer_tol);
            s.solver.outer_max_iter = o.value("outer_max_iter", s.solver.outer_max_iter);
            s.solver.cd_tol = o.value("cd_tol", s.solver.cd_tol);
            s.solver.cd_max_iter = o.value("cd_max_iter", s.solver.cd_max_iter);
            s.solver.sinkhorn_tol = o.value("sinkhorn_tol", s.solver.sinkhorn_tol);
            s.solver.sinkhorn_max_iter = o.value("sinkhorn_max_iter", s.solver.sinkhorn_max_iter);
            s.solver.alpha = o.value("alpha", s.solver.alpha);
            s.solver.warm_start = o.value("warm_start", s.solver.warm_start);
        }
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("experiment spec: ") + e.what());
    }
}

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw IoError("cannot open experiment spec " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError("experiment spec " + path.string() + ": " + e.what());
    }
    return experiment_spec_from_json(j, path.parent_path());
}

inline Geometry make_experiment_geometry(const ExperimentSpec& spec)
{
    Mesh mesh = spec.geometry.mesh.empty() ? grid_mesh(spec.geometry.nx, spec.geometry.ny, spec.geometry.spacing)
                                           : io::load_off(spec.geometry.mesh);
    return build_geometry(std::move(mesh), spec.geometry.labels, derive_seed(spec.seed, 7));
}

/// Simulation settings of one (trial, subject count) pair. The trial seed
/// does not depend on S, so smaller panels reuse the first subjects' leadfields.
inline SimConfig trial_config(const ExperimentSpec& spec, int trial, int S)
{
    SimConfig c = spec.sim;
    c.S = S;
    c.shared_leadfield = spec.leadfield_mode == "shared";
    c.seed = derive_seed(spec.seed, 1000 + static_cast<std::uint64_t>(trial));
    return c;
}

/// Critical lambda of the concomitant objective: gradient of the data fit at
/// x = 0 with the optimal sigma there.
inline double concomitant_lambda_max(const MultiSubjectDataset& data, double sigma0)
{
    const double n = data.num_sensors();
    double top = 0.0;
    for (int s = 0; s < data.num_subjects(); ++s) {
        const double sigma = std::max(data.observation(s).norm() / std::sqrt(n), sigma0);
        top = std::max(top, lasso_lambda_max(data.observation(s), data.leadfield(s)) / sigma);
    }
    return top;
}

struct FitOutcome {
    Matrix estimates; // p x S
    std::string note;
};

inline FitOutcome fit_model(const ModelSpec& model, const GridPoint& gp, const MultiSubjectDataset& data,
                            const CostMatrix& costs, double median_cost, const SolverSpec& solver)
{
    CDOptions cd;
    cd.tol = solver.cd_tol;
    cd.max_sweeps = solver.cd_max_iter;
    const int S = data.num_subjects();
    FitOutcome out;
    double lasso_top = 0.0;
    for (int s = 0; s < S; ++s) lasso_top = std::max(lasso_top, lasso_lambda_max(data.observation(s), data.leadfield(s)));

    if (model.name == "lasso") {
        out.estimates = Matrix::Zero(data.num_sources(), S);
        for (int s = 0; s < S; ++s) {
            const double lam = gp.lambda_fraction * lasso_lambda_max(data.observation(s), data.leadfield(s));
            out.estimates.col(s) = solve_lasso(data.observation(s), data.leadfield(s), lam, cd);
        }
    } else if (model.name == "group_lasso") {
        out.estimates = solve_group_lasso(data, gp.lambda_fraction * group_lambda_max(data), cd);
    } else if (model.name == "dirty") {
        out.estimates =
            solve_dirty(data, gp.lambda_fraction * group_lambda_max(data), gp.specific_fraction * lasso_top, cd).sum();
    } else {
        MWEConfig cfg;
        cfg.epsilon = gp.epsilon_fraction * median_cost;
        cfg.gamma = gp.gamma;
        cfg.alpha = solver.alpha;
        cfg.outer_tol = solver.outer_tol;
        cfg.outer_max_iter = solver.outer_max_iter;
        cfg.cd_tol = solver.cd_tol;
        cfg.cd_max_iter = solver.cd_max_iter;
        cfg.sinkhorn_tol = solver.sinkhorn_tol;
        cfg.sinkhorn_max_iter = solver.sinkhorn_max_iter;
        cfg.warm_start = solver.warm_start;
        if (!(gp.gamma > 0.0)) throw ParameterError("grid point: gamma must be > 0");
        const double critical =
            model.name == "mtw" ? lasso_top : concomitant_lambda_max(data, default_sigma0(data, cfg.alpha));
        cfg.lambda = gp.lambda_fraction * critical;
        // mu * gamma / S is the charge per unit of mass the barycenter does not
        // cover; the ratio expresses it in units of the critical lambda.
        cfg.mu = gp.mu_ratio * critical * S / gp.gamma;
        const MWESolution sol = model.name == "mtw" ? solve_mtw(data, costs, cfg) : solve_mwe(data, costs, cfg);
        out.estimates = sol.estimates();
        if (!sol.converged) out.note = "outer loop stopped at max_iter";
        if (sol.sinkhorn_warnings > 0) {
            if (!out.note.empty()) out.note += "; ";
            out.note += std::to_string(sol.sinkhorn_warnings) + " barycenter solves hit max_iter";
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cells and reports

struct CellKey {
    int trial = 0;
    int subject_count = 0;
    std::string model;
    int grid_point = 0;
};

struct CellResult {
    CellKey key;
    bool ok = false;
    std::string message;
    std::vector<double> auc, emd, mse; // per subject, empty on error

    [[nodiscard]] double mean(const std::string& metric) const
    {
        const auto& v = metric == "auc" ? auc : (metric == "emd" ? emd : mse);
        double acc = 0.0;
        for (double x : v) acc += x;
        return v.empty() ? std::nan("") : acc / static_cast<double>(v.size());
    }
};

struct GridInfo {
    std::string model;
    GridPoint point;
};

struct AggregateRow {
    int subject_count = 0;
    std::string model;
    int grid_point = 0;
    int trials_ok = 0;
    double auc_mean = 0, auc_lo = 0, auc_hi = 0;
    double emd_mean = 0, emd_lo = 0, emd_hi = 0;
    double mse_mean = 0, mse_lo = 0, mse_hi = 0;
};

struct ExperimentReport {
    std::vector<std::string> models;   // spec order
    std::vector<int> subject_counts;   // spec order
    std::vector<GridInfo> grid;
    std::vector<CellResult> cells;     // (subject_count, model, grid_point, trial) order
    std::vector<AggregateRow> aggregate;
};

namespace detail {

inline std::string format_double(double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
}

inline std::string sanitize(std::string s)
{
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r' || c == '"') c = c == ',' ? ';' : ' ';
    return s;
}

inline std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

/// Mean and two-sided 95% Student-t interval; the bounds are NaN with fewer than two values.
inline std::array<double, 3> mean_ci(const std::vector<double>& v)
{
    const double nan = std::nan("");
    if (v.empty()) return {nan, nan, nan};
    const double n = static_cast<double>(v.size());
    double m = 0.0;
    for (double x : v) m += x;
    m /= n;
    if (v.size() < 2) return {m, nan, nan};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / (n - 1.0));
    boost::math::students_t dist(n - 1.0);
    const double half = boost::math::quantile(boost::math::complement(dist, 0.025)) * sd / std::sqrt(n);
    return {m, m - half, m + half};
}

} // namespace detail

inline void write_cell_header(std::ostream& os)
{
    os << "trial,subject_count,model,grid_point,subject,auc,emd_cm,mse,status,message\n";
}

inline std::string cell_rows(const CellResult& c)
{
    std::ostringstream os;
    const auto prefix = std::to_string(c.key.trial) + ',' + std::to_string(c.key.subject_count) + ',' + c.key.model +
                        ',' + std::to_string(c.key.grid_point) + ',';
    if (!c.ok) {
        os << prefix << ",nan,nan,nan,error," << detail::sanitize(c.message) << '\n';
        return os.str();
    }
    for (std::size_t s = 0; s < c.auc.size(); ++s)
        os << prefix << s << ',' << detail::format_double(c.auc[s]) << ',' << detail::format_double(c.emd[s]) << ','
           << detail::format_double(c.mse[s]) << ",ok," << detail::sanitize(c.message) << '\n';
    return os.str();
}

/// Parses cell rows (without header) back into results, merging per-subject rows.
inline std::vector<CellResult> parse_cell_rows(std::istream& is)
{
    std::vector<CellResult> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.rfind("trial,", 0) == 0) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != 10) throw IoError("malformed cell row: " + line);
        CellKey key{std::stoi(f[0]), std::stoi(f[1]), f[2], std::stoi(f[3])};
        const bool same = !out.empty() && out.back().key.trial == key.trial &&
                          out.back().key.subject_count == key.subject_count && out.back().key.model == key.model &&
                          out.back().key.grid_point == key.grid_point;
        if (!same) {
            CellResult c;
            c.key = key;
            c.ok = f[8] == "ok";
            c.message = f[9];
            out.push_back(std::move(c));
        }
        if (f[8] == "ok") {
            out.back().auc.push_back(std::stod(f[5]));
            out.back().emd.push_back(std::stod(f[6]));
            out.back().mse.push_back(std::stod(f[7]));
        }
    }
    return out;
}

inline std::vector<AggregateRow> aggregate_cells(const ExperimentReport& r)
{
    std::vector<AggregateRow> rows;
    for (int S : r.subject_counts)
        for (const auto& g : r.grid) {
            std::vector<double> auc, emd, mse;
            for (const auto& c : r.cells)
                if (c.ok && c.key.subject_count == S && c.key.model == g.model && c.key.grid_point == g.point.index) {
                    auc.push_back(c.mean("auc"));
                    emd.push_back(c.mean("emd"));
                    mse.push_back(c.mean("mse"));
                }
            AggregateRow a;
            a.subject_count = S;
            a.model = g.model;
            a.grid_point = g.point.index;
            a.trials_ok = static_cast<int>(auc.size());
            const auto e = detail::mean_ci(emd);
            const auto m = detail::mean_ci(mse);
            const auto au = detail::mean_ci(auc);
            a.auc_mean = au[0], a.auc_lo = au[1], a.auc_hi = au[2];
            a.emd_mean = e[0], a.emd_lo = e[1], a.emd_hi = e[2];
            a.mse_mean = m[0], a.mse_lo = m[1], a.mse_hi = m[2];
            rows.push_back(a);
        }
    return rows;
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRow>& rows)
{
    using detail::format_double;
    os << "subject_count,model,grid_point,trials_ok,auc_mean,auc_ci_low,auc_ci_high,emd_mean,emd_ci_low,emd_ci_high,"
          "mse_mean,mse_ci_low,mse_ci_high\n";
    for (const auto& a : rows)
        os << a.subject_count << ',' << a.model << ',' << a.grid_point << ',' << a.trials_ok << ','
           << format_double(a.auc_mean) << ',' << format_double(a.auc_lo) << ',' << format_double(a.auc_hi) << ','
           << format_double(a.emd_mean) << ',' << format_double(a.emd_lo) << ',' << format_double(a.emd_hi) << ','
           << format_double(a.mse_mean) << ',' << format_double(a.mse_lo) << ',' << format_double(a.mse_hi) << '\n';
}

inline void write_grid_csv(std::ostream& os, const std::vector<GridInfo>& grid)
{
    using detail::format_double;
    os << "model,grid_point,lambda_fraction,mu_ratio,epsilon_fraction,gamma,specific_fraction\n";
    for (const auto& g : grid)
        os << g.model << ',' << g.point.index << ',' << format_double(g.point.lambda_fraction) << ','
           << format_double(g.point.mu_ratio) << ',' << format_double(g.point.epsilon_fraction) << ','
           << format_double(g.point.gamma) << ',' << format_double(g.point.specific_fraction) << '\n';
}

struct BestScore {
    std::string model;
    int subject_count = 0;
    int trials = 0;
    double mean = 0.0, ci_low = 0.0, ci_high = 0.0;
};

/// Per (model, subject count): in every trial take the best grid point (max
/// AUC, min EMD or MSE), then average those over trials with a 95% interval.
inline std::vector<BestScore> best_scores(const ExperimentReport& report, const std::string& metric)
{
    if (metric != "auc" && metric != "emd" && metric != "mse")
        throw ParameterError("best_scores: unknown metric '" + metric + "' (expected auc, emd or mse)");
    if (report.cells.empty()) throw ParameterError("best_scores: report is empty");
    const bool maximize = metric == "auc";
    std::vector<BestScore> out;
    for (const auto& model : report.models)
        for (int S : report.subject_counts) {
            std::map<int, double> best;
            for (const auto& c : report.cells) {
                if (!c.ok || c.key.model != model || c.key.subject_count != S) continue;
                const double v = c.mean(metric);
                auto it = best.find(c.key.trial);
                if (it == best.end())
                    best.emplace(c.key.trial, v);
                else if (maximize ? v > it->second : v < it->second)
                    it->second = v;
            }
            std::vector<double> vals;
            for (const auto& [t, v] : best) vals.push_back(v);
            const auto ci = detail::mean_ci(vals);
            out.push_back({model, S, static_cast<int>(vals.size()), ci[0], ci[1], ci[2]});
        }
    return out;
}

inline void write_best_csv(std::ostream& os, const std::vector<BestScore>& rows, const std::string& metric)
{
    using detail::format_double;
    os << "model,subject_count,trials," << metric << "_mean," << metric << "_ci_low," << metric << "_ci_high\n";
    for (const auto& b : rows)
        os << b.model << ',' << b.subject_count << ',' << b.trials << ',' << format_double(b.mean) << ','
           << format_double(b.ci_low) << ',' << format_double(b.ci_high) << '\n';
}

inline const BestScore& find_best(const std::vector<BestScore>& rows, const std::string& model, int S)
{
    for (const auto& b : rows)
        if (b.model == model && b.subject_count == S) return b;
    throw ParameterError("no best score for model '" + model + "' at S=" + std::to_string(S));
}

struct RunOptions {
    bool resume = false;
    int threads = 1;
    bool quiet = true;
};

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text)
{
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write " + tmp);
        os << text;
        if (!os) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace detail

/// Content hash of everything a cell's result depends on.
inline std::string cell_hash(const ExperimentSpec& spec, const CellKey& key, const GridPoint& gp)
{
    auto sim = to_json(trial_config(spec, key.trial, key.subject_count));
    nlohmann::json j{{"format", 1},
                     {"geometry", to_json(spec)["geometry"]},
                     {"geometry_seed", derive_seed(spec.seed, 7)},
                     {"sim", sim},
                     {"trial", key.trial},
                     {"model", key.model},
                     {"grid", gp.to_json()},
                     {"solver", to_json(spec)["solver"]}};
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(j.dump())));
    return buf;
}

inline ExperimentReport run_experiment(const ExperimentSpec& spec, const RunOptions& opts = {})
{
    spec.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const auto& out_dir = spec.output_dir;
    std::filesystem::create_directories(out_dir / "cells");

    const Geometry geometry = make_experiment_geometry(spec);
    const double median_cost = geometry.costs.median_offdiagonal();

    ExperimentReport report;
    report.subject_counts = spec.subject_counts;
    std::map<std::string, std::vector<GridPoint>> grids;
    for (const auto& m : spec.models) {
        report.models.push_back(m.name);
        grids[m.name] = expand_grid(m);
        for (const auto& gp : grids[m.name]) report.grid.push_back({m.name, gp});
    }

    // Datasets for every (trial, S) pair; cheap next to the fits.
    std::map<std::pair<int, int>, SimulatedData> data;
    for (int S : spec.subject_counts)
        for (int t = 0; t < spec.trials; ++t) data.emplace(std::make_pair(t, S), simulate(trial_config(spec, t, S), geometry));

    struct Job {
        CellKey key;
        const ModelSpec* model;
        GridPoint gp;
        std::string hash;
    };
    std::vector<Job> jobs;
    for (int S : spec.subject_counts)
        for (const auto& m : spec.models)
            for (const auto& gp : grids[m.name])
                for (int t = 0; t < spec.trials; ++t) {
                    CellKey key{t, S, m.name, gp.index};
                    jobs.push_back({key, &m, gp, cell_hash(spec, key, gp)});
                }

    std::vector<std::string> texts(jobs.size());
    std::vector<double> seconds(jobs.size(), 0.0);
    std::vector<char> resumed(jobs.size(), 0);
    std::vector<std::string> io_errors(jobs.size());

#ifdef _OPENMP
    const int threads = std::max(1, opts.threads);
#pragma omp parallel for schedule(dynamic) num_threads(threads)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(jobs.size()); ++i) {
        const auto& job = jobs[static_cast<std::size_t>(i)];
        const auto path = out_dir / "cells" / (job.hash + ".csv");
        try {
            if (opts.resume && std::filesystem::exists(path)) {
                texts[i] = detail::read_text(path);
                resumed[i] = 1;
                continue;
            }
            const auto t0 = std::chrono::steady_clock::now();
            const auto& sim = data.at({job.key.trial, job.key.subject_count});
            CellResult cell;
            cell.key = job.key;
            try {
                const auto fit = fit_model(*job.model, job.gp, sim.dataset, geometry.costs, median_cost, spec.solver);
                std::vector<Vector> est;
                for (int s = 0; s < fit.estimates.cols(); ++s) est.emplace_back(fit.estimates.col(s));
                const auto m = evaluate(est, sim.truth.sources, geometry.costs);
                cell.ok = true;
                cell.message = fit.note;
                cell.auc = m.per_subject_auc;
                cell.emd = m.per_subject_emd;
                cell.mse = m.per_subject_mse;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.message = e.what();
            }
            texts[i] = cell_rows(cell);
            detail::write_text_atomic(path, texts[i]);
            seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } catch (const std::exception& e) {
            io_errors[i] = e.what();
        }
    }
    for (const auto& e : io_errors)
        if (!e.empty()) throw IoError(e);

    // Cells always pass through their text form so fresh and resumed runs aggregate identical values.
    std::string all;
    for (const auto& t : texts) all += t;
    {
        std::istringstream is(all);
        report.cells = parse_cell_rows(is);
    }
    if (report.cells.size() != jobs.size()) throw IoError("cell files do not match the experiment grid");
    report.aggregate = aggregate_cells(report);

    std::ostringstream cells_csv, agg_csv, grid_csv;
    write_cell_header(cells_csv);
    cells_csv << all;
    write_aggregate_csv(agg_csv, report.aggregate);
    write_grid_csv(grid_csv, report.grid);
    detail::write_text_atomic(out_dir / "cells.csv", cells_csv.str());
    detail::write_text_atomic(out_dir / "aggregate.csv", agg_csv.str());
    detail::write_text_atomic(out_dir / "grid.csv", grid_csv.str());
    for (const char* metric : {"auc", "emd", "mse"}) {
        std::ostringstream os;
        write_best_csv(os, best_scores(report, metric), metric);
        detail::write_text_atomic(out_dir / (std::string("best_") + metric + ".csv"), os.str());
    }

    nlohmann::json manifest;
    manifest["spec"] = to_json(spec);
    manifest["version"] = kVersion;
    manifest["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION);
    manifest["compiler"] = __VERSION__;
    manifest["geometry_seed"] = derive_seed(spec.seed, 7);
    manifest["median_cost_cm"] = median_cost;
    nlohmann::json seeds = nlohmann::json::array();
    for (int t = 0; t < spec.trials; ++t) seeds.push_back(trial_config(spec, t, 1).seed);
    manifest["trial_seeds"] = seeds;
    std::map<std::string, double> per_model;
    int n_resumed = 0, n_errors = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        per_model[jobs[i].key.model] += seconds[i];
        n_resumed += resumed[i];
    }
    for (const auto& c : report.cells) n_errors += !c.ok;
    manifest["cells"] = {{"total", jobs.size()}, {"resumed", n_resumed}, {"errors", n_errors}};
    manifest["timings_seconds"] = per_model;
    manifest["timings_seconds"]["total"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    manifest["leadfield_model"] = spec.leadfield_mode == "shared" ? "synthetic smooth field (shared)"
                                                                 : "synthetic smooth field with per-subject rotations";
    detail::write_text_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
    return report;
}

/// Rebuilds a report from the CSVs written by run_experiment.
inline ExperimentReport load_report(const std::filesystem::path& dir)
{
    ExperimentReport r;
    {
        std::istringstream is(detail::read_text(dir / "grid.csv"));
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto f = detail::split_csv(line);
            if (f.size() != 7) throw IoError("malformed grid row: " + line);
            GridInfo g;
            g.model = f[0];
            g.point.index = std::stoi(f[1]);
            g.point.lambda_fraction = std::stod(f[2]);
            g.point.mu_ratio = std::stod(f[3]);
            g.point.epsilon_fraction = std::stod(f[4]);
            g.point.gamma = std::stod(f[5]);
            g.point.specific_fraction = std::stod(f[6]);
            if (std::find(r.models.begin(), r.models.end(), g.model) == r.models.end()) r.models.push_back(g.model);
            r.grid.push_back(g);
        }
    }
    {
        std::istringstream is(detail::read_text(dir / "cells.csv"));
        r.cells = parse_cell_rows(is);
    }
    for (const auto& c : r.cells)
        if (std::find(r.subject_counts.begin(), r.subject_counts.end(), c.key.subject_count) == r.subject_counts.end())
            r.subject_counts.push_back(c.key.subject_count);
    r.aggregate = aggregate_cells(r);
    return r;
}

} // namespace mwe
