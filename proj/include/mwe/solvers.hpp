#pragma once

// Sparse regression solvers: independent Lasso, Group Lasso, Dirty models,
// and the multi-task Wasserstein estimators (MTW with fixed noise, MWE with
// per-subject noise levels).
//
// Data fit everywhere is (1/2n) ||Y - L x||^2.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"
#include "mwe/uot.hpp"

namespace mwe {

struct MultiSubjectDataset {
    // Subjects may share one leadfield instance.
    std::vector<std::shared_ptr<const Matrix>> leadfields;
    std::vector<Vector> observations;

    [[nodiscard]] int num_subjects() const { return static_cast<int>(observations.size()); }
    [[nodiscard]] int num_sensors() const { return leadfields.empty() ? 0 : static_cast<int>(leadfields[0]->rows()); }
    [[nodiscard]] int num_sources() const { return leadfields.empty() ? 0 : static_cast<int>(leadfields[0]->cols()); }
    [[nodiscard]] const Matrix& leadfield(int s) const { return *leadfields[static_cast<std::size_t>(s)]; }
    [[nodiscard]] const Vector& observation(int s) const { return observations[static_cast<std::size_t>(s)]; }

    void validate() const
    {
        if (observations.empty()) throw ParameterError("dataset has no subjects");
        if (leadfields.size() != observations.size())
            throw ParameterError("dataset: leadfield count differs from observation count");
        const auto n = leadfields[0]->rows();
        const auto p = leadfields[0]->cols();
        for (std::size_t s = 0; s < observations.size(); ++s) {
            if (!leadfields[s]) throw ParameterError("dataset: missing leadfield");
            if (leadfields[s]->rows() != n || leadfields[s]->cols() != p)
                throw ParameterError("dataset: leadfields are not aligned (subject " + std::to_string(s) + ")");
            if (observations[s].size() != n)
                throw ParameterError("dataset: observation length mismatch (subject " + std::to_string(s) + ")");
        }
    }
};

struct CDOptions {
    double tol = 1e-6;    // max_j h_j |dx_j| over a sweep, h_j = ||L_j||^2 / n
    int max_sweeps = 2000;
};

inline double soft_threshold(double x, double t) { return x > t ? x - t : (x < -t ? x + t : 0.0); }

namespace detail {

inline Vector column_curvatures(const Matrix& L)
{
    return L.colwise().squaredNorm().transpose() / static_cast<double>(L.rows());
}

inline void require_lambda(double lambda, const char* who)
{
    if (!(lambda >= 0.0) || std::isnan(lambda)) throw ParameterError(std::string(who) + ": lambda must be >= 0");
}

} // namespace detail

/// Smallest lambda for which the Lasso solution is zero: ||L^T Y||_inf / n.
inline double lasso_lambda_max(const Vector& Y, const Matrix& L)
{
    // Same per-column products as the coordinate updates, so lambda_max gives exactly zero.
    const double n = static_cast<double>(L.rows());
    double top = 0.0;
    for (Eigen::Index j = 0; j < L.cols(); ++j) top = std::max(top, std::abs(L.col(j).dot(Y) / n));
    return top;
}

/// Cyclic coordinate descent for (1/2n)||Y - Lx||^2 + lambda ||x||_1.
inline Vector solve_lasso(const Vector& Y, const Matrix& L, double lambda, const CDOptions& opts = {},
                          std::optional<Vector> x_init = std::nullopt)
{
    detail::require_lambda(lambda, "solve_lasso");
    if (Y.size() != L.rows()) throw ParameterError("solve_lasso: Y length does not match L rows");
    const double n = static_cast<double>(L.rows());
    const Vector h = detail::column_curvatures(L);
    Vector x = x_init.value_or(Vector::Zero(L.cols()));
    Vector r = Y - L * x;
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        double worst = 0.0;
        for (Eigen::Index j = 0; j < L.cols(); ++j) {
            if (h[j] == 0.0) {
                x[j] = 0.0;
                continue;
            }
            const double old = x[j];
            const double b = L.col(j).dot(r) / n + h[j] * old;
            const double next = soft_threshold(b, lambda) / h[j];
            if (next != old) {
                r.noalias() -= (next - old) * L.col(j);
                x[j] = next;
                worst = std::max(worst, h[j] * std::abs(next - old));
            }
        }
        if (worst <= opts.tol) break;
    }
    return x;
}

inline double group_lambda_max(const MultiSubjectDataset& data)
{
    const int S = data.num_subjects();
    const double n = data.num_sensors();
    Vector g(S);
    double top = 0.0;
    for (int j = 0; j < data.num_sources(); ++j) {
        for (int s = 0; s < S; ++s) g[s] = data.leadfield(s).col(j).dot(data.observation(s)) / n;
        top = std::max(top, g.norm());
    }
    return top;
}

namespace detail {

/// argmin_z sum_s h_s/2 (z_s - g_s/h_s)^2 + lambda ||z||_2, with g_s the
/// partial correlations. Exact: ||z|| solves sum_s g_s^2 / (h_s t + lambda)^2 = 1.
inline void group_prox(const Vector& g, const Vector& h, double lambda, Eigen::Ref<Vector> z)
{
    const double gnorm = g.norm();
    if (gnorm <= lambda) {
        z.setZero();
        return;
    }
    if (lambda == 0.0) {
        for (Eigen::Index s = 0; s < g.size(); ++s) z[s] = h[s] > 0.0 ? g[s] / h[s] : 0.0;
        return;
    }
    double hmin = std::numeric_limits<double>::infinity(), hmax = 0.0;
    for (Eigen::Index s = 0; s < h.size(); ++s)
        if (g[s] != 0.0) {
            hmin = std::min(hmin, h[s]);
            hmax = std::max(hmax, h[s]);
        }
    double t;
    if (hmax - hmin <= 1e-15 * hmax) {
        t = (gnorm - lambda) / hmax;
    } else {
        auto phi = [&](double tt) {
            double acc = 0.0, dacc = 0.0;
            for (Eigen::Index s = 0; s < g.size(); ++s) {
                if (g[s] == 0.0) continue;
                const double den = h[s] * tt + lambda;
                acc += g[s] * g[s] / (den * den);
                dacc += -2.0 * g[s] * g[s] * h[s] / (den * den * den);
            }
            return std::pair{acc - 1.0, dacc};
        };
        double lo = (gnorm - lambda) / hmax, hi = (gnorm - lambda) / hmin;
        t = 0.5 * (lo + hi);
        for (int it = 0; it < 100; ++it) {
            const auto [f, df] = phi(t);
            if (f > 0.0)
                lo = t;
            else
                hi = t;
            double next = t - f / df;
            if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
            if (std::abs(next - t) <= 1e-15 * std::max(1.0, t)) {
                t = next;
                break;
            }
            t = next;
        }
    }
    for (Eigen::Index s = 0; s < g.size(); ++s) z[s] = g[s] * t / (h[s] * t + lambda);
}

} // namespace detail

/// Block coordinate descent for sum_s (1/2n)||Y_s - L_s x_s||^2 + lambda ||X||_21.
/// Returns X with one column per subject.
inline Matrix solve_group_lasso(const MultiSubjectDataset& data, double lambda, const CDOptions& opts = {})
{
    data.validate();
    detail::require_lambda(lambda, "solve_group_lasso");
    const int S = data.num_subjects();
    const int p = data.num_sources();
    const double n = data.num_sensors();
    Matrix X = Matrix::Zero(p, S);
    Matrix H(p, S);
    std::vector<Vector> r(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        H.col(s) = detail::column_curvatures(data.leadfield(s));
        r[static_cast<std::size_t>(s)] = data.observation(s);
    }
    Vector g(S), z(S), h(S);
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        double worst = 0.0;
        for (int j = 0; j < p; ++j) {
            for (int s = 0; s < S; ++s) {
                h[s] = H(j, s);
                g[s] = data.leadfield(s).col(j).dot(r[static_cast<std::size_t>(s)]) / n + h[s] * X(j, s);
            }
            detail::group_prox(g, h, lambda, z);
            for (int s = 0; s < S; ++s) {
                const double d = z[s] - X(j, s);
                if (d == 0.0) continue;
                r[static_cast<std::size_t>(s)].noalias() -= d * data.leadfield(s).col(j);
                X(j, s) = z[s];
                worst = std::max(worst, h[s] * std::abs(d));
            }
        }
        if (worst <= opts.tol) break;
    }
    return X;
}

struct DirtySolution {
    Matrix common;   // l21-penalized part shared across subjects
    Matrix specific; // l1-penalized subject-specific part
    [[nodiscard]] Matrix sum() const { return common + specific; }
};

/// Dirty model: X = C + D, penalty lambda_shared ||C||_21 + lambda_specific ||D||_1.
inline DirtySolution solve_dirty(const MultiSubjectDataset& data, double lambda_shared, double lambda_specific,
                                 const CDOptions& opts = {})
{
    data.validate();
    detail::require_lambda(lambda_shared, "solve_dirty");
    detail::require_lambda(lambda_specific, "solve_dirty");
    const int S = data.num_subjects();
    const int p = data.num_sources();
    const double n = data.num_sensors();
    DirtySolution out{Matrix::Zero(p, S), Matrix::Zero(p, S)};
    Matrix H(p, S);
    std::vector<Vector> r(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        H.col(s) = detail::column_curvatures(data.leadfield(s));
        r[static_cast<std::size_t>(s)] = data.observation(s);
    }
    const bool shared_off = std::isinf(lambda_shared);
    const bool specific_off = std::isinf(lambda_specific);
    Vector g(S), z(S), h(S);
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        double worst = 0.0;
        for (int j = 0; j < p; ++j) {
            if (!shared_off) {
                for (int s = 0; s < S; ++s) {
                    h[s] = H(j, s);
                    g[s] = data.leadfield(s).col(j).dot(r[static_cast<std::size_t>(s)]) / n + h[s] * out.common(j, s);
                }
                detail::group_prox(g, h, lambda_shared, z);
                for (int s = 0; s < S; ++s) {
                    const double d = z[s] - out.common(j, s);
                    if (d == 0.0) continue;
                    r[static_cast<std::size_t>(s)].noalias() -= d * data.leadfield(s).col(j);
                    out.common(j, s) = z[s];
                    worst = std::max(worst, H(j, s) * std::abs(d));
                }
            }
            if (!specific_off) {
                for (int s = 0; s < S; ++s) {
                    const double hs = H(j, s);
                    if (hs == 0.0) continue;
                    const auto& col = data.leadfield(s).col(j);
                    const double b = col.dot(r[static_cast<std::size_t>(s)]) / n + hs * out.specific(j, s);
                    const double next = soft_threshold(b, lambda_specific) / hs;
                    const double d = next - out.specific(j, s);
                    if (d == 0.0) continue;
                    r[static_cast<std::size_t>(s)].noalias() -= d * col;
                    out.specific(j, s) = next;
                    worst = std::max(worst, hs * std::abs(d));
                }
            }
        }
        if (worst <= opts.tol) break;
    }
    return out;
}

/// Concomitant noise update: max(||Y - L x|| / sqrt(n), sigma0).
inline double update_sigma(const Vector& Y, const Matrix& L, const Vector& x, double sigma0)
{
    if (!(sigma0 > 0.0)) throw ParameterError("update_sigma: sigma0 must be > 0");
    const double n = static_cast<double>(Y.size());
    return std::max((Y - L * x).norm() / std::sqrt(n), sigma0);
}

/// Differentiable part of the positive subproblem at x > 0:
/// (1/2n)||Y - Lx||^2 + kappa (<x, 1> - <log x, m>).
inline double subproblem_smooth_value(const Vector& Y, const Matrix& L, const Vector& m, double kappa, const Vector& x)
{
    const double n = static_cast<double>(Y.size());
    double barrier = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j)
        if (m[j] > 0.0) barrier += m[j] * std::log(x[j]);
    return (Y - L * x).squaredNorm() / (2.0 * n) + kappa * (x.sum() - barrier);
}

inline Vector subproblem_smooth_gradient(const Vector& Y, const Matrix& L, const Vector& m, double kappa,
                                         const Vector& x)
{
    const double n = static_cast<double>(Y.size());
    Vector grad = -L.transpose() * (Y - L * x) / n;
    for (Eigen::Index j = 0; j < x.size(); ++j) grad[j] += kappa * (1.0 - (m[j] > 0.0 ? m[j] / x[j] : 0.0));
    return grad;
}

/// Full positive subproblem objective (smooth part plus lam_eff ||x||_1).
inline double subproblem_objective(const Vector& Y, const Matrix& L, const Vector& m, double kappa, double lam_eff,
                                   const Vector& x)
{
    return subproblem_smooth_value(Y, L, m, kappa, x) + lam_eff * x.sum();
}

/// Proximal coordinate descent for
///   min_{x >= 0} (1/2n)||Y - Lx||^2 + kappa (<x,1> - <log x, m>) + lam_eff ||x||_1.
/// Coordinates with m_j > 0 take the positive root of
///   h x^2 + (kappa + lam_eff - b) x - kappa m_j = 0,
/// the others a nonnegative soft-threshold.
inline Vector solve_subproblem(const Vector& Y, const Matrix& L, const Vector& m, double kappa, double lam_eff,
                               const Vector& x_init, const CDOptions& opts = {})
{
    if (Y.size() != L.rows() || m.size() != L.cols() || x_init.size() != L.cols())
        throw ParameterError("solve_subproblem: dimension mismatch");
    if (!(kappa >= 0.0)) throw ParameterError("solve_subproblem: kappa must be >= 0");
    if (!(lam_eff >= 0.0)) throw ParameterError("solve_subproblem: lam_eff must be >= 0");
    if ((m.array() < 0.0).any()) throw DomainError("solve_subproblem: marginal has negative entries");

    const double n = static_cast<double>(L.rows());
    const Vector h = detail::column_curvatures(L);
    Vector x = x_init.cwiseMax(0.0);
    Vector r = Y - L * x;
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        double worst = 0.0;
        for (Eigen::Index j = 0; j < L.cols(); ++j) {
            const double old = x[j];
            const double b = L.col(j).dot(r) / n + h[j] * old;
            const double c = kappa + lam_eff - b;
            double next;
            if (kappa > 0.0 && m[j] > 0.0) {
                const double km = kappa * m[j];
                const double root = std::sqrt(c * c + 4.0 * h[j] * km);
                next = c > 0.0 ? 2.0 * km / (c + root) : (root - c) / (2.0 * h[j]);
            } else {
                next = h[j] > 0.0 ? std::max(-c, 0.0) / h[j] : 0.0;
            }
            if (!std::isfinite(next))
                throw NumericalError("solve_subproblem: coordinate " + std::to_string(j) + " diverged");
            if (next != old) {
                r.noalias() -= (next - old) * L.col(j);
                x[j] = next;
                worst = std::max(worst, std::max(h[j], 1e-12) * std::abs(next - old));
            }
        }
        if (worst <= opts.tol) break;
    }
    return x;
}

struct SignedSource {
    Vector pos;
    Vector neg;

    [[nodiscard]] Vector values() const { return pos - neg; }
};

struct MWEConfig {
    double mu = 0.0;
    double lambda = 0.0;
    double epsilon = 1.0; // cm
    double gamma = 1.0;
    std::optional<double> sigma0; // default: alpha * min_s ||Y_s|| / sqrt(n)
    double alpha = 0.01;
    bool concomitant = true; // false: sigma frozen at 1 (MTW)
    double outer_tol = 1e-5;
    int outer_max_iter = 200;
    double cd_tol = 1e-6;
    int cd_max_iter = 2000;
    double sinkhorn_tol = 1e-8;
    int sinkhorn_max_iter = 5000;
    // Start from the uncoupled (mu = 0) solution instead of x = 0. With x = 0
    // the first source step sees an empty barycenter and charges every unit
    // of mass mu * gamma / S, which can pin all sources at zero. The warm
    // start gives up sign complementarity of the parts.
    bool warm_start = false;
    double increase_tol = 1e-10; // relative objective increase treated as a solver bug
    int threads = 1;

    void validate() const
    {
        if (!(mu >= 0.0)) throw ParameterError("MWEConfig: mu must be >= 0");
        if (!(lambda >= 0.0)) throw ParameterError("MWEConfig: lambda must be >= 0");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("MWEConfig: alpha must be in (0, 1)");
        if (sigma0 && !(*sigma0 > 0.0)) throw ParameterError("MWEConfig: sigma0 must be > 0");
        if (!(outer_tol >= 0.0) || outer_max_iter < 1) throw ParameterError("MWEConfig: bad outer loop settings");
        if (!(cd_tol > 0.0) || cd_max_iter < 1) throw ParameterError("MWEConfig: bad coordinate descent settings");
        if (mu > 0.0) sinkhorn_params().validate();
    }

    [[nodiscard]] SinkhornParams sinkhorn_params() const
    {
        SinkhornParams sp;
        sp.epsilon = epsilon;
        sp.gamma = gamma;
        sp.tol = sinkhorn_tol;
        sp.max_iter = sinkhorn_max_iter;
        return sp;
    }
};

struct ObjectiveTerms {
    double data_fit = 0.0; // sum_s ||r_s||^2 / (2 n sigma_s) + sigma_s / 2
    double ot = 0.0;       // mu * [(1/S) sum_s W(x_s+, xbar+) + W(x_s-, xbar-)]
    double l1 = 0.0;       // lambda * sum_s ||x_s||_1
    std::vector<double> sigmas;

    [[nodiscard]] double total() const { return data_fit + ot + l1; }
};

struct MWESolution {
    std::vector<SignedSource> sources;
    std::vector<double> sigmas;
    Vector barycenter_pos;
    Vector barycenter_neg;
    std::vector<double> objective_trace;
    std::vector<ObjectiveTerms> terms_trace;
    double sigma0 = 0.0;
    bool converged = false;
    int iterations = 0;
    int sinkhorn_warnings = 0; // barycenter solves that hit max_iter

    [[nodiscard]] Matrix estimates() const
    {
        Matrix X(sources.empty() ? 0 : sources[0].pos.size(), static_cast<Eigen::Index>(sources.size()));
        for (std::size_t s = 0; s < sources.size(); ++s) X.col(static_cast<Eigen::Index>(s)) = sources[s].values();
        return X;
    }
};

/// Objective trace as CSV: iteration, data-fit, OT term, l1 term, one column per sigma.
inline void write_objective_csv(std::ostream& os, const MWESolution& sol)
{
    os << "iteration,objective,data_fit,ot,l1";
    for (std::size_t s = 0; s < sol.sigmas.size(); ++s) os << ",sigma_" << s;
    os << '\n';
    os.precision(17);
    for (std::size_t k = 0; k < sol.terms_trace.size(); ++k) {
        const auto& t = sol.terms_trace[k];
        os << k << ',' << t.total() << ',' << t.data_fit << ',' << t.ot << ',' << t.l1;
        for (double sg : t.sigmas) os << ',' << sg;
        os << '\n';
    }
}

inline double default_sigma0(const MultiSubjectDataset& data, double alpha)
{
    double smallest = std::numeric_limits<double>::infinity();
    for (int s = 0; s < data.num_subjects(); ++s)
        smallest = std::min(smallest, data.observation(s).norm() / std::sqrt(static_cast<double>(data.num_sensors())));
    return alpha * smallest;
}

namespace detail {

class MWESolver {
public:
    MWESolver(const MultiSubjectDataset& data, const CostMatrix& costs, const MWEConfig& cfg)
        : data_(data), costs_(&costs), cfg_(cfg), S_(data.num_subjects()), n_(data.num_sensors()), p_(data.num_sources())
    {
        data.validate();
        cfg.validate();
        if (costs.size() != p_) throw ParameterError("solve_mwe: cost matrix size differs from number of sources");
        sigma0_ = cfg.sigma0.value_or(default_sigma0(data, cfg.alpha));
        if (!(sigma0_ > 0.0))
            throw ParameterError("solve_mwe: default sigma0 is zero (all observations vanish); set sigma0");
        if (cfg.mu > 0.0) {
            kernel_ = gibbs_kernel(costs, cfg.epsilon);
            pos_.emplace(*kernel_, cfg.sinkhorn_params(), S_);
            neg_.emplace(*kernel_, cfg.sinkhorn_params(), S_);
            pos_->set_threads(cfg.threads);
            neg_->set_threads(cfg.threads);
        }
    }

    MWESolution run()
    {
        MWESolution sol;
        sol.sigma0 = sigma0_;
        sol.sources.assign(static_cast<std::size_t>(S_), SignedSource{Vector::Zero(p_), Vector::Zero(p_)});
        sol.sigmas.resize(static_cast<std::size_t>(S_));
        for (int s = 0; s < S_; ++s)
            sol.sigmas[static_cast<std::size_t>(s)] =
                cfg_.concomitant ? std::max(data_.observation(s).norm() / std::sqrt(double(n_)), sigma0_) : 1.0;

        if (pos_ && cfg_.warm_start) {
            MWEConfig uncoupled = cfg_;
            uncoupled.mu = 0.0;
            uncoupled.sigma0 = sigma0_;
            MWESolver inner(data_, *costs_, uncoupled);
            auto start = inner.run();
            sol.sources = std::move(start.sources);
            sol.sigmas = std::move(start.sigmas);
            update_barycenter(*pos_, sol, true);
            update_barycenter(*neg_, sol, false);
        }

        double previous = std::numeric_limits<double>::infinity();
        for (int it = 1; it <= cfg_.outer_max_iter; ++it) {
            sol.iterations = it;
            update_sources(sol);
            if (cfg_.mu > 0.0) {
                update_barycenter(*pos_, sol, true);
                update_barycenter(*neg_, sol, false);
            }
            const ObjectiveTerms terms = objective(sol);
            const double value = terms.total();
            if (!std::isfinite(value)) throw NumericalError("solve_mwe: non-finite objective at iteration " + std::to_string(it));
            sol.objective_trace.push_back(value);
            sol.terms_trace.push_back(terms);
            if (std::isfinite(previous)) {
                const double scale = std::max(std::abs(previous), 1e-300);
                if (value - previous > cfg_.increase_tol * scale)
                    throw NumericalError("solve_mwe: objective increased at iteration " + std::to_string(it) + " (" +
                                         std::to_string(previous) + " -> " + std::to_string(value) + ")");
                if ((previous - value) <= cfg_.outer_tol * scale) {
                    sol.converged = true;
                    break;
                }
            }
            previous = value;
        }
        if (pos_) {
            sol.barycenter_pos = pos_->barycenter();
            sol.barycenter_neg = neg_->barycenter();
        } else {
            sol.barycenter_pos = Vector::Zero(p_);
            sol.barycenter_neg = Vector::Zero(p_);
        }
        sol.sinkhorn_warnings = sinkhorn_warnings_;
        return sol;
    }

private:
    void update_sources(MWESolution& sol) const
    {
        const CDOptions cd{cfg_.cd_tol, cfg_.cd_max_iter};
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (cfg_.threads > 1) num_threads(cfg_.threads)
#endif
        for (int s = 0; s < S_; ++s) {
            auto& src = sol.sources[static_cast<std::size_t>(s)];
            double& sigma = sol.sigmas[static_cast<std::size_t>(s)];
            const Matrix& L = data_.leadfield(s);
            const Vector& Y = data_.observation(s);
            // Block minimization of the full objective scaled by sigma.
            const double kappa = pos_ ? cfg_.mu * cfg_.gamma * sigma / S_ : 0.0;
            const double lam_eff = cfg_.lambda * sigma;
            const Vector m_pos = pos_ ? pos_->left_marginal(s) : Vector::Zero(p_);
            const Vector m_neg = neg_ ? neg_->left_marginal(s) : Vector::Zero(p_);
            if (pos_) {
                src.pos = solve_subproblem(Y + L * src.neg, L, m_pos, kappa, lam_eff, src.pos, cd);
                src.neg = solve_subproblem(L * src.pos - Y, L, m_neg, kappa, lam_eff, src.neg, cd);
            } else {
                // Without transport the parts only meet through the residual, so
                // solve the signed Lasso directly. Alternating the two parts
                // crawls along flat directions when n < p.
                const Vector x = solve_lasso(Y, L, lam_eff, cd, src.values());
                src.pos = positive_part(x);
                src.neg = negative_part(x);
            }
            if (cfg_.concomitant) sigma = update_sigma(Y, L, src.values(), sigma0_);
        }
    }

    void update_barycenter(BarycenterSolver& solver, const MWESolution& sol, bool positive)
    {
        std::vector<Vector> parts;
        parts.reserve(static_cast<std::size_t>(S_));
        for (const auto& src : sol.sources) parts.push_back(positive ? src.pos : src.neg);
        // Keep the previous plans if the scaling iterations did not improve on them.
        BarycenterSolver saved = solver;
        const double before = saved.objective(parts);
        solver.solve(parts);
        if (!solver.converged()) ++sinkhorn_warnings_;
        if (solver.objective(parts) > before) solver = std::move(saved);
    }

    [[nodiscard]] ObjectiveTerms objective(const MWESolution& sol) const
    {
        ObjectiveTerms t;
        t.sigmas = sol.sigmas;
        std::vector<Vector> pos_parts, neg_parts;
        for (int s = 0; s < S_; ++s) {
            const auto& src = sol.sources[static_cast<std::size_t>(s)];
            const double sigma = sol.sigmas[static_cast<std::size_t>(s)];
            const double rss = (data_.observation(s) - data_.leadfield(s) * src.values()).squaredNorm();
            t.data_fit += cfg_.concomitant ? rss / (2.0 * n_ * sigma) + sigma / 2.0 : rss / (2.0 * n_);
            t.l1 += cfg_.lambda * (src.pos.sum() + src.neg.sum());
            pos_parts.push_back(src.pos);
            neg_parts.push_back(src.neg);
        }
        if (pos_) t.ot = cfg_.mu * (pos_->objective(pos_parts) + neg_->objective(neg_parts));
        return t;
    }

    const MultiSubjectDataset& data_;
    const CostMatrix* costs_;
    MWEConfig cfg_;
    int S_, n_, p_;
    double sigma0_ = 0.0;
    std::optional<GibbsKernel> kernel_;
    std::optional<BarycenterSolver> pos_;
    std::optional<BarycenterSolver> neg_;
    int sinkhorn_warnings_ = 0;
};

} // namespace detail

/// Minimum Wasserstein Estimates: alternating minimization over sources,
/// noise levels and the two barycenter problems.
inline MWESolution solve_mwe(const MultiSubjectDataset& data, const CostMatrix& costs, const MWEConfig& config)
{
    detail::MWESolver solver(data, costs, config);
    return solver.run();
}

inline MWESolution solve_mwe(const MultiSubjectDataset& data, const Geometry& geometry, const MWEConfig& config)
{
    return solve_mwe(data, geometry.costs, config);
}

/// Multi-task Wasserstein: MWE with all noise levels frozen at 1.
inline MWESolution solve_mtw(const MultiSubjectDataset& data, const CostMatrix& costs, MWEConfig config)
{
    config.concomitant = false;
    return solve_mwe(data, costs, config);
}

inline MWESolution solve_mtw(const MultiSubjectDataset& data, const Geometry& geometry, const MWEConfig& config)
{
    return solve_mtw(data, geometry.costs, config);
}

} // namespace mwe
