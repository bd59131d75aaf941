#pragma once

// Entropic unbalanced optimal transport.
//
// W(a, b) = min_P  eps * KL(P | K) + gamma * KL(P 1 | a) + gamma * KL(P^T 1 | b),
// K = exp(-M / eps), solved with generalized Sinkhorn scalings
//   u <- (a / K v)^psi,  v <- (b / K^T u)^psi,  psi = gamma / (gamma + eps).
// KL(P | K) keeps its constant sum(K), so a zero plan costs eps * sum(K).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"
#include "mwe/transport_simplex.hpp"

namespace mwe {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct SinkhornParams {
    double epsilon = 1.0; // entropic scale, cm
    double gamma = 1.0;   // marginal relaxation
    int max_iter = 5000;
    double tol = 1e-6; // relative l-inf change of u
    double absorb_threshold = 30.0; // |log u|, |log v| before absorption into the kernel

    [[nodiscard]] double psi() const { return gamma / (gamma + epsilon); }

    void validate() const
    {
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ParameterError("SinkhornParams: epsilon must be > 0");
        if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ParameterError("SinkhornParams: gamma must be > 0");
        if (!(tol > 0.0)) throw ParameterError("SinkhornParams: tol must be > 0");
        if (max_iter < 1) throw ParameterError("SinkhornParams: max_iter must be >= 1");
        if (!(absorb_threshold > 0.0)) throw ParameterError("SinkhornParams: absorb_threshold must be > 0");
    }
};

struct SinkhornState {
    Vector u;
    Vector v;
    bool converged = false;
    int iterations = 0;
};

struct SinkhornResult {
    SinkhornState state;
    double value = 0.0;
};

struct TraceRow {
    int iteration;
    double objective;
    double residual;
};

using SinkhornTrace = std::vector<TraceRow>;

inline void write_trace_csv(std::ostream& os, const SinkhornTrace& trace)
{
    os << "iteration,objective,residual\n";
    os.precision(17);
    for (const auto& r : trace) os << r.iteration << ',' << r.objective << ',' << r.residual << '\n';
}

namespace detail {

inline void require_nonnegative(const Vector& x, const char* who)
{
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (!(x[i] >= 0.0) || !std::isfinite(x[i]))
            throw DomainError(std::string(who) + ": entry " + std::to_string(i) + " is negative or not finite");
}

inline void require_kernel(const GibbsKernel& K, const SinkhornParams& params, Eigen::Index n, const char* who)
{
    params.validate();
    if (K.size() != n) throw ParameterError(std::string(who) + ": measure length does not match kernel size");
    if (std::abs(K.epsilon - params.epsilon) > 1e-12 * std::max(1.0, K.epsilon))
        throw ParameterError(std::string(who) + ": kernel epsilon differs from SinkhornParams.epsilon");
}

inline double log_or_neg_inf(double x) { return x > 0.0 ? std::log(x) : -std::numeric_limits<double>::infinity(); }

} // namespace detail

/// KL(x | y) = <x, log(x / y)> + <y - x, 1>, with 0 log 0 = 0 and +inf when
/// y_i = 0 < x_i.
inline double kl_divergence(const Vector& x, const Vector& y)
{
    if (x.size() != y.size()) throw ParameterError("kl_divergence: length mismatch");
    detail::require_nonnegative(x, "kl_divergence");
    detail::require_nonnegative(y, "kl_divergence");
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (x[i] == 0.0) {
            total += y[i];
        } else if (y[i] == 0.0) {
            return std::numeric_limits<double>::infinity();
        } else {
            total += x[i] * std::log(x[i] / y[i]) + y[i] - x[i];
        }
    }
    return total;
}

namespace detail {

/// One UOT problem kept in absorbed form: the true scalings are
/// exp(alpha) * u and exp(beta) * v, and the rows of the stabilized kernel
/// exp(alpha_i + beta_j - M_ij / eps) are stored only for the support of the
/// source measure (u vanishes elsewhere).
class ScalingProblem {
public:
    ScalingProblem(const GibbsKernel& kernel, double psi)
        : kernel_(&kernel),
          psi_(psi),
          beta_(Vector::Zero(kernel.size())),
          v_(Vector::Ones(kernel.size()))
    {
    }

    [[nodiscard]] int size() const { return kernel_->size(); }
    [[nodiscard]] bool empty() const { return support_.empty(); }
    [[nodiscard]] const std::vector<int>& support() const { return support_; }

    /// Replaces the source measure. Scalings on rows that stay in the support
    /// keep their absorbed potential; the target scaling v is kept as warm start.
    void set_source(const Vector& a)
    {
        std::vector<int> support;
        for (Eigen::Index i = 0; i < a.size(); ++i)
            if (a[i] > 0.0) support.push_back(static_cast<int>(i));
        Vector alpha(static_cast<Eigen::Index>(support.size()));
        Vector u(static_cast<Eigen::Index>(support.size()));
        std::size_t old = 0;
        for (std::size_t k = 0; k < support.size(); ++k) {
            while (old < support_.size() && support_[old] < support[k]) ++old;
            const bool kept = old < support_.size() && support_[old] == support[k];
            alpha[static_cast<Eigen::Index>(k)] = kept ? alpha_[static_cast<Eigen::Index>(old)] : 0.0;
            u[static_cast<Eigen::Index>(k)] = kept ? u_[static_cast<Eigen::Index>(old)] : 1.0;
        }
        support_ = std::move(support);
        alpha_ = std::move(alpha);
        u_ = std::move(u);
        log_a_.resize(static_cast<Eigen::Index>(support_.size()));
        for (std::size_t k = 0; k < support_.size(); ++k)
            log_a_[static_cast<Eigen::Index>(k)] = std::log(a[support_[k]]);
        rebuild_rows();
    }

    void reset_target_scaling()
    {
        beta_.setZero();
        v_.setOnes();
        rebuild_rows();
    }

    /// u <- (a / K v)^psi in true scale.
    void update_u(int iteration)
    {
        const Vector kv = rows_ * v_;
        for (Eigen::Index k = 0; k < kv.size(); ++k) {
            const double log_kv_true = std::log(kv[k]) - alpha_[k];
            const double log_u_true = psi_ * (log_a_[k] - log_kv_true);
            u_[k] = std::exp(log_u_true - alpha_[k]);
            if (!std::isfinite(u_[k]) || !(u_[k] > 0.0))
                throw NumericalError("generalized Sinkhorn: non-finite u at iteration " + std::to_string(iteration) +
                                     " (row " + std::to_string(support_[static_cast<std::size_t>(k)]) +
                                     "); increase epsilon");
        }
    }

    /// log(K^T u) in true scale; -inf where the column receives no mass.
    [[nodiscard]] Vector log_ktu() const
    {
        const Vector ktu = rows_.transpose() * u_;
        Vector t(ktu.size());
        for (Eigen::Index j = 0; j < ktu.size(); ++j) t[j] = log_or_neg_inf(ktu[j]) - beta_[j];
        return t;
    }

    /// v <- (b / K^T u)^psi given log b and log(K^T u).
    void update_v(const Vector& log_b, const Vector& log_ktu, int iteration)
    {
        for (Eigen::Index j = 0; j < v_.size(); ++j) {
            if (log_b[j] == -std::numeric_limits<double>::infinity()) {
                v_[j] = 0.0;
                continue;
            }
            v_[j] = std::exp(psi_ * (log_b[j] - log_ktu[j]) - beta_[j]);
            if (!std::isfinite(v_[j]))
                throw NumericalError("generalized Sinkhorn: non-finite v at iteration " + std::to_string(iteration) +
                                     " (column " + std::to_string(j) + "); increase epsilon");
        }
    }

    /// True log u over the support.
    [[nodiscard]] Vector log_u_support() const { return alpha_ + u_.array().log().matrix(); }

    /// Moves large scalings into the kernel so that u and v stay near 1.
    void maybe_absorb(double threshold)
    {
        double worst = 0.0;
        for (Eigen::Index k = 0; k < u_.size(); ++k) worst = std::max(worst, std::abs(std::log(u_[k])));
        for (Eigen::Index j = 0; j < v_.size(); ++j)
            if (v_[j] > 0.0) worst = std::max(worst, std::abs(std::log(v_[j])));
        if (worst <= threshold) return;
        alpha_ += u_.array().log().matrix();
        u_.setOnes();
        for (Eigen::Index j = 0; j < v_.size(); ++j)
            if (v_[j] > 0.0) {
                beta_[j] += std::log(v_[j]);
                v_[j] = 1.0;
            }
        absorbed_ = true;
        rebuild_rows();
    }

    /// Row marginal m = P 1 (full length, zero off the support).
    [[nodiscard]] Vector left_marginal() const
    {
        Vector m = Vector::Zero(size());
        if (support_.empty()) return m;
        const Vector kv = rows_ * v_;
        for (std::size_t k = 0; k < support_.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            m[support_[k]] = u_[kk] * kv[kk];
        }
        return m;
    }

    /// Column marginal P^T 1.
    [[nodiscard]] Vector right_marginal() const
    {
        if (support_.empty()) return Vector::Zero(size());
        return v_.cwiseProduct(rows_.transpose() * u_);
    }

    /// eps * KL(P | K) at the implicit plan.
    [[nodiscard]] double entropic_term(const Vector& m, const Vector& c) const
    {
        const double eps = kernel_->epsilon;
        double acc = 0.0;
        for (std::size_t k = 0; k < support_.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            const double mi = m[support_[k]];
            if (mi > 0.0) acc += mi * (alpha_[kk] + std::log(u_[kk]));
        }
        for (Eigen::Index j = 0; j < c.size(); ++j)
            if (c[j] > 0.0) acc += c[j] * (beta_[j] + std::log(v_[j]));
        return eps * (acc - m.sum() + kernel_->total);
    }

    /// Scalings in true scale (may overflow for extreme epsilon).
    [[nodiscard]] SinkhornState export_state(bool converged, int iterations) const
    {
        SinkhornState s;
        s.u = Vector::Zero(size());
        for (std::size_t k = 0; k < support_.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            s.u[support_[k]] = std::exp(alpha_[kk]) * u_[kk];
        }
        s.v = (beta_.array().exp() * v_.array()).matrix();
        s.converged = converged;
        s.iterations = iterations;
        return s;
    }

private:
    void rebuild_rows()
    {
        const auto n = static_cast<Eigen::Index>(support_.size());
        rows_.resize(n, size());
        const double eps = kernel_->epsilon;
        for (Eigen::Index k = 0; k < n; ++k) {
            const int i = support_[static_cast<std::size_t>(k)];
            if (!absorbed_ && alpha_[k] == 0.0) {
                rows_.row(k) = kernel_->K.row(i);
                continue;
            }
            for (Eigen::Index j = 0; j < size(); ++j)
                rows_(k, j) = std::exp(alpha_[k] + beta_[j] - kernel_->cost(i, j) / eps);
        }
    }

    const GibbsKernel* kernel_;
    double psi_;
    std::vector<int> support_;
    Vector log_a_;
    Vector alpha_;
    Vector u_;
    Vector beta_;
    Vector v_;
    RowMatrix rows_;
    bool absorbed_ = false;
};

/// max_i |u_new - u_old| / max_i u_new, evaluated from logs.
inline double relative_change(const Vector& log_old, const Vector& log_new)
{
    if (log_new.size() == 0) return 0.0;
    const double top = log_new.maxCoeff();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < log_new.size(); ++i)
        worst = std::max(worst, std::abs(std::exp(log_new[i] - top) - std::exp(log_old[i] - top)));
    return worst;
}

inline Vector log_vector(const Vector& x)
{
    Vector out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = log_or_neg_inf(x[i]);
    return out;
}

} // namespace detail

/// Value of the unbalanced objective at a plan given only its marginals and
/// entropic term.
inline double unbalanced_value(double entropic, const Vector& m, const Vector& c, const Vector& a, const Vector& b,
                               double gamma)
{
    return entropic + gamma * kl_divergence(m, a) + gamma * kl_divergence(c, b);
}

/// Generalized Sinkhorn for W(a, b). W(0, 0) = 0 is returned directly.
/// Non-convergence within max_iter is reported through state.converged.
inline SinkhornResult sinkhorn_unbalanced(const Vector& a, const Vector& b, const GibbsKernel& K,
                                          const SinkhornParams& params, SinkhornTrace* trace = nullptr)
{
    if (a.size() != b.size()) throw ParameterError("sinkhorn_unbalanced: length mismatch");
    detail::require_kernel(K, params, a.size(), "sinkhorn_unbalanced");
    detail::require_nonnegative(a, "sinkhorn_unbalanced");
    detail::require_nonnegative(b, "sinkhorn_unbalanced");

    const int p = K.size();
    SinkhornResult out;
    const bool a_zero = (a.array() == 0.0).all();
    const bool b_zero = (b.array() == 0.0).all();
    if (a_zero || b_zero) {
        // Only the zero plan has finite cost.
        out.state.u = Vector::Zero(p);
        out.state.v = Vector::Zero(p);
        out.state.converged = true;
        out.value = (a_zero && b_zero) ? 0.0 : params.epsilon * K.total + params.gamma * (a.sum() + b.sum());
        return out;
    }

    detail::ScalingProblem prob(K, params.psi());
    prob.set_source(a);
    const Vector log_b = detail::log_vector(b);

    bool converged = false;
    int it = 0;
    while (it < params.max_iter) {
        ++it;
        const Vector before = prob.log_u_support();
        prob.update_u(it);
        prob.update_v(log_b, prob.log_ktu(), it);
        const double change = detail::relative_change(before, prob.log_u_support());
        if (trace) {
            const Vector m = prob.left_marginal();
            const Vector c = prob.right_marginal();
            trace->push_back({it, unbalanced_value(prob.entropic_term(m, c), m, c, a, b, params.gamma), change});
        }
        prob.maybe_absorb(params.absorb_threshold);
        if (change <= params.tol) {
            converged = true;
            break;
        }
    }
    const Vector m = prob.left_marginal();
    const Vector c = prob.right_marginal();
    out.value = unbalanced_value(prob.entropic_term(m, c), m, c, a, b, params.gamma);
    if (!std::isfinite(out.value)) throw NumericalError("sinkhorn_unbalanced: non-finite objective");
    out.state = prob.export_state(converged, it);
    return out;
}

/// m = u * (K v), without forming P.
inline Vector left_marginal(const SinkhornState& state, const GibbsKernel& K)
{
    if (state.u.size() != K.size() || state.v.size() != K.size())
        throw ParameterError("left_marginal: state size does not match kernel");
    return state.u.cwiseProduct(K.K * state.v);
}

/// Dense plan P_ij = u_i K_ij v_j.
inline Matrix transport_plan(const SinkhornState& state, const GibbsKernel& K)
{
    return state.u.asDiagonal() * K.K * state.v.asDiagonal();
}

/// Warm-startable solver for min_xbar (1/S) sum_s W(x_s, xbar).
///
/// Each iteration scales all S problems, then sets
///   xbar = ( (1/S) sum_s (K^T u_s)^(1 - psi) )^(1 / (1 - psi)),
/// the fixed point at which xbar equals the mean of the column marginals.
class BarycenterSolver {
public:
    BarycenterSolver(const GibbsKernel& kernel, SinkhornParams params, int num_measures)
        : kernel_(&kernel), params_(params)
    {
        params_.validate();
        if (num_measures < 1) throw ParameterError("unbalanced_barycenter: need at least one measure");
        if (std::abs(kernel.epsilon - params_.epsilon) > 1e-12 * std::max(1.0, kernel.epsilon))
            throw ParameterError("unbalanced_barycenter: kernel epsilon differs from SinkhornParams.epsilon");
        problems_.reserve(static_cast<std::size_t>(num_measures));
        for (int s = 0; s < num_measures; ++s) problems_.emplace_back(kernel, params_.psi());
        measures_.assign(static_cast<std::size_t>(num_measures), Vector::Zero(kernel.size()));
        barycenter_ = Vector::Zero(kernel.size());
    }

    [[nodiscard]] int num_measures() const { return static_cast<int>(problems_.size()); }

    /// Runs the scaling iterations from the current scalings.
    void solve(std::span<const Vector> measures)
    {
        if (static_cast<int>(measures.size()) != num_measures())
            throw ParameterError("unbalanced_barycenter: wrong number of measures");
        for (std::size_t s = 0; s < measures.size(); ++s) {
            if (measures[s].size() != kernel_->size())
                throw ParameterError("unbalanced_barycenter: measure length does not match kernel size");
            detail::require_nonnegative(measures[s], "unbalanced_barycenter");
            measures_[s] = measures[s];
            problems_[s].set_source(measures[s]);
        }
        const double psi = params_.psi();
        const double weight = std::log(1.0 / static_cast<double>(num_measures()));
        const int p = kernel_->size();

        std::vector<std::size_t> active;
        for (std::size_t s = 0; s < problems_.size(); ++s)
            if (!problems_[s].empty()) active.push_back(s);
        if (active.empty()) {
            barycenter_.setZero();
            converged_ = true;
            iterations_ = 0;
            return;
        }

        std::vector<Vector> log_ktu(problems_.size());
        Vector log_bar(p);
        converged_ = false;
        iterations_ = 0;
        while (iterations_ < params_.max_iter) {
            const int it = ++iterations_;
            double change = 0.0;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (threads_ > 1) num_threads(threads_) reduction(max : change)
#endif
            for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(active.size()); ++k) {
                auto& prob = problems_[active[static_cast<std::size_t>(k)]];
                const Vector before = prob.log_u_support();
                prob.update_u(it);
                change = std::max(change, detail::relative_change(before, prob.log_u_support()));
                log_ktu[active[static_cast<std::size_t>(k)]] = prob.log_ktu();
            }
            // Reduction across problems in fixed order.
            for (int j = 0; j < p; ++j) {
                double top = -std::numeric_limits<double>::infinity();
                for (auto s : active) top = std::max(top, (1.0 - psi) * log_ktu[s][j]);
                double acc = 0.0;
                for (auto s : active) acc += std::exp((1.0 - psi) * log_ktu[s][j] - top);
                log_bar[j] = (weight + top + std::log(acc)) / (1.0 - psi);
            }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (threads_ > 1) num_threads(threads_)
#endif
            for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(active.size()); ++k) {
                const auto s = active[static_cast<std::size_t>(k)];
                problems_[s].update_v(log_bar, log_ktu[s], it);
                problems_[s].maybe_absorb(params_.absorb_threshold);
            }
            if (change <= params_.tol) {
                converged_ = true;
                break;
            }
        }
        barycenter_ = log_bar.array().exp().matrix();
    }

    [[nodiscard]] const Vector& barycenter() const { return barycenter_; }
    [[nodiscard]] bool converged() const { return converged_; }
    [[nodiscard]] int iterations() const { return iterations_; }

    [[nodiscard]] Vector left_marginal(int s) const { return problems_[static_cast<std::size_t>(s)].left_marginal(); }
    [[nodiscard]] Vector right_marginal(int s) const { return problems_[static_cast<std::size_t>(s)].right_marginal(); }

    /// eps * KL(P_s | K) for the current plan of problem s.
    [[nodiscard]] double entropic_term(int s) const
    {
        const auto& prob = problems_[static_cast<std::size_t>(s)];
        return prob.entropic_term(prob.left_marginal(), prob.right_marginal());
    }

    /// (1/S) sum_s [eps KL(P_s|K) + gamma KL(P_s 1 | x_s) + gamma KL(P_s^T 1 | xbar)] at the current
    /// plans, for arbitrary sources x_s. No shortcut for zero measures.
    [[nodiscard]] double objective(std::span<const Vector> sources) const
    {
        double total = 0.0;
        for (int s = 0; s < num_measures(); ++s) {
            const Vector m = left_marginal(s);
            const Vector c = right_marginal(s);
            total += unbalanced_value(entropic_term(s), m, c, sources[static_cast<std::size_t>(s)], barycenter_,
                                      params_.gamma);
        }
        return total / num_measures();
    }

    [[nodiscard]] double objective() const { return objective(measures_); }

    void set_threads(int threads) { threads_ = std::max(1, threads); }

private:
    const GibbsKernel* kernel_;
    SinkhornParams params_;
    std::vector<detail::ScalingProblem> problems_;
    std::vector<Vector> measures_;
    Vector barycenter_;
    bool converged_ = false;
    int iterations_ = 0;
    int threads_ = 1;
};

struct BarycenterResult {
    Vector barycenter;
    std::vector<Vector> left_marginals;
    double objective = 0.0; // (1/S) sum_s W(x_s, xbar)
    bool converged = false;
    int iterations = 0;
};

inline BarycenterResult unbalanced_barycenter(std::span<const Vector> measures, const GibbsKernel& K,
                                              const SinkhornParams& params)
{
    if (measures.empty()) throw ParameterError("unbalanced_barycenter: need at least one measure");
    BarycenterSolver solver(K, params, static_cast<int>(measures.size()));
    solver.solve(measures);
    BarycenterResult out;
    out.barycenter = solver.barycenter();
    for (int s = 0; s < solver.num_measures(); ++s) out.left_marginals.push_back(solver.left_marginal(s));
    const bool all_zero = std::all_of(measures.begin(), measures.end(),
                                      [](const Vector& x) { return (x.array() == 0.0).all(); });
    out.objective = all_zero ? 0.0 : solver.objective();
    out.converged = solver.converged();
    out.iterations = solver.iterations();
    return out;
}

inline Vector positive_part(const Vector& x) { return x.cwiseMax(0.0); }
inline Vector negative_part(const Vector& x) { return (-x).cwiseMax(0.0); }

/// W~(a, b) = W(a+, b+) + W(a-, b-).
inline double signed_wasserstein(const Vector& a, const Vector& b, const GibbsKernel& K, const SinkhornParams& params)
{
    if (a.size() != b.size()) throw ParameterError("signed_wasserstein: length mismatch");
    return sinkhorn_unbalanced(positive_part(a), positive_part(b), K, params).value +
           sinkhorn_unbalanced(negative_part(a), negative_part(b), K, params).value;
}

/// Exact Kantorovich distance min <P, M> s.t. P 1 = a, P^T 1 = b.
/// The LP is restricted to the supports of a and b and solved with the
/// transportation simplex.
inline double exact_kantorovich(const Vector& a, const Vector& b, const CostMatrix& M)
{
    if (a.size() != b.size() || a.size() != M.size()) throw ParameterError("exact_kantorovich: size mismatch");
    detail::require_nonnegative(a, "exact_kantorovich");
    detail::require_nonnegative(b, "exact_kantorovich");
    const double ma = a.sum();
    const double mb = b.sum();
    if (std::abs(ma - mb) > 1e-9) throw DomainError("exact_kantorovich: total masses differ by more than 1e-9");
    if (ma == 0.0) return 0.0;

    std::vector<int> rows, cols;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a[i] > 0.0) rows.push_back(static_cast<int>(i));
        if (b[i] > 0.0) cols.push_back(static_cast<int>(i));
    }
    std::vector<double> supply, demand;
    for (int i : rows) supply.push_back(a[i]);
    for (int j : cols) demand.push_back(b[j] * (ma / mb));
    Matrix cost(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
            cost(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = M(rows[r], cols[c]);
    return solve_transportation(supply, demand, cost).cost;
}

} // namespace mwe
