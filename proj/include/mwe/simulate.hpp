#pragma once

// Synthetic multi-subject benchmark: smooth random leadfields on a mesh,
// label-constrained q-sparse signed sources with partial overlap across
// subjects, white Gaussian noise at a target SNR.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"
#include "mwe/io.hpp"
#include "mwe/solvers.hpp"

namespace mwe {

/// splitmix64 finalizer; derives independent stream seeds from (seed, tag).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct SimConfig {
    int S = 2;          // subjects
    int n = 50;         // sensors
    int q = 3;          // active sources per subject, one per label
    double overlap_fraction = 0.5;
    double amp_min = 20.0; // nAm
    double amp_max = 30.0;
    double sign_prob = 0.5;
    double snr = 4.0;
    bool shared_leadfield = false;
    double smoothing_cm = 1.0;      // spatial correlation length of leadfield columns
    double individual_angle = 0.6;  // std of per-subject column rotation (rad)
    std::uint64_t seed = 0;

    void validate(int p, int num_labels) const
    {
        if (S < 1) throw ParameterError("SimConfig: S must be >= 1");
        if (n < 1) throw ParameterError("SimConfig: n must be >= 1");
        if (n >= p) throw ParameterError("SimConfig: need n < p (ill-posed regime)");
        if (q < 1 || q > num_labels) throw ParameterError("SimConfig: q must be in [1, number of labels]");
        if (!(overlap_fraction >= 0.0 && overlap_fraction <= 1.0))
            throw ParameterError("SimConfig: overlap_fraction must be in [0, 1]");
        if (!(amp_min > 0.0 && amp_max >= amp_min)) throw ParameterError("SimConfig: bad amplitude range");
        if (!(sign_prob >= 0.0 && sign_prob <= 1.0)) throw ParameterError("SimConfig: sign_prob must be in [0, 1]");
        if (!(snr > 0.0)) throw ParameterError("SimConfig: snr must be > 0");
        if (!(smoothing_cm > 0.0)) throw ParameterError("SimConfig: smoothing_cm must be > 0");
        if (!(individual_angle >= 0.0)) throw ParameterError("SimConfig: individual_angle must be >= 0");
    }

    [[nodiscard]] int num_shared() const
    {
        return static_cast<int>(std::lround(overlap_fraction * static_cast<double>(S)));
    }
};

struct GroundTruth {
    std::vector<Vector> sources;            // one signed q-sparse vector per subject
    std::vector<std::vector<int>> indices;  // active vertex per active label, per subject
    std::vector<int> active_labels;
    std::vector<int> label_signs;           // +1 / -1 per active label
    double noise_sigma = 0.0;
};

namespace detail {

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix G(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) G(i, j) = normal(rng);
    return G;
}

inline Matrix smoothing_operator(const CostMatrix& M, double length)
{
    return (-(M.values.array().square()) / (2.0 * length * length)).exp().matrix();
}

inline void normalize_columns(Matrix& L)
{
    for (Eigen::Index j = 0; j < L.cols(); ++j) {
        const double nrm = L.col(j).norm();
        if (nrm > 0.0) L.col(j) /= nrm;
    }
}

} // namespace detail

/// Smooth random leadfields with unit-norm columns. Nearby sources (small
/// M_jk) have strongly correlated sensor profiles. In individual mode each
/// subject rotates every column towards an independent smooth field by a
/// spatially smooth random angle.
inline std::vector<std::shared_ptr<const Matrix>> generate_leadfields(const SimConfig& config, const Geometry& geometry)
{
    const int p = geometry.size();
    config.validate(p, geometry.labels.num_labels);
    const Matrix W = detail::smoothing_operator(geometry.costs, config.smoothing_cm);

    std::mt19937_64 rng(derive_seed(config.seed, 1));
    Matrix base = detail::gaussian_matrix(config.n, p, rng) * W;
    detail::normalize_columns(base);
    auto shared = std::make_shared<const Matrix>(std::move(base));

    std::vector<std::shared_ptr<const Matrix>> out;
    out.reserve(static_cast<std::size_t>(config.S));
    if (config.shared_leadfield) {
        out.assign(static_cast<std::size_t>(config.S), shared);
        return out;
    }
    for (int s = 0; s < config.S; ++s) {
        std::mt19937_64 srng(derive_seed(config.seed, 100 + static_cast<std::uint64_t>(s)));
        Matrix other = detail::gaussian_matrix(config.n, p, srng) * W;
        Vector angle = W * detail::gaussian_matrix(p, 1, srng);
        const double spread = std::sqrt(angle.squaredNorm() / p);
        if (spread > 0.0) angle *= config.individual_angle / spread;
        Matrix L(config.n, p);
        for (int j = 0; j < p; ++j) {
            const auto b = shared->col(j);
            Vector dir = other.col(j) - b.dot(other.col(j)) * b;
            const double nrm = dir.norm();
            if (nrm > 0.0) dir /= nrm;
            L.col(j) = std::cos(angle[j]) * b + std::sin(angle[j]) * dir;
        }
        detail::normalize_columns(L);
        out.push_back(std::make_shared<const Matrix>(std::move(L)));
    }
    return out;
}

/// One source per active label; the first round(overlap_fraction * S)
/// subjects share locations, the others draw their own vertex in the same
/// labels. Signs are drawn once per label.
inline GroundTruth generate_sources(const SimConfig& config, const LabelPartition& labels)
{
    const int p = static_cast<int>(labels.labels.size());
    if (config.q > labels.num_labels)
        throw ParameterError("generate_sources: q = " + std::to_string(config.q) + " exceeds the " +
                             std::to_string(labels.num_labels) + " available labels");
    config.validate(p, labels.num_labels);

    std::mt19937_64 rng(derive_seed(config.seed, 2));
    std::vector<int> perm(static_cast<std::size_t>(labels.num_labels));
    for (int k = 0; k < labels.num_labels; ++k) perm[static_cast<std::size_t>(k)] = k;
    for (int k = 0; k < config.q; ++k) {
        std::uniform_int_distribution<int> pick(k, labels.num_labels - 1);
        std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(pick(rng))]);
    }

    GroundTruth truth;
    truth.active_labels.assign(perm.begin(), perm.begin() + config.q);
    std::bernoulli_distribution positive(config.sign_prob);
    std::vector<std::vector<int>> members;
    for (int label : truth.active_labels) {
        truth.label_signs.push_back(positive(rng) ? 1 : -1);
        members.push_back(labels.members(label));
    }
    auto draw_locations = [&]() {
        std::vector<int> idx;
        for (const auto& mem : members) {
            std::uniform_int_distribution<std::size_t> pick(0, mem.size() - 1);
            idx.push_back(mem[pick(rng)]);
        }
        return idx;
    };
    const std::vector<int> shared = draw_locations();
    const int n_shared = config.num_shared();
    std::uniform_real_distribution<double> amplitude(config.amp_min, config.amp_max);
    for (int s = 0; s < config.S; ++s) {
        auto idx = s < n_shared ? shared : draw_locations();
        Vector x = Vector::Zero(p);
        for (std::size_t k = 0; k < idx.size(); ++k) x[idx[k]] = truth.label_signs[k] * amplitude(rng);
        truth.sources.push_back(std::move(x));
        truth.indices.push_back(std::move(idx));
    }
    return truth;
}

struct NoisyObservations {
    std::vector<Vector> Y;
    double sigma = 0.0;
};

/// sigma = sum_s ||B_s|| / (S * snr); Y_s = B_s + sigma * N(0, I).
inline NoisyObservations add_noise(const std::vector<Vector>& B, double snr, std::uint64_t seed)
{
    if (!(snr > 0.0)) throw ParameterError("add_noise: snr must be > 0");
    if (B.empty()) throw ParameterError("add_noise: no signals");
    double total = 0.0;
    for (const auto& b : B) total += b.norm();
    if (total == 0.0) throw DomainError("add_noise: all signals are zero, SNR is undefined");

    NoisyObservations out;
    out.sigma = std::isinf(snr) ? 0.0 : total / (static_cast<double>(B.size()) * snr);
    std::mt19937_64 rng(derive_seed(seed, 3));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& b : B) {
        Vector y = b;
        for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += out.sigma * normal(rng);
        out.Y.push_back(std::move(y));
    }
    return out;
}

struct SimulatedData {
    MultiSubjectDataset dataset;
    GroundTruth truth;
};

inline SimulatedData simulate(const SimConfig& config, const Geometry& geometry)
{
    SimulatedData out;
    out.dataset.leadfields = generate_leadfields(config, geometry);
    out.truth = generate_sources(config, geometry.labels);
    std::vector<Vector> B;
    for (int s = 0; s < config.S; ++s) B.push_back(out.dataset.leadfield(s) * out.truth.sources[static_cast<std::size_t>(s)]);
    auto noisy = add_noise(B, config.snr, config.seed);
    out.dataset.observations = std::move(noisy.Y);
    out.truth.noise_sigma = noisy.sigma;
    return out;
}

inline nlohmann::json to_json(const SimConfig& c)
{
    return {{"S", c.S},
            {"n", c.n},
            {"q", c.q},
            {"overlap_fraction", c.overlap_fraction},
            {"amp_range", {c.amp_min, c.amp_max}},
            {"sign_prob", c.sign_prob},
            {"snr", c.snr},
            {"shared_leadfield", c.shared_leadfield},
            {"smoothing_cm", c.smoothing_cm},
            {"individual_angle", c.individual_angle},
            {"seed", c.seed}};
}

/// Reads the fields present in j on top of the defaults in base.
inline SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig base = {})
{
    base.S = j.value("S", base.S);
    base.n = j.value("n", base.n);
    base.q = j.value("q", base.q);
    base.overlap_fraction = j.value("overlap_fraction", base.overlap_fraction);
    if (j.contains("amp_range")) {
        base.amp_min = j.at("amp_range").at(0).get<double>();
        base.amp_max = j.at("amp_range").at(1).get<double>();
    }
    base.sign_prob = j.value("sign_prob", base.sign_prob);
    base.snr = j.value("snr", base.snr);
    base.shared_leadfield = j.value("shared_leadfield", base.shared_leadfield);
    base.smoothing_cm = j.value("smoothing_cm", base.smoothing_cm);
    base.individual_angle = j.value("individual_angle", base.individual_angle);
    base.seed = j.value("seed", base.seed);
    return base;
}

/// Writes leadfields, observations and ground truth as binary matrices plus
/// a JSON sidecar (config echo, seed, sigma, active indices).
inline void save_simulation(const std::filesystem::path& dir, const SimConfig& config, const SimulatedData& sim)
{
    std::filesystem::create_directories(dir);
    nlohmann::json side;
    side["config"] = to_json(config);
    side["seed"] = config.seed;
    side["noise_sigma"] = sim.truth.noise_sigma;
    side["active_labels"] = sim.truth.active_labels;
    side["label_signs"] = sim.truth.label_signs;
    side["active_indices"] = sim.truth.indices;
    side["leadfield_model"] = config.shared_leadfield ? "synthetic smooth field (shared)"
                                                      : "synthetic smooth field with per-subject rotations";
    side["files"] = nlohmann::json::array();
    for (int s = 0; s < sim.dataset.num_subjects(); ++s) {
        const auto tag = std::to_string(s);
        io::save_matrix(dir / ("leadfield_" + tag + ".bin"), sim.dataset.leadfield(s));
        io::save_matrix(dir / ("observation_" + tag + ".bin"), sim.dataset.observation(s));
        io::save_matrix(dir / ("truth_" + tag + ".bin"), sim.truth.sources[static_cast<std::size_t>(s)]);
        side["files"].push_back({{"leadfield", "leadfield_" + tag + ".bin"},
                                 {"observation", "observation_" + tag + ".bin"},
                                 {"truth", "truth_" + tag + ".bin"}});
    }
    std::ofstream os(dir / "simulation.json");
    if (!os) throw IoError("cannot write " + (dir / "simulation.json").string());
    os << side.dump(2) << '\n';
}

} // namespace mwe
