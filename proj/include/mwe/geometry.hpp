#pragma once

// Metric space over mesh vertices: graph-geodesic costs (cm), Gibbs kernels
// and a label partition standing in for an atlas parcellation.

#include <algorithm>
#include <array>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mwe/errors.hpp"

namespace mwe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Mesh {
    std::vector<Eigen::Vector3d> vertices; // cm
    std::vector<std::array<int, 3>> triangles;

    [[nodiscard]] int num_vertices() const { return static_cast<int>(vertices.size()); }
};

/// Symmetric nonnegative p x p matrix of geodesic distances in cm.
struct CostMatrix {
    Matrix values;

    [[nodiscard]] int size() const { return static_cast<int>(values.rows()); }
    [[nodiscard]] double operator()(int i, int j) const { return values(i, j); }
    [[nodiscard]] double max() const { return values.size() ? values.maxCoeff() : 0.0; }

    /// Median of the off-diagonal entries; used to scale entropic grids.
    [[nodiscard]] double median_offdiagonal() const
    {
        std::vector<double> vals;
        const int p = size();
        vals.reserve(static_cast<std::size_t>(p) * (p - 1) / 2);
        for (int j = 0; j < p; ++j)
            for (int i = j + 1; i < p; ++i) vals.push_back(values(i, j));
        if (vals.empty()) return 0.0;
        auto mid = vals.begin() + static_cast<std::ptrdiff_t>(vals.size() / 2);
        std::nth_element(vals.begin(), mid, vals.end());
        return *mid;
    }
};

/// K = exp(-M / epsilon). Keeps a copy of M so that stabilized Sinkhorn
/// iterations can rebuild absorbed kernels without going through log(K).
struct GibbsKernel {
    Matrix K;
    Matrix cost;
    double epsilon = 1.0;
    double total = 0.0; // sum of all entries of K

    [[nodiscard]] int size() const { return static_cast<int>(K.rows()); }
};

struct LabelPartition {
    std::vector<int> labels; // vertex -> label id in [0, num_labels)
    int num_labels = 0;

    [[nodiscard]] std::vector<int> members(int label) const
    {
        std::vector<int> out;
        for (int v = 0; v < static_cast<int>(labels.size()); ++v)
            if (labels[v] == label) out.push_back(v);
        return out;
    }
};

struct WeightedEdge {
    int to;
    double length;
};

using EdgeGraph = std::vector<std::vector<WeightedEdge>>;

/// Undirected edge graph of a triangle mesh with Euclidean edge lengths.
inline EdgeGraph edge_graph(const Mesh& mesh)
{
    const int p = mesh.num_vertices();
    std::vector<std::vector<int>> nbrs(static_cast<std::size_t>(p));
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        const auto& tri = mesh.triangles[t];
        for (int k = 0; k < 3; ++k) {
            if (tri[k] < 0 || tri[k] >= p) {
                std::ostringstream msg;
                msg << "triangle " << t << " references vertex " << tri[k] << " but the mesh has " << p
                    << " vertices";
                throw GeometryError(msg.str());
            }
        }
        for (int k = 0; k < 3; ++k) {
            const int a = tri[k];
            const int b = tri[(k + 1) % 3];
            if (a == b) continue;
            nbrs[a].push_back(b);
            nbrs[b].push_back(a);
        }
    }
    EdgeGraph graph(static_cast<std::size_t>(p));
    for (int v = 0; v < p; ++v) {
        auto& nb = nbrs[v];
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
        graph[v].reserve(nb.size());
        for (int w : nb) graph[v].push_back({w, (mesh.vertices[v] - mesh.vertices[w]).norm()});
    }
    return graph;
}

namespace detail {

inline std::vector<int> reachable_from(const EdgeGraph& graph, int start)
{
    std::vector<char> seen(graph.size(), 0);
    std::vector<int> order{start};
    seen[start] = 1;
    for (std::size_t head = 0; head < order.size(); ++head)
        for (const auto& e : graph[order[head]])
            if (!seen[e.to]) {
                seen[e.to] = 1;
                order.push_back(e.to);
            }
    return order;
}

inline void require_connected(const EdgeGraph& graph)
{
    const int p = static_cast<int>(graph.size());
    if (p == 0) throw GeometryError("mesh has no vertices");
    const auto reached = reachable_from(graph, 0);
    if (static_cast<int>(reached.size()) == p) return;

    std::vector<char> seen(graph.size(), 0);
    for (int v : reached) seen[v] = 1;
    const int first = static_cast<int>(std::find(seen.begin(), seen.end(), 0) - seen.begin());
    auto isolated = reachable_from(graph, first);
    std::sort(isolated.begin(), isolated.end());
    std::ostringstream msg;
    msg << "mesh edge graph is disconnected: component of " << isolated.size()
        << " vertices {";
    for (std::size_t k = 0; k < isolated.size() && k < 10; ++k) msg << (k ? ", " : "") << isolated[k];
    if (isolated.size() > 10) msg << ", ...";
    msg << "} is isolated from vertex 0";
    throw GeometryError(msg.str());
}

} // namespace detail

/// All-pairs shortest paths on the mesh edge graph (Dijkstra from every vertex).
inline CostMatrix build_geodesic_costs(const Mesh& mesh)
{
    const EdgeGraph graph = edge_graph(mesh);
    detail::require_connected(graph);
    const int p = mesh.num_vertices();

    CostMatrix M{Matrix::Zero(p, p)};
    using Item = std::pair<double, int>;
    std::vector<double> dist(static_cast<std::size_t>(p));
    for (int src = 0; src < p; ++src) {
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
        dist[src] = 0.0;
        heap.emplace(0.0, src);
        while (!heap.empty()) {
            const auto [d, v] = heap.top();
            heap.pop();
            if (d > dist[v]) continue;
            for (const auto& e : graph[v]) {
                const double nd = d + e.length;
                if (nd < dist[e.to]) {
                    dist[e.to] = nd;
                    heap.emplace(nd, e.to);
                }
            }
        }
        for (int j = 0; j < p; ++j) M.values(src, j) = dist[j];
    }
    // Dijkstra from i and from j can disagree in the last ulp; pin exact symmetry.
    for (int j = 0; j < p; ++j)
        for (int i = j + 1; i < p; ++i) {
            const double d = std::min(M.values(i, j), M.values(j, i));
            M.values(i, j) = d;
            M.values(j, i) = d;
        }
    return M;
}

/// Rejects kernels with a row whose off-diagonal entries all fall below the
/// smallest normal double, since Sinkhorn divides by K v.
inline GibbsKernel gibbs_kernel(const CostMatrix& M, double epsilon)
{
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw ParameterError("gibbs_kernel: epsilon must be positive, got " + std::to_string(epsilon));
    GibbsKernel out;
    out.epsilon = epsilon;
    out.cost = M.values;
    out.K = (-M.values / epsilon).array().exp().matrix();
    out.total = out.K.sum();

    const int p = M.size();
    if (p > 1) {
        for (int i = 0; i < p; ++i) {
            double row_max = 0.0;
            double nearest = std::numeric_limits<double>::infinity();
            for (int j = 0; j < p; ++j) {
                if (j == i) continue;
                row_max = std::max(row_max, out.K(i, j));
                nearest = std::min(nearest, M.values(i, j));
            }
            if (row_max < DBL_MIN) {
                std::ostringstream msg;
                msg << "gibbs_kernel: row " << i << " underflows (nearest neighbour at " << nearest
                    << " cm, epsilon = " << epsilon << "); use epsilon > " << nearest / 700.0;
                throw ParameterError(msg.str());
            }
        }
    }
    return out;
}

/// Multi-source BFS growth from q_labels seed vertices. Ties go to the lower
/// seed index, so every label is an edge-connected region.
inline LabelPartition make_label_partition(const Mesh& mesh, int q_labels, std::uint64_t seed)
{
    const int p = mesh.num_vertices();
    if (q_labels < 1 || q_labels > p)
        throw ParameterError("make_label_partition: q_labels must be in [1, " + std::to_string(p) + "], got " +
                             std::to_string(q_labels));
    const EdgeGraph graph = edge_graph(mesh);
    detail::require_connected(graph);

    // Partial Fisher-Yates on raw engine output keeps draws identical across standard libraries.
    std::mt19937_64 rng(seed);
    std::vector<int> perm(static_cast<std::size_t>(p));
    for (int v = 0; v < p; ++v) perm[v] = v;
    for (int k = 0; k < q_labels; ++k) {
        const auto span = static_cast<std::uint64_t>(p - k);
        const int pick = k + static_cast<int>(rng() % span);
        std::swap(perm[k], perm[pick]);
    }

    LabelPartition out;
    out.num_labels = q_labels;
    out.labels.assign(static_cast<std::size_t>(p), -1);
    std::queue<int> frontier;
    for (int k = 0; k < q_labels; ++k) {
        out.labels[perm[k]] = k;
        frontier.push(perm[k]);
    }
    while (!frontier.empty()) {
        const int v = frontier.front();
        frontier.pop();
        for (const auto& e : graph[v])
            if (out.labels[e.to] < 0) {
                out.labels[e.to] = out.labels[v];
                frontier.push(e.to);
            }
    }
    return out;
}

/// Flat triangulated nx x ny grid with the given spacing (cm), two triangles per cell.
inline Mesh grid_mesh(int nx, int ny, double spacing = 1.0)
{
    if (nx < 1 || ny < 1 || !(spacing > 0.0)) throw ParameterError("grid_mesh: invalid dimensions");
    Mesh mesh;
    mesh.vertices.reserve(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) mesh.vertices.emplace_back(i * spacing, j * spacing, 0.0);
    auto id = [nx](int i, int j) { return j * nx + i; };
    for (int j = 0; j + 1 < ny; ++j)
        for (int i = 0; i + 1 < nx; ++i) {
            mesh.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            mesh.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    if (nx == 1 || ny == 1) {
        // Degenerate strip: encode consecutive edges as collapsed triangles.
        const int p = nx * ny;
        for (int v = 0; v + 1 < p; ++v) mesh.triangles.push_back({v, v + 1, v + 1});
    }
    return mesh;
}

/// Geometry bundle used by the solvers and the benchmark.
struct Geometry {
    Mesh mesh;
    CostMatrix costs;
    LabelPartition labels;

    [[nodiscard]] int size() const { return costs.size(); }
};

inline Geometry build_geometry(Mesh mesh, int q_labels, std::uint64_t seed)
{
    Geometry g;
    g.costs = build_geodesic_costs(mesh);
    g.labels = make_label_partition(mesh, q_labels, seed);
    g.mesh = std::move(mesh);
    return g;
}

} // namespace mwe
