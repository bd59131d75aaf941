#pragma once

// Transportation simplex (network simplex on the complete bipartite graph).
// Basis: spanning tree of m + n - 1 cells, degenerate zero-flow cells kept.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mwe/errors.hpp"

namespace mwe {

struct TransportationSolution {
    double cost = 0.0;
    Eigen::MatrixXd flow;
    int pivots = 0;
};

inline TransportationSolution solve_transportation(const std::vector<double>& supply, const std::vector<double>& demand,
                                                   const Eigen::MatrixXd& cost)
{
    const int m = static_cast<int>(supply.size());
    const int n = static_cast<int>(demand.size());
    if (cost.rows() != m || cost.cols() != n) throw ParameterError("solve_transportation: cost shape mismatch");
    TransportationSolution out;
    out.flow = Eigen::MatrixXd::Zero(m, n);
    if (m == 0 || n == 0) return out;

    // Northwest corner start; exhausting a row and a column at once still
    // advances only one index, leaving a zero basic cell behind.
    struct Cell {
        int i, j;
    };
    std::vector<Cell> basis;
    std::vector<double> s(supply), d(demand);
    {
        int i = 0, j = 0;
        while (i < m && j < n) {
            const double q = std::min(s[i], d[j]);
            out.flow(i, j) = q;
            basis.push_back({i, j});
            s[i] -= q;
            d[j] -= q;
            if (i == m - 1 && j == n - 1) break;
            if ((s[i] <= d[j] && i < m - 1) || j == n - 1)
                ++i;
            else
                ++j;
        }
    }

    const double scale = std::max(1.0, cost.cwiseAbs().maxCoeff());
    const double tol = 1e-12 * scale;
    const int nodes = m + n;
    std::vector<double> pot(static_cast<std::size_t>(nodes));
    std::vector<int> parent(static_cast<std::size_t>(nodes)), parent_cell(static_cast<std::size_t>(nodes));
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(nodes));
    const int max_pivots = 50 * (m + n) * std::max(m, n) + 1000;

    for (;;) {
        // Tree adjacency: row node i, column node m + j.
        for (auto& a : adj) a.clear();
        for (int k = 0; k < static_cast<int>(basis.size()); ++k) {
            adj[basis[k].i].push_back(k);
            adj[m + basis[k].j].push_back(k);
        }
        // Potentials: pot_row(i) + pot_col(j) = c_ij on basic cells; rooted at row 0.
        std::fill(parent.begin(), parent.end(), -2);
        std::vector<int> order{0};
        parent[0] = -1;
        pot[0] = 0.0;
        for (std::size_t h = 0; h < order.size(); ++h) {
            const int node = order[h];
            for (int k : adj[node]) {
                const int other = node < m ? m + basis[k].j : basis[k].i;
                if (parent[other] != -2) continue;
                parent[other] = node;
                parent_cell[other] = k;
                pot[other] = cost(basis[k].i, basis[k].j) - pot[node];
                order.push_back(other);
            }
        }
        if (static_cast<int>(order.size()) != nodes) throw NumericalError("solve_transportation: basis is not a tree");

        int ei = -1, ej = -1;
        double best = -tol;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double rc = cost(i, j) - pot[i] - pot[m + j];
                if (rc < best) {
                    best = rc;
                    ei = i;
                    ej = j;
                }
            }
        if (ei < 0) break;
        if (++out.pivots > max_pivots) throw NumericalError("solve_transportation: pivot limit reached");

        // Cycle: entering cell (+), then the tree path from column ej back to row ei.
        // Walk both endpoints up to their common ancestor.
        auto depth_of = [&](int node) {
            int dpt = 0;
            while (parent[node] >= 0) {
                node = parent[node];
                ++dpt;
            }
            return dpt;
        };
        int a = ei, b = m + ej;
        int da = depth_of(a), db = depth_of(b);
        std::vector<int> path_a, path_b; // cells on the way up from each side
        while (da > db) {
            path_a.push_back(parent_cell[a]);
            a = parent[a];
            --da;
        }
        while (db > da) {
            path_b.push_back(parent_cell[b]);
            b = parent[b];
            --db;
        }
        while (a != b) {
            path_a.push_back(parent_cell[a]);
            a = parent[a];
            path_b.push_back(parent_cell[b]);
            b = parent[b];
        }
        // Path from column ej to row ei: path_b (from column side) then reversed path_a.
        std::vector<int> cycle(path_b);
        cycle.insert(cycle.end(), path_a.rbegin(), path_a.rend());
        // Cells alternate -, +, -, ... starting next to the entering cell on the column side.
        double theta = std::numeric_limits<double>::infinity();
        int leave = -1;
        for (std::size_t k = 0; k < cycle.size(); k += 2) {
            const Cell& c = basis[static_cast<std::size_t>(cycle[k])];
            if (out.flow(c.i, c.j) < theta) {
                theta = out.flow(c.i, c.j);
                leave = cycle[k];
            }
        }
        for (std::size_t k = 0; k < cycle.size(); ++k) {
            const Cell& c = basis[static_cast<std::size_t>(cycle[k])];
            out.flow(c.i, c.j) += (k % 2 == 0) ? -theta : theta;
        }
        out.flow(ei, ej) += theta;
        const Cell gone = basis[static_cast<std::size_t>(leave)];
        out.flow(gone.i, gone.j) = 0.0;
        basis[static_cast<std::size_t>(leave)] = {ei, ej};
    }

    out.cost = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.cost += out.flow(i, j) * cost(i, j);
    return out;
}

} // namespace mwe
