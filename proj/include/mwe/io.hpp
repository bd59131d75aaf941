#pragma once

// File formats: OFF meshes, dense little-endian float64 matrices.
//
// Cost matrix file:   uint64 p | p*p float64, row-major
// General matrix file: uint64 rows | uint64 cols | rows*cols float64, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"

namespace mwe::io {

namespace detail {

template <typename T>
T to_little(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
        std::memcpy(&v, buf, sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::ostream& os, T v)
{
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what)
{
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated binary matrix: " + what);
    return to_little(v);
}

inline void write_values(std::ostream& os, const Matrix& m)
{
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(os, m(i, j));
}

inline Matrix read_values(std::istream& is, std::uint64_t rows, std::uint64_t cols, const std::string& what)
{
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>(is, what);
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in binary matrix: " + what);
    return m;
}

inline std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out)
{
    std::ofstream os(path, mode);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in)
{
    std::ifstream is(path, mode);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return is;
}

} // namespace detail

inline void write_cost_matrix(std::ostream& os, const CostMatrix& M)
{
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(M.size()));
    detail::write_values(os, M.values);
}

inline CostMatrix read_cost_matrix(std::istream& is)
{
    const auto p = detail::get<std::uint64_t>(is, "cost header");
    return CostMatrix{detail::read_values(is, p, p, "cost matrix")};
}

inline void save_cost_matrix(const std::filesystem::path& path, const CostMatrix& M)
{
    auto os = detail::open_out(path, std::ios::binary);
    write_cost_matrix(os, M);
}

inline CostMatrix load_cost_matrix(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, std::ios::binary);
    return read_cost_matrix(is);
}

inline void write_matrix(std::ostream& os, const Matrix& m)
{
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    detail::write_values(os, m);
}

inline Matrix read_matrix(std::istream& is)
{
    const auto rows = detail::get<std::uint64_t>(is, "rows");
    const auto cols = detail::get<std::uint64_t>(is, "cols");
    return detail::read_values(is, rows, cols, "matrix");
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m)
{
    auto os = detail::open_out(path, std::ios::binary);
    write_matrix(os, m);
}

inline Matrix load_matrix(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, std::ios::binary);
    return read_matrix(is);
}

/// OFF reader. Accepts an optional "OFF" magic line, "#" comments, faces
/// written either as "3 i j k" or "i j k". Polygons with more corners are
/// fan-triangulated.
inline Mesh read_off(std::istream& is)
{
    std::vector<std::string> lines;
    for (std::string line; std::getline(is, line);) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        lines.push_back(line);
    }
    std::size_t at = 0;
    if (at < lines.size()) {
        std::istringstream head(lines[at]);
        std::string magic;
        head >> magic;
        if (magic == "OFF") {
            std::string rest;
            std::getline(head, rest);
            if (rest.find_first_not_of(" \t\r") == std::string::npos)
                ++at;
            else
                lines[at] = rest;
        }
    }
    if (at >= lines.size()) throw IoError("OFF: missing counts line");
    long nv = -1, nf = -1;
    {
        std::istringstream counts(lines[at++]);
        if (!(counts >> nv >> nf) || nv < 0 || nf < 0) throw IoError("OFF: bad counts line");
    }
    if (lines.size() < at + static_cast<std::size_t>(nv + nf)) throw IoError("OFF: file shorter than declared counts");

    Mesh mesh;
    mesh.vertices.reserve(static_cast<std::size_t>(nv));
    for (long v = 0; v < nv; ++v) {
        std::istringstream ls(lines[at++]);
        double x, y, z;
        if (!(ls >> x >> y >> z)) throw IoError("OFF: bad vertex line " + std::to_string(v));
        mesh.vertices.emplace_back(x, y, z);
    }
    for (long f = 0; f < nf; ++f) {
        std::istringstream ls(lines[at++]);
        std::vector<long> ints;
        for (long k; ls >> k;) ints.push_back(k);
        std::vector<long> corners;
        if (ints.size() == 3)
            corners = ints;
        else if (!ints.empty() && ints[0] >= 3 && ints.size() >= static_cast<std::size_t>(ints[0] + 1))
            corners.assign(ints.begin() + 1, ints.begin() + 1 + ints[0]);
        else
            throw IoError("OFF: bad face line " + std::to_string(f));
        for (std::size_t k = 1; k + 1 < corners.size(); ++k)
            mesh.triangles.push_back({static_cast<int>(corners[0]), static_cast<int>(corners[k]),
                                      static_cast<int>(corners[k + 1])});
    }
    return mesh;
}

inline void write_off(std::ostream& os, const Mesh& mesh)
{
    os << "OFF\n" << mesh.vertices.size() << ' ' << mesh.triangles.size() << " 0\n";
    os.precision(17);
    for (const auto& v : mesh.vertices) os << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& t : mesh.triangles) os << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
}

inline Mesh load_off(const std::filesystem::path& path)
{
    auto is = detail::open_in(path);
    return read_off(is);
}

inline void save_off(const std::filesystem::path& path, const Mesh& mesh)
{
    auto os = detail::open_out(path);
    write_off(os, mesh);
}

} // namespace mwe::io
