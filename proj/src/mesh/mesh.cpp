#include "headseg/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

namespace headseg::mesh {

namespace {

const double kCotMax = 1.0 / std::tan(1.0 * std::numbers::pi / 180.0);
const double kCotMin = 1.0 / std::tan(179.0 * std::numbers::pi / 180.0);

double clamped_cot(const Vec3& a, const Vec3& b)
{
    const double s = a.cross(b).norm();
    const double c = a.dot(b);
    if (s == 0.0) return c >= 0 ? kCotMax : kCotMin;
    return std::clamp(c / s, kCotMin, kCotMax);
}

} // namespace

void validate(const TriMesh& mesh)
{
    const auto nv = static_cast<long long>(mesh.num_vertices());
    for (std::size_t i = 0; i < mesh.positions.size(); ++i) {
        if (!mesh.positions[i].allFinite()) {
            throw ValidationError("vertex " + std::to_string(i) + " has non-finite coordinates");
        }
    }
    if (mesh.has_colors() && mesh.colors.size() != mesh.positions.size()) {
        throw ValidationError("color count does not match vertex count");
    }

    std::vector<std::string> bad;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& t = mesh.faces[f];
        std::string reason;
        for (int k = 0; k < 3; ++k) {
            if (t[k] < 0 || t[k] >= nv) {
                reason = "index " + std::to_string(t[k]) + " out of range [0," + std::to_string(nv) + ")";
            }
        }
        if (reason.empty() && (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])) reason = "repeated vertex index";
        if (reason.empty() && face_area(mesh, f) <= kMinFaceArea) reason = "zero area";
        if (!reason.empty()) {
            bad.push_back("face " + std::to_string(f) + ": " + reason);
        }
    }
    if (!bad.empty()) {
        std::ostringstream msg;
        msg << bad.size() << " invalid face(s)";
        for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 10); ++i) msg << "\n  " << bad[i];
        if (bad.size() > 10) msg << "\n  ...";
        throw ValidationError(msg.str());
    }
}

double face_area(const TriMesh& mesh, std::size_t f)
{
    const auto& t = mesh.faces[f];
    const Vec3& a = mesh.positions[t[0]];
    return 0.5 * (mesh.positions[t[1]] - a).cross(mesh.positions[t[2]] - a).norm();
}

Vec3 face_normal(const TriMesh& mesh, std::size_t f)
{
    const auto& t = mesh.faces[f];
    const Vec3& a = mesh.positions[t[0]];
    return (mesh.positions[t[1]] - a).cross(mesh.positions[t[2]] - a).normalized();
}

double total_area(const TriMesh& mesh)
{
    double s = 0.0;
    for (std::size_t f = 0; f < mesh.num_faces(); ++f) s += face_area(mesh, f);
    return s;
}

SparseOperator cotan_laplacian(const TriMesh& mesh)
{
    const auto n = static_cast<Eigen::Index>(mesh.num_vertices());
    std::vector<Eigen::Triplet<double>> off;
    off.reserve(mesh.num_faces() * 6);
    for (const auto& t : mesh.faces) {
        for (int c = 0; c < 3; ++c) {
            const int i = t[c];
            const int j = t[(c + 1) % 3];
            const int k = t[(c + 2) % 3];
            const Vec3& p = mesh.positions[i];
            const double w = 0.5 * clamped_cot(mesh.positions[j] - p, mesh.positions[k] - p);
            off.emplace_back(j, k, -w);
            off.emplace_back(k, j, -w);
        }
    }
    SparseOperator offdiag(n, n);
    offdiag.setFromTriplets(off.begin(), off.end());

    // Diagonal from the summed off-diagonal entries so each row sums to zero.
    std::vector<Eigen::Triplet<double>> all;
    all.reserve(static_cast<std::size_t>(offdiag.nonZeros()) + mesh.num_vertices());
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    for (Eigen::Index col = 0; col < offdiag.outerSize(); ++col) {
        for (SparseOperator::InnerIterator it(offdiag, col); it; ++it) {
            all.emplace_back(it.row(), it.col(), it.value());
            diag[it.row()] -= it.value();
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) all.emplace_back(i, i, diag[i]);
    SparseOperator L(n, n);
    L.setFromTriplets(all.begin(), all.end());
    L.makeCompressed();
    return L;
}

Eigen::VectorXd lumped_mass_diagonal(const TriMesh& mesh)
{
    Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.num_vertices()));
    for (std::size_t f = 0; f < mesh.num_faces(); ++f) {
        const double a = face_area(mesh, f) / 3.0;
        for (int v : mesh.faces[f]) m[v] += a;
    }
    return m;
}

SparseOperator lumped_mass(const TriMesh& mesh)
{
    const Eigen::VectorXd m = lumped_mass_diagonal(mesh);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        if (!(m[i] > 0.0)) {
            throw ValidationError("vertex " + std::to_string(i) + " has no incident faces; lumped mass is not positive");
        }
    }
    SparseOperator M(m.size(), m.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) trip.emplace_back(i, i, m[i]);
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

VertexNormals vertex_normals(const TriMesh& mesh)
{
    VertexNormals out;
    out.normals.assign(mesh.num_vertices(), Vec3::Zero());
    out.isolated.assign(mesh.num_vertices(), true);
    for (const auto& t : mesh.faces) {
        const Vec3& a = mesh.positions[t[0]];
        // Cross product length is twice the area, which gives area weighting.
        const Vec3 n = (mesh.positions[t[1]] - a).cross(mesh.positions[t[2]] - a);
        for (int v : t) {
            out.normals[v] += n;
            out.isolated[v] = false;
        }
    }
    for (auto& n : out.normals) {
        const double len = n.norm();
        if (len > 0.0) n /= len;
    }
    return out;
}

std::vector<std::vector<int>> vertex_neighbors(const TriMesh& mesh)
{
    std::vector<std::vector<int>> nbrs(mesh.num_vertices());
    for (const auto& t : mesh.faces) {
        for (int c = 0; c < 3; ++c) {
            nbrs[t[c]].push_back(t[(c + 1) % 3]);
            nbrs[t[c]].push_back(t[(c + 2) % 3]);
        }
    }
    for (auto& n : nbrs) {
        std::sort(n.begin(), n.end());
        n.erase(std::unique(n.begin(), n.end()), n.end());
    }
    return nbrs;
}

std::vector<int> connected_components(const TriMesh& mesh, int* count)
{
    std::vector<int> parent(mesh.num_vertices());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (const auto& t : mesh.faces) {
        for (int c = 1; c < 3; ++c) {
            const int a = find(t[0]);
            const int b = find(t[c]);
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    }
    std::vector<int> id(mesh.num_vertices(), -1);
    std::vector<int> root_id(mesh.num_vertices(), -1);
    int n = 0;
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
        const int r = find(static_cast<int>(v));
        if (root_id[r] < 0) root_id[r] = n++;
        id[v] = root_id[r];
    }
    if (count) *count = n;
    return id;
}

namespace {

// Midpoint refinement shared by icosphere and subdivide_linear.
TriMesh midpoint_refine(const TriMesh& mesh)
{
    TriMesh out;
    out.positions = mesh.positions;
    out.colors = mesh.colors;
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
        const auto key = std::minmax(a, b);
        auto it = mid.find(key);
        if (it != mid.end()) return it->second;
        const int idx = static_cast<int>(out.positions.size());
        out.positions.push_back(0.5 * (mesh.positions[a] + mesh.positions[b]));
        if (mesh.has_colors()) out.colors.push_back(0.5 * (mesh.colors[a] + mesh.colors[b]));
        mid.emplace(key, idx);
        return idx;
    };
    out.faces.reserve(mesh.num_faces() * 4);
    for (const auto& t : mesh.faces) {
        const int ab = midpoint(t[0], t[1]);
        const int bc = midpoint(t[1], t[2]);
        const int ca = midpoint(t[2], t[0]);
        out.faces.push_back({t[0], ab, ca});
        out.faces.push_back({t[1], bc, ab});
        out.faces.push_back({t[2], ca, bc});
        out.faces.push_back({ab, bc, ca});
    }
    return out;
}

} // namespace

TriMesh icosphere(int level)
{
    const double p = (1.0 + std::sqrt(5.0)) / 2.0;
    TriMesh m;
    m.positions = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0}, {0, -1, p}, {0, 1, p},
                   {0, -1, -p}, {0, 1, -p}, {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
               {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (auto& v : m.positions) v.normalize();
    for (int l = 0; l < level; ++l) {
        m = midpoint_refine(m);
        for (auto& v : m.positions) v.normalize();
    }
    return m;
}

TriMesh subdivide_linear(const TriMesh& mesh)
{
    return midpoint_refine(mesh);
}

void append(TriMesh& mesh, const TriMesh& other)
{
    const bool keep_colors = (mesh.has_colors() || mesh.positions.empty()) && other.has_colors();
    const int offset = static_cast<int>(mesh.positions.size());
    mesh.positions.insert(mesh.positions.end(), other.positions.begin(), other.positions.end());
    for (auto t : other.faces) {
        for (int& v : t) v += offset;
        mesh.faces.push_back(t);
    }
    if (keep_colors) {
        mesh.colors.insert(mesh.colors.end(), other.colors.begin(), other.colors.end());
    } else {
        mesh.colors.clear();
    }
}

TriMesh permute_vertices(const TriMesh& mesh, const std::vector<int>& perm)
{
    if (perm.size() != mesh.num_vertices()) throw ArgumentError("permutation size mismatch");
    TriMesh out;
    out.positions.resize(mesh.num_vertices());
    if (mesh.has_colors()) out.colors.resize(mesh.num_vertices());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.positions[perm[i]] = mesh.positions[i];
        if (mesh.has_colors()) out.colors[perm[i]] = mesh.colors[i];
    }
    out.faces = mesh.faces;
    for (auto& t : out.faces) {
        for (int& v : t) v = perm[v];
    }
    return out;
}

} // namespace headseg::mesh
