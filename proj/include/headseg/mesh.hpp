#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include <Eigen/Sparse>

#include "headseg/common.hpp"

namespace headseg::mesh {

using Face = std::array<int, 3>;

/// Indexed triangle mesh. Positions are in millimeters; colors, when present,
/// hold one RGB triple in [0,1] per vertex.
struct TriMesh {
    std::vector<Vec3> positions;
    std::vector<Face> faces;
    std::vector<Vec3> colors;

    std::size_t num_vertices() const { return positions.size(); }
    std::size_t num_faces() const { return faces.size(); }
    bool has_colors() const { return !colors.empty(); }
};

using SparseOperator = Eigen::SparseMatrix<double>;

enum class MeshFormat { obj, ply_ascii, ply_binary };

inline constexpr double kMinFaceArea = 1e-12;

/// Throws ValidationError listing offending faces (out-of-range or repeated
/// indices, area below kMinFaceArea) and non-finite coordinates.
void validate(const TriMesh& mesh);

/// Loads OBJ or PLY, choosing by extension. Vertex order is preserved.
TriMesh load_mesh(const std::filesystem::path& path);
TriMesh load_mesh(const std::filesystem::path& path, MeshFormat format);
void save_mesh(const TriMesh& mesh, const std::filesystem::path& path, MeshFormat format);

double face_area(const TriMesh& mesh, std::size_t f);
Vec3 face_normal(const TriMesh& mesh, std::size_t f);
double total_area(const TriMesh& mesh);

/// Cotangent Laplacian, positive semi-definite sign convention. Cotangents are
/// clamped to [cot(179 deg), cot(1 deg)]; contributions accumulate per face so
/// non-manifold edges are accepted.
SparseOperator cotan_laplacian(const TriMesh& mesh);

/// Barycentric lumped mass: each vertex receives a third of every incident
/// face area.
SparseOperator lumped_mass(const TriMesh& mesh);
Eigen::VectorXd lumped_mass_diagonal(const TriMesh& mesh);

struct VertexNormals {
    std::vector<Vec3> normals;
    /// True for vertices without incident faces; their normal is zero.
    std::vector<bool> isolated;
};

/// Area-weighted average of incident face normals.
VertexNormals vertex_normals(const TriMesh& mesh);

/// Vertex adjacency lists (sorted, unique) derived from faces.
std::vector<std::vector<int>> vertex_neighbors(const TriMesh& mesh);

/// Connected components over face adjacency; returns a component id per vertex.
std::vector<int> connected_components(const TriMesh& mesh, int* count = nullptr);

/// Unit icosphere refined `level` times by midpoint subdivision, vertices
/// projected to the sphere.
TriMesh icosphere(int level);

/// Midpoint subdivision without projection: new vertices lie on the original
/// triangles.
TriMesh subdivide_linear(const TriMesh& mesh);

/// Appends `other` to `mesh`, offsetting face indices. Colors are kept only if
/// both inputs have them.
void append(TriMesh& mesh, const TriMesh& other);

/// Returns mesh with vertex i moved to position perm[i]; faces remapped.
TriMesh permute_vertices(const TriMesh& mesh, const std::vector<int>& perm);

} // namespace headseg::mesh
