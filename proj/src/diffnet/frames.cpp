#include "headseg/diffnet.hpp"

#include <Eigen/QR>

namespace headseg::diffnet {

TangentFrames build_tangent_frames(const mesh::TriMesh& mesh)
{
    const auto normals = mesh::vertex_normals(mesh);
    const auto nbrs = mesh::vertex_neighbors(mesh);
    const std::size_t n = mesh.num_vertices();

    TangentFrames frames;
    frames.e1.resize(n);
    frames.e2.resize(n);
    frames.normal.resize(n);
    frames.isolated = normals.isolated;

    using Triplet = Eigen::Triplet<std::complex<double>>;
    std::vector<Triplet> triplets;
    for (std::size_t v = 0; v < n; ++v) {
        const bool lone = normals.isolated[v] || nbrs[v].empty();
        const Vec3 normal = lone ? Vec3::UnitZ() : normals.normals[v].normalized();
        Vec3 e1 = Vec3::UnitX() - normal.x() * normal;
        if (e1.norm() < 1e-3) e1 = Vec3::UnitY() - normal.y() * normal;
        e1.normalize();
        frames.normal[v] = normal;
        frames.e1[v] = e1;
        frames.e2[v] = normal.cross(e1);
        if (lone) {
            frames.isolated[v] = true;
            continue;
        }

        const auto& ring = nbrs[v];
        const auto m = static_cast<Eigen::Index>(ring.size());
        Eigen::MatrixX2d edges(m, 2);
        for (Eigen::Index j = 0; j < m; ++j) {
            const Vec3 d = mesh.positions[ring[j]] - mesh.positions[v];
            edges(j, 0) = d.dot(frames.e1[v]);
            edges(j, 1) = d.dot(frames.e2[v]);
        }
        // Rows of solve map edge differences f_j - f_v to (g1, g2).
        const Eigen::Matrix2d normal_eq = edges.transpose() * edges;
        Eigen::MatrixXd solve;
        if (normal_eq.determinant() > 1e-12 * normal_eq.trace() * normal_eq.trace()) {
            solve = normal_eq.inverse() * edges.transpose();
        } else {
            solve = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(edges).pseudoInverse();
        }
        std::complex<double> center = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) {
            const std::complex<double> c(solve(0, j), solve(1, j));
            triplets.emplace_back(static_cast<int>(v), ring[j], c);
            center -= c;
        }
        triplets.emplace_back(static_cast<int>(v), static_cast<int>(v), center);
    }
    frames.gradient.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    frames.gradient.setFromTriplets(triplets.begin(), triplets.end());
    return frames;
}

template <typename T>
Operators<T> make_operators(const spectral::SpectralBasis& basis, const TangentFrames& frames, int k)
{
    if (k < 1 || k > basis.k()) {
        throw ArgumentError("make_operators: requested " + std::to_string(k) + " eigenpairs but the basis has " +
                            std::to_string(basis.k()));
    }
    if (frames.gradient.rows() != basis.num_vertices()) {
        throw ArgumentError("make_operators: basis has " + std::to_string(basis.num_vertices()) +
                            " vertices but tangent frames have " + std::to_string(frames.gradient.rows()));
    }
    Operators<T> ops;
    const Eigen::MatrixXd phi = basis.eigenvectors.leftCols(k);
    ops.basis = phi.cast<T>();
    ops.basis_mass_t = (phi.transpose() * basis.mass.asDiagonal()).cast<T>();
    ops.eigenvalues = basis.eigenvalues.head(k).cast<T>();

    using Triplet = Eigen::Triplet<T>;
    std::vector<Triplet> re, im;
    re.reserve(static_cast<std::size_t>(frames.gradient.nonZeros()));
    im.reserve(static_cast<std::size_t>(frames.gradient.nonZeros()));
    for (Eigen::Index r = 0; r < frames.gradient.outerSize(); ++r) {
        for (typename decltype(frames.gradient)::InnerIterator it(frames.gradient, r); it; ++it) {
            re.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), static_cast<T>(it.value().real()));
            im.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), static_cast<T>(it.value().imag()));
        }
    }
    const auto n = frames.gradient.rows();
    ops.grad_re.resize(n, n);
    ops.grad_im.resize(n, n);
    ops.grad_re.setFromTriplets(re.begin(), re.end());
    ops.grad_im.setFromTriplets(im.begin(), im.end());
    return ops;
}

template Operators<float> make_operators<float>(const spectral::SpectralBasis&, const TangentFrames&, int);
template Operators<double> make_operators<double>(const spectral::SpectralBasis&, const TangentFrames&, int);

} // namespace headseg::diffnet
