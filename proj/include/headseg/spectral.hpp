#pragma once

#include <cstdint>
#include <filesystem>

#include <Eigen/Dense>

#include "headseg/mesh.hpp"

namespace headseg::spectral {

/// Truncated solution of L phi = lambda M phi. Eigenvalues ascend, columns of
/// `eigenvectors` are M-orthonormal and their largest-magnitude entry is
/// positive.
struct SpectralBasis {
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenvectors; // V x k
    Eigen::VectorXd mass;         // lumped mass diagonal, V

    Eigen::Index num_vertices() const { return eigenvectors.rows(); }
    Eigen::Index k() const { return eigenvalues.size(); }
};

inline constexpr int kDefaultEigenCount = 128;

struct EigenOptions {
    double tolerance = 1e-8;
    /// Cap on operator applications; 0 selects 50 * k.
    int max_iterations = 0;
    std::uint64_t seed = 0x5eed;
    int block_size = 8;
};

/// k smallest eigenpairs of the pencil (L, M) by shift-invert block Lanczos
/// with thick restarts. L must be symmetric PSD and M diagonal positive.
SpectralBasis eigensolve(const mesh::SparseOperator& L, const mesh::SparseOperator& M, int k,
                         const EigenOptions& options = {});

/// Convenience: cotan Laplacian + lumped mass of `mesh`, then eigensolve.
SpectralBasis compute_basis(const mesh::TriMesh& mesh, int k, const EigenOptions& options = {});

/// Residual norms ||L phi_i - lambda_i M phi_i||_2 for every pair.
Eigen::VectorXd residual_norms(const SpectralBasis& basis, const mesh::SparseOperator& L);

/// Phi^T M x: spectral coefficients, k x C.
Eigen::MatrixXd to_spectral(const SpectralBasis& basis, const Eigen::MatrixXd& x);

/// Per channel c: Phi diag(exp(-lambda t_c)) Phi^T M x. Linear in x.
Eigen::MatrixXd heat_diffuse(const SpectralBasis& basis, const Eigen::MatrixXd& x, const Eigen::VectorXd& times);

/// Orthogonal projection of x onto the span of the basis (heat_diffuse at t=0).
Eigen::MatrixXd project(const SpectralBasis& basis, const Eigen::MatrixXd& x);

// SPEC cache file: "SPEC", u32 version, u32 V, u32 k, f64 eigenvalues[k],
// f64 eigenvectors[V*k] row-major, f64 mass[V]; little-endian.
void save_basis(const SpectralBasis& basis, const std::filesystem::path& path);
SpectralBasis load_basis(const std::filesystem::path& path);

} // namespace headseg::spectral
