#include <cmath>

#include "headseg/spectral.hpp"

namespace headseg::spectral {

Eigen::MatrixXd to_spectral(const SpectralBasis& basis, const Eigen::MatrixXd& x)
{
    if (x.rows() != basis.num_vertices()) throw ArgumentError("to_spectral: row count does not match vertex count");
    return basis.eigenvectors.transpose() * (basis.mass.asDiagonal() * x);
}

Eigen::MatrixXd heat_diffuse(const SpectralBasis& basis, const Eigen::MatrixXd& x, const Eigen::VectorXd& times)
{
    if (times.size() != x.cols()) throw ArgumentError("heat_diffuse: need one time per channel");
    for (Eigen::Index c = 0; c < times.size(); ++c) {
        if (!(times[c] >= 0.0)) throw ArgumentError("heat_diffuse: diffusion times must be non-negative");
    }
    Eigen::MatrixXd coeffs = to_spectral(basis, x);
    for (Eigen::Index c = 0; c < coeffs.cols(); ++c) {
        coeffs.col(c).array() *= (-basis.eigenvalues.array() * times[c]).exp();
    }
    return basis.eigenvectors * coeffs;
}

Eigen::MatrixXd project(const SpectralBasis& basis, const Eigen::MatrixXd& x)
{
    return basis.eigenvectors * to_spectral(basis, x);
}

void save_basis(const SpectralBasis& basis, const std::filesystem::path& path)
{
    const auto n = static_cast<std::size_t>(basis.num_vertices());
    const auto k = static_cast<std::size_t>(basis.k());
    std::vector<char> out;
    out.reserve(16 + 8 * (k + n * k + n));
    bin::put_magic(out, "SPEC");
    bin::put_u32(out, 1);
    bin::put_u32(out, static_cast<std::uint32_t>(n));
    bin::put_u32(out, static_cast<std::uint32_t>(k));
    for (std::size_t j = 0; j < k; ++j) bin::put_f64(out, basis.eigenvalues[static_cast<Eigen::Index>(j)]);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            bin::put_f64(out, basis.eigenvectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        }
    }
    for (std::size_t i = 0; i < n; ++i) bin::put_f64(out, basis.mass[static_cast<Eigen::Index>(i)]);
    bin::write_file_atomic(path, out);
}

SpectralBasis load_basis(const std::filesystem::path& path)
{
    bin::Reader r(bin::read_file(path), path.string());
    r.expect_magic("SPEC");
    const auto version = r.u32();
    if (version != 1) throw FormatError(path.string() + ": unsupported SPEC version " + std::to_string(version));
    const auto n = static_cast<Eigen::Index>(r.u32());
    const auto k = static_cast<Eigen::Index>(r.u32());
    r.need(8 * static_cast<std::size_t>(k + n * k + n), "SPEC payload");
    SpectralBasis b;
    b.eigenvalues.resize(k);
    b.eigenvectors.resize(n, k);
    b.mass.resize(n);
    for (Eigen::Index j = 0; j < k; ++j) b.eigenvalues[j] = r.f64();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) b.eigenvectors(i, j) = r.f64();
    }
    for (Eigen::Index i = 0; i < n; ++i) b.mass[i] = r.f64();
    return b;
}

} // namespace headseg::spectral
