#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include "headseg/spectral.hpp"

namespace headseg::spectral {

namespace {

using SpMat = mesh::SparseOperator;

struct Eigenpairs {
    Eigen::VectorXd values;
    Eigen::MatrixXd vectors;
};

Eigenpairs dense_solve(const SpMat& L, const Eigen::VectorXd& m)
{
    const Eigen::MatrixXd Ld = Eigen::MatrixXd(L);
    const Eigen::MatrixXd Md = m.asDiagonal();
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(Ld, Md);
    if (es.info() != Eigen::Success) throw ConvergenceError("dense generalized eigensolve failed", {});
    return {es.eigenvalues(), es.eigenvectors()};
}

// Shift-invert block Lanczos with thick (Krylov-Schur style) restarts and full
// M-orthogonalization. Rayleigh-Ritz is done explicitly on Q^T M Op Q, so the
// restart only needs the kept Ritz vectors plus the next Krylov block.
class BlockKrylov {
public:
    BlockKrylov(const SpMat& L, const Eigen::VectorXd& m, int k, const EigenOptions& opt, Rng& rng)
        : L_(L), m_(m), k_(k), opt_(opt), rng_(rng), n_(L.rows())
    {
        block_ = std::max(1, std::min(opt.block_size, k));
        max_cols_ = static_cast<int>(std::min<Eigen::Index>(n_, std::max(2 * k + 2 * block_, k + 4 * block_)));

        double scale = 0.0;
        for (Eigen::Index i = 0; i < n_; ++i) scale = std::max(scale, L.coeff(i, i) / m[i]);
        if (scale <= 0.0) scale = 1.0;
        shift_ = 1e-6 * scale;

        SpMat A = L;
        for (Eigen::Index i = 0; i < n_; ++i) A.coeffRef(i, i) += shift_ * m[i];
        ldlt_.compute(A);
        if (ldlt_.info() != Eigen::Success) throw ConvergenceError("shift-invert factorization failed", {});

        norm_l_ = 0.0;
        for (Eigen::Index col = 0; col < L.outerSize(); ++col) {
            double s = 0.0;
            for (SpMat::InnerIterator it(L, col); it; ++it) s += std::abs(it.value());
            norm_l_ = std::max(norm_l_, s);
        }
        norm_m_ = m.maxCoeff();
        Q_.resize(n_, max_cols_);
        W_.resize(n_, max_cols_);
    }

    Eigenpairs run()
    {
        const int cap = opt_.max_iterations > 0 ? opt_.max_iterations : 50 * k_;
        int applications = 0;

        Eigen::MatrixXd start(n_, block_);
        for (Eigen::Index j = 0; j < start.cols(); ++j) start.col(j) = random_vector();
        int last_begin = cols_;
        applications += append_block(start);
        int last_end = cols_;

        for (;;) {
            // Only whole blocks: a partial block would leave part of the
            // previous block's image outside the basis.
            while (cols_ + block_ <= max_cols_) {
                const Eigen::MatrixXd next = W_.middleCols(last_begin, last_end - last_begin);
                const int begin = cols_;
                const int added = append_block(next);
                if (added == 0) break;
                applications += added;
                last_begin = begin;
                last_end = cols_;
            }

            const Eigen::MatrixXd Qc = Q_.leftCols(cols_);
            const Eigen::MatrixXd Wc = W_.leftCols(cols_);
            Eigen::MatrixXd H = Qc.transpose() * (m_.asDiagonal() * Wc);
            H = 0.5 * (H + H.transpose()).eval();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
            // Largest Ritz values of the inverted operator are the wanted end.
            const Eigen::MatrixXd S = es.eigenvectors().rowwise().reverse();
            const Eigen::VectorXd theta = es.eigenvalues().reverse();

            const int want = std::min<int>(k_, cols_);
            Eigenpairs out;
            out.values.resize(want);
            out.vectors = Qc * S.leftCols(want);
            Eigen::VectorXd residuals(want);
            bool converged = true;
            for (int i = 0; i < want; ++i) {
                const double lambda = 1.0 / theta[i] - shift_;
                out.values[i] = lambda;
                const Eigen::VectorXd y = out.vectors.col(i);
                const Eigen::VectorXd r = L_ * y - lambda * (m_.asDiagonal() * y);
                residuals[i] = r.norm();
                const double bound = opt_.tolerance * (norm_l_ + std::abs(lambda) * norm_m_) * y.norm();
                if (!(residuals[i] <= bound)) converged = false;
            }
            if (converged && want == k_) return out;
            if (cols_ == n_ || applications >= cap) {
                throw ConvergenceError("eigensolver did not converge after " + std::to_string(applications) +
                                           " operator applications (max residual " +
                                           std::to_string(residuals.maxCoeff()) + ")",
                                       std::vector<double>(residuals.data(), residuals.data() + residuals.size()));
            }

            // Continuation block: the part of Op Q_last outside span(Q).
            Eigen::MatrixXd cont = W_.middleCols(last_begin, last_end - last_begin);
            for (int pass = 0; pass < 2; ++pass) cont -= Qc * (Qc.transpose() * (m_.asDiagonal() * cont));

            const int keep = std::min(cols_ - 1, std::min(k_ + block_, max_cols_ - block_));
            Q_.leftCols(keep) = Qc * S.leftCols(keep);
            W_.leftCols(keep) = Wc * S.leftCols(keep);
            cols_ = keep;
            last_begin = cols_;
            const int added = append_block(cont);
            applications += added;
            last_end = cols_;
        }
    }

private:
    Eigen::VectorXd random_vector()
    {
        Eigen::VectorXd v(n_);
        for (Eigen::Index i = 0; i < n_; ++i) v[i] = rng_.normal();
        return v;
    }

    double m_norm(const Eigen::VectorXd& x) const { return std::sqrt(x.dot(m_.cwiseProduct(x))); }

    // M-orthonormalizes the columns of X against Q and each other, appends the
    // survivors to Q and their images under the operator to W. Returns the
    // number of appended columns.
    int append_block(const Eigen::MatrixXd& X)
    {
        const int begin = cols_;
        for (Eigen::Index j = 0; j < X.cols() && cols_ < max_cols_; ++j) {
            Eigen::VectorXd x = X.col(j);
            for (int attempt = 0; attempt < 4; ++attempt) {
                const double before = m_norm(x);
                if (before > 0.0) {
                    for (int pass = 0; pass < 2; ++pass) {
                        const auto Qc = Q_.leftCols(cols_);
                        x -= Qc * (Qc.transpose() * m_.cwiseProduct(x));
                    }
                    const double after = m_norm(x);
                    if (after > 1e-10 * before) {
                        Q_.col(cols_++) = x / after;
                        break;
                    }
                }
                // Deflated direction: restart it from noise.
                x = random_vector();
            }
        }
        if (cols_ > begin) {
            const Eigen::MatrixXd rhs = m_.asDiagonal() * Q_.middleCols(begin, cols_ - begin);
            W_.middleCols(begin, cols_ - begin) = ldlt_.solve(rhs);
        }
        return cols_ - begin;
    }

    const SpMat& L_;
    const Eigen::VectorXd& m_;
    int k_;
    EigenOptions opt_;
    Rng& rng_;
    Eigen::Index n_;
    int block_ = 1;
    int max_cols_ = 0;
    int cols_ = 0;
    double shift_ = 0.0;
    double norm_l_ = 0.0;
    double norm_m_ = 0.0;
    Eigen::SimplicialLDLT<SpMat> ldlt_;
    Eigen::MatrixXd Q_;
    Eigen::MatrixXd W_;
};

// Connected components of the sparsity graph of L.
std::vector<std::vector<int>> pattern_components(const SpMat& L)
{
    const auto n = static_cast<int>(L.rows());
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (Eigen::Index col = 0; col < L.outerSize(); ++col) {
        for (SpMat::InnerIterator it(L, col); it; ++it) {
            const int a = find(static_cast<int>(it.row()));
            const int b = find(static_cast<int>(it.col()));
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    }
    std::vector<int> comp_of_root(n, -1);
    std::vector<std::vector<int>> comps;
    for (int v = 0; v < n; ++v) {
        const int r = find(v);
        if (comp_of_root[r] < 0) {
            comp_of_root[r] = static_cast<int>(comps.size());
            comps.emplace_back();
        }
        comps[comp_of_root[r]].push_back(v);
    }
    return comps;
}

void fix_signs(Eigen::MatrixXd& vecs)
{
    for (Eigen::Index j = 0; j < vecs.cols(); ++j) {
        Eigen::Index arg = 0;
        vecs.col(j).cwiseAbs().maxCoeff(&arg);
        if (vecs(arg, j) < 0) vecs.col(j) *= -1.0;
    }
}

} // namespace

SpectralBasis eigensolve(const mesh::SparseOperator& L, const mesh::SparseOperator& M, int k,
                         const EigenOptions& options)
{
    const Eigen::Index n = L.rows();
    if (L.cols() != n || M.rows() != n || M.cols() != n) throw ArgumentError("eigensolve: operator size mismatch");
    if (k < 1) throw ArgumentError("eigensolve: k must be positive");
    if (k >= n) {
        throw ArgumentError("eigensolve: k=" + std::to_string(k) + " must be smaller than the vertex count " +
                            std::to_string(n));
    }
    if (M.nonZeros() != n) throw ArgumentError("eigensolve: mass operator must be diagonal");
    const Eigen::VectorXd m = M.diagonal();
    if (!(m.minCoeff() > 0.0)) throw ArgumentError("eigensolve: mass entries must be positive");

    // The spectrum of a disconnected operator is the union of its component
    // spectra; solving per component avoids degenerate null spaces.
    const auto comps = pattern_components(L);
    struct Pair {
        double lambda;
        int comp;
        int local;
    };
    std::vector<Pair> pairs;
    std::vector<Eigenpairs> solved(comps.size());
    std::vector<int> local_of(static_cast<std::size_t>(n), -1);
    for (std::size_t c = 0; c < comps.size(); ++c) {
        const auto& idx = comps[c];
        const auto nc = static_cast<Eigen::Index>(idx.size());
        for (Eigen::Index i = 0; i < nc; ++i) local_of[idx[i]] = static_cast<int>(i);
        std::vector<Eigen::Triplet<double>> trip;
        for (int g : idx) {
            for (SpMat::InnerIterator it(L, g); it; ++it) trip.emplace_back(local_of[it.row()], local_of[it.col()], it.value());
        }
        SpMat Lc(nc, nc);
        Lc.setFromTriplets(trip.begin(), trip.end());
        Eigen::VectorXd mc(nc);
        for (Eigen::Index i = 0; i < nc; ++i) mc[i] = m[idx[i]];

        const int kc = static_cast<int>(std::min<Eigen::Index>(k, nc));
        // Components too small for a useful Krylov basis are solved densely.
        if (kc + 2 * std::max(1, options.block_size) >= nc) {
            solved[c] = dense_solve(Lc, mc);
        } else {
            Rng rng(options.seed ^ (0x9e3779b97f4a7c15ull * (c + 1)));
            solved[c] = BlockKrylov(Lc, mc, kc, options, rng).run();
        }
        for (Eigen::Index j = 0; j < solved[c].values.size(); ++j) {
            pairs.push_back({solved[c].values[j], static_cast<int>(c), static_cast<int>(j)});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.lambda < b.lambda; });

    SpectralBasis basis;
    basis.eigenvalues.resize(k);
    basis.eigenvectors = Eigen::MatrixXd::Zero(n, k);
    basis.mass = m;
    for (int j = 0; j < k; ++j) {
        const auto& p = pairs[j];
        basis.eigenvalues[j] = std::max(0.0, p.lambda);
        const auto& idx = comps[p.comp];
        for (std::size_t i = 0; i < idx.size(); ++i) basis.eigenvectors(idx[i], j) = solved[p.comp].vectors(i, p.local);
    }
    fix_signs(basis.eigenvectors);
    return basis;
}

SpectralBasis compute_basis(const mesh::TriMesh& mesh, int k, const EigenOptions& options)
{
    return eigensolve(mesh::cotan_laplacian(mesh), mesh::lumped_mass(mesh), k, options);
}

Eigen::VectorXd residual_norms(const SpectralBasis& basis, const mesh::SparseOperator& L)
{
    Eigen::VectorXd r(basis.k());
    for (Eigen::Index j = 0; j < basis.k(); ++j) {
        const Eigen::VectorXd phi = basis.eigenvectors.col(j);
        r[j] = (L * phi - basis.eigenvalues[j] * basis.mass.cwiseProduct(phi)).norm();
    }
    return r;
}

} // namespace headseg::spectral
