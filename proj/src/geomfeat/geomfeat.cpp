#include "headseg/geomfeat.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace headseg::geomfeat {

namespace {

constexpr int kLeafSize = 8;

} // namespace

KnnIndex::KnnIndex(std::vector<Vec3> points) : points_(std::move(points))
{
    if (points_.empty()) throw ArgumentError("KnnIndex: need at least one point");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * points_.size() / kLeafSize + 1);
    build(0, static_cast<int>(points_.size()));
}

int KnnIndex::build(int begin, int end)
{
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end, -1, -1, 0, 0.0});
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = points_[order_[begin]], hi = lo;
    for (int i = begin; i < end; ++i) {
        lo = lo.cwiseMin(points_[order_[i]]);
        hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
        const double ca = points_[a][axis], cb = points_[b][axis];
        return ca < cb || (ca == cb && a < b);
    });
    const double split = points_[order_[mid]][axis];
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    return id;
}

void KnnIndex::search(int node_id, const Vec3& p, int k, std::vector<std::pair<double, int>>& heap) const
{
    const Node& node = nodes_[node_id];
    if (node.left < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int idx = order_[i];
            const std::pair<double, int> cand{(points_[idx] - p).squaredNorm(), idx};
            if (static_cast<int>(heap.size()) < k) {
                heap.push_back(cand);
                std::push_heap(heap.begin(), heap.end());
            } else if (cand < heap.front()) {
                std::pop_heap(heap.begin(), heap.end());
                heap.back() = cand;
                std::push_heap(heap.begin(), heap.end());
            }
        }
        return;
    }
    const double diff = p[node.axis] - node.split;
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    search(near, p, k, heap);
    // Points on the far side are at least |diff| away; equality must still be
    // visited for the index tie-break.
    if (static_cast<int>(heap.size()) < k || diff * diff <= heap.front().first) search(far, p, k, heap);
}

std::vector<int> KnnIndex::query(const Vec3& p, int k) const
{
    if (k < 1 || static_cast<std::size_t>(k) > points_.size()) {
        throw ArgumentError("KnnIndex::query: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(points_.size()) + "]");
    }
    std::vector<std::pair<double, int>> heap;
    heap.reserve(static_cast<std::size_t>(k));
    search(0, p, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    std::vector<int> out(heap.size());
    for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].second;
    return out;
}

Eigen::MatrixXd compute_hks(const spectral::SpectralBasis& basis, std::span<const double> times)
{
    Eigen::MatrixXd decay(basis.k(), static_cast<Eigen::Index>(times.size()));
    for (std::size_t j = 0; j < times.size(); ++j) {
        decay.col(static_cast<Eigen::Index>(j)) = (-basis.eigenvalues.array() * times[j]).exp();
    }
    return basis.eigenvectors.array().square().matrix() * decay;
}

std::vector<double> default_hks_times(const spectral::SpectralBasis& basis, int count)
{
    if (count < 1) throw ArgumentError("default_hks_times: need at least one time");
    const double lambda_max = basis.eigenvalues[basis.k() - 1];
    double lambda_min = 0.0;
    for (Eigen::Index i = 0; i < basis.k(); ++i) {
        if (basis.eigenvalues[i] > 1e-6 * lambda_max) {
            lambda_min = basis.eigenvalues[i];
            break;
        }
    }
    if (!(lambda_max > 0.0) || !(lambda_min > 0.0)) {
        throw ArgumentError("default_hks_times: degenerate spectrum (no positive eigenvalue)");
    }
    const double log_lo = std::log(4.0 * std::numbers::ln10 / lambda_max);
    const double log_hi = std::log(4.0 * std::numbers::ln10 / lambda_min);
    std::vector<double> t(static_cast<std::size_t>(count));
    if (count == 1) {
        t[0] = std::exp(0.5 * (log_lo + log_hi));
        return t;
    }
    for (int j = 0; j < count; ++j) t[j] = std::exp(log_lo + (log_hi - log_lo) * j / (count - 1));
    return t;
}

Eigen::MatrixXd normalize_hks(const Eigen::MatrixXd& hks)
{
    Eigen::MatrixXd out = hks.array().max(1e-300).log().matrix();
    const double n = static_cast<double>(out.rows());
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
        const double mean = out.col(c).sum() / n;
        out.col(c).array() -= mean;
        const double sd = std::sqrt(out.col(c).squaredNorm() / n);
        if (sd > 0.0) out.col(c) /= sd;
    }
    return out;
}

Eigen::VectorXd surface_variation(const std::vector<Vec3>& points, int k)
{
    if (k < 1 || points.size() <= static_cast<std::size_t>(k)) {
        throw ArgumentError("surface_variation: need more than k=" + std::to_string(k) + " points, have " +
                            std::to_string(points.size()));
    }
    const KnnIndex index(points);
    Eigen::VectorXd sigma(static_cast<Eigen::Index>(points.size()));
    parallel_for(points.size(), [&](std::size_t v) {
        const auto nbrs = index.query(points[v], k);
        Vec3 mean = Vec3::Zero();
        for (int j : nbrs) mean += points[j];
        mean /= static_cast<double>(nbrs.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (int j : nbrs) {
            const Vec3 d = points[j] - mean;
            cov += d * d.transpose();
        }
        cov /= static_cast<double>(nbrs.size());
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov, Eigen::EigenvaluesOnly);
        const Vec3 ev = es.eigenvalues().cwiseMax(0.0);
        const double total = ev.sum();
        sigma[static_cast<Eigen::Index>(v)] = total > 0.0 ? ev.minCoeff() / total : 0.0;
    });
    return sigma;
}

Eigen::VectorXd surface_variation(const mesh::TriMesh& mesh, int k)
{
    return surface_variation(mesh.positions, k);
}

GeomFeatures compute_geom_features(const mesh::TriMesh& mesh, const spectral::SpectralBasis& basis, int hks_times,
                                   int neighbors)
{
    GeomFeatures g;
    g.time_samples = default_hks_times(basis, hks_times);
    g.hks = compute_hks(basis, g.time_samples);
    g.sigma30 = surface_variation(mesh, neighbors);
    return g;
}

} // namespace headseg::geomfeat
