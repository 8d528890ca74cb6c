#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "headseg/mesh.hpp"
#include "headseg/spectral.hpp"

namespace headseg::geomfeat {

inline constexpr int kDefaultHksTimes = 16;
inline constexpr int kDefaultSigmaNeighbors = 30;

/// Static kd-tree for exact k-nearest-neighbor queries. Results are ordered by
/// (squared distance, index), so equidistant points come back lower index
/// first.
class KnnIndex {
public:
    explicit KnnIndex(std::vector<Vec3> points);

    std::vector<int> query(const Vec3& p, int k) const;
    std::size_t size() const { return points_.size(); }
    const std::vector<Vec3>& points() const { return points_; }

private:
    struct Node {
        int begin, end;    // range in order_
        int left, right;   // children, -1 for leaves
        int axis;
        double split;
    };
    int build(int begin, int end);
    void search(int node, const Vec3& p, int k, std::vector<std::pair<double, int>>& heap) const;

    std::vector<Vec3> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
};

/// Heat kernel signature: column j holds sum_i exp(-lambda_i t_j) phi_i(v)^2.
Eigen::MatrixXd compute_hks(const spectral::SpectralBasis& basis, std::span<const double> times);

/// `count` log-spaced times between 4 ln10 / lambda_max and 4 ln10 / lambda_1,
/// where lambda_1 is the first eigenvalue that is not numerically zero.
std::vector<double> default_hks_times(const spectral::SpectralBasis& basis, int count = kDefaultHksTimes);

/// Per-column log transform followed by standardization over vertices.
Eigen::MatrixXd normalize_hks(const Eigen::MatrixXd& hks);

/// Smallest-to-total eigenvalue ratio of the covariance of each vertex's k
/// nearest vertex positions (the vertex itself included). In [0, 1/3].
Eigen::VectorXd surface_variation(const mesh::TriMesh& mesh, int k = kDefaultSigmaNeighbors);
Eigen::VectorXd surface_variation(const std::vector<Vec3>& points, int k = kDefaultSigmaNeighbors);

struct GeomFeatures {
    Eigen::MatrixXd hks;         // V x T, raw
    Eigen::VectorXd sigma30;     // V
    std::vector<double> time_samples;
};

GeomFeatures compute_geom_features(const mesh::TriMesh& mesh, const spectral::SpectralBasis& basis,
                                   int hks_times = kDefaultHksTimes, int neighbors = kDefaultSigmaNeighbors);

} // namespace headseg::geomfeat
