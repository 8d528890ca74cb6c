#include "headseg/synthgen.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace headseg::synthgen {

namespace {
constexpr int kLeafFaces = 4;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c)
{
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return a;

    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return b;

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;

    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return c;

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    }
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

SurfaceIndex::SurfaceIndex(const mesh::TriMesh& mesh) : positions_(mesh.positions), faces_(mesh.faces)
{
    if (faces_.empty()) throw ArgumentError("SurfaceIndex: surface mesh has no faces");
    order_.resize(faces_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * faces_.size() / kLeafFaces + 1);
    build(0, static_cast<int>(faces_.size()));
}

int SurfaceIndex::build(int begin, int end)
{
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({Eigen::AlignedBox3d(), begin, end, -1, -1});
    Eigen::AlignedBox3d box, centroids;
    for (int i = begin; i < end; ++i) {
        const auto& f = faces_[order_[i]];
        for (int k = 0; k < 3; ++k) box.extend(positions_[f[k]]);
        centroids.extend(((positions_[f[0]] + positions_[f[1]] + positions_[f[2]]) / 3.0).eval());
    }
    nodes_[id].box = box;
    if (end - begin <= kLeafFaces) return id;

    int axis = 0;
    centroids.sizes().maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    auto key = [&](int f) {
        const auto& t = faces_[f];
        return positions_[t[0]][axis] + positions_[t[1]][axis] + positions_[t[2]][axis];
    };
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
        const double ka = key(a), kb = key(b);
        return ka < kb || (ka == kb && a < b);
    });
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

double SurfaceIndex::face_distance_sq(int f, const Vec3& p) const
{
    const auto& t = faces_[f];
    return (closest_point_on_triangle(p, positions_[t[0]], positions_[t[1]], positions_[t[2]]) - p).squaredNorm();
}

void SurfaceIndex::search(int node_id, const Vec3& p, double& best_sq) const
{
    const Node& node = nodes_[node_id];
    if (node.left < 0) {
        for (int i = node.begin; i < node.end; ++i) best_sq = std::min(best_sq, face_distance_sq(order_[i], p));
        return;
    }
    const double dl = nodes_[node.left].box.squaredExteriorDistance(p);
    const double dr = nodes_[node.right].box.squaredExteriorDistance(p);
    const int first = dl <= dr ? node.left : node.right;
    const int second = dl <= dr ? node.right : node.left;
    if (std::min(dl, dr) <= best_sq) search(first, p, best_sq);
    if (std::max(dl, dr) <= best_sq) search(second, p, best_sq);
}

double SurfaceIndex::distance(const Vec3& p) const
{
    double best_sq = std::numeric_limits<double>::infinity();
    search(0, p, best_sq);
    return std::sqrt(best_sq);
}

std::vector<double> SurfaceIndex::distances(const std::vector<Vec3>& points) const
{
    std::vector<double> d(points.size());
    parallel_for(points.size(), [&](std::size_t i) { d[i] = distance(points[i]); });
    return d;
}

double point_to_surface(const Vec3& p, const mesh::TriMesh& surface)
{
    return SurfaceIndex(surface).distance(p);
}

std::vector<std::uint8_t> label_by_distance(const mesh::TriMesh& scan, const mesh::TriMesh& reference, double tau)
{
    if (reference.faces.empty()) throw ArgumentError("label_by_distance: reference surface is empty");
    if (!(tau > 0)) throw ArgumentError("label_by_distance: threshold must be positive");
    const auto d = SurfaceIndex(reference).distances(scan.positions);
    std::vector<std::uint8_t> labels(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) labels[i] = d[i] < tau ? kSkin : kNonSkin;
    return labels;
}

} // namespace headseg::synthgen
