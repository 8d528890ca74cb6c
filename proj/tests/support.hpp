#pragma once

#include <cmath>

#include <Eigen/Geometry>

#include "headseg/common.hpp"
#include "headseg/mesh.hpp"

namespace headseg::testing {

// Height-field grid with jittered vertices; connected, no slivers.
inline mesh::TriMesh random_grid(int nx, int ny, Rng& rng, double jitter = 0.25, double height = 0.3)
{
    mesh::TriMesh m;
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const double x = i + rng.uniform(-jitter, jitter);
            const double y = j + rng.uniform(-jitter, jitter);
            m.positions.emplace_back(x, y, rng.uniform(-height, height));
        }
    }
    for (int j = 0; j + 1 < ny; ++j) {
        for (int i = 0; i + 1 < nx; ++i) {
            const int a = j * nx + i, b = a + 1, c = a + nx, d = c + 1;
            if (rng.uniform() < 0.5) {
                m.faces.push_back({a, b, d});
                m.faces.push_back({a, d, c});
            } else {
                m.faces.push_back({a, b, c});
                m.faces.push_back({b, d, c});
            }
        }
    }
    return m;
}

// Icosphere with random radial perturbation.
inline mesh::TriMesh bumpy_sphere(int level, Rng& rng, double amplitude = 0.05, double radius = 1.0)
{
    auto m = mesh::icosphere(level);
    for (auto& p : m.positions) p *= radius * (1.0 + rng.uniform(-amplitude, amplitude));
    return m;
}

inline Eigen::Matrix3d random_rotation(Rng& rng)
{
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

inline mesh::TriMesh transformed(const mesh::TriMesh& m, const Eigen::Matrix3d& R, const Vec3& t, double scale = 1.0)
{
    auto out = m;
    for (auto& p : out.positions) p = scale * (R * p) + t;
    return out;
}

inline std::vector<int> random_permutation(std::size_t n, Rng& rng)
{
    std::vector<int> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
    rng.shuffle(p);
    return p;
}

} // namespace headseg::testing
