#pragma once

#include <filesystem>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "headseg/featio.hpp"
#include "headseg/mesh.hpp"

namespace headseg::mview {

inline constexpr double kDepthTolerance = 2.0;  // mm
inline constexpr double kNearPlane = 1e-6;

/// Pinhole camera mapping world (mm) to pixels. R and t are world-to-camera.
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Vec3 t = Vec3::Zero();
    int width = 1, height = 1;

    /// Throws ValidationError on a non-rotation R, non-positive focal length or
    /// a principal point outside the image.
    void validate() const;
    Vec3 center() const { return -R.transpose() * t; }
};

struct Projection {
    double u = 0, v = 0, depth = 0;
    bool in_frustum = false;
};

Projection project(const Camera& cam, const Vec3& p);
Vec3 unproject(const Camera& cam, double u, double v, double depth);

std::vector<Camera> load_cameras(const std::filesystem::path& path);
void save_cameras(const std::vector<Camera>& cameras, const std::filesystem::path& path);

/// Bilinear interpolation of the four texels around (u, v); writes C floats.
/// (u, v) must lie in [0, W-1] x [0, H-1].
void sample_bilinear(const featio::FeatureMap& map, double u, double v, float* out);
Eigen::VectorXf sample_bilinear(const featio::FeatureMap& map, double u, double v);

/// Rasterized view: nearest camera depth per pixel (+inf where empty), the
/// face that produced it (-1 where empty) and perspective-correct barycentric
/// coordinates of the pixel center within that face.
struct Raster {
    int width = 0, height = 0;
    std::vector<double> depth;
    std::vector<int> face;
    std::vector<Eigen::Vector3d> bary;

    double depth_at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width + x]; }
    int face_at(int y, int x) const { return face[static_cast<std::size_t>(y) * width + x]; }
};

/// Pixel centers sit at integer coordinates. Triangles are clipped at the near
/// plane; coverage follows a top-left rule and depth ties keep the lower face.
Raster rasterize(const mesh::TriMesh& mesh, const Camera& cam);

/// Depth per pixel together with the face that produced it (-1 where empty).
struct DepthBuffer {
    int width = 0, height = 0;
    std::vector<double> depth;
    std::vector<int> face;
    double at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width + x]; }
    int face_at(int y, int x) const { return face[static_cast<std::size_t>(y) * width + x]; }
};

DepthBuffer render_depth(const mesh::TriMesh& mesh, const Camera& cam);

/// Farthest of the four texels around (u, v). Near silhouettes the texel
/// footprint mixes the vertex's own surface with nearer geometry; taking the
/// farthest keeps grazing surface vertices visible.
double sample_depth(const DepthBuffer& depth, double u, double v);

/// Per-vertex weight = max(0, -n . d) times a z-buffer test with tolerance
/// kDepthTolerance, d the unit direction from the camera center to the vertex.
/// Zero outside the frustum. The occluder depth is the nearest intersection of
/// the vertex's own pixel ray with the faces rasterized at the four texels
/// around it, which resolves silhouettes below pixel resolution; when none of
/// those faces contains the ray, sample_depth decides.
Eigen::VectorXd vertex_visibility(const mesh::TriMesh& mesh, const Camera& cam, const DepthBuffer& depth,
                                  const std::vector<Vec3>& normals, double tolerance = kDepthTolerance);

/// 1 for vertices inside the frustum, 0 elsewhere (occlusion ignored).
Eigen::VectorXd frustum_mask(const mesh::TriMesh& mesh, const Camera& cam);

/// V x C bilinear samples of the map at each projected vertex; rows outside
/// the frustum are zero.
Eigen::MatrixXd sample_vertex_features(const mesh::TriMesh& mesh, const Camera& cam, const featio::FeatureMap& map);

struct FusedFeatures {
    Eigen::MatrixXd mean;            // V x C
    Eigen::MatrixXd variance;        // V x C
    Eigen::VectorXd visibility_sum;  // V, before normalization
    Eigen::VectorXd coverage;        // V, number of views with positive weight
};

enum class VarianceCenter {
    weighted_mean,    // sum w (f - mu_bar)^2
    unweighted_mean,  // sum w (f - mu)^2, mu the plain mean over views with w > 0
};

/// Per-vertex weights are normalized to sum one across views before
/// averaging. Vertices with zero total weight get zero rows.
FusedFeatures fuse_views(const std::vector<Eigen::MatrixXd>& per_view, const std::vector<Eigen::VectorXd>& weights,
                         VarianceCenter center = VarianceCenter::weighted_mean);

} // namespace headseg::mview
