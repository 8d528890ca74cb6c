#include "headseg/mview.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace headseg::mview {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Clipping plane for rasterization; far enough from zero that projected
// coordinates stay well conditioned.
constexpr double kClipNear = 1e-3;

struct ClipVertex {
    Vec3 q;        // camera space
    Vec3 bary;     // within the original face
};

double edge(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p)
{
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

// Owns pixels exactly on the edge; antisymmetric in direction so a shared
// edge is owned by one side only.
bool owns_edge(const Eigen::Vector2d& a, const Eigen::Vector2d& b)
{
    const double dx = b.x() - a.x(), dy = b.y() - a.y();
    return dy > 0 || (dy == 0 && dx < 0);
}

std::vector<ClipVertex> clip_near(const std::array<ClipVertex, 3>& tri)
{
    std::vector<ClipVertex> out;
    for (int i = 0; i < 3; ++i) {
        const ClipVertex& a = tri[i];
        const ClipVertex& b = tri[(i + 1) % 3];
        const bool ain = a.q.z() >= kClipNear, bin = b.q.z() >= kClipNear;
        if (ain) out.push_back(a);
        if (ain != bin) {
            const double s = (kClipNear - a.q.z()) / (b.q.z() - a.q.z());
            out.push_back({a.q + s * (b.q - a.q), a.bary + s * (b.bary - a.bary)});
            out.back().q.z() = kClipNear;
        }
    }
    return out;
}

// Camera depth where the ray through pixel (u, v) meets face f, or +inf when
// it passes outside the triangle. The ray has unit z, so its parameter is the
// depth.
double ray_face_depth(const mesh::TriMesh& mesh, const Camera& cam, int f, double u, double v)
{
    constexpr double kSlack = 1e-9;
    const auto& face = mesh.faces[static_cast<std::size_t>(f)];
    const Vec3 dir((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    const Vec3 a = cam.R * mesh.positions[face[0]] + cam.t;
    const Vec3 e1 = cam.R * mesh.positions[face[1]] + cam.t - a;
    const Vec3 e2 = cam.R * mesh.positions[face[2]] + cam.t - a;
    const Vec3 p = dir.cross(e2);
    const double det = e1.dot(p);
    if (std::abs(det) < 1e-300) return kInf;
    const double b1 = -a.dot(p) / det;
    const Vec3 q = (-a).cross(e1);
    const double b2 = dir.dot(q) / det;
    if (b1 < -kSlack || b2 < -kSlack || b1 + b2 > 1 + kSlack) return kInf;
    const double t = e2.dot(q) / det;
    return t > 0 ? t : kInf;
}

void bilinear_setup(int n, double u, int& i0, int& i1, double& frac)
{
    if (n == 1) {
        i0 = i1 = 0;
        frac = 0.0;
        return;
    }
    i0 = std::clamp(static_cast<int>(std::floor(u)), 0, n - 2);
    i1 = i0 + 1;
    frac = u - i0;
}

} // namespace

void Camera::validate() const
{
    if (!(fx > 0) || !(fy > 0)) throw ValidationError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ValidationError("camera: image size must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height)) {
        throw ValidationError("camera: principal point outside the image");
    }
    if (!R.allFinite() || !t.allFinite()) throw ValidationError("camera: non-finite extrinsics");
    if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-8) {
        throw ValidationError("camera: rotation is not orthonormal");
    }
    if (R.determinant() < 0) throw ValidationError("camera: rotation has determinant -1");
}

Projection project(const Camera& cam, const Vec3& p)
{
    const Vec3 q = cam.R * p + cam.t;
    Projection pr;
    pr.depth = q.z();
    pr.u = cam.fx * q.x() / q.z() + cam.cx;
    pr.v = cam.fy * q.y() / q.z() + cam.cy;
    pr.in_frustum = q.z() > kNearPlane && pr.u >= 0 && pr.u <= cam.width - 1 && pr.v >= 0 && pr.v <= cam.height - 1;
    return pr;
}

Vec3 unproject(const Camera& cam, double u, double v, double depth)
{
    const Vec3 q((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
    return cam.R.transpose() * (q - cam.t);
}

std::vector<Camera> load_cameras(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    std::vector<Camera> cams;
    try {
        const auto& arr = doc.at("cameras");
        if (!arr.is_array() || arr.empty()) throw ValidationError(path.string() + ": \"cameras\" must be a non-empty array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const auto& j = arr[i];
            Camera c;
            c.fx = j.at("fx").get<double>();
            c.fy = j.at("fy").get<double>();
            c.cx = j.at("cx").get<double>();
            c.cy = j.at("cy").get<double>();
            const auto R = j.at("R").get<std::vector<double>>();
            const auto t = j.at("t").get<std::vector<double>>();
            if (R.size() != 9 || t.size() != 3) {
                throw ValidationError(path.string() + ": camera " + std::to_string(i) + ": R needs 9 and t 3 numbers");
            }
            for (int r = 0; r < 3; ++r)
                for (int k = 0; k < 3; ++k) c.R(r, k) = R[r * 3 + k];
            c.t = Vec3(t[0], t[1], t[2]);
            c.width = j.at("width").get<int>();
            c.height = j.at("height").get<int>();
            try {
                c.validate();
            } catch (const ValidationError& e) {
                throw ValidationError(path.string() + ": camera " + std::to_string(i) + ": " + e.what());
            }
            cams.push_back(c);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return cams;
}

void save_cameras(const std::vector<Camera>& cameras, const std::filesystem::path& path)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cameras) {
        std::vector<double> R(9);
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) R[r * 3 + k] = c.R(r, k);
        arr.push_back({{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"R", R},
                       {"t", std::vector<double>{c.t.x(), c.t.y(), c.t.z()}}, {"width", c.width}, {"height", c.height}});
    }
    const std::string text = nlohmann::json{{"cameras", arr}}.dump(2) + "\n";
    bin::write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

void sample_bilinear(const featio::FeatureMap& map, double u, double v, float* out)
{
    int x0, x1, y0, y1;
    double ax, ay;
    bilinear_setup(map.width, u, x0, x1, ax);
    bilinear_setup(map.height, v, y0, y1, ay);
    const float* t00 = map.texel(y0, x0);
    const float* t01 = map.texel(y0, x1);
    const float* t10 = map.texel(y1, x0);
    const float* t11 = map.texel(y1, x1);
    for (int c = 0; c < map.channels; ++c) {
        const double top = (1 - ax) * t00[c] + ax * t01[c];
        const double bottom = (1 - ax) * t10[c] + ax * t11[c];
        out[c] = static_cast<float>((1 - ay) * top + ay * bottom);
    }
}

Eigen::VectorXf sample_bilinear(const featio::FeatureMap& map, double u, double v)
{
    Eigen::VectorXf out(map.channels);
    sample_bilinear(map, u, v, out.data());
    return out;
}

Raster rasterize(const mesh::TriMesh& mesh, const Camera& cam)
{
    Raster r;
    r.width = cam.width;
    r.height = cam.height;
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    r.depth.assign(npix, kInf);
    r.face.assign(npix, -1);
    r.bary.assign(npix, Eigen::Vector3d::Zero());

    std::vector<Vec3> q(mesh.positions.size());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = cam.R * mesh.positions[i] + cam.t;

    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& face = mesh.faces[f];
        const std::array<ClipVertex, 3> tri{ClipVertex{q[face[0]], Vec3::UnitX()}, ClipVertex{q[face[1]], Vec3::UnitY()},
                                            ClipVertex{q[face[2]], Vec3::UnitZ()}};
        if (tri[0].q.z() < kClipNear && tri[1].q.z() < kClipNear && tri[2].q.z() < kClipNear) continue;
        const auto poly = clip_near(tri);
        for (std::size_t k = 1; k + 1 < poly.size(); ++k) {
            std::array<const ClipVertex*, 3> v{&poly[0], &poly[k], &poly[k + 1]};
            std::array<Eigen::Vector2d, 3> s;
            std::array<double, 3> inv_z;
            for (int i = 0; i < 3; ++i) {
                inv_z[i] = 1.0 / v[i]->q.z();
                s[i] = Eigen::Vector2d(cam.fx * v[i]->q.x() * inv_z[i] + cam.cx, cam.fy * v[i]->q.y() * inv_z[i] + cam.cy);
            }
            double area = edge(s[0], s[1], s[2]);
            if (!(std::abs(area) > 0) || !std::isfinite(area)) continue;
            if (area < 0) {
                std::swap(v[1], v[2]);
                std::swap(s[1], s[2]);
                std::swap(inv_z[1], inv_z[2]);
                area = -area;
            }
            const double xmin = std::min({s[0].x(), s[1].x(), s[2].x()});
            const double xmax = std::max({s[0].x(), s[1].x(), s[2].x()});
            const double ymin = std::min({s[0].y(), s[1].y(), s[2].y()});
            const double ymax = std::max({s[0].y(), s[1].y(), s[2].y()});
            const int x0 = static_cast<int>(std::max(0.0, std::ceil(xmin)));
            const int x1 = static_cast<int>(std::min(cam.width - 1.0, std::floor(xmax)));
            const int y0 = static_cast<int>(std::max(0.0, std::ceil(ymin)));
            const int y1 = static_cast<int>(std::min(cam.height - 1.0, std::floor(ymax)));
            const bool own0 = owns_edge(s[1], s[2]), own1 = owns_edge(s[2], s[0]), own2 = owns_edge(s[0], s[1]);
            for (int py = y0; py <= y1; ++py) {
                for (int px = x0; px <= x1; ++px) {
                    const Eigen::Vector2d p(px, py);
                    const double w0 = edge(s[1], s[2], p), w1 = edge(s[2], s[0], p), w2 = edge(s[0], s[1], p);
                    if (w0 < 0 || w1 < 0 || w2 < 0) continue;
                    if ((w0 == 0 && !own0) || (w1 == 0 && !own1) || (w2 == 0 && !own2)) continue;
                    const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
                    const double iz = b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2];
                    const double depth = 1.0 / iz;
                    const std::size_t idx = static_cast<std::size_t>(py) * cam.width + px;
                    if (depth < r.depth[idx]) {
                        r.depth[idx] = depth;
                        r.face[idx] = static_cast<int>(f);
                        r.bary[idx] = (b0 * inv_z[0] * v[0]->bary + b1 * inv_z[1] * v[1]->bary +
                                       b2 * inv_z[2] * v[2]->bary) * depth;
                    }
                }
            }
        }
    }
    return r;
}

DepthBuffer render_depth(const mesh::TriMesh& mesh, const Camera& cam)
{
    auto r = rasterize(mesh, cam);
    return DepthBuffer{r.width, r.height, std::move(r.depth), std::move(r.face)};
}

double sample_depth(const DepthBuffer& depth, double u, double v)
{
    int x0, x1, y0, y1;
    double ax, ay;
    bilinear_setup(depth.width, u, x0, x1, ax);
    bilinear_setup(depth.height, v, y0, y1, ay);
    return std::max({depth.at(y0, x0), depth.at(y0, x1), depth.at(y1, x0), depth.at(y1, x1)});
}

Eigen::VectorXd vertex_visibility(const mesh::TriMesh& mesh, const Camera& cam, const DepthBuffer& depth,
                                  const std::vector<Vec3>& normals, double tolerance)
{
    if (normals.size() != mesh.positions.size()) throw ArgumentError("vertex_visibility: one normal per vertex required");
    const Vec3 center = cam.center();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.positions.size()));
    for (std::size_t i = 0; i < mesh.positions.size(); ++i) {
        const auto pr = project(cam, mesh.positions[i]);
        if (!pr.in_frustum) continue;
        const Vec3 dir = (mesh.positions[i] - center).normalized();
        const double facing = std::max(0.0, -normals[i].dot(dir));
        if (facing == 0.0) continue;
        int x0, x1, y0, y1;
        double ax, ay;
        bilinear_setup(depth.width, pr.u, x0, x1, ax);
        bilinear_setup(depth.height, pr.v, y0, y1, ay);
        const int faces[4] = {depth.face_at(y0, x0), depth.face_at(y0, x1), depth.face_at(y1, x0), depth.face_at(y1, x1)};
        double occluder = kInf;
        bool hit = false;
        for (int f : faces) {
            if (f < 0) continue;
            if (static_cast<std::size_t>(f) >= mesh.faces.size()) {
                throw ArgumentError("vertex_visibility: depth buffer was rendered from a different mesh");
            }
            const double t = ray_face_depth(mesh, cam, f, pr.u, pr.v);
            if (t < kInf) {
                hit = true;
                occluder = std::min(occluder, t);
            }
        }
        if (!hit) occluder = sample_depth(depth, pr.u, pr.v);
        if (pr.depth <= occluder + tolerance) w[static_cast<Eigen::Index>(i)] = facing;
    }
    return w;
}

Eigen::VectorXd frustum_mask(const mesh::TriMesh& mesh, const Camera& cam)
{
    Eigen::VectorXd m(static_cast<Eigen::Index>(mesh.positions.size()));
    for (std::size_t i = 0; i < mesh.positions.size(); ++i) {
        m[static_cast<Eigen::Index>(i)] = project(cam, mesh.positions[i]).in_frustum ? 1.0 : 0.0;
    }
    return m;
}

Eigen::MatrixXd sample_vertex_features(const mesh::TriMesh& mesh, const Camera& cam, const featio::FeatureMap& map)
{
    if (map.width != cam.width || map.height != cam.height) {
        throw ValidationError("feature map is " + std::to_string(map.width) + "x" + std::to_string(map.height) +
                              " but the camera image is " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
    }
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(mesh.positions.size()), map.channels);
    std::vector<float> buf(static_cast<std::size_t>(map.channels));
    for (std::size_t i = 0; i < mesh.positions.size(); ++i) {
        const auto pr = project(cam, mesh.positions[i]);
        if (!pr.in_frustum) continue;
        sample_bilinear(map, pr.u, pr.v, buf.data());
        for (int c = 0; c < map.channels; ++c) out(static_cast<Eigen::Index>(i), c) = buf[c];
    }
    return out;
}

FusedFeatures fuse_views(const std::vector<Eigen::MatrixXd>& per_view, const std::vector<Eigen::VectorXd>& weights,
                         VarianceCenter center)
{
    if (per_view.empty() || per_view.size() != weights.size()) {
        throw ArgumentError("fuse_views: need one weight vector per view and at least one view");
    }
    const Eigen::Index V = per_view[0].rows(), C = per_view[0].cols();
    for (std::size_t n = 0; n < per_view.size(); ++n) {
        if (per_view[n].rows() != V || per_view[n].cols() != C || weights[n].size() != V) {
            throw ArgumentError("fuse_views: view " + std::to_string(n) + " has mismatched dimensions");
        }
        if ((weights[n].array() < 0).any() || !weights[n].allFinite()) {
            throw ArgumentError("fuse_views: view " + std::to_string(n) + " has a negative or non-finite weight");
        }
    }
    FusedFeatures out;
    out.mean = Eigen::MatrixXd::Zero(V, C);
    out.variance = Eigen::MatrixXd::Zero(V, C);
    out.visibility_sum = Eigen::VectorXd::Zero(V);
    out.coverage = Eigen::VectorXd::Zero(V);
    parallel_for(static_cast<std::size_t>(V), [&](std::size_t vi) {
        const auto v = static_cast<Eigen::Index>(vi);
        double sum = 0.0;
        int count = 0;
        for (const auto& w : weights) {
            sum += w[v];
            count += w[v] > 0 ? 1 : 0;
        }
        out.visibility_sum[v] = sum;
        out.coverage[v] = count;
        if (!(sum > 0)) return;
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(C);
        Eigen::RowVectorXd plain = Eigen::RowVectorXd::Zero(C);
        for (std::size_t n = 0; n < per_view.size(); ++n) {
            const double w = weights[n][v] / sum;
            mean += w * per_view[n].row(v);
            if (weights[n][v] > 0) plain += per_view[n].row(v);
        }
        plain /= count;
        const Eigen::RowVectorXd& c = center == VarianceCenter::weighted_mean ? mean : plain;
        Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(C);
        for (std::size_t n = 0; n < per_view.size(); ++n) {
            const double w = weights[n][v] / sum;
            var += w * (per_view[n].row(v) - c).array().square().matrix();
        }
        out.mean.row(v) = mean;
        out.variance.row(v) = var;
    });
    return out;
}

} // namespace headseg::mview
