#include "headseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace headseg::synthgen {

namespace {

using std::numbers::pi;

struct Bump {
    Vec3 center;  // unit direction
    double amplitude;
    double width;
};

// Star-shaped head surface: ellipsoid radius modulated by smooth bumps.
class HeadShape {
public:
    explicit HeadShape(Rng& rng)
    {
        axes_ = Vec3(75 * rng.uniform(0.92, 1.08), 95 * rng.uniform(0.92, 1.08), 110 * rng.uniform(0.92, 1.08));
        const int n = 6 + static_cast<int>(rng.below(5));
        for (int i = 0; i < n; ++i) {
            bumps_.push_back({random_direction(rng), rng.uniform(-0.05, 0.05), rng.uniform(0.02, 0.12)});
        }
    }

    double radius(const Vec3& dir) const
    {
        const double e = 1.0 / std::sqrt(std::pow(dir.x() / axes_.x(), 2) + std::pow(dir.y() / axes_.y(), 2) +
                                         std::pow(dir.z() / axes_.z(), 2));
        double m = 1.0;
        for (const auto& b : bumps_) m += b.amplitude * std::exp(-(1.0 - dir.dot(b.center)) / b.width);
        return e * m;
    }

    Vec3 point(const Vec3& dir) const { return radius(dir) * dir; }

    // Outward normal of the analytic surface.
    Vec3 normal(const Vec3& dir) const
    {
        Vec3 t1 = dir.unitOrthogonal();
        Vec3 t2 = dir.cross(t1);
        const double h = 1e-5;
        const Vec3 du = point((dir + h * t1).normalized()) - point((dir - h * t1).normalized());
        const Vec3 dv = point((dir + h * t2).normalized()) - point((dir - h * t2).normalized());
        Vec3 n = du.cross(dv).normalized();
        return n.dot(dir) < 0 ? -n : n;
    }

    static Vec3 random_direction(Rng& rng)
    {
        Vec3 v;
        do {
            v = Vec3(rng.normal(), rng.normal(), rng.normal());
        } while (v.norm() < 1e-6);
        return v.normalized();
    }

private:
    Vec3 axes_;
    std::vector<Bump> bumps_;
};

Vec3 hsv(double h, double s, double v)
{
    const double c = v * s;
    const double hp = std::fmod(h, 1.0) * 6.0;
    const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
    Vec3 rgb;
    if (hp < 1) rgb = Vec3(c, x, 0);
    else if (hp < 2) rgb = Vec3(x, c, 0);
    else if (hp < 3) rgb = Vec3(0, c, x);
    else if (hp < 4) rgb = Vec3(0, x, c);
    else if (hp < 5) rgb = Vec3(x, 0, c);
    else rgb = Vec3(c, 0, x);
    return rgb + Vec3::Constant(v - c);
}

Vec3 jitter(const Vec3& c, double amount, Rng& rng)
{
    return (c + Vec3(rng.uniform(-amount, amount), rng.uniform(-amount, amount), rng.uniform(-amount, amount)))
        .cwiseMax(0.0)
        .cwiseMin(1.0);
}

Vec3 random_direction_above(Rng& rng, double min_z)
{
    for (;;) {
        const Vec3 d = HeadShape::random_direction(rng);
        if (d.z() >= min_z) return d;
    }
}

Vec3 rotate_towards(const Vec3& dir, const Vec3& tangent, double angle)
{
    return (std::cos(angle) * dir + std::sin(angle) * tangent).normalized();
}

const Vec3 kSkinTones[] = {{0.96, 0.80, 0.69}, {0.92, 0.72, 0.58}, {0.84, 0.62, 0.47},
                           {0.66, 0.46, 0.33}, {0.48, 0.33, 0.23}};
const Vec3 kHairTones[] = {{0.08, 0.07, 0.06}, {0.24, 0.16, 0.10}, {0.40, 0.27, 0.16},
                               {0.76, 0.64, 0.40}, {0.52, 0.22, 0.10}, {0.58, 0.58, 0.56}};

struct Builder {
    mesh::TriMesh mesh;
    std::vector<Region> regions;

    int add(const Vec3& p, const Vec3& color, Region r)
    {
        mesh.positions.push_back(p);
        mesh.colors.push_back(color);
        regions.push_back(r);
        return static_cast<int>(mesh.positions.size()) - 1;
    }
};

// Hair strand lying over the scalp at a roughly constant height, as a capped
// hexagonal tube.
void add_strand(Builder& b, const HeadShape& head, const Vec3& root_dir, const Vec3& growth, double radius,
                double height, double length, const Vec3& color, Rng& rng)
{
    constexpr int kSides = 6;
    constexpr double kStep = 5.0;
    const int rings = std::max(2, static_cast<int>(length / kStep) + 1);

    std::vector<Vec3> path;
    Vec3 dir = root_dir;
    Vec3 tangent = (growth - growth.dot(dir) * dir).normalized();
    double h = height;
    for (int i = 0; i < rings; ++i) {
        path.push_back((head.radius(dir) + h) * dir);
        const double angle = kStep / head.radius(dir);
        const Vec3 next = rotate_towards(dir, tangent, angle);
        // Transport the heading and let it curl slowly.
        tangent = (tangent - tangent.dot(next) * next).normalized();
        const Vec3 side = next.cross(tangent);
        tangent = (tangent + rng.uniform(-0.15, 0.15) * side).normalized();
        dir = next;
        h = std::clamp(h + rng.uniform(-0.4, 0.4), radius + 2.5, radius + 7.0);
    }

    Vec3 t0 = (path[1] - path[0]).normalized();
    Vec3 n = t0.unitOrthogonal();
    std::vector<int> first_ring, prev_ring;
    for (int i = 0; i < rings; ++i) {
        const Vec3 t = (path[std::min(i + 1, rings - 1)] - path[std::max(i - 1, 0)]).normalized();
        n = (n - n.dot(t) * t).normalized();
        const Vec3 bvec = t.cross(n);
        std::vector<int> ring;
        for (int k = 0; k < kSides; ++k) {
            const double phi = 2 * pi * k / kSides;
            ring.push_back(b.add(path[i] + radius * (std::cos(phi) * n + std::sin(phi) * bvec), jitter(color, 0.03, rng),
                                 Region::hair));
        }
        if (i == 0) first_ring = ring;
        if (!prev_ring.empty()) {
            for (int k = 0; k < kSides; ++k) {
                const int a = prev_ring[k], c = prev_ring[(k + 1) % kSides];
                const int d = ring[k], e = ring[(k + 1) % kSides];
                b.mesh.faces.push_back({a, c, e});
                b.mesh.faces.push_back({a, e, d});
            }
        }
        prev_ring = ring;
    }
    const int cap0 = b.add(path.front(), jitter(color, 0.03, rng), Region::hair);
    const int cap1 = b.add(path.back(), jitter(color, 0.03, rng), Region::hair);
    for (int k = 0; k < kSides; ++k) {
        b.mesh.faces.push_back({cap0, first_ring[(k + 1) % kSides], first_ring[k]});
        b.mesh.faces.push_back({cap1, prev_ring[k], prev_ring[(k + 1) % kSides]});
    }
}

// Flattened ellipsoid hovering above the surface.
void add_blob(Builder& b, const HeadShape& head, Rng& rng)
{
    const Vec3 dir = HeadShape::random_direction(rng);
    const Vec3 n = head.normal(dir);
    const Vec3 t1 = n.unitOrthogonal();
    const Vec3 t2 = n.cross(t1);
    const double angle = rng.uniform(0, 2 * pi);
    const Vec3 ax = std::cos(angle) * t1 + std::sin(angle) * t2;
    const Vec3 ay = n.cross(ax);
    const double a = rng.uniform(5, 14), bb = rng.uniform(5, 14), c = rng.uniform(2, 6);
    const Vec3 center = head.point(dir) + (c + rng.uniform(2.5, 5.0)) * n;
    const Vec3 color = hsv(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.3, 1.0));

    const auto sphere = mesh::icosphere(2);
    const int base = static_cast<int>(b.mesh.positions.size());
    for (const auto& p : sphere.positions) {
        b.add(center + a * p.x() * ax + bb * p.y() * ay + c * p.z() * n, jitter(color, 0.03, rng), Region::blob);
    }
    for (const auto& f : sphere.faces) b.mesh.faces.push_back({base + f[0], base + f[1], base + f[2]});
}

// Crumpled floating patch with skin-like color, standing in for
// reconstruction debris. Debris exists only in the reconstruction, so it is
// left out of the rendered photographs.
void add_fragment(Builder& b, const HeadShape& head, const Vec3& skin, Rng& rng)
{
    const Vec3 dir = HeadShape::random_direction(rng);
    const Vec3 n = head.normal(dir);
    const Vec3 t1 = n.unitOrthogonal();
    const Vec3 t2 = n.cross(t1);
    const int m = 6 + static_cast<int>(rng.below(5));
    const double spacing = rng.uniform(3.0, 4.0);
    const Vec3 center = head.point(dir) + rng.uniform(6.0, 14.0) * n;
    const Vec3 color = skin * rng.uniform(0.85, 1.0);
    const int base = static_cast<int>(b.mesh.positions.size());
    for (int j = 0; j < m; ++j) {
        for (int i = 0; i < m; ++i) {
            const double x = (i - 0.5 * (m - 1) + rng.uniform(-0.3, 0.3)) * spacing;
            const double y = (j - 0.5 * (m - 1) + rng.uniform(-0.3, 0.3)) * spacing;
            b.add(center + x * t1 + y * t2 + rng.uniform(-1.5, 1.5) * n, jitter(color, 0.04, rng), Region::fragment);
        }
    }
    for (int j = 0; j + 1 < m; ++j) {
        for (int i = 0; i + 1 < m; ++i) {
            const int a = base + j * m + i, c = a + 1, d = a + m, e = d + 1;
            if ((i + j) % 2 == 0) {
                b.mesh.faces.push_back({a, c, e});
                b.mesh.faces.push_back({a, e, d});
            } else {
                b.mesh.faces.push_back({a, c, d});
                b.mesh.faces.push_back({c, e, d});
            }
        }
    }
}

int count_for(double density, double lo, double hi, Rng& rng)
{
    return static_cast<int>(std::lround(density * rng.uniform(lo, hi)));
}

void round_to_float(mesh::TriMesh& m)
{
    for (auto& p : m.positions) {
        for (int k = 0; k < 3; ++k) p[k] = static_cast<double>(static_cast<float>(p[k]));
    }
    for (auto& c : m.colors) {
        for (int k = 0; k < 3; ++k) c[k] = std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0) / 255.0;
    }
}

Eigen::Matrix3d look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& up)
{
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = z.cross(up).normalized();
    const Vec3 y = z.cross(x);
    Eigen::Matrix3d R;
    R.row(0) = x;
    R.row(1) = y;
    R.row(2) = z;
    return R;
}

} // namespace

Profile profile_by_name(const std::string& name)
{
    Profile p;
    p.name = name;
    if (name == "test") return p;
    if (name == "large") {
        p.vertices = 163842;
        p.image_size = 256;
        return p;
    }
    throw ConfigError("unknown profile '" + name + "' (expected test or large)");
}

std::vector<mview::Camera> default_cameras(const Profile& profile)
{
    if (profile.views < 1) throw ArgumentError("default_cameras: need at least one view");
    if (profile.image_size < 8) throw ArgumentError("default_cameras: image size must be at least 8");
    const int ring = profile.views >= 4 ? profile.views - 3 : profile.views;
    const int elevated = profile.views - ring;
    const double distance = 600.0;
    std::vector<mview::Camera> cams;
    auto add = [&](double azimuth, double elevation) {
        const Vec3 eye = distance * Vec3(std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
                                         std::sin(elevation));
        mview::Camera c;
        c.R = look_at_rotation(eye, Vec3::Zero(), Vec3::UnitZ());
        c.t = -c.R * eye;
        c.width = c.height = profile.image_size;
        c.fx = c.fy = 2.0 * profile.image_size;
        c.cx = c.cy = (profile.image_size - 1) / 2.0;
        cams.push_back(c);
    };
    for (int i = 0; i < ring; ++i) add(2 * pi * i / ring - pi / 2, 10.0 * pi / 180);
    for (int i = 0; i < elevated; ++i) add(2 * pi * i / elevated - pi / 6, 55.0 * pi / 180);
    return cams;
}

SynthSample generate_sample(std::uint64_t seed, const Profile& profile)
{
    if (profile.vertices < 12) throw ArgumentError("generate_sample: profile needs at least 12 head vertices");
    if (profile.clutter_density < 0) throw ArgumentError("generate_sample: clutter density must be non-negative");
    if (profile.noise_amplitude < 0 || profile.noise_amplitude > 0.5) {
        throw ArgumentError("generate_sample: noise amplitude must lie in [0, 0.5] mm");
    }
    Rng rng(seed);
    const HeadShape head(rng);

    // Scan level L has 10*4^L + 2 vertices; the reference is one level coarser.
    int level = 1;
    while (level < 8 && 10.0 * std::pow(4.0, level + 1) + 2 <= profile.vertices * 1.5) ++level;
    SynthSample s;
    s.reference = mesh::icosphere(level - 1);
    for (auto& p : s.reference.positions) p = head.point(p);
    round_to_float(s.reference);

    Builder b;
    b.mesh = mesh::subdivide_linear(s.reference);
    b.mesh.colors.clear();

    // Skin color, noise patches and cloth shells on the head vertices.
    const Vec3 skin = jitter(kSkinTones[rng.below(std::size(kSkinTones))], 0.03, rng);
    std::vector<std::pair<Vec3, double>> noisy;
    const int noisy_count = 4 + static_cast<int>(rng.below(5));
    for (int i = 0; i < noisy_count; ++i) noisy.emplace_back(HeadShape::random_direction(rng), rng.uniform(0.3, 0.6));

    struct Shell {
        Vec3 center;
        double angle, offset;
        Vec3 color;
    };
    std::vector<Shell> shells;
    const int shell_count = count_for(profile.clutter_density, 0.5, 1.8, rng);
    for (int i = 0; i < shell_count; ++i) {
        shells.push_back({HeadShape::random_direction(rng), rng.uniform(0.35, 0.6), rng.uniform(3.0, 6.0),
                          hsv(rng.uniform(), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.9))});
    }
    const double band = 0.06;  // radians over which a shell lifts off

    const std::size_t head_count = b.mesh.positions.size();
    b.regions.resize(head_count);
    b.mesh.colors.resize(head_count);
    for (std::size_t i = 0; i < head_count; ++i) {
        Vec3& p = b.mesh.positions[i];
        const Vec3 dir = p.normalized();
        bool is_noisy = false;
        for (const auto& [c, r] : noisy) is_noisy = is_noisy || std::acos(std::clamp(dir.dot(c), -1.0, 1.0)) < r;
        const double amp = profile.noise_amplitude * (is_noisy ? 1.0 : 0.15);
        double lift = 0.0;
        const Shell* owner = nullptr;
        for (const auto& sh : shells) {
            const double theta = std::acos(std::clamp(dir.dot(sh.center), -1.0, 1.0));
            const double w = std::clamp((sh.angle - theta) / band, 0.0, 1.0);
            if (w * sh.offset > lift) {
                lift = w * sh.offset;
                owner = w > 0.5 ? &sh : nullptr;
            }
        }
        p += (rng.uniform(-amp, amp) + lift) * dir;
        if (owner) {
            b.regions[i] = Region::shell;
            b.mesh.colors[i] = jitter(owner->color, 0.03, rng);
        } else {
            b.regions[i] = is_noisy ? Region::noisy_skin : Region::smooth_skin;
            // Low-frequency tone variation plus per-vertex jitter.
            const double tone = 1.0 + 0.05 * std::sin(3 * dir.x() + 2 * dir.z()) * std::cos(2 * dir.y());
            b.mesh.colors[i] = jitter(skin * tone, 0.02, rng);
        }
    }

    const int bundles = count_for(profile.clutter_density, 0.8, 3.2, rng);
    for (int i = 0; i < bundles; ++i) {
        const Vec3 root = random_direction_above(rng, 0.25);
        const Vec3 hair = kHairTones[rng.below(std::size(kHairTones))];
        const Vec3 growth = rotate_towards(-Vec3::UnitZ(), root.unitOrthogonal(), rng.uniform(-0.6, 0.6));
        const int strands = 3 + static_cast<int>(rng.below(4));
        for (int k = 0; k < strands; ++k) {
            const Vec3 d = (root + 0.08 * Vec3(rng.normal(), rng.normal(), rng.normal())).normalized();
            const double radius = rng.uniform(1.5, 3.0);
            add_strand(b, head, d, growth, radius, radius + rng.uniform(2.5, 6.0), rng.uniform(25, 55),
                       jitter(hair, 0.04, rng), rng);
        }
    }
    const int blobs = count_for(profile.clutter_density, 0.3, 2.8, rng);
    for (int i = 0; i < blobs; ++i) add_blob(b, head, rng);
    const int fragments = count_for(profile.clutter_density, 1.0, 4.0, rng);
    for (int i = 0; i < fragments; ++i) add_fragment(b, head, skin, rng);

    s.scan = std::move(b.mesh);
    s.regions = std::move(b.regions);
    round_to_float(s.scan);
    mesh::validate(s.scan);

    s.labels = label_by_distance(s.scan, s.reference);
    s.cameras = default_cameras(profile);
    s.images = render_views(photographed_scene(s.scan, s.regions), s.cameras);
    return s;
}

mesh::TriMesh photographed_scene(const mesh::TriMesh& scan, const std::vector<Region>& regions)
{
    mesh::TriMesh out = scan;
    std::erase_if(out.faces, [&](const mesh::Face& f) {
        return regions[static_cast<std::size_t>(f[0])] == Region::fragment && regions[static_cast<std::size_t>(f[1])] == Region::fragment &&
               regions[static_cast<std::size_t>(f[2])] == Region::fragment;
    });
    return out;
}

featio::Image render_view(const mesh::TriMesh& mesh, const mview::Camera& cam)
{
    featio::Image img(cam.width, cam.height);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
        for (int c = 0; c < 3; ++c) img.rgb[i + c] = kBackground[c];
    }
    if (mesh.faces.empty()) return img;
    const auto raster = mview::rasterize(mesh, cam);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * cam.width + x;
            const int f = raster.face[idx];
            if (f < 0) continue;
            const auto& face = mesh.faces[static_cast<std::size_t>(f)];
            const Vec3& w = raster.bary[idx];
            Vec3 color(0.8, 0.8, 0.8);
            if (mesh.has_colors()) color = w[0] * mesh.colors[face[0]] + w[1] * mesh.colors[face[1]] + w[2] * mesh.colors[face[2]];
            const double lambert = std::abs(mesh::face_normal(mesh, static_cast<std::size_t>(f)).dot(kLight));
            const Vec3 shaded = color * (0.5 + 0.5 * lambert);
            for (int c = 0; c < 3; ++c) {
                img.rgb[idx * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(shaded[c], 0.0, 1.0) * 255.0));
            }
        }
    }
    return img;
}

std::vector<featio::Image> render_views(const mesh::TriMesh& mesh, const std::vector<mview::Camera>& cameras)
{
    std::vector<featio::Image> out(cameras.size());
    parallel_for(cameras.size(), [&](std::size_t i) { out[i] = render_view(mesh, cameras[i]); });
    return out;
}

} // namespace headseg::synthgen
