#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "headseg/featio.hpp"
#include "headseg/mesh.hpp"
#include "headseg/mview.hpp"

namespace headseg::synthgen {

inline constexpr double kSkinThreshold = 1.5;  // mm
inline constexpr std::uint8_t kSkin = 1;
inline constexpr std::uint8_t kNonSkin = 0;

/// Exact closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding-volume hierarchy over the faces of a mesh for exact
/// point-to-surface distance queries.
class SurfaceIndex {
public:
    explicit SurfaceIndex(const mesh::TriMesh& mesh);

    double distance(const Vec3& p) const;
    std::vector<double> distances(const std::vector<Vec3>& points) const;

private:
    struct Node {
        Eigen::AlignedBox3d box;
        int begin, end;   // range in order_ for leaves
        int left, right;  // -1 for leaves
    };
    int build(int begin, int end);
    void search(int node, const Vec3& p, double& best_sq) const;
    double face_distance_sq(int f, const Vec3& p) const;

    std::vector<Vec3> positions_;
    std::vector<mesh::Face> faces_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
};

double point_to_surface(const Vec3& p, const mesh::TriMesh& surface);

/// Distance < tau is skin, distance >= tau is non-skin.
std::vector<std::uint8_t> label_by_distance(const mesh::TriMesh& scan, const mesh::TriMesh& reference,
                                            double tau = kSkinThreshold);

/// Ground-truth construction tag per scan vertex.
enum class Region : std::uint8_t { smooth_skin, noisy_skin, shell, hair, blob, fragment };

struct Profile {
    std::string name = "test";
    int vertices = 2562;          // head vertices before clutter
    double clutter_density = 1.0; // 0 disables all clutter
    double noise_amplitude = 0.5; // mm, upper bound of the normal noise
    int image_size = 128;
    int views = 13;
};

/// Named profiles: "test" (about 3.5K vertices) and "large" (160K+).
Profile profile_by_name(const std::string& name);

struct SynthSample {
    mesh::TriMesh scan;
    mesh::TriMesh reference;
    std::vector<mview::Camera> cameras;
    std::vector<featio::Image> images;  // renders of photographed_scene(scan)
    std::vector<std::uint8_t> labels;
    std::vector<Region> regions;
};

/// Deterministic per seed. Positions of both meshes are rounded to float32
/// precision before labeling so that labels are reproducible from the stored
/// PLY files.
SynthSample generate_sample(std::uint64_t seed, const Profile& profile = {});

std::vector<mview::Camera> default_cameras(const Profile& profile);

/// Scan faces that exist in the photographed scene: everything except the
/// reconstruction debris.
mesh::TriMesh photographed_scene(const mesh::TriMesh& scan, const std::vector<Region>& regions);

/// Two-sided Lambert key light fixed in world space, so shading does not
/// change with the viewpoint as under a static capture rig.
inline const Vec3 kLight = Vec3(0.3, -0.5, 0.8).normalized();

/// Flat-shaded rendering of the vertex colors under kLight over a constant
/// background.
featio::Image render_view(const mesh::TriMesh& mesh, const mview::Camera& cam);
std::vector<featio::Image> render_views(const mesh::TriMesh& mesh, const std::vector<mview::Camera>& cameras);

inline constexpr std::uint8_t kBackground[3] = {24, 28, 36};

std::vector<std::uint8_t> read_labels(const std::filesystem::path& path);
void write_labels(const std::vector<std::uint8_t>& labels, const std::filesystem::path& path);

/// Writes scan.ply, reference.ply, cameras.json, view_NN.ppm and labels.bin.
void write_sample(const SynthSample& sample, const std::filesystem::path& dir);
std::string sample_dir_name(int index);
std::filesystem::path view_image_path(const std::filesystem::path& dir, int view);

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Generates `count` samples with seeds first_seed .. first_seed + count - 1;
/// the last quarter forms the test split. Existing sample directories are an
/// error unless overwrite is set.
DatasetSplit generate_dataset(const std::filesystem::path& root, int count, std::uint64_t first_seed,
                              const Profile& profile, bool overwrite);

DatasetSplit read_split(const std::filesystem::path& root);
void write_split(const DatasetSplit& split, const std::filesystem::path& root);

} // namespace headseg::synthgen
