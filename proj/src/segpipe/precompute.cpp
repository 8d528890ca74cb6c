#include <cstdio>

#include "headseg/featio.hpp"
#include "headseg/geomfeat.hpp"
#include "headseg/segpipe.hpp"
#include "headseg/synthgen.hpp"

namespace headseg::segpipe {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kMatrixCacheVersion = 1;

// HSMX cache: "HSMX", u32 version, u32 count, then per matrix u32 rows,
// u32 cols and f64 entries column-major.
std::vector<char> encode_matrices(const std::vector<Eigen::MatrixXd>& mats)
{
    std::vector<char> out;
    bin::put_magic(out, "HSMX");
    bin::put_u32(out, kMatrixCacheVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(mats.size()));
    for (const auto& m : mats) {
        bin::put_u32(out, static_cast<std::uint32_t>(m.rows()));
        bin::put_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) bin::put_f64(out, m.data()[i]);
    }
    return out;
}

std::vector<Eigen::MatrixXd> load_matrices(const fs::path& path)
{
    bin::Reader r(bin::read_file(path), path.string());
    r.expect_magic("HSMX");
    if (r.u32() != kMatrixCacheVersion) throw FormatError(path.string() + ": unsupported cache version");
    const auto count = r.u32();
    std::vector<Eigen::MatrixXd> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto rows = r.u32(), cols = r.u32();
        r.need(8ull * rows * cols, "matrix entries");
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
        out.push_back(std::move(m));
    }
    return out;
}

fs::path require_file(const fs::path& dir, const fs::path& rel, const std::string& hint)
{
    const auto path = dir / rel;
    if (!fs::is_regular_file(path)) {
        throw ValidationError(dir.filename().string() + ": missing " + rel.string() + " (expected at " + path.string() +
                              "; " + hint + ")");
    }
    return path;
}

mesh::TriMesh load_input_mesh(const fs::path& path)
{
    try {
        auto m = mesh::load_mesh(path);
        mesh::validate(m);
        return m;
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    } catch (const ParseError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

// Resolved inputs of one sample plus the cache file names derived from them.
struct Plan {
    fs::path dir, cache;
    fs::path scan, reference, cameras;
    std::vector<fs::path> view_sources;  // images, or feature maps for fmapFiles
    std::vector<std::string> view_hashes;

    fs::path basis, geom, labels, fused;
    std::vector<fs::path> fmaps;  // handcrafted per-view caches
};

bool uses_images(const PipelineConfig& c)
{
    return c.fusion != Fusion::none;
}

bool visibility_weighted(Fusion f)
{
    return f == Fusion::vis_mean || f == Fusion::vis_mean_var;
}

std::string view_name(int i)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "view_%02d", i);
    return buf;
}

Plan make_plan(const fs::path& dir, const PipelineConfig& config)
{
    if (!fs::is_directory(dir)) throw ValidationError("sample directory " + dir.string() + " does not exist");
    const std::string regenerate = "regenerate the sample with `headseg gen-data`";
    Plan p;
    p.dir = dir;
    p.cache = dir / "cache";
    p.scan = require_file(dir, "scan.ply", regenerate);
    p.reference = require_file(dir, "reference.ply", regenerate);
    p.cameras = require_file(dir, "cameras.json", regenerate);

    const std::string scan_hash = Hasher().file(p.scan).hex();
    const std::string ref_hash = Hasher().file(p.reference).hex();
    const std::string basis_key = Hasher().str("basis-v1").str(scan_hash).pod(config.eig_k).hex();
    p.basis = p.cache / ("basis-" + basis_key + ".spec");
    p.geom = p.cache / ("geom-" + Hasher().str("geom-v1").str(basis_key).pod(config.hks_t).hex() + ".mat");
    p.labels = p.cache / ("labels-" + Hasher().str("labels-v1").str(scan_hash).str(ref_hash).pod(config.label_threshold).hex() + ".bin");

    if (!uses_images(config)) return p;

    const auto cameras = mview::load_cameras(p.cameras);
    Hasher fused;
    fused.str("fused-v2").str(scan_hash).str(Hasher().file(p.cameras).hex()).pod(visibility_weighted(config.fusion));
    for (int i = 0; i < static_cast<int>(cameras.size()); ++i) {
        if (config.feature_source == FeatureSource::handcrafted) {
            fs::path rel = view_name(i) + ".ppm";
            if (!fs::is_regular_file(dir / rel)) rel = view_name(i) + ".png";
            p.view_sources.push_back(require_file(dir, rel, "one image per camera in cameras.json is required"));
            const auto key = Hasher().str("fmap-handcrafted-v1").file(p.view_sources.back()).hex();
            p.view_hashes.push_back(key);
            p.fmaps.push_back(p.cache / (view_name(i) + "-" + key + ".fmap"));
        } else {
            p.view_sources.push_back(require_file(dir, fs::path("features") / (view_name(i) + ".fmap"),
                                                  "featureSource fmapFiles needs one FMAP per camera"));
            p.view_hashes.push_back(Hasher().str("fmap-file-v1").file(p.view_sources.back()).hex());
        }
        fused.str(p.view_hashes.back());
    }
    p.fused = p.cache / ("fused-" + fused.hex() + ".mat");
    return p;
}

featio::FeatureMap read_input_fmap(const fs::path& path)
{
    try {
        return featio::read_fmap(path);
    } catch (const FormatError& e) {
        throw ValidationError(e.what());
    }
}

featio::Image read_input_image(const fs::path& path)
{
    try {
        return featio::read_image(path);
    } catch (const FormatError& e) {
        throw ValidationError(e.what());
    } catch (const ParseError& e) {
        throw ValidationError(e.what());
    }
}

Eigen::MatrixXd assemble(const PipelineConfig& config, const mesh::TriMesh& scan, const std::vector<Eigen::MatrixXd>& fused,
                         const std::vector<Eigen::MatrixXd>& geom, const fs::path& dir)
{
    const Eigen::Index V = static_cast<Eigen::Index>(scan.num_vertices());
    std::vector<Eigen::MatrixXd> blocks;
    if (config.fusion != Fusion::none) {
        blocks.push_back(fused[0]);
        if (config.fusion == Fusion::mean_var || config.fusion == Fusion::vis_mean_var) blocks.push_back(fused[1]);
        blocks.push_back(fused[2]);
        blocks.push_back(fused[3]);
    }
    if (config.geom.sigma30) blocks.push_back(geom[1]);
    if (config.geom.hks) blocks.push_back(geomfeat::normalize_hks(geom[0]));
    if (config.geom.color) {
        if (!scan.has_colors()) throw ValidationError(dir.string() + ": geomFeatures \"color\" needs vertex colors in scan.ply");
        Eigen::MatrixXd c(V, 3);
        for (Eigen::Index v = 0; v < V; ++v) c.row(v) = scan.colors[static_cast<std::size_t>(v)].transpose();
        blocks.push_back(std::move(c));
    }
    Eigen::Index cols = 0;
    for (const auto& b : blocks) cols += b.cols();
    Eigen::MatrixXd x(V, cols);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
        if (b.rows() != V) throw ValidationError(dir.string() + ": cached features do not match the scan vertex count");
        x.middleCols(at, b.cols()) = b;
        at += b.cols();
    }
    return x;
}

} // namespace

PrecomputeStats precompute(const fs::path& sample_dir, const PipelineConfig& config)
{
    const Plan p = make_plan(sample_dir, config);
    PrecomputeStats stats;
    std::vector<std::function<void()>> writes;

    const bool need_basis = !fs::exists(p.basis);
    const bool need_geom = !fs::exists(p.geom);
    const bool need_labels = !fs::exists(p.labels);
    const bool need_fused = uses_images(config) && !fs::exists(p.fused);
    std::vector<bool> need_fmap(p.fmaps.size());
    for (std::size_t i = 0; i < p.fmaps.size(); ++i) need_fmap[i] = !fs::exists(p.fmaps[i]);
    const bool any_fmap = std::find(need_fmap.begin(), need_fmap.end(), true) != need_fmap.end();
    if (!need_basis && !need_geom && !need_labels && !need_fused && !any_fmap) return stats;

    const auto scan = load_input_mesh(p.scan);

    spectral::SpectralBasis basis;
    if (need_basis) {
        basis = spectral::compute_basis(scan, config.eig_k);
        ++stats.eigensolves;
        writes.emplace_back([&basis, &p] { spectral::save_basis(basis, p.basis); });
    } else if (need_geom) {
        basis = spectral::load_basis(p.basis);
    }
    std::vector<Eigen::MatrixXd> geom;
    if (need_geom) {
        auto g = geomfeat::compute_geom_features(scan, basis, config.hks_t);
        geom = {g.hks, g.sigma30};
        writes.emplace_back([&geom, &p] { bin::write_file_atomic(p.geom, encode_matrices(geom)); });
    }
    std::vector<std::uint8_t> labels;
    if (need_labels) {
        const auto reference = load_input_mesh(p.reference);
        labels = synthgen::label_by_distance(scan, reference, config.label_threshold);
        writes.emplace_back([&labels, &p] { synthgen::write_labels(labels, p.labels); });
    }

    std::vector<featio::FeatureMap> maps(p.view_sources.size());
    if (any_fmap || need_fused) {
        for (std::size_t i = 0; i < p.view_sources.size(); ++i) {
            if (config.feature_source == FeatureSource::fmap_files) {
                if (need_fused) maps[i] = read_input_fmap(p.view_sources[i]);
            } else if (need_fmap[i]) {
                maps[i] = featio::handcrafted_features(read_input_image(p.view_sources[i]));
                writes.emplace_back([&maps, &p, i] { featio::write_fmap(maps[i], p.fmaps[i]); });
            } else if (need_fused) {
                maps[i] = featio::read_fmap(p.fmaps[i]);
            }
        }
    }
    std::vector<Eigen::MatrixXd> fused;
    if (need_fused) {
        const auto cameras = mview::load_cameras(p.cameras);
        const auto normals = mesh::vertex_normals(scan).normals;
        std::vector<Eigen::MatrixXd> per_view(cameras.size());
        std::vector<Eigen::VectorXd> weights(cameras.size());
        const bool vis = visibility_weighted(config.fusion);
        parallel_for(cameras.size(), [&](std::size_t i) {
            per_view[i] = mview::sample_vertex_features(scan, cameras[i], maps[i]);
            weights[i] = vis ? mview::vertex_visibility(scan, cameras[i], mview::render_depth(scan, cameras[i]), normals)
                             : mview::frustum_mask(scan, cameras[i]);
        });
        auto f = mview::fuse_views(per_view, weights);
        fused = {f.mean, f.variance, f.visibility_sum, f.coverage};
        writes.emplace_back([&fused, &p] { bin::write_file_atomic(p.fused, encode_matrices(fused)); });
    }

    fs::create_directories(p.cache);
    for (const auto& w : writes) w();
    stats.files_written = static_cast<int>(writes.size());
    return stats;
}

PreparedSample prepare(const fs::path& sample_dir, const PipelineConfig& config, PrecomputeStats* stats)
{
    const auto s = precompute(sample_dir, config);
    if (stats) {
        stats->eigensolves += s.eigensolves;
        stats->files_written += s.files_written;
    }
    const Plan p = make_plan(sample_dir, config);
    PreparedSample out;
    out.name = sample_dir.filename().string();
    out.scan = load_input_mesh(p.scan);
    out.reference = load_input_mesh(p.reference);
    out.labels = synthgen::read_labels(p.labels);
    const auto basis = spectral::load_basis(p.basis);
    if (basis.num_vertices() != static_cast<Eigen::Index>(out.scan.num_vertices()) ||
        out.labels.size() != out.scan.num_vertices()) {
        throw ValidationError(sample_dir.string() + ": cached data does not match scan.ply; delete the cache directory");
    }
    const auto geom = load_matrices(p.geom);
    const auto fused = uses_images(config) ? load_matrices(p.fused) : std::vector<Eigen::MatrixXd>{};
    out.features = assemble(config, out.scan, fused, geom, sample_dir);
    out.ops = std::make_shared<const diffnet::Operators<float>>(
        diffnet::make_operators<float>(basis, diffnet::build_tangent_frames(out.scan), config.eig_k));
    return out;
}

std::vector<PreparedSample> prepare_all(const fs::path& root, const std::vector<std::string>& names,
                                        const PipelineConfig& config, PrecomputeStats* stats)
{
    std::vector<PreparedSample> out(names.size());
    std::vector<PrecomputeStats> per(names.size());
    parallel_for(names.size(), [&](std::size_t i) { out[i] = prepare(root / names[i], config, &per[i]); });
    if (stats) {
        for (const auto& s : per) {
            stats->eigensolves += s.eigensolves;
            stats->files_written += s.files_written;
        }
    }
    if (!out.empty()) {
        for (const auto& s : out) {
            if (s.features.cols() != out.front().features.cols()) {
                throw ValidationError(s.name + " has " + std::to_string(s.features.cols()) + " feature channels but " +
                                      out.front().name + " has " + std::to_string(out.front().features.cols()));
            }
        }
    }
    return out;
}

} // namespace headseg::segpipe
