#include "headseg/synthgen.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace headseg::synthgen {

namespace fs = std::filesystem;

namespace {
constexpr std::uint32_t kLabelsVersion = 1;
}

std::vector<std::uint8_t> read_labels(const fs::path& path)
{
    bin::Reader r(bin::read_file(path), path.string());
    r.expect_magic("LBLS");
    const auto version = r.u32();
    if (version != kLabelsVersion) throw FormatError(path.string() + ": unsupported LBLS version " + std::to_string(version));
    const auto n = r.u32();
    r.need(n, "label data");
    std::vector<std::uint8_t> labels(n);
    for (auto& l : labels) {
        l = r.u8();
        if (l > 1) throw FormatError(path.string() + ": label value " + std::to_string(l) + " at byte " + std::to_string(r.offset() - 1));
    }
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after label data at byte " + std::to_string(r.offset()));
    return labels;
}

void write_labels(const std::vector<std::uint8_t>& labels, const fs::path& path)
{
    std::vector<char> out;
    bin::put_magic(out, "LBLS");
    bin::put_u32(out, kLabelsVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(labels.size()));
    for (auto l : labels) out.push_back(static_cast<char>(l));
    bin::write_file_atomic(path, out);
}

std::string sample_dir_name(int index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04d", index);
    return buf;
}

fs::path view_image_path(const fs::path& dir, int view)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%02d.ppm", view);
    return dir / buf;
}

void write_sample(const SynthSample& sample, const fs::path& dir)
{
    fs::create_directories(dir);
    mesh::save_mesh(sample.scan, dir / "scan.ply", mesh::MeshFormat::ply_binary);
    mesh::save_mesh(sample.reference, dir / "reference.ply", mesh::MeshFormat::ply_binary);
    mview::save_cameras(sample.cameras, dir / "cameras.json");
    for (std::size_t i = 0; i < sample.images.size(); ++i) {
        featio::write_ppm(sample.images[i], view_image_path(dir, static_cast<int>(i)));
    }
    write_labels(sample.labels, dir / "labels.bin");
}

DatasetSplit read_split(const fs::path& root)
{
    const auto path = root / "split.json";
    std::ifstream in(path);
    if (!in) throw ValidationError("missing dataset split file " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        return DatasetSplit{j.at("train").get<std::vector<std::string>>(), j.at("test").get<std::vector<std::string>>()};
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_split(const DatasetSplit& split, const fs::path& root)
{
    const std::string text = nlohmann::json{{"train", split.train}, {"test", split.test}}.dump(2) + "\n";
    bin::write_file_atomic(root / "split.json", std::vector<char>(text.begin(), text.end()));
}

DatasetSplit generate_dataset(const fs::path& root, int count, std::uint64_t first_seed, const Profile& profile,
                              bool overwrite)
{
    if (count < 1) throw ArgumentError("generate_dataset: count must be positive");
    fs::create_directories(root);
    for (int i = 0; i < count; ++i) {
        const auto dir = root / sample_dir_name(i);
        if (fs::exists(dir) && !overwrite) {
            throw ValidationError(dir.string() + " already exists (use --force to overwrite)");
        }
    }
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        const auto sample = generate_sample(first_seed + i, profile);
        const auto dir = root / sample_dir_name(static_cast<int>(i));
        // Build in a sibling directory and swap it in, so an interrupted run
        // never leaves a half-written sample under the final name.
        const auto staging = root / (sample_dir_name(static_cast<int>(i)) + ".partial");
        fs::remove_all(staging);
        write_sample(sample, staging);
        fs::remove_all(dir);
        fs::rename(staging, dir);
    });

    DatasetSplit split;
    const int test = std::max(count >= 2 ? 1 : 0, count / 4);
    for (int i = 0; i < count; ++i) {
        (i < count - test ? split.train : split.test).push_back(sample_dir_name(i));
    }
    write_split(split, root);
    return split;
}

} // namespace headseg::synthgen
