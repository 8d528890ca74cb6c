#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "headseg/mesh.hpp"

namespace headseg::mesh {

namespace {

std::string lower_ext(const std::filesystem::path& p)
{
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::size_t line, const std::string& msg)
{
    throw ParseError(path.string() + ":" + std::to_string(line) + ": " + msg);
}

std::vector<std::string_view> split_ws(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

bool to_double(std::string_view s, double& out)
{
    // from_chars for double is available in libstdc++ 11.
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

bool to_long(std::string_view s, long long& out)
{
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

TriMesh load_obj(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open mesh file: " + path.string());
    TriMesh mesh;
    std::vector<Vec3> colors;
    bool any_color = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto tok = split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        if (tok[0] == "v") {
            if (tok.size() != 4 && tok.size() != 7) parse_fail(path, lineno, "vertex record needs 3 or 6 numbers");
            Vec3 p;
            for (int k = 0; k < 3; ++k) {
                if (!to_double(tok[1 + k], p[k])) parse_fail(path, lineno, "bad number '" + std::string(tok[1 + k]) + "'");
            }
            mesh.positions.push_back(p);
            Vec3 c = Vec3::Zero();
            if (tok.size() == 7) {
                any_color = true;
                for (int k = 0; k < 3; ++k) {
                    if (!to_double(tok[4 + k], c[k])) parse_fail(path, lineno, "bad color '" + std::string(tok[4 + k]) + "'");
                }
            }
            colors.push_back(c);
        } else if (tok[0] == "f") {
            if (tok.size() < 4) parse_fail(path, lineno, "face record needs at least 3 indices");
            std::vector<int> idx;
            for (std::size_t k = 1; k < tok.size(); ++k) {
                auto s = tok[k];
                s = s.substr(0, s.find('/'));
                long long v;
                if (!to_long(s, v) || v == 0) parse_fail(path, lineno, "bad face index '" + std::string(tok[k]) + "'");
                // Negative indices count back from the most recent vertex.
                const long long zero_based = v > 0 ? v - 1 : static_cast<long long>(mesh.positions.size()) + v;
                idx.push_back(static_cast<int>(zero_based));
            }
            for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
        }
    }
    if (any_color) mesh.colors = std::move(colors);
    return mesh;
}

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

PlyType ply_type(std::string_view s, const std::filesystem::path& path, std::size_t line)
{
    if (s == "char" || s == "int8") return PlyType::i8;
    if (s == "uchar" || s == "uint8") return PlyType::u8;
    if (s == "short" || s == "int16") return PlyType::i16;
    if (s == "ushort" || s == "uint16") return PlyType::u16;
    if (s == "int" || s == "int32") return PlyType::i32;
    if (s == "uint" || s == "uint32") return PlyType::u32;
    if (s == "float" || s == "float32") return PlyType::f32;
    if (s == "double" || s == "float64") return PlyType::f64;
    parse_fail(path, line, "unknown PLY property type '" + std::string(s) + "'");
}

std::size_t ply_size(PlyType t)
{
    switch (t) {
    case PlyType::i8:
    case PlyType::u8: return 1;
    case PlyType::i16:
    case PlyType::u16: return 2;
    case PlyType::i32:
    case PlyType::u32:
    case PlyType::f32: return 4;
    case PlyType::f64: return 8;
    }
    return 0;
}

struct PlyProperty {
    std::string name;
    PlyType type = PlyType::f32;
    bool is_list = false;
    PlyType count_type = PlyType::u8;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

// Cursor over the body of a PLY file, in either encoding.
class PlyBody {
public:
    PlyBody(const std::vector<char>& data, std::size_t offset, bool binary, std::size_t first_line,
            const std::filesystem::path& path)
        : data_(data), pos_(offset), binary_(binary), line_(first_line), path_(path)
    {
    }

    double read(PlyType t)
    {
        if (binary_) return read_binary(t);
        const auto tok = next_token();
        double v;
        if (!to_double(tok, v)) parse_fail(path_, line_, "bad PLY value '" + std::string(tok) + "'");
        return v;
    }

    void end_record()
    {
        if (binary_) return;
        while (pos_ < data_.size() && data_[pos_] != '\n') {
            if (!std::isspace(static_cast<unsigned char>(data_[pos_]))) {
                parse_fail(path_, line_, "unexpected extra values in PLY record");
            }
            ++pos_;
        }
        if (pos_ < data_.size()) {
            ++pos_;
            ++line_;
        }
    }

private:
    double read_binary(PlyType t)
    {
        const std::size_t n = ply_size(t);
        if (pos_ + n > data_.size()) {
            throw ParseError(path_.string() + ": truncated PLY body at byte offset " + std::to_string(pos_));
        }
        const char* p = data_.data() + pos_;
        pos_ += n;
        switch (t) {
        case PlyType::i8: return static_cast<double>(static_cast<std::int8_t>(*p));
        case PlyType::u8: return static_cast<double>(static_cast<std::uint8_t>(*p));
        case PlyType::i16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::u16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::i32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
        case PlyType::u32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
        case PlyType::f32: { float v; std::memcpy(&v, p, 4); return v; }
        case PlyType::f64: { double v; std::memcpy(&v, p, 8); return v; }
        }
        return 0;
    }

    std::string_view next_token()
    {
        while (pos_ < data_.size() && (data_[pos_] == ' ' || data_[pos_] == '\t' || data_[pos_] == '\r')) ++pos_;
        if (pos_ >= data_.size() || data_[pos_] == '\n') parse_fail(path_, line_, "PLY record has too few values");
        const std::size_t start = pos_;
        while (pos_ < data_.size() && !std::isspace(static_cast<unsigned char>(data_[pos_]))) ++pos_;
        return {data_.data() + start, pos_ - start};
    }

    const std::vector<char>& data_;
    std::size_t pos_;
    bool binary_;
    std::size_t line_;
    const std::filesystem::path& path_;
};

TriMesh load_ply(const std::filesystem::path& path)
{
    const auto data = bin::read_file(path);
    std::size_t pos = 0;
    std::size_t lineno = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= data.size()) parse_fail(path, lineno, "unexpected end of PLY header");
        const auto nl = std::find(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end(), '\n');
        std::string s(data.begin() + static_cast<std::ptrdiff_t>(pos), nl);
        pos = static_cast<std::size_t>(nl - data.begin()) + 1;
        ++lineno;
        if (!s.empty() && s.back() == '\r') s.pop_back();
        return s;
    };

    if (next_line() != "ply") parse_fail(path, 1, "missing 'ply' magic line");
    bool binary = false;
    bool have_format = false;
    std::vector<PlyElement> elements;
    for (;;) {
        const std::string line = next_line();
        const auto tok = split_ws(line);
        if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
        if (tok[0] == "end_header") break;
        if (tok[0] == "format") {
            if (tok.size() != 3 || tok[2] != "1.0") parse_fail(path, lineno, "unsupported PLY format line");
            if (tok[1] == "ascii") binary = false;
            else if (tok[1] == "binary_little_endian") binary = true;
            else parse_fail(path, lineno, "unsupported PLY encoding '" + std::string(tok[1]) + "'");
            have_format = true;
        } else if (tok[0] == "element") {
            long long n;
            if (tok.size() != 3 || !to_long(tok[2], n) || n < 0) parse_fail(path, lineno, "bad element line");
            elements.push_back({std::string(tok[1]), static_cast<std::size_t>(n), {}});
        } else if (tok[0] == "property") {
            if (elements.empty()) parse_fail(path, lineno, "property before element");
            PlyProperty p;
            if (tok.size() == 5 && tok[1] == "list") {
                p.is_list = true;
                p.count_type = ply_type(tok[2], path, lineno);
                p.type = ply_type(tok[3], path, lineno);
                p.name = tok[4];
            } else if (tok.size() == 3) {
                p.type = ply_type(tok[1], path, lineno);
                p.name = tok[2];
            } else {
                parse_fail(path, lineno, "bad property line");
            }
            elements.back().props.push_back(p);
        } else {
            parse_fail(path, lineno, "unknown PLY header keyword '" + std::string(tok[0]) + "'");
        }
    }
    if (!have_format) parse_fail(path, lineno, "PLY header lacks a format line");

    TriMesh mesh;
    PlyBody body(data, pos, binary, lineno + 1, path);
    for (const auto& el : elements) {
        const bool is_vertex = el.name == "vertex";
        const bool is_face = el.name == "face";
        int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1, ilist = -1;
        for (std::size_t k = 0; k < el.props.size(); ++k) {
            const auto& n = el.props[k].name;
            const int ki = static_cast<int>(k);
            if (n == "x") ix = ki;
            else if (n == "y") iy = ki;
            else if (n == "z") iz = ki;
            else if (n == "red") ir = ki;
            else if (n == "green") ig = ki;
            else if (n == "blue") ib = ki;
            else if (el.props[k].is_list && (n == "vertex_indices" || n == "vertex_index")) ilist = ki;
        }
        if (is_vertex && (ix < 0 || iy < 0 || iz < 0)) parse_fail(path, lineno, "vertex element lacks x/y/z");
        if (is_face && ilist < 0) parse_fail(path, lineno, "face element lacks vertex_indices");
        const bool colors = is_vertex && ir >= 0 && ig >= 0 && ib >= 0;

        std::vector<double> vals(el.props.size());
        std::vector<int> list;
        for (std::size_t r = 0; r < el.count; ++r) {
            for (std::size_t k = 0; k < el.props.size(); ++k) {
                const auto& p = el.props[k];
                if (p.is_list) {
                    const double cnt = body.read(p.count_type);
                    if (cnt < 0) parse_fail(path, lineno, "negative list length");
                    list.clear();
                    for (std::size_t q = 0; q < static_cast<std::size_t>(cnt); ++q) {
                        list.push_back(static_cast<int>(body.read(p.type)));
                    }
                    if (is_face && static_cast<int>(k) == ilist) {
                        if (list.size() < 3) parse_fail(path, lineno, "face with fewer than 3 vertices");
                        for (std::size_t q = 1; q + 1 < list.size(); ++q) {
                            mesh.faces.push_back({list[0], list[q], list[q + 1]});
                        }
                    }
                } else {
                    vals[k] = body.read(p.type);
                }
            }
            body.end_record();
            if (is_vertex) {
                mesh.positions.emplace_back(vals[ix], vals[iy], vals[iz]);
                if (colors) mesh.colors.emplace_back(vals[ir] / 255.0, vals[ig] / 255.0, vals[ib] / 255.0);
            }
        }
    }
    return mesh;
}

void save_obj(const TriMesh& mesh, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw Error("cannot write mesh file: " + path.string());
    out << std::setprecision(17);
    for (std::size_t i = 0; i < mesh.num_vertices(); ++i) {
        const auto& p = mesh.positions[i];
        out << "v " << p.x() << ' ' << p.y() << ' ' << p.z();
        if (mesh.has_colors()) {
            const auto& c = mesh.colors[i];
            out << ' ' << c.x() << ' ' << c.y() << ' ' << c.z();
        }
        out << '\n';
    }
    for (const auto& t : mesh.faces) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    if (!out) throw Error("failed writing mesh file: " + path.string());
}

std::uint8_t color_byte(double c)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

void save_ply(const TriMesh& mesh, const std::filesystem::path& path, bool binary)
{
    std::ostringstream header;
    header << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
           << "element vertex " << mesh.num_vertices() << "\n"
           << "property float x\nproperty float y\nproperty float z\n";
    if (mesh.has_colors()) header << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    header << "element face " << mesh.num_faces() << "\n"
           << "property list uchar int vertex_indices\nend_header\n";
    const std::string h = header.str();
    std::vector<char> out(h.begin(), h.end());
    if (binary) {
        for (std::size_t i = 0; i < mesh.num_vertices(); ++i) {
            for (int k = 0; k < 3; ++k) bin::put_f32(out, static_cast<float>(mesh.positions[i][k]));
            if (mesh.has_colors()) {
                for (int k = 0; k < 3; ++k) out.push_back(static_cast<char>(color_byte(mesh.colors[i][k])));
            }
        }
        for (const auto& t : mesh.faces) {
            out.push_back(3);
            for (int v : t) bin::put_u32(out, static_cast<std::uint32_t>(v));
        }
    } else {
        std::ostringstream body;
        body << std::setprecision(9);
        for (std::size_t i = 0; i < mesh.num_vertices(); ++i) {
            const auto& p = mesh.positions[i];
            body << static_cast<float>(p.x()) << ' ' << static_cast<float>(p.y()) << ' ' << static_cast<float>(p.z());
            if (mesh.has_colors()) {
                for (int k = 0; k < 3; ++k) body << ' ' << static_cast<int>(color_byte(mesh.colors[i][k]));
            }
            body << '\n';
        }
        for (const auto& t : mesh.faces) body << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
        const std::string b = body.str();
        out.insert(out.end(), b.begin(), b.end());
    }
    bin::write_file_atomic(path, out);
}

} // namespace

TriMesh load_mesh(const std::filesystem::path& path)
{
    const auto ext = lower_ext(path);
    if (ext == ".obj") return load_mesh(path, MeshFormat::obj);
    if (ext == ".ply") return load_mesh(path, MeshFormat::ply_binary);
    throw ArgumentError("unrecognized mesh extension: " + path.string());
}

TriMesh load_mesh(const std::filesystem::path& path, MeshFormat format)
{
    if (!std::filesystem::exists(path)) throw Error("mesh file not found: " + path.string());
    // Both PLY encodings are detected from the header.
    TriMesh mesh = format == MeshFormat::obj ? load_obj(path) : load_ply(path);
    try {
        validate(mesh);
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return mesh;
}

void save_mesh(const TriMesh& mesh, const std::filesystem::path& path, MeshFormat format)
{
    switch (format) {
    case MeshFormat::obj: save_obj(mesh, path); break;
    case MeshFormat::ply_ascii: save_ply(mesh, path, false); break;
    case MeshFormat::ply_binary: save_ply(mesh, path, true); break;
    }
}

} // namespace headseg::mesh
