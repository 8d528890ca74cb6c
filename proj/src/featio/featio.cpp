#include "headseg/featio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include <png.h>

namespace headseg::featio {

namespace {

constexpr std::uint32_t kFmapVersion = 1;

void check_dims(int w, int h, const char* what)
{
    if (w <= 0 || h <= 0) throw ArgumentError(std::string(what) + ": dimensions must be positive");
}

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

// Whitespace- and comment-aware PPM header token.
int ppm_token(const std::vector<char>& bytes, std::size_t& pos, const std::string& source)
{
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        throw FormatError(source + ": malformed PPM header at byte " + std::to_string(pos));
    }
    long value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        value = value * 10 + (bytes[pos] - '0');
        if (value > (1 << 24)) throw FormatError(source + ": PPM header value too large");
        ++pos;
    }
    return static_cast<int>(value);
}

Image read_ppm(const std::vector<char>& bytes, const std::string& source)
{
    std::size_t pos = 2;
    const int w = ppm_token(bytes, pos, source);
    const int h = ppm_token(bytes, pos, source);
    const int maxval = ppm_token(bytes, pos, source);
    if (maxval != 255) throw FormatError(source + ": unsupported PPM bit depth (maxval " + std::to_string(maxval) + ")");
    if (w <= 0 || h <= 0) throw FormatError(source + ": PPM dimensions must be positive");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw FormatError(source + ": malformed PPM header at byte " + std::to_string(pos));
    }
    ++pos;
    Image img(w, h);
    const std::size_t need = img.rgb.size();
    if (bytes.size() - pos < need) {
        throw FormatError(source + ": truncated PPM pixel data at byte " + std::to_string(bytes.size()) + " (need " +
                          std::to_string(pos + need) + ")");
    }
    std::memcpy(img.rgb.data(), bytes.data() + pos, need);
    return img;
}

Image read_png(const std::vector<char>& bytes, const std::string& source)
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw FormatError(source + ": " + image.message);
    }
    if (image.format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&image);
        throw FormatError(source + ": unsupported PNG bit depth (16 bit)");
    }
    image.format = PNG_FORMAT_RGB;
    Image img(static_cast<int>(image.width), static_cast<int>(image.height));
    if (!png_image_finish_read(&image, nullptr, img.rgb.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw FormatError(source + ": " + msg);
    }
    return img;
}

std::vector<double> blur_1d(const std::vector<double>& in, int width, int height, const std::vector<double>& kernel,
                            bool horizontal)
{
    const int r = static_cast<int>(kernel.size() / 2);
    std::vector<double> out(in.size());
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            for (int d = -r; d <= r; ++d) {
                const int sx = horizontal ? clamp_index(x + d, width) : x;
                const int sy = horizontal ? y : clamp_index(y + d, height);
                acc += kernel[d + r] * in[static_cast<std::size_t>(sy) * width + sx];
            }
            out[static_cast<std::size_t>(y) * width + x] = acc;
        }
    }
    return out;
}

} // namespace

FeatureMap::FeatureMap(int w, int h, int c, float fill) : width(w), height(h), channels(c)
{
    check_dims(w, h, "FeatureMap");
    if (c <= 0) throw ArgumentError("FeatureMap: channel count must be positive");
    data.assign(static_cast<std::size_t>(w) * h * c, fill);
}

Image::Image(int w, int h) : width(w), height(h)
{
    check_dims(w, h, "Image");
    rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
}

FeatureMap read_fmap(const std::filesystem::path& path)
{
    bin::Reader r(bin::read_file(path), path.string());
    r.expect_magic("FMAP");
    const auto version = r.u32();
    if (version != kFmapVersion) throw FormatError(path.string() + ": unsupported FMAP version " + std::to_string(version));
    const auto h = r.u32(), w = r.u32(), c = r.u32();
    if (h == 0 || w == 0 || c == 0 || h > (1u << 16) || w > (1u << 16) || c > (1u << 16)) {
        throw FormatError(path.string() + ": invalid FMAP dimensions at byte 8");
    }
    const std::size_t count = static_cast<std::size_t>(h) * w * c;
    r.need(count * 4, "FMAP data");
    FeatureMap map(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    for (std::size_t i = 0; i < count; ++i) {
        map.data[i] = r.f32();
        if (!std::isfinite(map.data[i])) {
            throw FormatError(path.string() + ": non-finite value at byte " + std::to_string(r.offset() - 4));
        }
    }
    return map;
}

void write_fmap(const FeatureMap& map, const std::filesystem::path& path)
{
    check_dims(map.width, map.height, "write_fmap");
    if (map.data.size() != static_cast<std::size_t>(map.width) * map.height * map.channels) {
        throw ArgumentError("write_fmap: data size does not match dimensions");
    }
    std::vector<char> out;
    out.reserve(20 + map.data.size() * 4);
    bin::put_magic(out, "FMAP");
    bin::put_u32(out, kFmapVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(map.height));
    bin::put_u32(out, static_cast<std::uint32_t>(map.width));
    bin::put_u32(out, static_cast<std::uint32_t>(map.channels));
    for (float v : map.data) bin::put_f32(out, v);
    bin::write_file_atomic(path, out);
}

Image read_image(const std::filesystem::path& path)
{
    const auto bytes = bin::read_file(path);
    static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return read_png(bytes, path.string());
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return read_ppm(bytes, path.string());
    throw FormatError(path.string() + ": not a P6 PPM or PNG file");
}

void write_ppm(const Image& img, const std::filesystem::path& path)
{
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.insert(out.end(), img.rgb.begin(), img.rgb.end());
    bin::write_file_atomic(path, out);
}

void write_png(const Image& img, const std::filesystem::path& path)
{
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.rgb.data(), 0, nullptr)) {
        throw Error(path.string() + ": " + image.message);
    }
    std::vector<char> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.rgb.data(), 0, nullptr)) {
        throw Error(path.string() + ": " + image.message);
    }
    out.resize(size);
    bin::write_file_atomic(path, out);
}

std::vector<double> gaussian_kernel(double sigma)
{
    if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel: sigma must be positive");
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int d = -r; d <= r; ++d) {
        k[d + r] = std::exp(-0.5 * d * d / (sigma * sigma));
        sum += k[d + r];
    }
    for (auto& v : k) v /= sum;
    return k;
}

std::vector<double> gaussian_blur(const std::vector<double>& plane, int width, int height, double sigma)
{
    const auto kernel = gaussian_kernel(sigma);
    return blur_1d(blur_1d(plane, width, height, kernel, true), width, height, kernel, false);
}

FeatureMap handcrafted_features(const Image& img)
{
    const int W = img.width, H = img.height;
    check_dims(W, H, "handcrafted_features");
    const std::size_t n = static_cast<std::size_t>(W) * H;

    std::vector<std::vector<double>> rgb(3, std::vector<double>(n));
    std::vector<double> luma(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) rgb[c][i] = img.rgb[i * 3 + c] / 255.0;
        luma[i] = 0.299 * rgb[0][i] + 0.587 * rgb[1][i] + 0.114 * rgb[2][i];
    }

    FeatureMap out(W, H, kHandcraftedChannels);
    auto put = [&](int c, const std::vector<double>& plane) {
        for (std::size_t i = 0; i < n; ++i) out.data[i * kHandcraftedChannels + c] = static_cast<float>(plane[i]);
    };
    for (int c = 0; c < 3; ++c) {
        put(c, rgb[c]);
        put(3 + c, gaussian_blur(rgb[c], W, H, 2.0));
        put(6 + c, gaussian_blur(rgb[c], W, H, 8.0));
    }

    auto L = [&](int y, int x) { return luma[static_cast<std::size_t>(clamp_index(y, H)) * W + clamp_index(x, W)]; };
    std::vector<double> grad(n), local_sd(n);
    const double grad_max = 4.0 * std::numbers::sqrt2;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double gx = (L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1)) -
                              (L(y - 1, x - 1) + 2 * L(y, x - 1) + L(y + 1, x - 1));
            const double gy = (L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1)) -
                              (L(y - 1, x - 1) + 2 * L(y - 1, x) + L(y - 1, x + 1));
            grad[static_cast<std::size_t>(y) * W + x] = std::min(1.0, std::hypot(gx, gy) / grad_max);

            double s = 0.0;
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) s += L(y + dy, x + dx);
            const double mean = s / 25.0;
            double var = 0.0;
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) var += (L(y + dy, x + dx) - mean) * (L(y + dy, x + dx) - mean);
            var /= 25.0;
            // A [0,1] signal has standard deviation at most 1/2.
            local_sd[static_cast<std::size_t>(y) * W + x] = std::min(1.0, std::sqrt(var) / 0.5);
        }
    }
    put(9, grad);
    put(10, local_sd);
    put(11, std::vector<double>(n, 1.0));
    return out;
}

} // namespace headseg::featio
