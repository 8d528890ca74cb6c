#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "headseg/common.hpp"

namespace headseg::featio {

/// Dense per-view feature tensor, H x W x C, channel-innermost.
struct FeatureMap {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(int width, int height, int channels, float fill = 0.0f);

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    const float* texel(int y, int x) const { return data.data() + (static_cast<std::size_t>(y) * width + x) * channels; }
};

/// 8-bit RGB, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(int width, int height);

    std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

inline constexpr int kHandcraftedChannels = 12;

FeatureMap read_fmap(const std::filesystem::path& path);
void write_fmap(const FeatureMap& map, const std::filesystem::path& path);

/// Dispatches on the file signature: P6 PPM or PNG.
Image read_image(const std::filesystem::path& path);
void write_ppm(const Image& img, const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

/// Channels: RGB, RGB blurred at sigma 2 and 8, Sobel magnitude of luma,
/// 5x5 local luma standard deviation, constant 1.
FeatureMap handcrafted_features(const Image& img);

/// Separable Gaussian blur of one channel plane with clamp-to-edge borders and
/// a kernel truncated at ceil(3 sigma), renormalized to unit sum.
std::vector<double> gaussian_blur(const std::vector<double>& plane, int width, int height, double sigma);
std::vector<double> gaussian_kernel(double sigma);

} // namespace headseg::featio
