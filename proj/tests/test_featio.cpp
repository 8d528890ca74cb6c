#include <doctest.h>

#include <cmath>
#include <filesystem>

#include <png.h>

#include "headseg/featio.hpp"

using namespace headseg;
using namespace headseg::featio;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("headseg_featio_" + name); }

Image random_image(int w, int h, Rng& rng)
{
    Image img(w, h);
    for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

} // namespace

TEST_CASE("fmap round trip is bitwise")
{
    Rng rng(1);
    FeatureMap m(8, 8, 4);
    for (auto& v : m.data) v = static_cast<float>(rng.normal() * 1e3);
    write_fmap(m, tmp("a.fmap"));
    const auto r = read_fmap(tmp("a.fmap"));
    CHECK(r.width == 8);
    CHECK(r.height == 8);
    CHECK(r.channels == 4);
    CHECK(std::memcmp(r.data.data(), m.data.data(), m.data.size() * 4) == 0);
}

TEST_CASE("fmap format errors")
{
    FeatureMap m(3, 2, 5, 0.5f);
    write_fmap(m, tmp("b.fmap"));
    auto bytes = bin::read_file(tmp("b.fmap"));
    REQUIRE(bytes.size() == 20 + 3 * 2 * 5 * 4);

    auto bad = bytes;
    bad[0] = 'X';
    bin::write_file_atomic(tmp("c.fmap"), bad);
    CHECK_THROWS_AS(read_fmap(tmp("c.fmap")), FormatError);

    bad = bytes;
    bad[4] = 2;
    bin::write_file_atomic(tmp("c.fmap"), bad);
    CHECK_THROWS_AS(read_fmap(tmp("c.fmap")), FormatError);

    bad = bytes;
    bad.pop_back();
    bin::write_file_atomic(tmp("c.fmap"), bad);
    try {
        read_fmap(tmp("c.fmap"));
        FAIL("expected a truncation error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset 20") != std::string::npos);
    }
}

TEST_CASE("ppm decoding")
{
    const std::string text = "P6\n# comment\n2 2\n255\n";
    std::vector<char> bytes(text.begin(), text.end());
    const unsigned char px[12] = {255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30};
    bytes.insert(bytes.end(), px, px + 12);
    bin::write_file_atomic(tmp("a.ppm"), bytes);
    const auto img = read_image(tmp("a.ppm"));
    REQUIRE(img.width == 2);
    REQUIRE(img.height == 2);
    CHECK(std::memcmp(img.rgb.data(), px, 12) == 0);
    CHECK(img.at(1, 1, 2) == 30);

    bytes.pop_back();
    bin::write_file_atomic(tmp("b.ppm"), bytes);
    CHECK_THROWS_AS(read_image(tmp("b.ppm")), FormatError);

    const std::string deep = "P6\n1 1\n65535\n\0\0\0\0\0\0";
    bin::write_file_atomic(tmp("c.ppm"), std::vector<char>(deep.begin(), deep.end()));
    CHECK_THROWS_AS(read_image(tmp("c.ppm")), FormatError);
}

TEST_CASE("png and ppm of the same content decode identically")
{
    Rng rng(2);
    const auto img = random_image(13, 7, rng);
    write_png(img, tmp("d.png"));
    write_ppm(img, tmp("d.ppm"));
    const auto a = read_image(tmp("d.png"));
    const auto b = read_image(tmp("d.ppm"));
    CHECK(a.width == 13);
    CHECK(a.height == 7);
    CHECK(a.rgb == b.rgb);
    CHECK(a.rgb == img.rgb);

    // 16-bit PNG is rejected.
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = 2;
    image.height = 2;
    image.format = PNG_FORMAT_LINEAR_RGB;
    std::vector<png_uint_16> wide(12, 1000);
    REQUIRE(png_image_write_to_file(&image, tmp("e.png").c_str(), 0, wide.data(), 0, nullptr));
    CHECK_THROWS_AS(read_image(tmp("e.png")), FormatError);

    auto trunc = bin::read_file(tmp("d.png"));
    trunc.resize(trunc.size() / 2);
    bin::write_file_atomic(tmp("f.png"), trunc);
    CHECK_THROWS_AS(read_image(tmp("f.png")), FormatError);
}

TEST_CASE("handcrafted features on a uniform image")
{
    Image img(20, 15);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
        img.rgb[i] = 128;
        img.rgb[i + 1] = 64;
        img.rgb[i + 2] = 200;
    }
    const auto f = handcrafted_features(img);
    REQUIRE(f.channels == kHandcraftedChannels);
    for (int y = 0; y < 15; ++y) {
        for (int x = 0; x < 20; ++x) {
            for (int c = 0; c < 3; ++c) {
                CHECK(f.at(y, x, 3 + c) == doctest::Approx(f.at(y, x, c)).epsilon(1e-6));
                CHECK(f.at(y, x, 6 + c) == doctest::Approx(f.at(y, x, c)).epsilon(1e-6));
            }
            CHECK(f.at(y, x, 9) == doctest::Approx(0.0).epsilon(1e-7));
            CHECK(std::abs(f.at(y, x, 10)) <= 1e-6);
            CHECK(f.at(y, x, 11) == 1.0f);
        }
    }
}

TEST_CASE("sobel responds at a vertical step edge")
{
    Image img(16, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 8; x < 16; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 255;
    const auto f = handcrafted_features(img);
    for (int y = 0; y < 8; ++y) {
        float best = -1;
        int best_x = -1;
        for (int x = 0; x < 16; ++x) {
            if (f.at(y, x, 9) > best) {
                best = f.at(y, x, 9);
                best_x = x;
            }
        }
        CHECK((best_x == 7 || best_x == 8));
        CHECK(f.at(y, 7, 9) == f.at(y, 8, 9));
        CHECK(f.at(y, 0, 9) == 0.0f);
        CHECK(f.at(y, 15, 9) == 0.0f);
        CHECK(f.at(y, 7, 9) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-6));
    }
}

TEST_CASE("blur channels match a dense convolution oracle")
{
    Rng rng(3);
    const auto img = random_image(23, 17, rng);
    const auto f = handcrafted_features(img);
    for (const double sigma : {2.0, 8.0}) {
        const int r = static_cast<int>(std::ceil(3 * sigma));
        double norm = 0.0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        const int base = sigma == 2.0 ? 3 : 6;
        double worst = 0.0;
        for (int y = 0; y < 17; ++y) {
            for (int x = 0; x < 23; ++x) {
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (int dy = -r; dy <= r; ++dy) {
                        for (int dx = -r; dx <= r; ++dx) {
                            const int sy = std::clamp(y + dy, 0, 16), sx = std::clamp(x + dx, 0, 22);
                            acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) * img.at(sy, sx, c) / 255.0;
                        }
                    }
                    worst = std::max(worst, std::abs(acc / norm - f.at(y, x, base + c)));
                }
            }
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("handcrafted features are translation equivariant in the interior")
{
    Rng rng(4);
    const auto img = random_image(80, 70, rng);
    const int dx = 3, dy = 5;
    Image shifted(80, 70);
    for (int y = 0; y < 70; ++y)
        for (int x = 0; x < 80; ++x)
            for (int c = 0; c < 3; ++c) shifted.at(y, x, c) = img.at(std::clamp(y - dy, 0, 69), std::clamp(x - dx, 0, 79), c);
    const auto a = handcrafted_features(img);
    const auto b = handcrafted_features(shifted);
    // The sigma-8 kernel reaches 24 px, plus the shift.
    const int margin = 30;
    double worst = 0.0;
    for (int y = margin; y < 70 - margin; ++y)
        for (int x = margin; x < 80 - margin; ++x)
            for (int c = 0; c < kHandcraftedChannels; ++c)
                worst = std::max(worst, static_cast<double>(std::abs(a.at(y - dy, x - dx, c) - b.at(y, x, c))));
    CHECK(worst <= 1e-6);
    for (float v : a.data) {
        REQUIRE(std::isfinite(v));
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }
}
