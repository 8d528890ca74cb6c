#include "headseg/common.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <thread>

namespace headseg {

namespace {

std::uint64_t splitmix64(std::uint64_t& x)
{
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::atomic<unsigned> g_threads{0};

} // namespace

// xoshiro256** seeded through splitmix64.
Rng::Rng(std::uint64_t seed)
{
    for (auto& s : state_) {
        s = splitmix64(seed);
    }
}

std::uint64_t Rng::next_u64()
{
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
}

double Rng::uniform()
{
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n)
{
    if (n == 0) throw ArgumentError("Rng::below: empty range");
    // Rejection sampling for an unbiased result.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

Hasher& Hasher::bytes(const void* data, std::size_t n)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ull;
    }
    return *this;
}

Hasher& Hasher::file(const std::filesystem::path& path)
{
    const auto data = bin::read_file(path);
    return bytes(data.data(), data.size());
}

std::string Hasher::hex() const
{
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) {
        s[15 - i] = digits[(h_ >> (4 * i)) & 0xf];
    }
    return s;
}

void set_thread_count(unsigned n)
{
    g_threads = n;
}

unsigned thread_count()
{
    const unsigned n = g_threads.load();
    if (n > 0) return n;
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {
// Nested parallel_for calls run serially on the calling worker.
thread_local bool in_parallel_region = false;
} // namespace

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn)
{
    const std::size_t workers = in_parallel_region ? 1 : std::min<std::size_t>(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            in_parallel_region = true;
            try {
                const std::size_t end = std::min(n, (w + 1) * chunk);
                for (std::size_t i = w * chunk; i < end; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

namespace bin {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void put_u32(std::vector<char>& out, std::uint32_t v)
{
    const auto* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + 4);
}

void put_f32(std::vector<char>& out, float v)
{
    const auto* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + 4);
}

void put_f64(std::vector<char>& out, double v)
{
    const auto* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + 8);
}

void put_magic(std::vector<char>& out, std::string_view magic)
{
    out.insert(out.end(), magic.begin(), magic.end());
}

Reader::Reader(std::vector<char> data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

void Reader::need(std::size_t n, std::string_view what) const
{
    if (remaining() < n) {
        throw FormatError(source_ + ": truncated " + std::string(what) + " at byte offset " +
                          std::to_string(pos_) + " (need " + std::to_string(n) + " bytes, have " +
                          std::to_string(remaining()) + ")");
    }
}

void Reader::expect_magic(std::string_view magic)
{
    need(magic.size(), "magic");
    if (std::string_view(data_.data() + pos_, magic.size()) != magic) {
        throw FormatError(source_ + ": bad magic at byte offset " + std::to_string(pos_) + ", expected \"" +
                          std::string(magic) + "\"");
    }
    pos_ += magic.size();
}

std::uint32_t Reader::u32()
{
    need(4, "u32");
    std::uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

float Reader::f32()
{
    need(4, "f32");
    float v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

double Reader::f64()
{
    need(8, "f64");
    double v;
    std::memcpy(&v, data_.data() + pos_, 8);
    pos_ += 8;
    return v;
}

std::uint8_t Reader::u8()
{
    need(1, "u8");
    return static_cast<std::uint8_t>(data_[pos_++]);
}

std::vector<char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<char> data(size);
    in.read(data.data(), static_cast<std::streamsize>(size));
    if (!in) throw Error("failed reading file: " + path.string());
    return data;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const char> data)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write file: " + tmp.string());
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw Error("failed writing file: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace bin

} // namespace headseg
