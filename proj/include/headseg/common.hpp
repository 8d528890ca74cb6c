#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace headseg {

using Vec3 = Eigen::Vector3d;

// Error taxonomy shared by all modules. The CLI maps ValidationError and
// ConfigError (and ArgumentError) to exit code 1, everything else to 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArgumentError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConvergenceError : Error {
    ConvergenceError(const std::string& what, std::vector<double> residuals)
        : Error(what), residuals(std::move(residuals)) {}
    std::vector<double> residuals;
};
struct ConfigError : Error {
    using Error::Error;
};

/// Deterministic random source. Distribution code is written out by hand so
/// that streams are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v)
    {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, 64 bit. Used as a content key for on-disk caches.
class Hasher {
public:
    Hasher& bytes(const void* data, std::size_t n);
    Hasher& str(std::string_view s) { return bytes(s.data(), s.size()); }
    template <typename T>
    Hasher& pod(const T& v)
    {
        return bytes(&v, sizeof(T));
    }
    Hasher& file(const std::filesystem::path& path);
    std::uint64_t value() const { return h_; }
    std::string hex() const;

private:
    std::uint64_t h_ = 0xcbf29ce484222325ull;
};

// Worker-count cap for parallel_for. 0 means hardware concurrency.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs fn(i) for i in [0, n) across worker threads. Work is split into
/// contiguous chunks; fn must only write to per-index outputs so that results
/// do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// Little-endian binary helpers for the on-disk formats.
namespace bin {

void put_u32(std::vector<char>& out, std::uint32_t v);
void put_f32(std::vector<char>& out, float v);
void put_f64(std::vector<char>& out, double v);
void put_magic(std::vector<char>& out, std::string_view magic);

class Reader {
public:
    Reader(std::vector<char> data, std::string source);

    void expect_magic(std::string_view magic);
    std::uint32_t u32();
    float f32();
    double f64();
    std::uint8_t u8();
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    /// Throws a FormatError naming the offset when fewer than n bytes remain.
    void need(std::size_t n, std::string_view what) const;

private:
    std::vector<char> data_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames, so readers never observe a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const char> data);

} // namespace bin

} // namespace headseg
