#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dubalign {

// Exception hierarchy; the CLI maps these to categorized exit messages.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct InvalidInput : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct RemoteError : Error {
    using Error::Error;
};
struct InfeasibleError : Error {
    using Error::Error;
};

// FNV-1a, used for token hashing, cache keys, and manifest input digests.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string to_hex(std::uint64_t v);

// Deterministic RNG: splitmix64-seeded xoshiro-free core with hand-rolled
// Box-Muller so streams are pinned independently of the standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

private:
    std::uint64_t state_;
    bool has_spare_{false};
    double spare_{0.0};
};

// Text helpers shared by the front-end, analyzers, and metrics.
std::string lowercase(std::string_view s);
// Splits on whitespace after replacing punctuation with spaces; lowercases.
std::vector<std::string> tokenize_words(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
std::uint64_t file_digest(const std::string& path);

}  // namespace dubalign
