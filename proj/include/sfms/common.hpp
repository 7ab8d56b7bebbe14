#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

namespace sfms {

// Production scalar for training and file payloads. Core numeric code is
// templated so tests can instantiate the same paths in double precision.
using real = float;

// ---------------------------------------------------------------------------
// Error types. The CLI maps these onto exit codes (2 usage, 3 numerical, 4 io).
// ---------------------------------------------------------------------------

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : ValidationError {
    explicit DimensionError(const std::string& msg) : ValidationError(msg) {}
};

struct CapacityError : ValidationError {
    explicit CapacityError(const std::string& msg) : ValidationError(msg) {}
};

struct ParseError : std::runtime_error {
    std::size_t byte_offset;
    ParseError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core; every consumer derives its stream from
// a root seed plus a tag/counter pair so that all randomness in the project
// is a pure function of (root seed, subsystem tag, counters).
// ---------------------------------------------------------------------------

namespace rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable 64-bit hash of a tag string (FNV-1a).
inline std::uint64_t tag_hash(const char* tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* p = tag; *p; ++p) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*p));
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derive a child seed: root -> (tag, a, b). Documented counter scheme used by
// the whole project; "a" and "b" are caller-chosen counters (step, draw, ...).
inline std::uint64_t derive(std::uint64_t root, const char* tag, std::uint64_t a = 0,
                            std::uint64_t b = 0) {
    std::uint64_t s = root;
    s ^= tag_hash(tag) + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    std::uint64_t x = splitmix64(s);
    s ^= a + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
    x = splitmix64(s);
    s ^= b + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
    return splitmix64(s);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform double in the open interval (0, 1).
    double uniform01() {
        // 53 random bits; +0.5 keeps the result away from exact 0.
        return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Modulo bias is negligible for n << 2^64 and irrelevant for our use.
        return next_u64() % n;
    }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

  private:
    std::uint64_t state_;
};

}  // namespace rng

// ---------------------------------------------------------------------------
// Logging controlled by SFMS_LOG_LEVEL in {error, warn, info, debug}.
// ---------------------------------------------------------------------------

namespace logging {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level level() {
    static Level lvl = [] {
        const char* env = std::getenv("SFMS_LOG_LEVEL");
        if (!env) return Level::kWarn;
        if (std::strcmp(env, "error") == 0) return Level::kError;
        if (std::strcmp(env, "warn") == 0) return Level::kWarn;
        if (std::strcmp(env, "info") == 0) return Level::kInfo;
        if (std::strcmp(env, "debug") == 0) return Level::kDebug;
        return Level::kWarn;
    }();
    return lvl;
}

template <typename... Args>
void log(Level lvl, const char* fmt, Args... args) {
    if (lvl > level()) return;
    const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[sfms:%s] ", names[static_cast<int>(lvl)]);
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

}  // namespace logging

#define SFMS_INFO(...) ::sfms::logging::log(::sfms::logging::Level::kInfo, __VA_ARGS__)
#define SFMS_WARN(...) ::sfms::logging::log(::sfms::logging::Level::kWarn, __VA_ARGS__)
#define SFMS_DEBUG(...) ::sfms::logging::log(::sfms::logging::Level::kDebug, __VA_ARGS__)

}  // namespace sfms
