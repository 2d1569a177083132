#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace forgelab {

// Error taxonomy. The CLI maps these onto stable exit codes, so new failure
// modes should reuse one of these categories rather than raw runtime_error.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ProvenanceError : std::runtime_error {
    explicit ProvenanceError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a, used for config / data / parameter fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string to_hex(std::uint64_t v);

// Evaluation parallelism. FORGELAB_THREADS caps the worker count; training
// paths never go through here and stay strictly sequential.
int eval_thread_count();

// Runs fn(i) for i in [0, n). Results must be written to per-index slots so
// that reductions can happen in index order afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace forgelab
