#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace e3va {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<int64_t>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ']';
    return os.str();
}

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    ShapeError(const std::string& op, const std::string& detail)
        : Error(op + ": " + detail) {}
};

// Raised when backward encounters a NaN/inf; carries the offending node.
struct NonFiniteError : Error {
    int node_id;
    NonFiniteError(int id, const std::string& where)
        : Error("non-finite value at node " + std::to_string(id) + " (" + where + ")"),
          node_id(id) {}
};

// Deterministic RNG stream. Gaussian draws go through an explicit
// Box-Muller so sequences are identical across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform() {  // [0, 1)
        return (eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * M_PI * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    double normal(double stddev) { return stddev * normal(); }

    // He-style init for a projection with the given fan-in.
    double kaiming(int64_t fan_in) { return normal(std::sqrt(2.0 / double(fan_in))); }

    uint64_t next_u64() { return eng_(); }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable stream derivation so e.g. backbone init is identical across methods.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

namespace stream {
constexpr uint64_t kBackbone = 1;
constexpr uint64_t kMethod = 2;
constexpr uint64_t kHead = 3;
constexpr uint64_t kData = 4;
constexpr uint64_t kShuffle = 5;
}  // namespace stream

// FNV-1a over raw bytes; used for frozen-parameter checksums.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace e3va
