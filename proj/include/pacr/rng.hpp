#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace pacr {

/// Deterministic random source. All randomness in the project flows from a
/// single root seed through named sub-streams, so that independent stages
/// (scene placement, noise, weight init, subsampling) can be reproduced in
/// isolation. Distributions are hand-rolled on top of mt19937_64 to keep
/// sequences bit-identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

    /// Derives an independent child stream from this seed and a stream name.
    static Rng stream(std::uint64_t seed, std::string_view name) {
        // FNV-1a over the name, folded into the seed through splitmix.
        std::uint64_t h = 1469598103934665603ull;
        for (char c : name) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return Rng(mix(seed ^ h));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return lo + static_cast<std::int64_t>(x % span);
    }

    /// Standard normal via Box-Muller (no cached spare, for simple state).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Eigen::Vector3d unit_vector() {
        Eigen::Vector3d v;
        do {
            v = Eigen::Vector3d(normal(), normal(), normal());
        } while (v.norm() < 1e-12);
        return v.normalized();
    }

    /// Uniform random rotation from a normalized Gaussian quaternion.
    Eigen::Matrix3d rotation() {
        Eigen::Vector4d q;
        do {
            q = Eigen::Vector4d(normal(), normal(), normal(), normal());
        } while (q.norm() < 1e-12);
        q.normalize();
        if (q(0) < 0.0) q = -q;
        return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace pacr
