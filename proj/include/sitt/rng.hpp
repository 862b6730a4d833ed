#pragma once

#include <array>
#include <cstdint>
#include <limits>

#include <Eigen/Dense>

namespace sitt {

/// Counter-based Philox4x32-10 generator with hash-derived child streams.
///
/// A stream is identified by a 64-bit key; `split(tag)` derives an
/// independent child key so that work items (tasks, sweep cells, seeds) get
/// reproducible streams regardless of scheduling order. A single instance
/// must not be shared across threads.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed);

    [[nodiscard]] Rng split(std::uint64_t tag) const;

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()();

    /// Uniform on [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    double normal();
    /// Fair +1 / -1 coin.
    double sign();
    Eigen::VectorXd normal_vector(Eigen::Index n);

    [[nodiscard]] std::uint64_t key() const { return key_; }

private:
    void refill();

    std::uint64_t key_;
    std::uint64_t block_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int buffered_ = 0;
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

/// One Philox4x32-10 block.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr, std::uint32_t k0,
                                           std::uint32_t k1);

/// SplitMix64 finalizer; used for key derivation.
std::uint64_t mix64(std::uint64_t x);

}  // namespace sitt
