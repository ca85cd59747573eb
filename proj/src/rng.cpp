#include "compose/rng.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

namespace compose {

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void philox_round(std::array<uint32_t, 4>& c, uint32_t k0, uint32_t k1) {
    uint64_t p0 = uint64_t(kPhiloxM0) * c[0];
    uint64_t p1 = uint64_t(kPhiloxM1) * c[2];
    uint32_t hi0 = uint32_t(p0 >> 32), lo0 = uint32_t(p0);
    uint32_t hi1 = uint32_t(p1 >> 32), lo1 = uint32_t(p1);
    c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// One block = 128 output bits = two uint64 words.
inline std::pair<uint64_t, uint64_t> block64(uint64_t seed, uint32_t stream, uint32_t sample,
                                             uint32_t step, uint64_t pair_index) {
    uint64_t key = splitmix64(seed ^ splitmix64(uint64_t(stream)));
    std::array<uint32_t, 4> ctr = {uint32_t(pair_index), uint32_t(pair_index >> 32),
                                   step, sample};
    auto out = philox4x32(key, ctr);
    return {uint64_t(out[0]) | (uint64_t(out[1]) << 32),
            uint64_t(out[2]) | (uint64_t(out[3]) << 32)};
}

inline Scalar to_unit(uint64_t x) {
    // (0,1]: never zero, so log() below is safe.
    return Scalar((x >> 11) + 1) * 0x1.0p-53;
}

}  // namespace

std::array<uint32_t, 4> philox4x32(uint64_t key, const std::array<uint32_t, 4>& ctr) {
    std::array<uint32_t, 4> c = ctr;
    uint32_t k0 = uint32_t(key), k1 = uint32_t(key >> 32);
    for (int round = 0; round < 10; ++round) {
        philox_round(c, k0, k1);
        k0 += kPhiloxW0;
        k1 += kPhiloxW1;
    }
    return c;
}

Scalar NoiseStream::uniform(uint32_t step, uint64_t element) const {
    auto [a, b] = block64(seed, stream, sample, step, element >> 1);
    return to_unit((element & 1) ? b : a);
}

Scalar NoiseStream::normal(uint32_t step, uint64_t element) const {
    auto [a, b] = block64(seed, stream, sample, step, element >> 1);
    Scalar u1 = to_unit(a), u2 = to_unit(b);
    Scalar r = std::sqrt(Scalar(-2) * std::log(u1));
    Scalar theta = Scalar(2) * M_PI * u2;
    return (element & 1) ? r * std::sin(theta) : r * std::cos(theta);
}

uint64_t NoiseStream::uniform_index(uint32_t step, uint64_t element, uint64_t n) const {
    auto [a, b] = block64(seed, stream, sample, step, element >> 1);
    uint64_t x = (element & 1) ? b : a;
    return x % n;
}

void NoiseStream::fill_normal(uint32_t step, Mat& out) const {
    // Row-major element addressing so shape changes never silently re-key.
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        for (Eigen::Index c = 0; c < out.cols(); ++c)
            out(r, c) = normal(step, uint64_t(r) * out.cols() + c);
}

void NoiseStream::fill_normal(uint32_t step, Vec& out) const {
    for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = normal(step, uint64_t(i));
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("PRIOR_COMPOSE_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

}  // namespace compose
