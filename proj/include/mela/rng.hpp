#pragma once

#include <cstdint>
#include <random>

namespace mela {

using Rng = std::mt19937_64;

// Derive an independent stream from a master seed. Used wherever work is
// split (per task, per instance) so results do not depend on scheduling.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
    std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1) +
                      0xD1B54A32D192ED03ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t master, std::uint64_t stream = 0,
                    std::uint64_t index = 0) {
    return Rng(derive_seed(master, stream, index));
}

}  // namespace mela
