#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace lutq {

/// Round half away from zero. This is the single rounding rule used across the library.
inline double round_half_away(double x) noexcept { return std::round(x); }

/// Number of bits needed to index a dictionary of size k (0 for k == 1).
inline unsigned index_bits(std::uint64_t k) noexcept {
    return k <= 1 ? 0u : static_cast<unsigned>(std::bit_width(k - 1));
}

/// Exponent e such that 2^e is the log-domain rounding of |x|. x must be nonzero and finite.
inline int pow2_exponent(double x) noexcept {
    return static_cast<int>(round_half_away(std::log2(std::fabs(x))));
}

/// sign(x) * 2^round(log2|x|); zero stays zero.
inline double round_to_pow2(double x) noexcept {
    if (x == 0.0) return 0.0;
    return std::copysign(std::ldexp(1.0, pow2_exponent(x)), x);
}

/// True when x is exactly +-2^e for some integer e.
inline bool is_pow2_value(double x) noexcept {
    if (x == 0.0 || !std::isfinite(x)) return false;
    int e = 0;
    double m = std::frexp(std::fabs(x), &e);
    return m == 0.5;
}

/// Smallest power of two >= x, for x > 0.
inline double pow2_ceil(double x) noexcept {
    int e = 0;
    double m = std::frexp(x, &e);  // x = m * 2^e, m in [0.5, 1)
    return m == 0.5 ? x : std::ldexp(1.0, e);
}

}  // namespace lutq
