/* Round-to-nearest-even conversion of a double through IEEE 754 binary16.
 *
 * Converts double -> binary16 directly on the bit pattern. A float
 * intermediate would double-round incorrectly whenever the float rounding
 * lands exactly on a binary16 tie midpoint (float's 24-bit significand is one
 * bit short of the 2*11+3 needed), so no float hop is taken. Results are
 * bit-identical to numpy's float64 -> float16 astype.
 */
#ifndef CA3D_HALF_ROUND_H
#define CA3D_HALF_ROUND_H

#include <stdint.h>
#include <string.h>

static inline uint16_t ca3d_double_to_half(double x) {
    uint64_t bits;
    memcpy(&bits, &x, sizeof bits);
    uint16_t sign = (uint16_t)((bits >> 48) & 0x8000u);
    uint32_t exp = (uint32_t)((bits >> 52) & 0x7FFu);
    uint64_t mant = bits & 0xFFFFFFFFFFFFFULL;

    if (exp == 0x7FFu) { /* inf / nan */
        if (mant == 0) {
            return (uint16_t)(sign | 0x7C00u);
        }
        return (uint16_t)(sign | 0x7C00u | 0x0200u | (uint16_t)(mant >> 42));
    }

    int32_t e = (int32_t)exp - 1023 + 15; /* biased binary16 exponent */
    if (e >= 0x1F) { /* >= 65536: always overflows to inf */
        return (uint16_t)(sign | 0x7C00u);
    }
    if (e <= 0) { /* subnormal half or zero */
        if (e < -10) {
            return sign; /* below half the smallest subnormal */
        }
        uint64_t full = mant | (1ULL << 52);
        uint32_t shift = (uint32_t)(43 - e);
        uint16_t h = (uint16_t)(full >> shift);
        uint64_t rem = full & ((1ULL << shift) - 1u);
        uint64_t halfway = 1ULL << (shift - 1);
        if (rem > halfway || (rem == halfway && (h & 1u))) {
            h += 1u;
        }
        return (uint16_t)(sign | h);
    }
    uint16_t h = (uint16_t)(sign | ((uint32_t)e << 10) | (uint16_t)(mant >> 42));
    uint64_t rem = mant & ((1ULL << 42) - 1u);
    uint64_t halfway = 1ULL << 41;
    if (rem > halfway || (rem == halfway && (h & 1u))) {
        h += 1u; /* carries ripple into the exponent correctly, up to inf */
    }
    return h;
}

static inline double ca3d_half_to_double(uint16_t h) {
    uint64_t sign = (uint64_t)(h & 0x8000u) << 48;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint64_t mant = h & 0x3FFu;
    uint64_t bits;

    if (exp == 0x1Fu) {
        bits = sign | 0x7FF0000000000000ULL | (mant << 42);
    } else if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int32_t e = -1;
            do {
                e++;
                mant <<= 1;
            } while (!(mant & 0x400u));
            mant &= 0x3FFu;
            bits = sign | ((uint64_t)(1023 - 15 - e) << 52) | (mant << 42);
        }
    } else {
        bits = sign | ((uint64_t)(exp + 1023 - 15) << 52) | (mant << 42);
    }
    double d;
    memcpy(&d, &bits, sizeof d);
    return d;
}

static inline double ca3d_half_round(double x) {
    return ca3d_half_to_double(ca3d_double_to_half(x));
}

#endif /* CA3D_HALF_ROUND_H */
