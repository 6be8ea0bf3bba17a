#pragma once

#include <cstdint>
#include <cstring>

namespace ptq {

// IEEE 754 binary16 conversions, round-to-nearest-even. Handles subnormals,
// overflow to infinity, and NaN payload truncation.
inline std::uint16_t float_to_half_bits(float value) {
    std::uint32_t f;
    std::memcpy(&f, &value, 4);
    const std::uint16_t sign = static_cast<std::uint16_t>((f >> 16) & 0x8000u);
    const std::uint32_t exp = (f >> 23) & 0xffu;
    std::uint32_t mant = f & 0x7fffffu;

    if (exp == 0xffu) {  // inf or nan
        const std::uint16_t payload = mant ? static_cast<std::uint16_t>(0x200u | (mant >> 13)) : 0;
        return static_cast<std::uint16_t>(sign | 0x7c00u | payload);
    }

    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow
    if (e <= 0) {
        if (e < -10) return sign;  // underflow to signed zero
        mant |= 0x800000u;
        const int shift = 14 - e;
        auto half = static_cast<std::uint16_t>(mant >> shift);
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }

    auto half = static_cast<std::uint16_t>((e << 10) | (mant >> 13));
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // may carry into exponent
    return static_cast<std::uint16_t>(sign | half);
}

inline float half_bits_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t f;
    if (exp == 0) {
        if (mant == 0) {
            f = sign;
        } else {
            int shift = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                ++shift;
            }
            f = sign | ((127u - 15u - static_cast<std::uint32_t>(shift)) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        f = sign | 0x7f800000u | (mant << 13);
    } else {
        f = sign | ((exp - 15u + 127u) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &f, 4);
    return out;
}

inline std::uint16_t double_to_half_bits(double v) { return float_to_half_bits(static_cast<float>(v)); }
inline double half_bits_to_double(std::uint16_t h) { return static_cast<double>(half_bits_to_float(h)); }

// The value a double takes after a round trip through 16-bit storage.
inline double half_round(double v) { return half_bits_to_double(double_to_half_bits(v)); }

}  // namespace ptq
