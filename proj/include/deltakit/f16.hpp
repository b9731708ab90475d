#pragma once

#include <bit>
#include <cstdint>

namespace deltakit {

// Exact IEEE 754 binary16 -> binary32 widening.
inline float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t man = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign; // signed zero
        } else {
            // subnormal: normalize into a binary32 exponent
            int shift = 0;
            while (!(man & 0x400u)) {
                man <<= 1;
                ++shift;
            }
            man &= 0x3FFu;
            bits = sign | (static_cast<std::uint32_t>(113 - shift) << 23) | (man << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (man << 13); // inf / nan
    } else {
        bits = sign | ((exp + 112u) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

// binary32 -> binary16, round to nearest even. Used by tests to craft inputs;
// the checkpoint writer itself only emits F32.
inline std::uint16_t f32_to_f16(float f) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    std::int32_t exp = static_cast<std::int32_t>((bits >> 23) & 0xFFu) - 127 + 15;
    std::uint32_t man = bits & 0x7FFFFFu;
    if (exp >= 31) {
        if (((bits >> 23) & 0xFFu) == 255 && man != 0)
            return static_cast<std::uint16_t>(sign | 0x7E00u); // nan
        return static_cast<std::uint16_t>(sign | 0x7C00u);     // inf / overflow
    }
    if (exp <= 0) {
        if (exp < -10) return static_cast<std::uint16_t>(sign); // underflow to zero
        man |= 0x800000u;
        const int shift = 14 - exp;
        std::uint32_t half = man >> shift;
        const std::uint32_t rem = man & ((1u << shift) - 1);
        const std::uint32_t mid = 1u << (shift - 1);
        if (rem > mid || (rem == mid && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (man >> 13);
    const std::uint32_t rem = man & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

} // namespace deltakit
