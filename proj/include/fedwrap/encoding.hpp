#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <string>
#include <string_view>

#include "fedwrap/error.hpp"

namespace fedwrap::encoding {

inline void put_u16_be(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

inline void put_u32_be(std::string& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8)
        out.push_back(static_cast<char>((v >> shift) & 0xff));
}

inline std::uint16_t get_u16_be(std::string_view in, std::size_t pos) {
    return static_cast<std::uint16_t>((static_cast<unsigned char>(in[pos]) << 8) |
                                      static_cast<unsigned char>(in[pos + 1]));
}

inline std::uint32_t get_u32_be(std::string_view in, std::size_t pos) {
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i)
        v = (v << 8) | static_cast<unsigned char>(in[pos + i]);
    return v;
}

inline void put_f64_le(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(std::string_view in, std::size_t pos) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
        bits = (bits << 8) | static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]);
    return std::bit_cast<double>(bits);
}

namespace detail {
inline constexpr std::string_view kB64 =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline constexpr std::array<int, 256> make_b64_table() {
    std::array<int, 256> t{};
    for (auto& v : t)
        v = -1;
    for (std::size_t i = 0; i < kB64.size(); ++i)
        t[static_cast<unsigned char>(kB64[i])] = static_cast<int>(i);
    return t;
}
inline constexpr auto kB64Table = make_b64_table();
} // namespace detail

inline std::string base64_encode(std::string_view in) {
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        std::uint32_t n = (static_cast<unsigned char>(in[i]) << 16) |
                          (static_cast<unsigned char>(in[i + 1]) << 8) |
                          static_cast<unsigned char>(in[i + 2]);
        out.push_back(detail::kB64[(n >> 18) & 63]);
        out.push_back(detail::kB64[(n >> 12) & 63]);
        out.push_back(detail::kB64[(n >> 6) & 63]);
        out.push_back(detail::kB64[n & 63]);
    }
    const std::size_t rest = in.size() - i;
    if (rest == 1) {
        std::uint32_t n = static_cast<unsigned char>(in[i]) << 16;
        out.push_back(detail::kB64[(n >> 18) & 63]);
        out.push_back(detail::kB64[(n >> 12) & 63]);
        out += "==";
    } else if (rest == 2) {
        std::uint32_t n = (static_cast<unsigned char>(in[i]) << 16) |
                          (static_cast<unsigned char>(in[i + 1]) << 8);
        out.push_back(detail::kB64[(n >> 18) & 63]);
        out.push_back(detail::kB64[(n >> 12) & 63]);
        out.push_back(detail::kB64[(n >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::string base64_decode(std::string_view in) {
    if (in.size() % 4 != 0)
        throw DecodeError("base64: length is not a multiple of 4");
    std::string out;
    out.reserve(in.size() / 4 * 3);
    for (std::size_t i = 0; i < in.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = in[i + static_cast<std::size_t>(k)];
            if (c == '=') {
                if (i + 4 != in.size() || k < 2)
                    throw DecodeError("base64: misplaced padding");
                v[k] = 0;
                ++pad;
            } else {
                if (pad > 0)
                    throw DecodeError("base64: data after padding");
                v[k] = detail::kB64Table[static_cast<unsigned char>(c)];
                if (v[k] < 0)
                    throw DecodeError("base64: invalid character");
            }
        }
        const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) |
                                (static_cast<std::uint32_t>(v[1]) << 12) |
                                (static_cast<std::uint32_t>(v[2]) << 6) |
                                static_cast<std::uint32_t>(v[3]);
        out.push_back(static_cast<char>((n >> 16) & 0xff));
        if (pad < 2)
            out.push_back(static_cast<char>((n >> 8) & 0xff));
        if (pad < 1)
            out.push_back(static_cast<char>(n & 0xff));
    }
    return out;
}

} // namespace fedwrap::encoding
