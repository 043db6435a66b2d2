#include "hypersyn/bytes.hpp"

namespace hypersyn {

namespace {

constexpr char kHexDigits[] = "0123456789abcdef";

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

}  // namespace

std::string to_hex(ByteView data) {
    std::string out;
    out.reserve(data.size() * 2);
    for (auto b : data) {
        out.push_back(kHexDigits[b >> 4]);
        out.push_back(kHexDigits[b & 0xf]);
    }
    return out;
}

Bytes from_hex(std::string_view hex) {
    if (hex.size() % 2 != 0) throw DecodeError("hex string has odd length");
    Bytes out;
    out.reserve(hex.size() / 2);
    for (std::size_t i = 0; i < hex.size(); i += 2) {
        int hi = hex_value(hex[i]);
        int lo = hex_value(hex[i + 1]);
        if (hi < 0 || lo < 0) throw DecodeError("invalid hex digit");
        out.push_back(std::uint8_t(hi << 4 | lo));
    }
    return out;
}

std::string Digest::hex() const {
    return to_hex(bytes);
}

std::string Digest::short_hex() const {
    return to_hex(ByteView(bytes.data(), 4));
}

Digest Digest::from_hex(std::string_view hex) {
    auto d = try_from_hex(hex);
    if (!d) throw DecodeError("digest hex must be 64 chars");
    return *d;
}

std::optional<Digest> Digest::try_from_hex(std::string_view hex) {
    if (hex.size() != 64) return std::nullopt;
    Digest d;
    for (std::size_t i = 0; i < 32; ++i) {
        int hi = hex_value(hex[2 * i]);
        int lo = hex_value(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) return std::nullopt;
        d.bytes[i] = std::uint8_t(hi << 4 | lo);
    }
    return d;
}

}  // namespace hypersyn
