#pragma once

// Fixed-size digests, hex helpers, and the canonical length-prefixed
// encoding used for every multi-field hash and wire structure.

#include <array>
#include <compare>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hypersyn {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

struct Digest {
    std::array<std::uint8_t, 32> bytes{};

    auto operator<=>(const Digest&) const = default;

    bool is_zero() const {
        for (auto b : bytes)
            if (b != 0) return false;
        return true;
    }

    // Path bit for SMT descent, most-significant bit first.
    int bit(std::size_t i) const {
        return (bytes[i >> 3] >> (7 - (i & 7))) & 1;
    }

    std::string hex() const;
    // First 8 hex chars, for logs and metrics.
    std::string short_hex() const;

    static Digest from_hex(std::string_view hex);
    static std::optional<Digest> try_from_hex(std::string_view hex);
};

// The SMT empty-node constant: 32 zero bytes.
inline constexpr Digest kEmptyNode{};

std::string to_hex(ByteView data);
Bytes from_hex(std::string_view hex);

// A bit-string prefix addressing a position in a 256-bit binary trie.
struct BitPath {
    std::array<std::uint8_t, 32> bits{};
    std::uint16_t len = 0;

    auto operator<=>(const BitPath&) const = default;

    int bit(std::size_t i) const {
        return (bits[i >> 3] >> (7 - (i & 7))) & 1;
    }

    BitPath child(int b) const {
        BitPath p = *this;
        if (b) p.bits[p.len >> 3] |= std::uint8_t(1u << (7 - (p.len & 7)));
        ++p.len;
        return p;
    }

    // True if `key` starts with this prefix.
    bool prefix_of(const Digest& key) const {
        for (std::size_t i = 0; i < len; ++i)
            if (bit(i) != key.bit(i)) return false;
        return true;
    }

    static BitPath of_key(const Digest& key, std::uint16_t depth) {
        BitPath p;
        for (std::uint16_t i = 0; i < depth; ++i)
            p = p.child(key.bit(i));
        return p;
    }
};

// Canonical encoder: every field is (4-byte big-endian length, bytes);
// integers are written as 16-byte big-endian before prefixing.
class Encoder {
public:
    Encoder& put_raw(ByteView data) {
        buf_.insert(buf_.end(), data.begin(), data.end());
        return *this;
    }
    Encoder& put_byte(std::uint8_t b) {
        buf_.push_back(b);
        return *this;
    }
    Encoder& put_bytes(ByteView data) {
        put_len(static_cast<std::uint32_t>(data.size()));
        return put_raw(data);
    }
    Encoder& put_digest(const Digest& d) { return put_bytes(d.bytes); }
    Encoder& put_u64(std::uint64_t v) { return put_uint_be(v); }
    Encoder& put_u128(unsigned __int128 v) { return put_uint_be(v); }
    Encoder& put_string(std::string_view s) {
        return put_bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }

    const Bytes& bytes() const { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    void put_len(std::uint32_t n) {
        buf_.push_back(std::uint8_t(n >> 24));
        buf_.push_back(std::uint8_t(n >> 16));
        buf_.push_back(std::uint8_t(n >> 8));
        buf_.push_back(std::uint8_t(n));
    }
    template <typename T>
    Encoder& put_uint_be(T v) {
        std::array<std::uint8_t, 16> be{};
        for (int i = 15; i >= 0; --i) {
            be[std::size_t(i)] = std::uint8_t(v & 0xff);
            v >>= 8;
        }
        return put_bytes(be);
    }

    Bytes buf_;
};

struct DecodeError : std::runtime_error {
    explicit DecodeError(const std::string& what) : std::runtime_error(what) {}
};

// Mirror of Encoder; throws DecodeError on truncation or bad field sizes.
class Decoder {
public:
    explicit Decoder(ByteView data) : data_(data) {}

    std::uint8_t get_byte() {
        need(1);
        return data_[pos_++];
    }
    ByteView get_raw(std::size_t n) {
        need(n);
        ByteView out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    ByteView get_bytes() {
        std::uint32_t n = get_len();
        return get_raw(n);
    }
    Digest get_digest() {
        ByteView b = get_bytes();
        if (b.size() != 32) throw DecodeError("digest field must be 32 bytes");
        Digest d;
        std::memcpy(d.bytes.data(), b.data(), 32);
        return d;
    }
    std::uint64_t get_u64() {
        unsigned __int128 v = get_u128();
        if (v >> 64) throw DecodeError("u64 field out of range");
        return std::uint64_t(v);
    }
    unsigned __int128 get_u128() {
        ByteView b = get_bytes();
        if (b.size() != 16) throw DecodeError("integer field must be 16 bytes");
        unsigned __int128 v = 0;
        for (auto byte : b) v = (v << 8) | byte;
        return v;
    }
    std::string get_string() {
        ByteView b = get_bytes();
        return std::string(reinterpret_cast<const char*>(b.data()), b.size());
    }

    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::uint32_t get_len() {
        need(4);
        std::uint32_t n = (std::uint32_t(data_[pos_]) << 24) | (std::uint32_t(data_[pos_ + 1]) << 16) |
                          (std::uint32_t(data_[pos_ + 2]) << 8) | std::uint32_t(data_[pos_ + 3]);
        pos_ += 4;
        return n;
    }
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw DecodeError("truncated input");
    }

    ByteView data_;
    std::size_t pos_ = 0;
};

}  // namespace hypersyn
