#pragma once

// Hashing and signatures. SHA-256 for all digests, Ed25519 for node
// signatures. Call counters let tests bound work per operation.

#include <cstdint>
#include <optional>

#include "hypersyn/bytes.hpp"

namespace hypersyn {

using PublicKey = Digest;  // Ed25519 public keys are 32 bytes.

struct Signature {
    std::array<std::uint8_t, 64> bytes{};

    auto operator<=>(const Signature&) const = default;
    std::string hex() const { return to_hex(bytes); }
    static Signature from_hex(std::string_view hex);
};

Digest sha256(ByteView data);

struct Keypair {
    PublicKey pub{};
    std::array<std::uint8_t, 64> secret{};

    // Deterministic: same seed, same keypair.
    static Keypair from_seed(const Digest& seed);

    Signature sign(ByteView message) const;
    Signature sign(const Digest& message) const { return sign(ByteView{message.bytes}); }
};

bool verify_signature(const PublicKey& pub, ByteView message, const Signature& sig);
inline bool verify_signature(const PublicKey& pub, const Digest& message, const Signature& sig) {
    return verify_signature(pub, ByteView{message.bytes}, sig);
}

// A node's address is the hash of its public key; also the DHT location
// of its file and half of every edge key it participates in.
inline Digest address_of(const PublicKey& pub) {
    return sha256(pub.bytes);
}

// Work counters, reset per measurement window by the caller.
struct CryptoCounters {
    std::uint64_t hashes = 0;
    std::uint64_t signs = 0;
    std::uint64_t verifies = 0;
};

CryptoCounters& crypto_counters();
void reset_crypto_counters();

}  // namespace hypersyn
