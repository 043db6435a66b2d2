#include "hypersyn/crypto.hpp"

#include <sodium.h>

#include <cstring>
#include <mutex>

#include "hypersyn/errors.hpp"

namespace hypersyn {

namespace {

void ensure_sodium() {
    static std::once_flag once;
    std::call_once(once, [] {
        if (sodium_init() < 0) throw Error("sodium_init failed");
    });
}

CryptoCounters g_counters;

}  // namespace

CryptoCounters& crypto_counters() {
    return g_counters;
}

void reset_crypto_counters() {
    g_counters = CryptoCounters{};
}

Digest sha256(ByteView data) {
    ensure_sodium();
    ++g_counters.hashes;
    Digest out;
    crypto_hash_sha256(out.bytes.data(), data.data(), data.size());
    return out;
}

Signature Signature::from_hex(std::string_view hex) {
    Bytes raw = hypersyn::from_hex(hex);
    if (raw.size() != 64) throw DecodeError("signature hex must be 128 chars");
    Signature s;
    std::memcpy(s.bytes.data(), raw.data(), 64);
    return s;
}

Keypair Keypair::from_seed(const Digest& seed) {
    ensure_sodium();
    Keypair kp;
    crypto_sign_seed_keypair(kp.pub.bytes.data(), kp.secret.data(), seed.bytes.data());
    return kp;
}

Signature Keypair::sign(ByteView message) const {
    ensure_sodium();
    ++g_counters.signs;
    Signature sig;
    crypto_sign_detached(sig.bytes.data(), nullptr, message.data(), message.size(), secret.data());
    return sig;
}

bool verify_signature(const PublicKey& pub, ByteView message, const Signature& sig) {
    ensure_sodium();
    ++g_counters.verifies;
    return crypto_sign_verify_detached(sig.bytes.data(), message.data(), message.size(), pub.bytes.data()) == 0;
}

}  // namespace hypersyn
