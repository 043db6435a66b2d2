#include "hypersyn/edge.hpp"

#include "hypersyn/errors.hpp"

namespace hypersyn {

Digest state_digest(const Digest& root, std::uint64_t m) {
    Encoder enc;
    enc.put_digest(root);
    enc.put_u64(m);
    return sha256(enc.bytes());
}

Digest edge_key(const Digest& a, const Digest& b) {
    const Digest& lo = a < b ? a : b;
    const Digest& hi = a < b ? b : a;
    Encoder enc;
    enc.put_digest(lo);
    enc.put_digest(hi);
    return sha256(enc.bytes());
}

bool SignedEdgeRecord::valid_for(const PublicKey& signer, const Digest& key,
                                 const Digest& value) const {
    if (!verify_signature(signer, state_digest(root, m), sig)) return false;
    return proves_presence(root, proof, key, value);
}

Bytes SignedEdgeRecord::encode() const {
    Encoder enc;
    enc.put_digest(root);
    enc.put_u64(m);
    enc.put_bytes(ByteView{sig.bytes.data(), sig.bytes.size()});
    enc.put_bytes(proof.encode());
    return enc.take();
}

SignedEdgeRecord SignedEdgeRecord::decode(Decoder& dec) {
    SignedEdgeRecord rec;
    rec.root = dec.get_digest();
    rec.m = dec.get_u64();
    ByteView sig_bytes = dec.get_bytes();
    if (sig_bytes.size() != rec.sig.bytes.size()) throw DecodeError("bad signature length");
    std::copy(sig_bytes.begin(), sig_bytes.end(), rec.sig.bytes.begin());
    rec.proof = MerkleProof::decode(dec.get_bytes());
    return rec;
}

EdgeState EdgeState::open(const Digest& a, CreditAmount r_a, std::uint64_t m_a, const Digest& b,
                          CreditAmount r_b, std::uint64_t m_b) {
    if (a == b) throw ConfigError("edge endpoints must differ");
    EdgeState e;
    if (a < b) {
        e.p_lo = a, e.p_hi = b;
        e.r_lo = r_a, e.r_hi = r_b;
        e.m_lo = m_a, e.m_hi = m_b;
    } else {
        e.p_lo = b, e.p_hi = a;
        e.r_lo = r_b, e.r_hi = r_a;
        e.m_lo = m_b, e.m_hi = m_a;
    }
    return e;
}

CreditAmount EdgeState::trade(const Digest& from, CreditAmount delta_in) {
    TradeResult res = apply_trade(oriented(from), delta_in);
    if (from == p_lo) {
        r_lo = res.reserves.r_a, r_hi = res.reserves.r_b;
    } else {
        r_hi = res.reserves.r_a, r_lo = res.reserves.r_b;
    }
    return res.delta_out;
}

Bytes EdgeState::encode_core() const {
    Encoder enc;
    enc.put_digest(p_lo);
    enc.put_digest(p_hi);
    enc.put_u128(r_lo);
    enc.put_u128(r_hi);
    enc.put_u64(m_lo);
    enc.put_u64(m_hi);
    return enc.take();
}

EdgeState EdgeState::decode_core(Decoder& dec) {
    EdgeState e;
    e.p_lo = dec.get_digest();
    e.p_hi = dec.get_digest();
    e.r_lo = dec.get_u128();
    e.r_hi = dec.get_u128();
    e.m_lo = dec.get_u64();
    e.m_hi = dec.get_u64();
    if (!(e.p_lo < e.p_hi)) throw DecodeError("edge sides out of order");
    return e;
}

Bytes EdgeState::encode_bundle() const {
    Encoder enc;
    enc.put_raw(encode_core());
    enc.put_byte(std::uint8_t((sig_lo ? 1 : 0) | (sig_hi ? 2 : 0)));
    if (sig_lo) enc.put_raw(sig_lo->encode());
    if (sig_hi) enc.put_raw(sig_hi->encode());
    return enc.take();
}

EdgeState EdgeState::decode_bundle(ByteView wire) {
    Decoder dec(wire);
    EdgeState e = decode_core(dec);
    std::uint8_t flags = dec.get_byte();
    if (flags & 1) e.sig_lo = SignedEdgeRecord::decode(dec);
    if (flags & 2) e.sig_hi = SignedEdgeRecord::decode(dec);
    if (!dec.done()) throw DecodeError("trailing bytes after edge bundle");
    return e;
}

bool EdgeState::records_valid(const PublicKey& pub_lo, const PublicKey& pub_hi) const {
    Digest value = edge_hash(*this);
    Digest k = key();
    if (sig_lo && !sig_lo->valid_for(pub_lo, k, value)) return false;
    if (sig_hi && !sig_hi->valid_for(pub_hi, k, value)) return false;
    return true;
}

namespace {

// Field leaves carry a distinct tag so an edge digest can never
// collide with a tree leaf or internal node over the same bytes.
Digest field_leaf(const Bytes& field) {
    Bytes buf;
    buf.reserve(1 + field.size());
    buf.push_back(0x02);
    buf.insert(buf.end(), field.begin(), field.end());
    return sha256(buf);
}

Bytes enc_amount(CreditAmount v) {
    Encoder enc;
    enc.put_u128(v);
    return enc.take();
}

Bytes enc_counter(std::uint64_t v) {
    Encoder enc;
    enc.put_u64(v);
    return enc.take();
}

Bytes enc_addr(const Digest& d) {
    Encoder enc;
    enc.put_digest(d);
    return enc.take();
}

}  // namespace

Digest edge_hash(const EdgeState& e) {
    std::array<Digest, 8> level{
        field_leaf(enc_amount(e.r_lo)), field_leaf(enc_amount(e.r_hi)),
        field_leaf(enc_addr(e.p_lo)),   field_leaf(enc_addr(e.p_hi)),
        field_leaf(enc_counter(e.m_lo)), field_leaf(enc_counter(e.m_hi)),
        kEmptyNode,                     kEmptyNode,
    };
    std::size_t n = level.size();
    while (n > 1) {
        for (std::size_t i = 0; i < n / 2; ++i) {
            level[i] = internal_digest(level[2 * i], level[2 * i + 1]);
        }
        n /= 2;
    }
    return level[0];
}

}  // namespace hypersyn
