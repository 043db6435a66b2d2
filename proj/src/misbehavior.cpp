#include "hypersyn/misbehavior.hpp"

#include <optional>

#include "hypersyn/errors.hpp"
#include "hypersyn/smt.hpp"

namespace hypersyn {

namespace {

void put_statement(Encoder& enc, const SignedStatement& s) {
    enc.put_digest(s.pub);
    enc.put_digest(s.root);
    enc.put_u64(s.m);
    enc.put_bytes(ByteView{s.sig.bytes});
    enc.put_bytes(s.proof_wire);
    enc.put_bytes(s.edge_core);
}

SignedStatement get_statement(Decoder& dec) {
    SignedStatement s;
    s.pub = dec.get_digest();
    s.root = dec.get_digest();
    s.m = dec.get_u64();
    ByteView sig = dec.get_bytes();
    if (sig.size() != s.sig.bytes.size()) throw DecodeError("bad signature length");
    std::copy(sig.begin(), sig.end(), s.sig.bytes.begin());
    ByteView proof = dec.get_bytes();
    s.proof_wire.assign(proof.begin(), proof.end());
    ByteView core = dec.get_bytes();
    s.edge_core.assign(core.begin(), core.end());
    return s;
}

// Presence claim: the statement's proof places the embedded edge core
// under the signed root at `key`. Returns the core on success.
std::optional<EdgeState> checked_presence(const SignedStatement& s, const Digest& key) {
    if (!s.sig_valid()) return std::nullopt;
    if (s.proof_wire.empty() || s.edge_core.empty()) return std::nullopt;
    EdgeState core;
    MerkleProof proof;
    try {
        Decoder dec(s.edge_core);
        core = EdgeState::decode_core(dec);
        if (!dec.done()) return std::nullopt;
        proof = MerkleProof::decode(s.proof_wire);
    } catch (const DecodeError&) {
        return std::nullopt;
    }
    if (core.key() != key) return std::nullopt;
    if (!proves_presence(s.root, proof, key, edge_hash(core))) return std::nullopt;
    return core;
}

bool checked_absence(const SignedStatement& s, const Digest& key) {
    if (!s.sig_valid()) return false;
    if (s.proof_wire.empty() || !s.edge_core.empty()) return false;
    MerkleProof proof;
    try {
        proof = MerkleProof::decode(s.proof_wire);
    } catch (const DecodeError&) {
        return false;
    }
    return proves_absence(s.root, proof, key);
}

}  // namespace

bool MisbehaviorProof::valid(std::uint64_t v) const {
    switch (kind) {
        case Kind::Equivocation: {
            if (edge_key.is_zero()) {
                // Two different roots signed at one counter.
                return a.pub == b.pub && a.sig_valid() && b.sig_valid() && a.m == b.m &&
                       a.root != b.root;
            }
            // A signed tree stores this signer's own edge at a counter
            // beyond the signed one: the root cannot be current.
            auto core = checked_presence(a, edge_key);
            if (!core) return false;
            if (!core->is_side(a.signer())) return false;
            return core->counter_of(a.signer()) > a.m;
        }
        case Kind::InconsistentEdge: {
            auto core_a = checked_presence(a, edge_key);
            auto core_b = checked_presence(b, edge_key);
            if (!core_a || !core_b) return false;
            Digest side_a = a.signer(), side_b = b.signer();
            if (side_a == side_b) return false;
            if (!core_a->is_side(side_a) || !core_a->is_side(side_b)) return false;
            if (core_a->p_lo != core_b->p_lo || core_a->p_hi != core_b->p_hi) return false;
            if (core_a->m_lo != core_b->m_lo || core_a->m_hi != core_b->m_hi) return false;
            return edge_hash(*core_a) != edge_hash(*core_b);
        }
        case Kind::MaliciousDeletion: {
            if (a.pub != b.pub) return false;
            auto core = checked_presence(a, edge_key);
            if (!core) return false;
            if (!core->is_side(a.signer())) return false;
            if (!checked_absence(b, edge_key)) return false;
            return b.m > a.m && b.m - a.m < v;
        }
    }
    return false;
}

std::vector<Digest> MisbehaviorProof::implicated() const {
    switch (kind) {
        case Kind::Equivocation:
        case Kind::MaliciousDeletion: return {a.signer()};
        case Kind::InconsistentEdge: return {a.signer(), b.signer()};
    }
    return {};
}

Bytes MisbehaviorProof::encode() const {
    Encoder enc;
    enc.put_byte(std::uint8_t(kind));
    enc.put_digest(edge_key);
    put_statement(enc, a);
    put_statement(enc, b);
    return enc.take();
}

MisbehaviorProof MisbehaviorProof::decode(ByteView wire) {
    Decoder dec(wire);
    MisbehaviorProof p;
    std::uint8_t kind = dec.get_byte();
    if (kind > std::uint8_t(Kind::MaliciousDeletion)) throw DecodeError("bad proof kind");
    p.kind = Kind(kind);
    p.edge_key = dec.get_digest();
    p.a = get_statement(dec);
    p.b = get_statement(dec);
    if (!dec.done()) throw DecodeError("trailing bytes after proof");
    return p;
}

MisbehaviorProof make_equivocation(SignedStatement s1, SignedStatement s2) {
    MisbehaviorProof p;
    p.kind = MisbehaviorProof::Kind::Equivocation;
    p.a = std::move(s1);
    p.b = std::move(s2);
    return p;
}

MisbehaviorProof make_counter_misuse(const Digest& edge_key, SignedStatement presence) {
    MisbehaviorProof p;
    p.kind = MisbehaviorProof::Kind::Equivocation;
    p.edge_key = edge_key;
    p.a = std::move(presence);
    return p;
}

MisbehaviorProof make_inconsistent_edge(const Digest& edge_key, SignedStatement s1, SignedStatement s2) {
    MisbehaviorProof p;
    p.kind = MisbehaviorProof::Kind::InconsistentEdge;
    p.edge_key = edge_key;
    p.a = std::move(s1);
    p.b = std::move(s2);
    return p;
}

MisbehaviorProof make_malicious_deletion(const Digest& edge_key, SignedStatement presence,
                                         SignedStatement absence) {
    MisbehaviorProof p;
    p.kind = MisbehaviorProof::Kind::MaliciousDeletion;
    p.edge_key = edge_key;
    p.a = std::move(presence);
    p.b = std::move(absence);
    return p;
}

}  // namespace hypersyn
