#include "hypersyn/messages.hpp"

namespace hypersyn {

namespace {

// Hard cap on decoded element counts; no honest message comes close.
void check_count(std::uint64_t n, std::size_t remaining) {
    if (n > remaining) throw DecodeError("element count exceeds message size");
}

void put_signature(Encoder& enc, const Signature& sig) { enc.put_bytes(ByteView{sig.bytes}); }

Signature get_signature(Decoder& dec) {
    ByteView b = dec.get_bytes();
    Signature sig;
    if (b.size() != sig.bytes.size()) throw DecodeError("bad signature length");
    std::copy(b.begin(), b.end(), sig.bytes.begin());
    return sig;
}

void put_proofs(Encoder& enc, const std::vector<ProofEntry>& proofs) {
    enc.put_u64(proofs.size());
    for (const auto& p : proofs) {
        enc.put_digest(p.key);
        enc.put_bytes(p.proof);
    }
}

std::vector<ProofEntry> get_proofs(Decoder& dec) {
    std::uint64_t n = dec.get_u64();
    check_count(n, dec.remaining());
    std::vector<ProofEntry> proofs(n);
    for (auto& p : proofs) {
        p.key = dec.get_digest();
        ByteView b = dec.get_bytes();
        p.proof.assign(b.begin(), b.end());
    }
    return proofs;
}

}  // namespace

void put_bitpath(Encoder& enc, const BitPath& path) {
    Bytes buf;
    buf.push_back(std::uint8_t(path.len >> 8));
    buf.push_back(std::uint8_t(path.len & 0xff));
    std::size_t nbytes = (std::size_t(path.len) + 7) / 8;
    buf.insert(buf.end(), path.bits.begin(), path.bits.begin() + nbytes);
    enc.put_bytes(buf);
}

BitPath get_bitpath(Decoder& dec) {
    ByteView b = dec.get_bytes();
    if (b.size() < 2) throw DecodeError("truncated path");
    BitPath p;
    p.len = std::uint16_t((std::uint16_t(b[0]) << 8) | b[1]);
    if (p.len > 256) throw DecodeError("path too deep");
    std::size_t nbytes = (std::size_t(p.len) + 7) / 8;
    if (b.size() != 2 + nbytes) throw DecodeError("path length mismatch");
    std::copy(b.begin() + 2, b.end(), p.bits.begin());
    // Trailing bits beyond len must be zero so equal paths have equal bytes.
    for (std::size_t i = p.len; i < nbytes * 8; ++i)
        if (p.bit(i)) throw DecodeError("nonzero trailing path bits");
    return p;
}

void put_subtree_info(Encoder& enc, const SubtreeInfo& info) {
    enc.put_byte(std::uint8_t(info.kind));
    switch (info.kind) {
        case SubtreeInfo::Kind::Empty: break;
        case SubtreeInfo::Kind::Leaf:
            enc.put_digest(info.key);
            enc.put_digest(info.value);
            break;
        case SubtreeInfo::Kind::Internal:
            enc.put_digest(info.left);
            enc.put_digest(info.right);
            break;
    }
}

SubtreeInfo get_subtree_info(Decoder& dec) {
    SubtreeInfo info;
    std::uint8_t kind = dec.get_byte();
    switch (kind) {
        case 0: info.kind = SubtreeInfo::Kind::Empty; break;
        case 1:
            info.kind = SubtreeInfo::Kind::Leaf;
            info.key = dec.get_digest();
            info.value = dec.get_digest();
            break;
        case 2:
            info.kind = SubtreeInfo::Kind::Internal;
            info.left = dec.get_digest();
            info.right = dec.get_digest();
            break;
        default: throw DecodeError("bad subtree kind");
    }
    return info;
}

const char* abort_reason_name(AbortReason r) {
    switch (r) {
        case AbortReason::Timeout: return "timeout";
        case AbortReason::Stale: return "stale";
        case AbortReason::Refused: return "refused";
        case AbortReason::Invalid: return "invalid";
        case AbortReason::NoCycle: return "no-cycle";
    }
    return "unknown";
}

std::uint8_t message_type(const Message& msg) { return std::uint8_t(msg.index() + 1); }

const char* message_name(const Message& msg) {
    static constexpr const char* names[] = {
        "sync-request",    "subtree-digests", "leaf-transfer",  "payment-propose",
        "payment-accept",  "payment-commit",  "payment-abort",  "arbitrage-request",
        "peer-choice",     "cycle-propose",   "cycle-commit",   "edge-open-propose",
        "edge-open-accept", "misbehavior",    "state-announce",
    };
    return names[msg.index()];
}

namespace {

struct EncodeVisitor {
    Encoder& enc;

    void operator()(const SyncRequest& m) {
        enc.put_u64(m.session);
        enc.put_u64(m.paths.size());
        for (const auto& p : m.paths) put_bitpath(enc, p);
    }
    void operator()(const SubtreeDigests& m) {
        enc.put_u64(m.session);
        enc.put_u64(m.entries.size());
        for (const auto& e : m.entries) {
            put_bitpath(enc, e.path);
            put_subtree_info(enc, e.info);
        }
        enc.put_u64(m.leaf_count);
    }
    void operator()(const LeafTransfer& m) {
        enc.put_u64(m.session);
        enc.put_u64(m.leaves.size());
        for (const auto& l : m.leaves) {
            put_bitpath(enc, l.path);
            enc.put_digest(l.key);
            enc.put_digest(l.value);
            enc.put_bytes(l.payload);
        }
    }
    void operator()(const PaymentPropose& m) {
        enc.put_u64(m.op);
        enc.put_digest(m.edge);
        enc.put_u128(m.price);
        enc.put_u128(m.delta_in);
        enc.put_digest(m.base_hash);
        enc.put_u64(m.m_payer);
    }
    void operator()(const PaymentAccept& m) {
        enc.put_u64(m.op);
        enc.put_u64(m.m_next);
        enc.put_digest(m.root);
        put_signature(enc, m.sig);
        put_proofs(enc, m.proofs);
    }
    void operator()(const PaymentCommit& m) {
        enc.put_u64(m.op);
        enc.put_u64(m.m_next);
        enc.put_digest(m.root);
        put_signature(enc, m.sig);
        put_proofs(enc, m.proofs);
    }
    void operator()(const PaymentAbort& m) {
        enc.put_u64(m.op);
        enc.put_byte(std::uint8_t(m.reason));
    }
    void operator()(const ArbitrageRequest& m) { enc.put_u64(m.op); }
    void operator()(const PeerChoice& m) {
        enc.put_u64(m.op);
        enc.put_byte(m.found ? 1 : 0);
        enc.put_digest(m.common);
        enc.put_u128(m.delta_in);
        enc.put_u128(m.hop1);
        enc.put_u128(m.hop2);
        enc.put_u128(m.hop3);
        enc.put_digest(m.base_ca);
        enc.put_u64(m.m_next);
    }
    void operator()(const CyclePropose& m) {
        enc.put_u64(m.op);
        enc.put_digest(m.node_a);
        enc.put_digest(m.node_b);
        enc.put_digest(m.node_c);
        enc.put_u128(m.delta_in);
        enc.put_u128(m.hop1);
        enc.put_u128(m.hop2);
        enc.put_u128(m.hop3);
        enc.put_digest(m.base_ab);
        enc.put_digest(m.base_bc);
        enc.put_digest(m.base_ca);
        enc.put_u64(m.m_a);
        enc.put_u64(m.m_b);
    }
    void operator()(const CycleCommit& m) {
        enc.put_u64(m.op);
        enc.put_u64(m.records.size());
        for (const auto& r : m.records) {
            enc.put_digest(r.party);
            enc.put_u64(r.m_next);
            enc.put_digest(r.root);
            put_signature(enc, r.sig);
            put_proofs(enc, r.proofs);
        }
    }
    void operator()(const EdgeOpenPropose& m) {
        enc.put_u64(m.op);
        enc.put_digest(m.pub);
        enc.put_u64(m.m_proposer);
        enc.put_u128(m.r_proposer);
        enc.put_u128(m.r_acceptor);
        enc.put_byte(std::uint8_t(m.mode));
        enc.put_digest(m.common);
    }
    void operator()(const EdgeOpenAccept& m) {
        enc.put_u64(m.op);
        enc.put_digest(m.pub);
        enc.put_byte(m.accepted ? 1 : 0);
        enc.put_u64(m.m_next);
        enc.put_digest(m.root);
        put_signature(enc, m.sig);
        enc.put_bytes(m.proof);
    }
    void operator()(const MisbehaviorBroadcast& m) { enc.put_bytes(m.proof); }
    void operator()(const StateAnnounce& m) {
        enc.put_digest(m.root);
        enc.put_u64(m.m);
        put_signature(enc, m.sig);
    }
};

}  // namespace

Bytes encode_message(const Message& msg) {
    Encoder enc;
    enc.put_byte(message_type(msg));
    std::visit(EncodeVisitor{enc}, msg);
    return enc.take();
}

Message decode_message(ByteView wire) {
    Decoder dec(wire);
    std::uint8_t type = dec.get_byte();
    Message msg;
    switch (type) {
        case 1: {
            SyncRequest m;
            m.session = dec.get_u64();
            std::uint64_t n = dec.get_u64();
            check_count(n, dec.remaining());
            m.paths.resize(n);
            for (auto& p : m.paths) p = get_bitpath(dec);
            msg = std::move(m);
            break;
        }
        case 2: {
            SubtreeDigests m;
            m.session = dec.get_u64();
            std::uint64_t n = dec.get_u64();
            check_count(n, dec.remaining());
            m.entries.resize(n);
            for (auto& e : m.entries) {
                e.path = get_bitpath(dec);
                e.info = get_subtree_info(dec);
            }
            m.leaf_count = std::uint32_t(dec.get_u64());
            msg = std::move(m);
            break;
        }
        case 3: {
            LeafTransfer m;
            m.session = dec.get_u64();
            std::uint64_t n = dec.get_u64();
            check_count(n, dec.remaining());
            m.leaves.resize(n);
            for (auto& l : m.leaves) {
                l.path = get_bitpath(dec);
                l.key = dec.get_digest();
                l.value = dec.get_digest();
                ByteView b = dec.get_bytes();
                l.payload.assign(b.begin(), b.end());
            }
            msg = std::move(m);
            break;
        }
        case 4: {
            PaymentPropose m;
            m.op = dec.get_u64();
            m.edge = dec.get_digest();
            m.price = dec.get_u128();
            m.delta_in = dec.get_u128();
            m.base_hash = dec.get_digest();
            m.m_payer = dec.get_u64();
            msg = m;
            break;
        }
        case 5: {
            PaymentAccept m;
            m.op = dec.get_u64();
            m.m_next = dec.get_u64();
            m.root = dec.get_digest();
            m.sig = get_signature(dec);
            m.proofs = get_proofs(dec);
            msg = std::move(m);
            break;
        }
        case 6: {
            PaymentCommit m;
            m.op = dec.get_u64();
            m.m_next = dec.get_u64();
            m.root = dec.get_digest();
            m.sig = get_signature(dec);
            m.proofs = get_proofs(dec);
            msg = std::move(m);
            break;
        }
        case 7: {
            PaymentAbort m;
            m.op = dec.get_u64();
            std::uint8_t r = dec.get_byte();
            if (r > std::uint8_t(AbortReason::NoCycle)) throw DecodeError("bad abort reason");
            m.reason = AbortReason(r);
            msg = m;
            break;
        }
        case 8: {
            ArbitrageRequest m;
            m.op = dec.get_u64();
            msg = m;
            break;
        }
        case 9: {
            PeerChoice m;
            m.op = dec.get_u64();
            m.found = dec.get_byte() != 0;
            m.common = dec.get_digest();
            m.delta_in = dec.get_u128();
            m.hop1 = dec.get_u128();
            m.hop2 = dec.get_u128();
            m.hop3 = dec.get_u128();
            m.base_ca = dec.get_digest();
            m.m_next = dec.get_u64();
            msg = m;
            break;
        }
        case 10: {
            CyclePropose m;
            m.op = dec.get_u64();
            m.node_a = dec.get_digest();
            m.node_b = dec.get_digest();
            m.node_c = dec.get_digest();
            m.delta_in = dec.get_u128();
            m.hop1 = dec.get_u128();
            m.hop2 = dec.get_u128();
            m.hop3 = dec.get_u128();
            m.base_ab = dec.get_digest();
            m.base_bc = dec.get_digest();
            m.base_ca = dec.get_digest();
            m.m_a = dec.get_u64();
            m.m_b = dec.get_u64();
            msg = m;
            break;
        }
        case 11: {
            CycleCommit m;
            m.op = dec.get_u64();
            std::uint64_t n = dec.get_u64();
            check_count(n, dec.remaining());
            m.records.resize(n);
            for (auto& r : m.records) {
                r.party = dec.get_digest();
                r.m_next = dec.get_u64();
                r.root = dec.get_digest();
                r.sig = get_signature(dec);
                r.proofs = get_proofs(dec);
            }
            msg = std::move(m);
            break;
        }
        case 12: {
            EdgeOpenPropose m;
            m.op = dec.get_u64();
            m.pub = dec.get_digest();
            m.m_proposer = dec.get_u64();
            m.r_proposer = dec.get_u128();
            m.r_acceptor = dec.get_u128();
            std::uint8_t mode = dec.get_byte();
            if (mode > 1) throw DecodeError("bad edge open mode");
            m.mode = EdgeOpenMode(mode);
            m.common = dec.get_digest();
            msg = m;
            break;
        }
        case 13: {
            EdgeOpenAccept m;
            m.op = dec.get_u64();
            m.pub = dec.get_digest();
            m.accepted = dec.get_byte() != 0;
            m.m_next = dec.get_u64();
            m.root = dec.get_digest();
            m.sig = get_signature(dec);
            ByteView b = dec.get_bytes();
            m.proof.assign(b.begin(), b.end());
            msg = std::move(m);
            break;
        }
        case 14: {
            MisbehaviorBroadcast m;
            ByteView b = dec.get_bytes();
            m.proof.assign(b.begin(), b.end());
            msg = std::move(m);
            break;
        }
        case 15: {
            StateAnnounce m;
            m.root = dec.get_digest();
            m.m = dec.get_u64();
            m.sig = get_signature(dec);
            msg = m;
            break;
        }
        default: throw DecodeError("unknown message type");
    }
    if (!dec.done()) throw DecodeError("trailing bytes after message");
    return msg;
}

}  // namespace hypersyn
