#pragma once

// The bilateral credit edge: reserves of both endpoints' credit, each
// side's counter at its last change, and the endpoints' signed state
// records. Sides are stored in byte order of their addresses so both
// endpoints compute identical digests.

#include <optional>

#include "hypersyn/amount.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/exchange.hpp"
#include "hypersyn/smt.hpp"

namespace hypersyn {

// Message a node signs to commit its whole tree at counter m.
Digest state_digest(const Digest& root, std::uint64_t m);

// SMT key of the edge between two addresses, order-canonicalized.
Digest edge_key(const Digest& a, const Digest& b);

// One side's signed commitment to its tree, plus the proof that the
// edge's hash is a leaf under that root.
struct SignedEdgeRecord {
    Digest root{};
    std::uint64_t m = 0;
    Signature sig{};
    MerkleProof proof;

    // Signature and proof check out for this signer and edge leaf.
    bool valid_for(const PublicKey& signer, const Digest& key, const Digest& value) const;

    Bytes encode() const;
    static SignedEdgeRecord decode(Decoder& dec);
};

struct EdgeState {
    Digest p_lo{}, p_hi{};  // endpoint addresses, p_lo < p_hi bytewise
    CreditAmount r_lo = 0;  // reserve of p_lo's credit
    CreditAmount r_hi = 0;
    std::uint64_t m_lo = 0;  // p_lo's counter at its last change here
    std::uint64_t m_hi = 0;
    std::optional<SignedEdgeRecord> sig_lo;
    std::optional<SignedEdgeRecord> sig_hi;

    static EdgeState open(const Digest& a, CreditAmount r_a, std::uint64_t m_a, const Digest& b,
                          CreditAmount r_b, std::uint64_t m_b);

    bool is_side(const Digest& addr) const { return addr == p_lo || addr == p_hi; }
    Digest other(const Digest& addr) const { return addr == p_lo ? p_hi : p_lo; }
    Digest key() const { return edge_key(p_lo, p_hi); }

    // Reserve of `addr`'s own credit in this edge.
    CreditAmount reserve_of(const Digest& addr) const { return addr == p_lo ? r_lo : r_hi; }
    std::uint64_t counter_of(const Digest& addr) const { return addr == p_lo ? m_lo : m_hi; }
    const std::optional<SignedEdgeRecord>& record_of(const Digest& addr) const {
        return addr == p_lo ? sig_lo : sig_hi;
    }

    // Reserves oriented for a trade that inserts `addr`'s credit.
    ReservePair oriented(const Digest& addr) const {
        return addr == p_lo ? ReservePair{r_lo, r_hi} : ReservePair{r_hi, r_lo};
    }

    void set_reserve(const Digest& addr, CreditAmount r) { (addr == p_lo ? r_lo : r_hi) = r; }
    void set_counter(const Digest& addr, std::uint64_t m) { (addr == p_lo ? m_lo : m_hi) = m; }
    void set_record(const Digest& addr, SignedEdgeRecord rec) {
        (addr == p_lo ? sig_lo : sig_hi) = std::move(rec);
    }

    // Apply a trade inserting delta_in of `from`'s credit.
    CreditAmount trade(const Digest& from, CreditAmount delta_in);

    // Core fields without signatures, for embedding in messages.
    Bytes encode_core() const;
    static EdgeState decode_core(Decoder& dec);

    // Core plus whatever endorsement records are present: the gossip
    // payload that lets third parties mirror reserves they can verify.
    Bytes encode_bundle() const;
    static EdgeState decode_bundle(ByteView wire);

    // Every present record verifies against its side's key and proves
    // this edge's hash under the signed root.
    bool records_valid(const PublicKey& pub_lo, const PublicKey& pub_hi) const;
};

// Binary Merkle root over the domain-tagged canonical field leaves
// [r_lo, r_hi, p_lo, p_hi, m_lo, m_hi, EMPTY, EMPTY].
Digest edge_hash(const EdgeState& e);

}  // namespace hypersyn
