#pragma once

// Self-contained evidence of protocol violations. A proof embeds signed
// statements that cannot coexist under honest operation; any third party
// can check it offline and drop its edges to the implicated nodes.

#include <cstdint>
#include <vector>

#include "hypersyn/bytes.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/edge.hpp"

namespace hypersyn {

// One signed claim: "my tree root is `root` at counter m", optionally
// narrowed to a leaf by a Merkle proof, optionally carrying the full
// edge state behind a presence claim.
struct SignedStatement {
    PublicKey pub{};
    Digest root{};
    std::uint64_t m = 0;
    Signature sig{};
    Bytes proof_wire;  // empty when the statement is root-only
    Bytes edge_core;   // encoded EdgeState core when claiming presence

    bool sig_valid() const { return verify_signature(pub, state_digest(root, m), sig); }
    Digest signer() const { return address_of(pub); }
};

struct MisbehaviorProof {
    enum class Kind : std::uint8_t {
        // Two roots signed at one counter; or a signed root whose tree
        // stores an edge recording a counter beyond the signed one.
        Equivocation = 0,
        // The two sides of one edge signed different contents at equal
        // embedded counters.
        InconsistentEdge = 1,
        // Signed presence at m_d, signed absence at m_now, with the
        // deleter's own counter gap still below the staleness bound.
        MaliciousDeletion = 2,
    };

    Kind kind = Kind::Equivocation;
    Digest edge_key{};  // zero for a two-root equivocation
    SignedStatement a;
    SignedStatement b;

    // Full check of every embedded signature and proof; v is the
    // staleness bound (only MaliciousDeletion consults it).
    bool valid(std::uint64_t v) const;

    // Addresses every honest node must disconnect from.
    std::vector<Digest> implicated() const;

    Bytes encode() const;
    static MisbehaviorProof decode(ByteView wire);

    // Dedup identity for forwarding.
    Digest digest() const { return sha256(encode()); }
};

MisbehaviorProof make_equivocation(SignedStatement s1, SignedStatement s2);
MisbehaviorProof make_counter_misuse(const Digest& edge_key, SignedStatement presence);
MisbehaviorProof make_inconsistent_edge(const Digest& edge_key, SignedStatement s1, SignedStatement s2);
MisbehaviorProof make_malicious_deletion(const Digest& edge_key, SignedStatement presence,
                                         SignedStatement absence);

}  // namespace hypersyn
