#pragma once

// Wire schema for everything nodes exchange: anti-entropy, two-phase
// payments, arbitrage cycles, edge lifecycle, misbehavior broadcasts,
// and signed state announcements. One type byte, then the canonical
// encoding of the fields in declaration order.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "hypersyn/amount.hpp"
#include "hypersyn/bytes.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/edge.hpp"
#include "hypersyn/smt.hpp"

namespace hypersyn {

void put_bitpath(Encoder& enc, const BitPath& path);
BitPath get_bitpath(Decoder& dec);

void put_subtree_info(Encoder& enc, const SubtreeInfo& info);
SubtreeInfo get_subtree_info(Decoder& dec);

// Anti-entropy: one round asks for a batch of paths; the answer splits
// into digest entries and leaf entries so leaf payloads (full edge
// bundles) ride a dedicated message. session 0 marks unsolicited
// gossip leaves.
struct SyncRequest {
    std::uint64_t session = 0;
    std::vector<BitPath> paths;
};

struct SubtreeEntry {
    BitPath path;
    SubtreeInfo info;  // Empty or Internal; leaves travel separately
};

struct SubtreeDigests {
    std::uint64_t session = 0;
    std::vector<SubtreeEntry> entries;
    std::uint32_t leaf_count = 0;  // LeafTransfer entries that follow
};

struct LeafEntry {
    BitPath path;
    Digest key{};
    Digest value{};
    Bytes payload;  // edge bundle when the leaf is an edge this peer can show
};

struct LeafTransfer {
    std::uint64_t session = 0;
    std::vector<LeafEntry> leaves;
};

// Payer opens a two-phase payment: mint delta_in of its credit, take
// price of the receiver's. base_hash pins the edge state the quote was
// computed from; m_payer is the counter the payer will commit under.
struct PaymentPropose {
    std::uint64_t op = 0;
    Digest edge{};
    CreditAmount price = 0;
    CreditAmount delta_in = 0;
    Digest base_hash{};
    std::uint64_t m_payer = 0;
};

struct ProofEntry {
    Digest key{};
    Bytes proof;  // MerkleProof wire
};

// Counterparty's signed candidate state. Also the accept step of a
// cycle, where it carries one proof per touched edge.
struct PaymentAccept {
    std::uint64_t op = 0;
    std::uint64_t m_next = 0;
    Digest root{};
    Signature sig{};
    std::vector<ProofEntry> proofs;
};

// Sender has applied the operation; its signed record completes the
// endorsement set on the receiving side.
struct PaymentCommit {
    std::uint64_t op = 0;
    std::uint64_t m_next = 0;
    Digest root{};
    Signature sig{};
    std::vector<ProofEntry> proofs;
};

enum class AbortReason : std::uint8_t {
    Timeout = 0,
    Stale = 1,
    Refused = 2,
    Invalid = 3,
    NoCycle = 4,
};

const char* abort_reason_name(AbortReason r);

// Aborts any pending two-phase operation; counters allocated for it
// are burned, state is untouched.
struct PaymentAbort {
    std::uint64_t op = 0;
    AbortReason reason = AbortReason::Timeout;
};

// Asks the counterparty to pick a common peer and run one cycle.
struct ArbitrageRequest {
    std::uint64_t op = 0;
};

// Counterparty's answer: the chosen common peer and the planned cycle,
// or found=false when no cycle raises the requester's exchange value.
// m_next is the counter the chooser will sign its update under.
// base_ca pins the far edge the requester cannot see into the plan.
struct PeerChoice {
    std::uint64_t op = 0;
    bool found = false;
    Digest common{};
    CreditAmount delta_in = 0;
    CreditAmount hop1 = 0, hop2 = 0, hop3 = 0;
    Digest base_ca{};
    std::uint64_t m_next = 0;
};

// Full cycle plan fanned to the third party (and echoed to the
// initiator with the sender's counter). Base hashes pin all three edge
// states the plan was computed from.
struct CyclePropose {
    std::uint64_t op = 0;
    Digest node_a{}, node_b{}, node_c{};
    CreditAmount delta_in = 0;
    CreditAmount hop1 = 0, hop2 = 0, hop3 = 0;
    Digest base_ab{}, base_bc{}, base_ca{};
    std::uint64_t m_a = 0, m_b = 0;
};

// One party's signed endorsement of the cycle outcome.
struct PartyRecord {
    Digest party{};
    std::uint64_t m_next = 0;
    Digest root{};
    Signature sig{};
    std::vector<ProofEntry> proofs;
};

// Initiator distributes the endorsement records it has collected.
struct CycleCommit {
    std::uint64_t op = 0;
    std::vector<PartyRecord> records;
};

enum class EdgeOpenMode : std::uint8_t {
    Negotiated = 0,
    CommonPeer = 1,
};

struct EdgeOpenPropose {
    std::uint64_t op = 0;
    PublicKey pub{};  // proposer's key; the address alone cannot verify signatures
    std::uint64_t m_proposer = 0;  // counter the proposer will sign under
    CreditAmount r_proposer = 0;
    CreditAmount r_acceptor = 0;
    EdgeOpenMode mode = EdgeOpenMode::Negotiated;
    Digest common{};  // CommonPeer mode: whose edges implied the rate
};

struct EdgeOpenAccept {
    std::uint64_t op = 0;
    PublicKey pub{};
    bool accepted = false;
    std::uint64_t m_next = 0;
    Digest root{};
    Signature sig{};
    Bytes proof;  // membership of the new edge under root
};

struct MisbehaviorBroadcast {
    Bytes proof;  // encoded MisbehaviorProof
};

// Signed commitment to the sender's whole tree.
struct StateAnnounce {
    Digest root{};
    std::uint64_t m = 0;
    Signature sig{};
};

using Message = std::variant<SyncRequest, SubtreeDigests, LeafTransfer, PaymentPropose, PaymentAccept,
                             PaymentCommit, PaymentAbort, ArbitrageRequest, PeerChoice, CyclePropose,
                             CycleCommit, EdgeOpenPropose, EdgeOpenAccept, MisbehaviorBroadcast,
                             StateAnnounce>;

std::uint8_t message_type(const Message& msg);
const char* message_name(const Message& msg);

Bytes encode_message(const Message& msg);
Message decode_message(ByteView wire);

}  // namespace hypersyn
