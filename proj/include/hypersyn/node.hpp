#pragma once

// The per-peer protocol state machine: edges stored in the node's own
// tree, batch-signed roots, pruned replicas of peers, plaintext mirrors
// of gossiped edges, two-phase payments, mutual-arbitrage cycles,
// anti-entropy sessions, misbehavior handling, and edge lifecycle.
//
// A node is a single-writer state machine: feed one inbound message or
// tick at a time, collect outbound envelopes from the outbox. All
// cross-node interaction happens through messages.

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <variant>
#include <vector>

#include "hypersyn/amount.hpp"
#include "hypersyn/arbitrage.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/edge.hpp"
#include "hypersyn/messages.hpp"
#include "hypersyn/misbehavior.hpp"
#include "hypersyn/smt.hpp"

namespace hypersyn {

struct ProtocolParams {
    std::uint64_t v = 16;                // staleness bound on counter gaps
    std::uint32_t arbitrage_rounds = 1;  // cycles attempted per payment request
    std::uint64_t sync_interval = 25;    // ticks between divergence checks
    std::uint64_t announce_interval = 50;
    std::uint64_t op_timeout = 64;       // ticks before a pending op aborts
    std::uint64_t unreachable_after = 100;
    CreditAmount default_reserve = 1000000;
};

struct Envelope {
    Digest from{};
    Digest to{};
    Message msg;
};

// What a node knows about a peer outside the edge itself.
struct PeerMeta {
    PublicKey pub{};
    bool have_pub = false;
    Digest root{};  // latest signed root
    std::uint64_t m = 0;
    Signature sig{};
    bool have_state = false;
    std::uint64_t last_seen = 0;
};

// Terminal record of one operation this node took part in.
struct OpResult {
    std::uint64_t op = 0;
    std::string kind;
    bool ok = false;
    std::string detail;
    Digest peer{};
    CreditAmount price = 0;
    CreditAmount delta_in = 0;
    CreditAmount profit = 0;
};

namespace detail {

// In-flight operation states. Top-level so the variant sees complete
// types; they are implementation detail of Node.
struct PendingPay {
    Digest receiver{};
    CreditAmount price = 0;
    bool want_arb = false;
    std::uint32_t arb_rounds_left = 0;
    enum class Phase { Sync, Arb, Proposed } phase = Phase::Sync;
    std::uint64_t arb_op = 0;
    CreditAmount delta_in = 0;
    std::uint64_t m_mine = 0;
    EdgeState staged;  // reserves final; peer counter pending accept
};
struct PendingRecv {
    Digest payer{};
    CreditAmount price = 0, delta_in = 0;
    std::uint64_t m_mine = 0, m_payer = 0;
    EdgeState next;
    SparseMerkleTree candidate;
};
struct PendingArbReq {  // requester: the node whose credit value is low
    Digest counterparty{};
    std::uint64_t parent_pay = 0;
    bool retried = false;
    bool proposed = false;
    Digest common{};
    CreditAmount delta_in = 0;
    CreditAmount hop1 = 0, hop2 = 0, hop3 = 0;
    std::uint64_t m_a = 0, m_b = 0;
    Digest base_ca{};
};
struct PendingArbCp {  // counterparty: picked the common peer, initiates the cycle
    Digest requester{};
    Digest common{};
    CyclePlan plan;
    std::uint64_t m_a = 0, m_b = 0, m_c = 0;
    bool have_b = false;
    std::optional<PartyRecord> c_record;
    bool committed = false;
    EdgeState next_ab, next_ca;
    SparseMerkleTree candidate;
};
struct PendingArbThird {  // common peer: signs first
    Digest a{}, b{};
    std::uint64_t m_c = 0;
    EdgeState next_bc, next_ca;
    SparseMerkleTree candidate;
    std::optional<PartyRecord> a_record, b_record;
};
struct PendingOpen {
    Digest peer{};
    CreditAmount r_mine = 0, r_theirs = 0;
    EdgeOpenMode mode = EdgeOpenMode::Negotiated;
    Digest common{};
    std::uint64_t m_mine = 0;
};
struct PendingAccept {
    Digest peer{};
    EdgeState next;
    std::uint64_t m_mine = 0;
    SparseMerkleTree candidate;
};
using OpState = std::variant<PendingPay, PendingRecv, PendingArbReq, PendingArbCp, PendingArbThird,
                             PendingOpen, PendingAccept>;
struct Pending {
    std::uint64_t op = 0;
    std::uint64_t started = 0;
    OpState state;
};

struct QueuedOp {
    enum class Kind { Pay, Arb, Open, OpenCommon } kind = Kind::Pay;
    std::uint64_t op = 0;
    Digest peer{};
    Digest common{};
    CreditAmount price = 0, r_mine = 0, r_theirs = 0;
    bool want_arb = false;
};

struct ActiveSync {
    Digest peer{};
    SyncSession engine;
    // Signed state the session is converging to; deletion evidence
    // pairs against exactly this commitment.
    Digest target_root{};
    std::uint64_t target_m = 0;
    Signature target_sig{};
    std::uint64_t started = 0;
    std::vector<std::pair<BitPath, SubtreeInfo>> staged;
    std::vector<LeafEntry> staged_leaves;
    std::uint64_t expect_leaves = 0;
    bool have_digests = false;
};

}  // namespace detail

struct NodeStats {
    std::uint64_t payments_ok = 0;
    std::uint64_t payments_aborted = 0;
    std::uint64_t payments_received = 0;
    std::uint64_t cycles_executed = 0;
    std::uint64_t cycles_none = 0;
    CreditAmount cycle_profit = 0;
    std::uint64_t proofs_emitted = 0;
    std::uint64_t proofs_forwarded = 0;
    std::uint64_t edges_dropped = 0;
    std::uint64_t edges_pruned = 0;
    std::uint64_t syncs_completed = 0;
    std::uint64_t syncs_failed = 0;
    std::uint64_t sync_queries = 0;
    std::uint64_t leaves_fetched = 0;
    std::uint64_t messages_sent = 0;
    std::uint64_t messages_received = 0;
};

class Node {
public:
    explicit Node(Keypair keys, ProtocolParams params = {});

    const Digest& addr() const { return addr_; }
    const PublicKey& pub() const { return keys_.pub; }
    std::uint64_t counter() const { return m_; }
    const SparseMerkleTree& tree() const { return tree_; }
    const ProtocolParams& params() const { return params_; }
    std::uint64_t now() const { return now_; }

    // --- wiring ---
    std::vector<Envelope> drain_outbox();
    bool outbox_empty() const { return outbox_.empty(); }
    void handle(const Envelope& env);
    void on_tick(std::uint64_t now);

    // --- peer knowledge ---
    void learn_peer(const Digest& peer, const PublicKey& pub);
    // Signed state learned out of band (directory lookups). Runs the
    // same monotonicity and equivocation checks as a live announce.
    void observe_state(const Digest& peer, const Digest& root, std::uint64_t m, const Signature& sig);

    bool has_edge(const Digest& peer) const { return edges_.count(peer) != 0; }
    const EdgeState* edge_with(const Digest& peer) const;
    std::vector<Digest> peer_addrs() const;
    const PrunedSmt* replica_of(const Digest& peer) const;
    const EdgeState* mirror_of(const Digest& edge_key) const;
    const PeerMeta* meta_of(const Digest& peer) const;
    bool banned(const Digest& peer) const { return banned_.count(peer) != 0; }

    // --- operations (ops queue when another op is already in flight) ---
    std::uint64_t open_edge(const Digest& peer, CreditAmount r_mine, CreditAmount r_theirs);
    std::uint64_t open_edge_common(const Digest& peer, const Digest& common);
    std::uint64_t pay(const Digest& receiver, CreditAmount price, bool with_arbitrage = false);
    std::uint64_t request_arbitrage(const Digest& counterparty);
    void sync_with(const Digest& peer);
    std::vector<Digest> prune_stale(std::uint64_t now);
    void handle_misbehavior(const MisbehaviorProof& proof);

    StateAnnounce make_announce() const;
    MerkleProof prove_own(const Digest& key) const { return tree_.prove(key); }

    bool busy() const { return !pending_.empty(); }
    bool idle() const { return pending_.empty() && queued_.empty() && syncs_.empty(); }
    const std::vector<OpResult>& results() const { return results_; }
    const NodeStats& stats() const { return stats_; }
    // Accept inbound edge proposals automatically (tests and scripted
    // scenarios may turn this off).
    bool auto_accept_edges = true;

private:
    using PendingPay = detail::PendingPay;
    using PendingRecv = detail::PendingRecv;
    using PendingArbReq = detail::PendingArbReq;
    using PendingArbCp = detail::PendingArbCp;
    using PendingArbThird = detail::PendingArbThird;
    using PendingOpen = detail::PendingOpen;
    using PendingAccept = detail::PendingAccept;
    using OpState = detail::OpState;
    using Pending = detail::Pending;
    using QueuedOp = detail::QueuedOp;
    using ActiveSync = detail::ActiveSync;

    // --- plumbing ---
    void send(const Digest& to, Message msg);
    std::uint64_t fresh_op();
    std::uint64_t alloc_counter();
    // Apply staged tree changes under counter m_use: bump, re-sign, and
    // refresh this side's records on the changed edges.
    void commit(std::uint64_t m_use, const std::vector<Digest>& changed_edges);
    // Announce the new root to peers and gossip the changed edges. Kept
    // separate from commit() so op replies go out first on each link.
    void publish(const std::vector<Digest>& changed_edges);
    void record(OpResult r);
    void finish_op(std::uint64_t op);
    void start_queued();
    void begin(QueuedOp q);
    void add_peer_scaffolding(const Digest& peer);
    void gossip_edge(const Digest& peer_of_edge, const std::vector<Digest>& extra_targets = {});
    SignedEdgeRecord own_record(const Digest& edge_key, const SparseMerkleTree& tree,
                                std::uint64_t m) const;
    bool verify_record(const PublicKey& pub, const SignedEdgeRecord& rec, const Digest& key,
                       const Digest& value) const;
    void store_mirror(EdgeState incoming, const Digest& source);
    void relay_gossip(const EdgeState& e, const Digest& source);
    void maybe_adopt(EdgeState incoming, bool lo_ok, bool hi_ok);
    void process_signed_state(const Digest& peer, const Digest& root, std::uint64_t m,
                              const Signature& sig);
    void start_sync(const Digest& peer);
    void advance_sync(std::uint64_t session);
    void finish_sync(std::uint64_t session);
    void fail_sync(std::uint64_t session, const char* why);
    void check_deletion(const Digest& peer, const ActiveSync& sync, const std::vector<Digest>& removed);
    void broadcast_proof(const MisbehaviorProof& proof, const Digest& skip);
    void punish(const MisbehaviorProof& proof, const Digest& from);
    std::optional<CyclePlan> plan_for_requester(const Digest& requester, Digest* common_out);
    void arb_try_commit(std::uint64_t op);
    void third_try_apply(std::uint64_t op);
    void arb_finalize_counterparty(std::uint64_t op, const PaymentCommit& m);
    void arb_req_failed(std::uint64_t op, AbortReason reason, const Digest& from);
    void arb_cp_failed(std::uint64_t op, const char* why);
    void burn_third(std::uint64_t op, const char* why);
    void resume_pay(std::uint64_t pay_op);
    void resume_pay_after_arb(std::uint64_t pay_op);
    void propose_payment(std::uint64_t op);
    void abort_pay(std::uint64_t op, const char* why);
    std::optional<std::pair<CreditAmount, CreditAmount>> common_peer_rate(const Digest& proposer,
                                                                          const Digest& acceptor,
                                                                          const Digest& common) const;

    // --- message handlers ---
    void on_sync_request(const Digest& from, const SyncRequest& m);
    void on_subtree_digests(const Digest& from, const SubtreeDigests& m);
    void on_leaf_transfer(const Digest& from, const LeafTransfer& m);
    void on_payment_propose(const Digest& from, const PaymentPropose& m);
    void on_payment_accept(const Digest& from, const PaymentAccept& m);
    void on_payment_commit(const Digest& from, const PaymentCommit& m);
    void on_payment_abort(const Digest& from, const PaymentAbort& m);
    void on_arbitrage_request(const Digest& from, const ArbitrageRequest& m);
    void on_peer_choice(const Digest& from, const PeerChoice& m);
    void on_cycle_propose(const Digest& from, const CyclePropose& m);
    void on_cycle_commit(const Digest& from, const CycleCommit& m);
    void on_edge_open_propose(const Digest& from, const EdgeOpenPropose& m);
    void on_edge_open_accept(const Digest& from, const EdgeOpenAccept& m);
    void on_misbehavior(const Digest& from, const MisbehaviorBroadcast& m);
    void on_state_announce(const Digest& from, const StateAnnounce& m);

    Keypair keys_;
    Digest addr_{};
    ProtocolParams params_;
    std::uint64_t now_ = 0;

    std::uint64_t m_ = 0;          // counter of the last signed root
    std::uint64_t last_alloc_ = 0;  // highest counter handed to any candidate
    SparseMerkleTree tree_;
    Signature own_sig_{};  // over state_digest(tree root, m)

    std::map<Digest, EdgeState> edges_;     // by peer address
    std::map<Digest, Digest> edge_peers_;   // edge key -> peer address
    std::map<Digest, PrunedSmt> replicas_;  // by peer address
    std::map<Digest, PeerMeta> meta_;
    std::map<Digest, EdgeState> mirrors_;  // by edge key; gossiped third-party edges
    std::set<Digest> banned_;
    std::set<Digest> seen_proofs_;
    std::map<Digest, SignedEdgeRecord> retained_;  // peer records kept past pruning
    std::map<Digest, std::uint64_t> last_gossip_;  // edge key -> max counter forwarded
    std::set<Digest> needs_resync_;  // edges frozen until the peer is re-synced

    std::map<std::uint64_t, Pending> pending_;
    std::deque<QueuedOp> queued_;
    std::map<std::uint64_t, ActiveSync> syncs_;
    std::map<Digest, std::uint64_t> sync_by_peer_;
    std::map<Digest, std::uint64_t> next_sync_at_;

    std::vector<Envelope> outbox_;
    std::vector<OpResult> results_;
    NodeStats stats_;
    std::uint64_t next_op_ = 1;
    std::uint64_t next_session_ = 1;
};

}  // namespace hypersyn
