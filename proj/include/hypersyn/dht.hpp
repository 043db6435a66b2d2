#pragma once

// Kademlia-variant DHT for first-contact discovery. Keys are hashed
// public keys, so a node's file lives at a stable location while its
// content (signed root, counter, peer contacts) keeps changing;
// replicas accept a replacement only under a strictly larger counter,
// which makes the storage layer itself downgrade-proof.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hypersyn/bytes.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/edge.hpp"
#include "hypersyn/misbehavior.hpp"

namespace hypersyn {

struct PeerEntry {
    Digest node_id{};
    std::string address;

    bool operator==(const PeerEntry&) const = default;
};

// The published discovery record. The signature covers (root, m) with
// the node's state key, so the file carries the same endorsement the
// network gossips; anyone can check it offline.
struct HypersynFile {
    Digest node_id{};       // hash of public_key
    PublicKey public_key{};
    Digest root{};
    std::uint64_t m = 0;
    Signature sig{};
    std::vector<PeerEntry> peers;

    // node_id matches the key, the signature verifies, and the peer
    // list has no duplicate ids.
    bool valid() const;

    Bytes encode() const;
    static HypersynFile decode(ByteView wire);
};

struct DhtParams {
    std::size_t k = 20;       // bucket capacity
    std::size_t alpha = 3;    // lookup parallelism
    std::size_t replicas = 3; // stored-at set size
    std::uint64_t v = 16;     // refresh-evidence staleness bound
    std::uint64_t file_ttl = 100000;
    std::uint64_t op_timeout = 64;
};

struct RoutingEntry {
    Digest id{};
    std::string address;
    std::uint64_t last_seen = 0;
};

// XOR-metric contact table: bucket b holds ids sharing exactly b
// leading bits with the owner, capped at K entries kept in
// least-recently-seen order (full buckets evict the stalest entry).
class RoutingTable {
public:
    explicit RoutingTable(Digest self, std::size_t k = 20);

    void observe(const Digest& id, const std::string& address, std::uint64_t now);
    std::vector<RoutingEntry> closest(const Digest& target, std::size_t n) const;
    const std::vector<RoutingEntry>& bucket(std::size_t prefix_len) const;
    std::size_t size() const;
    const Digest& self() const { return self_; }

private:
    Digest self_{};
    std::size_t k_;
    std::vector<std::vector<RoutingEntry>> buckets_;
};

// a XOR b, compared lexicographically; the usual Kademlia order.
bool xor_closer(const Digest& a, const Digest& b, const Digest& target);
std::size_t shared_prefix_bits(const Digest& a, const Digest& b);

// --- messages ---

struct DhtFindNode {
    std::uint64_t op = 0;
    Digest target{};
};
struct DhtNodes {
    std::uint64_t op = 0;
    std::vector<PeerEntry> entries;
};
struct DhtGet {
    std::uint64_t op = 0;
    Digest target{};
};
struct DhtFound {
    std::uint64_t op = 0;
    bool found = false;
    HypersynFile file;
    std::vector<PeerEntry> closer;
};
struct DhtStore {
    std::uint64_t op = 0;
    HypersynFile file;
};
enum class StoreStatus : std::uint8_t { Stored = 0, Stale = 1, Invalid = 2 };
struct DhtStoreAck {
    std::uint64_t op = 0;
    StoreStatus status = StoreStatus::Stored;
};
// Lifetime extension. The evidence is signed by the file owner: either
// its bare current state (owner refreshing itself) or a presence proof
// of an edge between owner and refresher no staler than v.
struct DhtRefresh {
    std::uint64_t op = 0;
    Digest target{};
    Digest refresher{};
    SignedStatement evidence;
};
struct DhtRefreshAck {
    std::uint64_t op = 0;
    bool accepted = false;
};

using DhtMessage = std::variant<DhtFindNode, DhtNodes, DhtGet, DhtFound, DhtStore, DhtStoreAck,
                                DhtRefresh, DhtRefreshAck>;

struct DhtEnvelope {
    Digest from{};
    std::string from_addr;
    Digest to{};
    DhtMessage msg;
};

struct DhtResult {
    std::uint64_t op = 0;
    std::string kind;
    bool ok = false;
    std::optional<HypersynFile> file;   // lookup
    std::vector<Digest> stored_at;      // publish / refresh
    std::size_t queries = 0;            // routing probes this op sent
    std::string detail;
};

struct DhtStats {
    std::uint64_t stores_accepted = 0;
    std::uint64_t stores_stale = 0;
    std::uint64_t stores_invalid = 0;
    std::uint64_t refreshes_accepted = 0;
    std::uint64_t refreshes_rejected = 0;
    std::uint64_t files_expired = 0;
    std::uint64_t lookups_ok = 0;
    std::uint64_t lookups_failed = 0;
    std::uint64_t queries_sent = 0;
    std::uint64_t messages_sent = 0;
    std::uint64_t messages_received = 0;
};

namespace detail {

struct DhtOp {
    enum class Kind { Lookup, Publish, Refresh } kind = Kind::Lookup;
    Digest target{};
    HypersynFile file;        // publish payload
    SignedStatement evidence; // refresh payload
    std::uint64_t started = 0;
    std::set<Digest> queried;
    std::set<Digest> inflight;
    std::vector<PeerEntry> shortlist;  // distance-sorted candidates
    std::optional<HypersynFile> best;
    std::size_t queries = 0;
    bool storing = false;  // publish/refresh switched to the write phase
    std::set<Digest> acks_pending;
    std::vector<Digest> stored_at;
};

}  // namespace detail

// One DHT participant: a single-writer state machine driven by
// handle()/on_tick(), emitting messages through an outbox exactly like
// the credit node. Identity is independent of the credit layer, though
// the simulator runs one participant per node under the same id.
class DhtParticipant {
public:
    DhtParticipant(Digest id, std::string address, DhtParams params = {});

    const Digest& id() const { return id_; }
    const std::string& address() const { return address_; }
    const DhtParams& params() const { return params_; }
    const RoutingTable& routing() const { return routing_; }

    // Bootstrap knowledge; position in buckets as if seen at tick 0.
    void seed_routing(const Digest& id, const std::string& address);

    std::vector<DhtEnvelope> drain_outbox();
    bool outbox_empty() const { return outbox_.empty(); }
    void handle(const DhtEnvelope& env);
    void on_tick(std::uint64_t now);

    // --- local replica surface ---
    const HypersynFile* stored(const Digest& target) const;
    std::size_t stored_count() const { return storage_.size(); }
    StoreStatus store_local(const HypersynFile& file);
    bool refresh_local(const Digest& target, const Digest& refresher,
                       const SignedStatement& evidence);

    // --- network ops (iterative, alpha-parallel) ---
    std::uint64_t lookup(const Digest& target);
    std::uint64_t publish(HypersynFile file);
    std::uint64_t refresh(const Digest& target, SignedStatement evidence);

    const std::vector<DhtResult>& results() const { return results_; }
    const DhtStats& stats() const { return stats_; }
    bool idle() const { return ops_.empty(); }

    // Equivocation evidence collected from conflicting valid stores:
    // two signed roots at one counter prove the owner double-signed.
    std::vector<MisbehaviorProof> drain_proofs();

private:
    struct StoredFile {
        HypersynFile file;
        std::uint64_t expires_at = 0;
    };
    using DhtOp = detail::DhtOp;

    void send(const Digest& to, DhtMessage msg);
    std::uint64_t fresh_op();
    void merge_candidates(DhtOp& op, const std::vector<PeerEntry>& entries);
    void advance(std::uint64_t op_id);
    void finish(std::uint64_t op_id);
    std::vector<PeerEntry> closest_entries(const Digest& target) const;

    Digest id_{};
    std::string address_;
    DhtParams params_;
    RoutingTable routing_;
    std::uint64_t now_ = 0;
    std::map<Digest, StoredFile> storage_;
    std::map<std::uint64_t, DhtOp> ops_;
    std::deque<DhtEnvelope> outbox_;
    std::vector<DhtResult> results_;
    std::vector<MisbehaviorProof> proofs_;
    DhtStats stats_;
    std::uint64_t next_op_ = 1;
};

// Live check of one advertised peer: ask it (through `live_query`) for
// its signed state plus a presence proof of the edge it shares with the
// file's owner. Unreachable or unverifiable peers fail closed.
using LiveQuery =
    std::function<std::optional<SignedStatement>(const Digest& peer, const Digest& edge_k)>;
bool validate_peer_entry(const HypersynFile& file, const PeerEntry& entry, const LiveQuery& live_query);

}  // namespace hypersyn
