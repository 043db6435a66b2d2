#pragma once

// Sparse Merkle tree keyed by 256-bit digests. Each leaf sits at the
// shortest depth where its key's bit prefix is unique among present keys,
// so the root is a pure function of the key-value set. Absent subtrees
// hash to the 32-zero-byte empty constant.
//
// Node digests:
//   empty    = 32 zero bytes
//   leaf     = sha256(0x00 || enc(key) || enc(value))
//   internal = sha256(0x01 || enc(left) || enc(right))
// where enc() is the canonical length-prefixed field encoding. A leaf
// digest is independent of its depth, which lets anti-entropy skip
// subtrees whose digests match even when structure shifted.

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "hypersyn/bytes.hpp"
#include "hypersyn/crypto.hpp"
#include "hypersyn/errors.hpp"

namespace hypersyn {

Digest leaf_digest(const Digest& key, const Digest& value);
Digest internal_digest(const Digest& left, const Digest& right);

struct SmtNode;
using SmtNodePtr = std::shared_ptr<const SmtNode>;

// Persistent node: trees share structure, mutation path-copies.
struct SmtNode {
    enum class Kind { Leaf, Internal, Stub };
    Kind kind;
    Digest digest;
    // Leaf
    Digest key{};
    Digest value{};
    // Internal; nullptr child = empty subtree.
    SmtNodePtr left;
    SmtNodePtr right;

    static SmtNodePtr make_leaf(const Digest& key, const Digest& value);
    static SmtNodePtr make_internal(SmtNodePtr left, SmtNodePtr right);
    // Opaque committed subtree in a pruned replica.
    static SmtNodePtr make_stub(const Digest& digest);
};

inline Digest node_digest(const SmtNodePtr& n) {
    return n ? n->digest : kEmptyNode;
}

struct MerkleProof {
    Digest key{};
    // Terminal leaf value; nullopt when the path ends at an empty node.
    std::optional<Digest> leaf_value;
    // Bottom-up: siblings[0] is the deepest.
    std::vector<Digest> siblings;

    std::uint16_t depth() const { return std::uint16_t(siblings.size()); }

    // Wire: key (32B) || leaf_value (32B, or the 1-byte tag 0xFF when
    // empty) || count (2B big-endian) || siblings (32B each).
    Bytes encode() const;
    static MerkleProof decode(ByteView wire);

    // Digest the replay reconstructs; equals the root iff valid.
    Digest replay_root() const;
};

bool verify_proof(const Digest& root, const MerkleProof& proof);
// Proof shows `key` maps to `value` under `root`.
bool proves_presence(const Digest& root, const MerkleProof& proof, const Digest& key, const Digest& value);
// Proof shows `key` is absent under `root`: either the path ends at an
// empty node covering the key's prefix, or a different leaf occupies it.
bool proves_absence(const Digest& root, const MerkleProof& proof, const Digest& key);

class SparseMerkleTree {
public:
    SparseMerkleTree() = default;

    Digest root() const { return node_digest(root_); }
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    bool contains(const Digest& key) const { return get(key).has_value(); }
    std::optional<Digest> get(const Digest& key) const;

    void insert(const Digest& key, const Digest& value);  // KeyExistsError
    void update(const Digest& key, const Digest& value);  // KeyAbsentError
    void remove(const Digest& key);                       // KeyAbsentError
    // Insert-or-update.
    void put(const Digest& key, const Digest& value);

    MerkleProof prove(const Digest& key) const;

    // Sorted (key, value) pairs.
    std::vector<std::pair<Digest, Digest>> entries() const;

    // Canonical serialization: count, then sorted length-prefixed pairs.
    Bytes serialize() const;
    static SparseMerkleTree deserialize(ByteView wire);

    const SmtNodePtr& root_node() const { return root_; }

private:
    SmtNodePtr root_;
    std::size_t size_ = 0;
};

// What a tree reports about one position during anti-entropy.
struct SubtreeInfo {
    enum class Kind : std::uint8_t { Empty = 0, Leaf = 1, Internal = 2 };
    Kind kind = Kind::Empty;
    // Leaf
    Digest key{};
    Digest value{};
    // Internal: child digests.
    Digest left{};
    Digest right{};

    Digest digest() const;
};

// Answers subtree queries against a full tree. A leaf anywhere on or
// below the queried path reports as a leaf: its digest is the digest the
// tree commits at that position.
SubtreeInfo describe_subtree(const SparseMerkleTree& tree, const BitPath& path);

// Replica of a peer's tree holding real leaves only for keys in `scope`;
// everything else collapses to opaque stubs. Root always equals the last
// synchronized source root.
class PrunedSmt {
public:
    PrunedSmt() = default;
    explicit PrunedSmt(std::set<Digest> scope) : scope_(std::move(scope)) {}

    Digest root() const { return node_digest(root_); }
    const std::set<Digest>& scope() const { return scope_; }
    void add_scope(const Digest& key) { scope_.insert(key); }

    // Scoped leaf lookup; OutOfScopeError for keys outside scope.
    std::optional<Digest> get(const Digest& key) const;

    // Presence or absence proof for a scoped key. Scoped paths never
    // pass through a stub, so the proof is always constructible.
    MerkleProof prove(const Digest& key) const;

    const SmtNodePtr& root_node() const { return root_; }
    void set_root_node(SmtNodePtr n) { root_ = std::move(n); }

private:
    std::set<Digest> scope_;
    SmtNodePtr root_;
};

using SubtreeQuery = std::function<SubtreeInfo(const BitPath&)>;

struct SyncReport {
    std::vector<Digest> changed_keys;  // scoped keys whose value changed or appeared
    std::vector<Digest> removed_keys;  // scoped keys absent from the remote tree
    std::size_t queries = 0;
    std::size_t leaves_fetched = 0;
};

// Incremental anti-entropy engine. The session exposes the paths it
// still needs answered; feed each remote answer back through supply().
// Descends only divergent subtrees. Answers may arrive across message
// round trips, so this is the unit a live peer drives; sync_replica is
// the same engine pumped by a local callback.
class SyncSession {
public:
    SyncSession(const PrunedSmt& local, const Digest& remote_root);
    ~SyncSession();
    SyncSession(SyncSession&&) noexcept;
    SyncSession& operator=(SyncSession&&) noexcept;

    bool done() const;
    // Paths awaiting answers, in emission order.
    std::vector<BitPath> pending() const;
    // Feed the remote's answer for one pending path. ProtocolError on an
    // unsolicited path or an answer that misses the committed digest.
    void supply(const BitPath& path, const SubtreeInfo& info);
    // Rebuilt root node; only valid once done.
    SmtNodePtr take_root();

    const SyncReport& report() const { return report_; }
    const Digest& target() const { return target_; }

private:
    struct Slot;
    void start(Slot* s);
    void resolve(Slot* s, SmtNodePtr node);

    std::set<Digest> scope_;
    Digest target_{};
    std::unique_ptr<Slot> root_slot_;
    std::deque<Slot*> queue_;
    SyncReport report_;
};

// Anti-entropy: descend only divergent subtrees, return the scoped keys
// that differ, and rewrite the replica so its root equals remote_root.
SyncReport sync_replica(PrunedSmt& local, const Digest& remote_root, const SubtreeQuery& query);

// Divergent scoped keys only; the replica is not modified.
std::vector<Digest> diff_replica(const PrunedSmt& local, const Digest& remote_root, const SubtreeQuery& query,
                                 std::size_t* query_count = nullptr);

}  // namespace hypersyn
