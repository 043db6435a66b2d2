#include "hypersyn/smt.hpp"

#include <algorithm>

namespace hypersyn {

namespace {

// Sentinel for "local content unknown" during replica descent; cannot
// collide with the empty constant or any SHA-256 output we compare.
const Digest kUnknown = [] {
    Digest d;
    d.bytes.fill(0xff);
    return d;
}();

}  // namespace

Digest leaf_digest(const Digest& key, const Digest& value) {
    Encoder enc;
    enc.put_byte(0x00).put_digest(key).put_digest(value);
    return sha256(enc.bytes());
}

Digest internal_digest(const Digest& left, const Digest& right) {
    Encoder enc;
    enc.put_byte(0x01).put_digest(left).put_digest(right);
    return sha256(enc.bytes());
}

SmtNodePtr SmtNode::make_leaf(const Digest& key, const Digest& value) {
    auto n = std::make_shared<SmtNode>();
    n->kind = Kind::Leaf;
    n->key = key;
    n->value = value;
    n->digest = leaf_digest(key, value);
    return n;
}

SmtNodePtr SmtNode::make_internal(SmtNodePtr left, SmtNodePtr right) {
    auto n = std::make_shared<SmtNode>();
    n->kind = Kind::Internal;
    n->digest = internal_digest(node_digest(left), node_digest(right));
    n->left = std::move(left);
    n->right = std::move(right);
    return n;
}

SmtNodePtr SmtNode::make_stub(const Digest& digest) {
    auto n = std::make_shared<SmtNode>();
    n->kind = Kind::Stub;
    n->digest = digest;
    return n;
}

Bytes MerkleProof::encode() const {
    Bytes out;
    out.insert(out.end(), key.bytes.begin(), key.bytes.end());
    if (leaf_value)
        out.insert(out.end(), leaf_value->bytes.begin(), leaf_value->bytes.end());
    else
        out.push_back(0xff);
    out.push_back(std::uint8_t(siblings.size() >> 8));
    out.push_back(std::uint8_t(siblings.size() & 0xff));
    for (const auto& s : siblings) out.insert(out.end(), s.bytes.begin(), s.bytes.end());
    return out;
}

MerkleProof MerkleProof::decode(ByteView wire) {
    // Presence layout is 66 + 32c bytes, absence 35 + 32c: the residues
    // mod 32 differ, so the length picks the layout.
    bool with_value;
    std::size_t count;
    if (wire.size() >= 66 && (wire.size() - 66) % 32 == 0) {
        with_value = true;
        count = (wire.size() - 66) / 32;
    } else if (wire.size() >= 35 && (wire.size() - 35) % 32 == 0) {
        with_value = false;
        count = (wire.size() - 35) / 32;
    } else {
        throw DecodeError("bad proof length");
    }
    MerkleProof p;
    std::size_t pos = 0;
    auto take32 = [&] {
        Digest d;
        std::copy_n(wire.begin() + long(pos), 32, d.bytes.begin());
        pos += 32;
        return d;
    };
    p.key = take32();
    if (with_value) {
        p.leaf_value = take32();
    } else {
        if (wire[pos] != 0xff) throw DecodeError("bad empty-leaf tag");
        ++pos;
    }
    std::size_t declared = std::size_t(wire[pos]) << 8 | wire[pos + 1];
    pos += 2;
    if (declared != count) throw DecodeError("sibling count mismatch");
    if (count > 256) throw DecodeError("proof too deep");
    p.siblings.reserve(count);
    for (std::size_t i = 0; i < count; ++i) p.siblings.push_back(take32());
    return p;
}

Digest MerkleProof::replay_root() const {
    Digest cur = leaf_value ? leaf_digest(key, *leaf_value) : kEmptyNode;
    std::size_t d = siblings.size();
    for (std::size_t i = 0; i < d; ++i) {
        int bit = key.bit(d - 1 - i);
        cur = bit ? internal_digest(siblings[i], cur) : internal_digest(cur, siblings[i]);
    }
    return cur;
}

bool verify_proof(const Digest& root, const MerkleProof& proof) {
    if (proof.siblings.size() > 256) return false;
    return proof.replay_root() == root;
}

namespace {

bool share_prefix(const Digest& a, const Digest& b, std::size_t bits) {
    for (std::size_t i = 0; i < bits; ++i)
        if (a.bit(i) != b.bit(i)) return false;
    return true;
}

}  // namespace

bool proves_presence(const Digest& root, const MerkleProof& proof, const Digest& key, const Digest& value) {
    return proof.leaf_value && proof.key == key && *proof.leaf_value == value && verify_proof(root, proof);
}

bool proves_absence(const Digest& root, const MerkleProof& proof, const Digest& key) {
    if (!verify_proof(root, proof)) return false;
    // The proof pins a terminal at the position given by the first
    // depth() bits of proof.key; it covers `key` only on the same path.
    if (!share_prefix(proof.key, key, proof.depth())) return false;
    if (!proof.leaf_value) return true;       // empty node covers the prefix
    return proof.key != key;                  // another leaf occupies the path
}

// --- SparseMerkleTree ---

namespace {

// Chain of internals from `depth` to the first bit where the two keys
// diverge, with both leaves placed at the divergence level.
SmtNodePtr split_leaves(const SmtNodePtr& existing, SmtNodePtr added, std::size_t depth) {
    std::size_t t = depth;
    while (existing->key.bit(t) == added->key.bit(t)) ++t;
    int nb = added->key.bit(t);
    SmtNodePtr chain = nb ? SmtNode::make_internal(existing, std::move(added))
                          : SmtNode::make_internal(std::move(added), existing);
    while (t > depth) {
        --t;
        chain = existing->key.bit(t) ? SmtNode::make_internal(nullptr, std::move(chain))
                                     : SmtNode::make_internal(std::move(chain), nullptr);
    }
    return chain;
}

SmtNodePtr insert_rec(const SmtNodePtr& n, std::size_t depth, const Digest& key, const Digest& value) {
    if (!n) return SmtNode::make_leaf(key, value);
    if (n->kind == SmtNode::Kind::Leaf) {
        if (n->key == key) throw KeyExistsError("insert: key already present");
        return split_leaves(n, SmtNode::make_leaf(key, value), depth);
    }
    if (n->kind == SmtNode::Kind::Stub) throw OutOfScopeError("insert: pruned subtree");
    if (key.bit(depth))
        return SmtNode::make_internal(n->left, insert_rec(n->right, depth + 1, key, value));
    return SmtNode::make_internal(insert_rec(n->left, depth + 1, key, value), n->right);
}

SmtNodePtr update_rec(const SmtNodePtr& n, std::size_t depth, const Digest& key, const Digest& value) {
    if (!n) throw KeyAbsentError("update: key not present");
    if (n->kind == SmtNode::Kind::Leaf) {
        if (n->key != key) throw KeyAbsentError("update: key not present");
        return SmtNode::make_leaf(key, value);
    }
    if (n->kind == SmtNode::Kind::Stub) throw OutOfScopeError("update: pruned subtree");
    if (key.bit(depth))
        return SmtNode::make_internal(n->left, update_rec(n->right, depth + 1, key, value));
    return SmtNode::make_internal(update_rec(n->left, depth + 1, key, value), n->right);
}

SmtNodePtr remove_rec(const SmtNodePtr& n, std::size_t depth, const Digest& key) {
    if (!n) throw KeyAbsentError("delete: key not present");
    if (n->kind == SmtNode::Kind::Leaf) {
        if (n->key != key) throw KeyAbsentError("delete: key not present");
        return nullptr;
    }
    if (n->kind == SmtNode::Kind::Stub) throw OutOfScopeError("delete: pruned subtree");
    int b = key.bit(depth);
    SmtNodePtr nc = remove_rec(b ? n->right : n->left, depth + 1, key);
    SmtNodePtr other = b ? n->left : n->right;
    // A lone leaf rises until it regains a non-empty sibling.
    if (!nc && other && other->kind == SmtNode::Kind::Leaf) return other;
    if (nc && nc->kind == SmtNode::Kind::Leaf && !other) return nc;
    return b ? SmtNode::make_internal(std::move(other), std::move(nc))
             : SmtNode::make_internal(std::move(nc), std::move(other));
}

void entries_rec(const SmtNodePtr& n, std::vector<std::pair<Digest, Digest>>& out) {
    if (!n) return;
    if (n->kind == SmtNode::Kind::Leaf) {
        out.emplace_back(n->key, n->value);
        return;
    }
    entries_rec(n->left, out);
    entries_rec(n->right, out);
}

}  // namespace

std::optional<Digest> SparseMerkleTree::get(const Digest& key) const {
    const SmtNode* n = root_.get();
    std::size_t depth = 0;
    while (n) {
        if (n->kind == SmtNode::Kind::Leaf) {
            if (n->key == key) return n->value;
            return std::nullopt;
        }
        n = (key.bit(depth) ? n->right : n->left).get();
        ++depth;
    }
    return std::nullopt;
}

void SparseMerkleTree::insert(const Digest& key, const Digest& value) {
    root_ = insert_rec(root_, 0, key, value);
    ++size_;
}

void SparseMerkleTree::update(const Digest& key, const Digest& value) {
    root_ = update_rec(root_, 0, key, value);
}

void SparseMerkleTree::remove(const Digest& key) {
    root_ = remove_rec(root_, 0, key);
    --size_;
}

void SparseMerkleTree::put(const Digest& key, const Digest& value) {
    if (contains(key))
        update(key, value);
    else
        insert(key, value);
}

MerkleProof SparseMerkleTree::prove(const Digest& key) const {
    MerkleProof p;
    std::vector<Digest> top_down;
    const SmtNode* n = root_.get();
    std::size_t depth = 0;
    while (n && n->kind == SmtNode::Kind::Internal) {
        int b = key.bit(depth);
        top_down.push_back(node_digest(b ? n->left : n->right));
        n = (b ? n->right : n->left).get();
        ++depth;
    }
    if (n) {
        p.key = n->key;
        p.leaf_value = n->value;
    } else {
        p.key = key;
        p.leaf_value = std::nullopt;
    }
    p.siblings.assign(top_down.rbegin(), top_down.rend());
    return p;
}

std::vector<std::pair<Digest, Digest>> SparseMerkleTree::entries() const {
    std::vector<std::pair<Digest, Digest>> out;
    out.reserve(size_);
    entries_rec(root_, out);
    return out;
}

Bytes SparseMerkleTree::serialize() const {
    Encoder enc;
    enc.put_u64(size_);
    for (const auto& [k, v] : entries()) enc.put_digest(k).put_digest(v);
    return enc.take();
}

SparseMerkleTree SparseMerkleTree::deserialize(ByteView wire) {
    Decoder dec(wire);
    std::uint64_t n = dec.get_u64();
    SparseMerkleTree t;
    for (std::uint64_t i = 0; i < n; ++i) {
        Digest k = dec.get_digest();
        Digest v = dec.get_digest();
        t.insert(k, v);
    }
    if (!dec.done()) throw DecodeError("trailing bytes after tree");
    return t;
}

Digest SubtreeInfo::digest() const {
    switch (kind) {
        case Kind::Empty: return kEmptyNode;
        case Kind::Leaf: return leaf_digest(key, value);
        case Kind::Internal: return internal_digest(left, right);
    }
    return kEmptyNode;
}

SubtreeInfo describe_subtree(const SparseMerkleTree& tree, const BitPath& path) {
    const SmtNode* n = tree.root_node().get();
    std::size_t depth = 0;
    while (n && depth < path.len) {
        if (n->kind == SmtNode::Kind::Leaf) {
            // A shallow leaf covers the whole subtree on its own path.
            if (n->key.bit(depth) != path.bit(depth)) n = nullptr;
            if (n) ++depth;
            continue;
        }
        n = (path.bit(depth) ? n->right : n->left).get();
        ++depth;
    }
    SubtreeInfo info;
    if (!n) return info;
    if (n->kind == SmtNode::Kind::Leaf) {
        info.kind = SubtreeInfo::Kind::Leaf;
        info.key = n->key;
        info.value = n->value;
    } else {
        info.kind = SubtreeInfo::Kind::Internal;
        info.left = node_digest(n->left);
        info.right = node_digest(n->right);
    }
    return info;
}

// --- anti-entropy ---

namespace {

bool scope_intersects(const std::set<Digest>& scope, const BitPath& path) {
    for (const auto& k : scope)
        if (path.prefix_of(k)) return true;
    return false;
}

void scoped_leaves_under(const SmtNodePtr& n, const std::set<Digest>& scope,
                         std::vector<std::pair<Digest, Digest>>& out) {
    if (!n || n->kind == SmtNode::Kind::Stub) return;
    if (n->kind == SmtNode::Kind::Leaf) {
        if (scope.count(n->key)) out.emplace_back(n->key, n->value);
        return;
    }
    scoped_leaves_under(n->left, scope, out);
    scoped_leaves_under(n->right, scope, out);
}

// The local view of one child position: shallow leaves push down along
// their own key bits; stubs are opaque, so their children are unknown.
SmtNodePtr local_child(const SmtNodePtr& n, std::size_t depth, int bit) {
    if (!n) return nullptr;
    switch (n->kind) {
        case SmtNode::Kind::Leaf: return n->key.bit(depth) == bit ? n : nullptr;
        case SmtNode::Kind::Internal: return bit ? n->right : n->left;
        case SmtNode::Kind::Stub: return SmtNode::make_stub(kUnknown);
    }
    return nullptr;
}

// A stub placed before its position entered the scope hides leaves the
// replica now needs; such subtrees must be expanded even when digests
// already match.
bool hides_scoped_keys(const SmtNodePtr& n, const BitPath& path, const std::set<Digest>& scope) {
    if (!n) return false;
    switch (n->kind) {
        case SmtNode::Kind::Leaf: return false;
        case SmtNode::Kind::Stub: return n->digest != kUnknown && scope_intersects(scope, path);
        case SmtNode::Kind::Internal:
            if (!scope_intersects(scope, path)) return false;
            return hides_scoped_keys(n->left, path.child(0), scope) ||
                   hides_scoped_keys(n->right, path.child(1), scope);
    }
    return false;
}

}  // namespace

struct SyncSession::Slot {
    BitPath path;
    Digest remote_digest{};
    SmtNodePtr local;
    Slot* parent = nullptr;
    bool resolved = false;
    SmtNodePtr node;
    std::unique_ptr<Slot> left, right;
};

SyncSession::SyncSession(const PrunedSmt& local, const Digest& remote_root)
    : scope_(local.scope()), target_(remote_root) {
    root_slot_ = std::make_unique<Slot>();
    root_slot_->local = local.root_node();
    root_slot_->remote_digest = remote_root;
    start(root_slot_.get());
}

SyncSession::~SyncSession() = default;
SyncSession::SyncSession(SyncSession&&) noexcept = default;
SyncSession& SyncSession::operator=(SyncSession&&) noexcept = default;

bool SyncSession::done() const { return root_slot_->resolved; }

std::vector<BitPath> SyncSession::pending() const {
    std::vector<BitPath> out;
    out.reserve(queue_.size());
    for (const Slot* s : queue_) out.push_back(s->path);
    return out;
}

void SyncSession::resolve(Slot* s, SmtNodePtr node) {
    s->node = std::move(node);
    s->resolved = true;
    while (s->parent && s->parent->left->resolved && s->parent->right->resolved) {
        s = s->parent;
        s->node = SmtNode::make_internal(s->left->node, s->right->node);
        s->resolved = true;
    }
}

// Pre-query phase: keep converged subtrees, drop remotely-empty ones,
// queue everything else for a remote answer.
void SyncSession::start(Slot* s) {
    if (node_digest(s->local) == s->remote_digest && !hides_scoped_keys(s->local, s->path, scope_)) {
        resolve(s, s->local);
        return;
    }
    if (s->remote_digest == kEmptyNode) {
        std::vector<std::pair<Digest, Digest>> leaves;
        scoped_leaves_under(s->local, scope_, leaves);
        for (const auto& [k, v] : leaves) report_.removed_keys.push_back(k);
        resolve(s, nullptr);
        return;
    }
    queue_.push_back(s);
}

void SyncSession::supply(const BitPath& path, const SubtreeInfo& info) {
    auto it = std::find_if(queue_.begin(), queue_.end(), [&](const Slot* s) { return s->path == path; });
    if (it == queue_.end()) throw ProtocolError("unsolicited subtree answer");
    Slot* s = *it;
    queue_.erase(it);
    ++report_.queries;
    if (info.digest() != s->remote_digest) throw ProtocolError("remote subtree digest mismatch during sync");

    auto report_removed_except = [&](const Digest* keep_key, const Digest* keep_value) {
        bool had = false;
        std::vector<std::pair<Digest, Digest>> leaves;
        scoped_leaves_under(s->local, scope_, leaves);
        for (const auto& [k, v] : leaves) {
            if (keep_key && k == *keep_key) {
                had = true;
                if (v != *keep_value) report_.changed_keys.push_back(k);
            } else {
                report_.removed_keys.push_back(k);
            }
        }
        return had;
    };

    switch (info.kind) {
        case SubtreeInfo::Kind::Empty:
            report_removed_except(nullptr, nullptr);
            resolve(s, nullptr);
            return;
        case SubtreeInfo::Kind::Leaf: {
            if (scope_.count(info.key)) {
                if (!report_removed_except(&info.key, &info.value)) report_.changed_keys.push_back(info.key);
                ++report_.leaves_fetched;
                resolve(s, SmtNode::make_leaf(info.key, info.value));
                return;
            }
            report_removed_except(nullptr, nullptr);
            // A foreign leaf on a scoped path is kept verbatim: it is the
            // conflicting leaf that proves the scoped key absent, and
            // storing it stops future syncs from re-querying the path.
            if (scope_intersects(scope_, s->path)) {
                ++report_.leaves_fetched;
                resolve(s, SmtNode::make_leaf(info.key, info.value));
                return;
            }
            resolve(s, SmtNode::make_stub(s->remote_digest));
            return;
        }
        case SubtreeInfo::Kind::Internal: {
            if (!scope_intersects(scope_, s->path)) {
                report_removed_except(nullptr, nullptr);
                resolve(s, SmtNode::make_stub(s->remote_digest));
                return;
            }
            s->left = std::make_unique<Slot>();
            s->left->path = s->path.child(0);
            s->left->remote_digest = info.left;
            s->left->local = local_child(s->local, s->path.len, 0);
            s->left->parent = s;
            s->right = std::make_unique<Slot>();
            s->right->path = s->path.child(1);
            s->right->remote_digest = info.right;
            s->right->local = local_child(s->local, s->path.len, 1);
            s->right->parent = s;
            start(s->left.get());
            start(s->right.get());
            return;
        }
    }
}

SmtNodePtr SyncSession::take_root() {
    if (!done()) throw ProtocolError("sync session still has unanswered queries");
    if (node_digest(root_slot_->node) != target_) throw ProtocolError("replica root mismatch after sync");
    return root_slot_->node;
}

std::optional<Digest> PrunedSmt::get(const Digest& key) const {
    if (!scope_.count(key)) throw OutOfScopeError("key outside replica scope");
    const SmtNode* n = root_.get();
    std::size_t depth = 0;
    while (n) {
        if (n->kind == SmtNode::Kind::Leaf) {
            if (n->key == key) return n->value;
            return std::nullopt;
        }
        if (n->kind == SmtNode::Kind::Stub) return std::nullopt;
        n = (key.bit(depth) ? n->right : n->left).get();
        ++depth;
    }
    return std::nullopt;
}

MerkleProof PrunedSmt::prove(const Digest& key) const {
    if (!scope_.count(key)) throw OutOfScopeError("key outside replica scope");
    MerkleProof p;
    std::vector<Digest> top_down;
    const SmtNode* n = root_.get();
    std::size_t depth = 0;
    while (n && n->kind == SmtNode::Kind::Internal) {
        int b = key.bit(depth);
        top_down.push_back(node_digest(b ? n->left : n->right));
        n = (b ? n->right : n->left).get();
        ++depth;
    }
    if (n && n->kind == SmtNode::Kind::Stub) throw OutOfScopeError("scoped path ends at a stub");
    if (n) {
        p.key = n->key;
        p.leaf_value = n->value;
    } else {
        p.key = key;
        p.leaf_value = std::nullopt;
    }
    p.siblings.assign(top_down.rbegin(), top_down.rend());
    return p;
}

SyncReport sync_replica(PrunedSmt& local, const Digest& remote_root, const SubtreeQuery& query) {
    SyncSession session(local, remote_root);
    while (!session.done()) {
        for (const BitPath& p : session.pending()) session.supply(p, query(p));
    }
    local.set_root_node(session.take_root());
    return session.report();
}

std::vector<Digest> diff_replica(const PrunedSmt& local, const Digest& remote_root, const SubtreeQuery& query,
                                 std::size_t* query_count) {
    PrunedSmt scratch = local;
    SyncReport report = sync_replica(scratch, remote_root, query);
    if (query_count) *query_count = report.queries;
    std::vector<Digest> keys = report.changed_keys;
    keys.insert(keys.end(), report.removed_keys.begin(), report.removed_keys.end());
    std::sort(keys.begin(), keys.end());
    return keys;
}

}  // namespace hypersyn
