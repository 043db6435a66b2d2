#include "hypersyn/node.hpp"

#include <algorithm>
#include <cmath>

#include "hypersyn/errors.hpp"

namespace hypersyn {

namespace {

// Larger counter on at least one side, smaller on none.
bool edge_newer(const EdgeState& a, const EdgeState& b) {
    return a.m_lo >= b.m_lo && a.m_hi >= b.m_hi && (a.m_lo > b.m_lo || a.m_hi > b.m_hi);
}

std::optional<MerkleProof> find_proof(const std::vector<ProofEntry>& proofs, const Digest& key) {
    for (const auto& e : proofs) {
        if (e.key != key) continue;
        try {
            return MerkleProof::decode(e.proof);
        } catch (const DecodeError&) {
            return std::nullopt;
        }
    }
    return std::nullopt;
}

std::optional<SignedEdgeRecord> record_from_party(const PartyRecord& pr, const Digest& key) {
    auto proof = find_proof(pr.proofs, key);
    if (!proof) return std::nullopt;
    SignedEdgeRecord rec;
    rec.root = pr.root;
    rec.m = pr.m_next;
    rec.sig = pr.sig;
    rec.proof = std::move(*proof);
    return rec;
}

}  // namespace

Node::Node(Keypair keys, ProtocolParams params)
    : keys_(std::move(keys)), addr_(address_of(keys_.pub)), params_(params) {
    own_sig_ = keys_.sign(state_digest(tree_.root(), m_));
    // Op ids carry the node's address prefix so ids from different
    // originators never collide at a shared participant.
    std::uint64_t prefix = 0;
    for (int i = 0; i < 6; ++i) prefix = (prefix << 8) | addr_.bytes[std::size_t(i)];
    next_op_ = prefix << 16;
}

// --- small accessors ---

const EdgeState* Node::edge_with(const Digest& peer) const {
    auto it = edges_.find(peer);
    return it == edges_.end() ? nullptr : &it->second;
}

std::vector<Digest> Node::peer_addrs() const {
    std::vector<Digest> out;
    out.reserve(edges_.size());
    for (const auto& [p, e] : edges_) out.push_back(p);
    return out;
}

const PrunedSmt* Node::replica_of(const Digest& peer) const {
    auto it = replicas_.find(peer);
    return it == replicas_.end() ? nullptr : &it->second;
}

const EdgeState* Node::mirror_of(const Digest& key) const {
    auto it = mirrors_.find(key);
    return it == mirrors_.end() ? nullptr : &it->second;
}

const PeerMeta* Node::meta_of(const Digest& peer) const {
    auto it = meta_.find(peer);
    return it == meta_.end() ? nullptr : &it->second;
}

StateAnnounce Node::make_announce() const {
    return StateAnnounce{tree_.root(), m_, own_sig_};
}

// --- plumbing ---

void Node::send(const Digest& to, Message msg) {
    outbox_.push_back(Envelope{addr_, to, std::move(msg)});
    ++stats_.messages_sent;
}

std::vector<Envelope> Node::drain_outbox() {
    std::vector<Envelope> out;
    out.swap(outbox_);
    return out;
}

std::uint64_t Node::fresh_op() {
    return next_op_++;
}

std::uint64_t Node::alloc_counter() {
    last_alloc_ = std::max(last_alloc_, m_) + 1;
    return last_alloc_;
}

SignedEdgeRecord Node::own_record(const Digest& key, const SparseMerkleTree& tree, std::uint64_t m) const {
    SignedEdgeRecord rec;
    rec.root = tree.root();
    rec.m = m;
    rec.sig = keys_.sign(state_digest(rec.root, m));
    rec.proof = tree.prove(key);
    return rec;
}

bool Node::verify_record(const PublicKey& pub, const SignedEdgeRecord& rec, const Digest& key,
                         const Digest& value) const {
    return rec.valid_for(pub, key, value);
}

void Node::commit(std::uint64_t m_use, const std::vector<Digest>& changed_edges) {
    if (m_use <= m_) throw ProtocolError("commit counter not increasing");
    m_ = m_use;
    last_alloc_ = std::max(last_alloc_, m_);
    own_sig_ = keys_.sign(state_digest(tree_.root(), m_));
    for (const Digest& key : changed_edges) {
        auto pit = edge_peers_.find(key);
        if (pit == edge_peers_.end()) continue;
        edges_[pit->second].set_record(addr_, own_record(key, tree_, m_));
    }
}

void Node::record(OpResult r) {
    results_.push_back(std::move(r));
}

void Node::finish_op(std::uint64_t op) {
    pending_.erase(op);
    start_queued();
}

void Node::start_queued() {
    while (pending_.empty() && !queued_.empty()) {
        QueuedOp q = queued_.front();
        queued_.pop_front();
        begin(q);
    }
}

void Node::add_peer_scaffolding(const Digest& peer) {
    if (!replicas_.count(peer)) {
        std::set<Digest> scope;
        scope.insert(edge_key(peer, addr_));
        for (const auto& [p, e] : edges_)
            if (p != peer) scope.insert(edge_key(peer, p));
        replicas_.emplace(peer, PrunedSmt(std::move(scope)));
    }
    for (auto& [p, rep] : replicas_)
        if (p != peer) rep.add_scope(edge_key(p, peer));
}

void Node::gossip_edge(const Digest& peer_of_edge, const std::vector<Digest>& extra_targets) {
    auto it = edges_.find(peer_of_edge);
    if (it == edges_.end()) return;
    const EdgeState& e = it->second;
    Digest key = e.key();
    std::uint64_t top = std::max(e.m_lo, e.m_hi);
    auto& sent = last_gossip_[key];
    LeafEntry entry;
    entry.key = key;
    entry.value = edge_hash(e);
    entry.payload = e.encode_bundle();
    std::set<Digest> targets;
    if (sent < top) {
        // Every peer of this node is adjacent to an endpoint (namely this
        // node), so an own-edge update fans out to the whole peer set.
        for (const auto& [p, other] : edges_) targets.insert(p);
    }
    for (const Digest& p : extra_targets) targets.insert(p);
    if (targets.empty()) return;
    sent = std::max(sent, top);
    for (const Digest& t : targets) send(t, LeafTransfer{0, {entry}});
}

// Announce the current signed root to every peer, then gossip the
// edges changed by the last commit. Called after the op-specific
// message so per-link ordering keeps commits ahead of their fallout.
void Node::publish(const std::vector<Digest>& changed_edges) {
    StateAnnounce ann = make_announce();
    for (const auto& [p, e] : edges_) send(p, ann);
    for (const Digest& key : changed_edges) {
        auto pit = edge_peers_.find(key);
        if (pit != edge_peers_.end()) gossip_edge(pit->second);
    }
}

// --- peer knowledge ---

void Node::learn_peer(const Digest& peer, const PublicKey& pub) {
    if (address_of(pub) != peer) throw ConfigError("address does not match key");
    auto& meta = meta_[peer];
    meta.pub = pub;
    meta.have_pub = true;
}

void Node::observe_state(const Digest& peer, const Digest& root, std::uint64_t m, const Signature& sig) {
    process_signed_state(peer, root, m, sig);
}

void Node::process_signed_state(const Digest& peer, const Digest& root, std::uint64_t m,
                                const Signature& sig) {
    auto it = meta_.find(peer);
    if (it == meta_.end() || !it->second.have_pub) return;
    PeerMeta& meta = it->second;
    if (!verify_signature(meta.pub, state_digest(root, m), sig)) return;
    if (meta.have_state && m == meta.m && root != meta.root) {
        SignedStatement s1{meta.pub, meta.root, meta.m, meta.sig, {}, {}};
        SignedStatement s2{meta.pub, root, m, sig, {}, {}};
        MisbehaviorProof proof = make_equivocation(std::move(s1), std::move(s2));
        ++stats_.proofs_emitted;
        punish(proof, addr_);
        broadcast_proof(proof, addr_);
        return;
    }
    if (meta.have_state && m <= meta.m) return;
    meta.root = root;
    meta.m = m;
    meta.sig = sig;
    meta.have_state = true;
    auto rit = replicas_.find(peer);
    if (rit != replicas_.end() && rit->second.root() != root && !sync_by_peer_.count(peer)) {
        auto nit = next_sync_at_.find(peer);
        if (nit == next_sync_at_.end() || now_ >= nit->second) {
            next_sync_at_[peer] = now_ + params_.sync_interval;
            start_sync(peer);
        }
    }
}

// --- sync ---

void Node::sync_with(const Digest& peer) {
    if (!sync_by_peer_.count(peer)) start_sync(peer);
}

void Node::start_sync(const Digest& peer) {
    auto mit = meta_.find(peer);
    auto rit = replicas_.find(peer);
    if (mit == meta_.end() || !mit->second.have_state || rit == replicas_.end()) return;
    std::uint64_t session = next_session_++;
    ActiveSync sync{peer,
                    SyncSession(rit->second, mit->second.root),
                    mit->second.root,
                    mit->second.m,
                    mit->second.sig,
                    now_};
    if (sync.engine.done()) {
        rit->second.set_root_node(sync.engine.take_root());
        needs_resync_.erase(edge_key(addr_, peer));
        ++stats_.syncs_completed;
        return;
    }
    std::vector<BitPath> paths = sync.engine.pending();
    stats_.sync_queries += paths.size();
    auto [it, inserted] = syncs_.emplace(session, std::move(sync));
    sync_by_peer_[peer] = session;
    send(peer, SyncRequest{session, std::move(paths)});
}

void Node::on_sync_request(const Digest& from, const SyncRequest& m) {
    SubtreeDigests digests;
    digests.session = m.session;
    LeafTransfer leaves;
    leaves.session = m.session;
    for (const BitPath& path : m.paths) {
        SubtreeInfo info = describe_subtree(tree_, path);
        if (info.kind == SubtreeInfo::Kind::Leaf) {
            LeafEntry entry;
            entry.path = path;
            entry.key = info.key;
            entry.value = info.value;
            auto pit = edge_peers_.find(info.key);
            if (pit != edge_peers_.end()) entry.payload = edges_[pit->second].encode_bundle();
            leaves.leaves.push_back(std::move(entry));
        } else {
            digests.entries.push_back(SubtreeEntry{path, info});
        }
    }
    digests.leaf_count = std::uint32_t(leaves.leaves.size());
    send(from, digests);
    if (!leaves.leaves.empty()) send(from, std::move(leaves));
}

void Node::on_subtree_digests(const Digest& from, const SubtreeDigests& m) {
    auto it = syncs_.find(m.session);
    if (it == syncs_.end() || it->second.peer != from) return;
    ActiveSync& sync = it->second;
    for (const SubtreeEntry& e : m.entries) sync.staged.emplace_back(e.path, e.info);
    sync.expect_leaves = m.leaf_count;
    sync.have_digests = true;
    advance_sync(m.session);
}

void Node::on_leaf_transfer(const Digest& from, const LeafTransfer& m) {
    if (m.session == 0) {
        for (const LeafEntry& e : m.leaves) {
            if (e.payload.empty()) continue;
            try {
                EdgeState bundle = EdgeState::decode_bundle(e.payload);
                if (edge_hash(bundle) != e.value) continue;
                store_mirror(std::move(bundle), from);
            } catch (const DecodeError&) {
            }
        }
        return;
    }
    auto it = syncs_.find(m.session);
    if (it == syncs_.end() || it->second.peer != from) return;
    for (const LeafEntry& e : m.leaves) it->second.staged_leaves.push_back(e);
    advance_sync(m.session);
}

void Node::advance_sync(std::uint64_t session) {
    auto it = syncs_.find(session);
    if (it == syncs_.end()) return;
    ActiveSync& sync = it->second;
    if (!sync.have_digests || sync.staged_leaves.size() < sync.expect_leaves) return;
    std::vector<EdgeState> bundles;
    try {
        for (const auto& [path, info] : sync.staged) sync.engine.supply(path, info);
        for (const LeafEntry& e : sync.staged_leaves) {
            SubtreeInfo info;
            info.kind = SubtreeInfo::Kind::Leaf;
            info.key = e.key;
            info.value = e.value;
            sync.engine.supply(e.path, info);
            if (!e.payload.empty()) {
                EdgeState bundle = EdgeState::decode_bundle(e.payload);
                if (edge_hash(bundle) != e.value) throw ProtocolError("leaf payload does not hash to leaf value");
                bundles.push_back(std::move(bundle));
            }
        }
    } catch (const Error&) {
        fail_sync(session, "inconsistent sync answers");
        return;
    } catch (const DecodeError&) {
        fail_sync(session, "malformed sync payload");
        return;
    }
    const Digest source = sync.peer;
    sync.staged.clear();
    sync.staged_leaves.clear();
    sync.have_digests = false;
    sync.expect_leaves = 0;
    for (EdgeState& b : bundles) store_mirror(std::move(b), source);
    auto again = syncs_.find(session);
    if (again == syncs_.end()) return;  // store_mirror may cascade into punishment
    if (again->second.engine.done()) {
        finish_sync(session);
    } else {
        std::vector<BitPath> paths = again->second.engine.pending();
        stats_.sync_queries += paths.size();
        send(again->second.peer, SyncRequest{session, std::move(paths)});
    }
}

void Node::finish_sync(std::uint64_t session) {
    auto it = syncs_.find(session);
    if (it == syncs_.end()) return;
    ActiveSync sync = std::move(it->second);
    syncs_.erase(it);
    sync_by_peer_.erase(sync.peer);
    auto rit = replicas_.find(sync.peer);
    if (rit == replicas_.end()) return;
    rit->second.set_root_node(sync.engine.take_root());
    const SyncReport& report = sync.engine.report();
    ++stats_.syncs_completed;
    stats_.leaves_fetched += report.leaves_fetched;
    needs_resync_.erase(edge_key(addr_, sync.peer));
    check_deletion(sync.peer, sync, report.removed_keys);
    // Payments waiting on this peer's replica resume here.
    std::vector<std::uint64_t> waiting;
    for (auto& [op, p] : pending_) {
        auto* pay = std::get_if<PendingPay>(&p.state);
        if (pay && pay->phase == PendingPay::Phase::Sync && pay->receiver == sync.peer) waiting.push_back(op);
    }
    for (std::uint64_t op : waiting) resume_pay(op);
}

void Node::fail_sync(std::uint64_t session, const char*) {
    auto it = syncs_.find(session);
    if (it == syncs_.end()) return;
    Digest peer = it->second.peer;
    syncs_.erase(it);
    sync_by_peer_.erase(peer);
    ++stats_.syncs_failed;
}

void Node::check_deletion(const Digest& peer, const ActiveSync& sync, const std::vector<Digest>& removed) {
    auto mit = meta_.find(peer);
    if (mit == meta_.end() || !mit->second.have_pub) return;
    const PublicKey& pub = mit->second.pub;
    for (const Digest& key : removed) {
        const EdgeState* held = nullptr;
        if (key == edge_key(addr_, peer)) {
            auto eit = edges_.find(peer);
            if (eit != edges_.end()) held = &eit->second;
        } else {
            auto mirror = mirrors_.find(key);
            if (mirror != mirrors_.end()) held = &mirror->second;
        }
        if (!held) continue;
        const auto& rec = held->record_of(peer);
        if (!rec || !verify_record(pub, *rec, key, edge_hash(*held))) continue;
        if (sync.target_m - rec->m >= params_.v) continue;  // aged out honestly
        SignedStatement presence{pub, rec->root, rec->m, rec->sig, rec->proof.encode(), held->encode_core()};
        MerkleProof absent;
        try {
            absent = replicas_.at(peer).prove(key);
        } catch (const Error&) {
            continue;
        }
        SignedStatement absence{pub, sync.target_root, sync.target_m, sync.target_sig, absent.encode(), {}};
        MisbehaviorProof proof =
            make_malicious_deletion(key, std::move(presence), std::move(absence));
        if (!proof.valid(params_.v)) continue;
        ++stats_.proofs_emitted;
        punish(proof, addr_);
        broadcast_proof(proof, addr_);
        return;  // punishment dropped state; stop scanning
    }
}

// --- mirrors, adoption, gossip relay ---

void Node::store_mirror(EdgeState incoming, const Digest& source) {
    const Digest key = incoming.key();
    const PublicKey* pub_lo = nullptr;
    const PublicKey* pub_hi = nullptr;
    auto lo_meta = meta_.find(incoming.p_lo);
    auto hi_meta = meta_.find(incoming.p_hi);
    if (incoming.p_lo == addr_) pub_lo = &keys_.pub;
    else if (lo_meta != meta_.end() && lo_meta->second.have_pub) pub_lo = &lo_meta->second.pub;
    if (incoming.p_hi == addr_) pub_hi = &keys_.pub;
    else if (hi_meta != meta_.end() && hi_meta->second.have_pub) pub_hi = &hi_meta->second.pub;

    const Digest h = edge_hash(incoming);
    bool lo_ok = pub_lo && incoming.sig_lo && verify_record(*pub_lo, *incoming.sig_lo, key, h);
    bool hi_ok = pub_hi && incoming.sig_hi && verify_record(*pub_hi, *incoming.sig_hi, key, h);
    if (!lo_ok) incoming.sig_lo.reset();
    if (!hi_ok) incoming.sig_hi.reset();
    if (!lo_ok && !hi_ok) return;  // nothing verifiable to keep

    if (incoming.is_side(addr_)) {
        maybe_adopt(std::move(incoming), lo_ok, hi_ok);
        return;
    }

    auto it = mirrors_.find(key);
    if (it != mirrors_.end()) {
        EdgeState& old = it->second;
        if (old.m_lo == incoming.m_lo && old.m_hi == incoming.m_hi) {
            if (edge_hash(old) != h) {
                // Same embedded counters, different content. Provable
                // when the two versions carry records from different sides.
                const Digest old_h = edge_hash(old);
                auto old_lo = old.sig_lo && pub_lo && verify_record(*pub_lo, *old.sig_lo, key, old_h);
                auto old_hi = old.sig_hi && pub_hi && verify_record(*pub_hi, *old.sig_hi, key, old_h);
                std::optional<MisbehaviorProof> proof;
                if (old_lo && hi_ok) {
                    SignedStatement s1{*pub_lo, old.sig_lo->root, old.sig_lo->m, old.sig_lo->sig,
                                       old.sig_lo->proof.encode(), old.encode_core()};
                    SignedStatement s2{*pub_hi, incoming.sig_hi->root, incoming.sig_hi->m,
                                       incoming.sig_hi->sig, incoming.sig_hi->proof.encode(),
                                       incoming.encode_core()};
                    proof = make_inconsistent_edge(key, std::move(s1), std::move(s2));
                } else if (old_hi && lo_ok) {
                    SignedStatement s1{*pub_hi, old.sig_hi->root, old.sig_hi->m, old.sig_hi->sig,
                                       old.sig_hi->proof.encode(), old.encode_core()};
                    SignedStatement s2{*pub_lo, incoming.sig_lo->root, incoming.sig_lo->m,
                                       incoming.sig_lo->sig, incoming.sig_lo->proof.encode(),
                                       incoming.encode_core()};
                    proof = make_inconsistent_edge(key, std::move(s1), std::move(s2));
                }
                if (proof && proof->valid(params_.v)) {
                    ++stats_.proofs_emitted;
                    punish(*proof, addr_);
                    broadcast_proof(*proof, addr_);
                }
                return;
            }
            // Same version; merge any record we were missing.
            if (lo_ok && !old.sig_lo) old.sig_lo = incoming.sig_lo;
            if (hi_ok && !old.sig_hi) old.sig_hi = incoming.sig_hi;
            return;
        }
        if (!edge_newer(incoming, old)) return;
    }
    mirrors_[key] = incoming;
    // Implicit state observations: a valid record proves the signer
    // reached that counter.
    relay_gossip(incoming, source);
}

void Node::relay_gossip(const EdgeState& e, const Digest& source) {
    const Digest key = e.key();
    std::uint64_t top = std::max(e.m_lo, e.m_hi);
    auto& sent = last_gossip_[key];
    if (sent >= top) return;
    sent = top;
    LeafEntry entry;
    entry.key = key;
    entry.value = edge_hash(e);
    entry.payload = e.encode_bundle();
    for (const auto& [p, own] : edges_) {
        if (p == source || p == e.p_lo || p == e.p_hi) continue;
        if (!mirrors_.count(edge_key(p, e.p_lo)) && !mirrors_.count(edge_key(p, e.p_hi))) continue;
        send(p, LeafTransfer{0, {entry}});
    }
}

void Node::maybe_adopt(EdgeState incoming, bool lo_ok, bool hi_ok) {
    const Digest key = incoming.key();
    const Digest peer = incoming.other(addr_);
    const bool mine_ok = (incoming.p_lo == addr_) ? lo_ok : hi_ok;
    const bool theirs_ok = (incoming.p_lo == addr_) ? hi_ok : lo_ok;
    if (!mine_ok || !theirs_ok) return;  // adopt only fully endorsed states

    auto eit = edges_.find(peer);
    if (eit != edges_.end()) {
        if (!edge_newer(incoming, eit->second)) return;
        if (incoming.counter_of(addr_) <= eit->second.counter_of(addr_)) return;
    }
    // A valid record under this node's own key means this node signed the
    // state; a commit that never landed (lost message, burned candidate)
    // is safe to adopt.
    const Digest h = edge_hash(incoming);
    bool existed = eit != edges_.end();
    // A pending op on this edge is concluded by the adoption.
    std::vector<std::uint64_t> matched;
    for (auto& [op, p] : pending_) {
        if (auto* recv = std::get_if<PendingRecv>(&p.state)) {
            if (recv->payer == peer && edge_hash(recv->next) == h) matched.push_back(op);
        } else if (auto* acc = std::get_if<PendingAccept>(&p.state)) {
            if (acc->peer == peer && edge_hash(acc->next) == h) matched.push_back(op);
        }
    }
    if (!existed) add_peer_scaffolding(peer);
    edges_[peer] = incoming;
    edge_peers_[key] = peer;
    tree_.put(key, h);
    commit(alloc_counter(), {key});
    needs_resync_.erase(key);
    // A fresh replica starts empty; pull it level right away if the
    // peer's signed state is already known.
    auto pm = meta_.find(peer);
    if (pm != meta_.end() && pm->second.have_state &&
        replicas_.at(peer).root() != pm->second.root)
        sync_with(peer);
    for (std::uint64_t op : matched) {
        bool recv = std::holds_alternative<PendingRecv>(pending_[op].state);
        record(OpResult{op, recv ? "recv" : "edge-accept", true, "adopted", peer, 0, 0, 0});
        if (recv) ++stats_.payments_received;
        pending_.erase(op);
    }
    record(OpResult{0, "adopt", true, existed ? "edge state adopted" : "edge adopted", peer, 0, 0, 0});
    publish({key});
    start_queued();
}

// --- misbehavior ---

void Node::handle_misbehavior(const MisbehaviorProof& proof) {
    punish(proof, addr_);
    broadcast_proof(proof, addr_);
}

void Node::broadcast_proof(const MisbehaviorProof& proof, const Digest& skip) {
    MisbehaviorBroadcast msg{proof.encode()};
    for (const auto& [p, e] : edges_) {
        if (p == skip) continue;
        send(p, msg);
    }
}

void Node::punish(const MisbehaviorProof& proof, const Digest&) {
    Digest id = proof.digest();
    if (seen_proofs_.count(id)) return;
    if (!proof.valid(params_.v)) return;  // forged evidence punishes nobody
    seen_proofs_.insert(id);
    bool dropped = false;
    for (const Digest& bad : proof.implicated()) {
        if (bad == addr_) continue;
        banned_.insert(bad);
        auto eit = edges_.find(bad);
        if (eit != edges_.end()) {
            Digest key = eit->second.key();
            const auto& rec = eit->second.record_of(bad);
            if (rec) retained_[key] = *rec;
            tree_.remove(key);
            edges_.erase(eit);
            edge_peers_.erase(key);
            replicas_.erase(bad);
            auto sit = sync_by_peer_.find(bad);
            if (sit != sync_by_peer_.end()) {
                syncs_.erase(sit->second);
                sync_by_peer_.erase(sit);
            }
            ++stats_.edges_dropped;
            dropped = true;
        }
    }
    if (dropped) {
        // Jump the counter past the staleness bound so the unilateral
        // removal can never be framed as a malicious deletion.
        commit(std::max(alloc_counter(), m_ + params_.v), {});
        publish({});
    }
}

void Node::on_misbehavior(const Digest& from, const MisbehaviorBroadcast& m) {
    MisbehaviorProof proof;
    try {
        proof = MisbehaviorProof::decode(m.proof);
    } catch (const DecodeError&) {
        return;
    }
    Digest id = proof.digest();
    if (seen_proofs_.count(id)) return;
    if (!proof.valid(params_.v)) return;
    punish(proof, from);
    ++stats_.proofs_forwarded;
    broadcast_proof(proof, from);
}

// --- edge lifecycle ---

std::uint64_t Node::open_edge(const Digest& peer, CreditAmount r_mine, CreditAmount r_theirs) {
    if (peer == addr_) throw ConfigError("cannot open an edge with self");
    if (edges_.count(peer)) throw ConfigError("edge already open");
    if (r_mine == 0 || r_theirs == 0) throw ConfigError("reserves must be positive");
    QueuedOp q;
    q.kind = QueuedOp::Kind::Open;
    q.op = fresh_op();
    q.peer = peer;
    q.r_mine = r_mine;
    q.r_theirs = r_theirs;
    if (!pending_.empty()) {
        queued_.push_back(q);
    } else {
        begin(q);
    }
    return q.op;
}

std::uint64_t Node::open_edge_common(const Digest& peer, const Digest& common) {
    if (peer == addr_ || common == addr_ || peer == common) throw ConfigError("distinct parties required");
    if (edges_.count(peer)) throw ConfigError("edge already open");
    if (!edges_.count(common)) throw ConfigError("no edge with the common peer");
    QueuedOp q;
    q.kind = QueuedOp::Kind::OpenCommon;
    q.op = fresh_op();
    q.peer = peer;
    q.common = common;
    if (!pending_.empty()) {
        queued_.push_back(q);
    } else {
        begin(q);
    }
    return q.op;
}

// Rate implied by routing through a common peer: drop a temporary 1:1
// edge between proposer and acceptor into the triangle, push the
// optimal real-valued volume around it, and read the temporary edge's
// settled reserves. Both endpoints evaluate the same triangle, so both
// land on the same integers.
std::optional<std::pair<CreditAmount, CreditAmount>> Node::common_peer_rate(const Digest& proposer,
                                                                            const Digest& acceptor,
                                                                            const Digest& common) const {
    const EdgeState* pc = nullptr;  // proposer <-> common
    const EdgeState* ac = nullptr;  // acceptor <-> common
    auto own = [&](const Digest& a, const Digest& b) -> const EdgeState* {
        if (a == addr_) {
            auto it = edges_.find(b);
            return it == edges_.end() ? nullptr : &it->second;
        }
        if (b == addr_) {
            auto it = edges_.find(a);
            return it == edges_.end() ? nullptr : &it->second;
        }
        auto it = mirrors_.find(edge_key(a, b));
        return it == mirrors_.end() ? nullptr : &it->second;
    };
    pc = own(proposer, common);
    ac = own(acceptor, common);
    if (!pc || !ac) return std::nullopt;
    const double d = double(params_.default_reserve);
    const double r_pc = double(pc->reserve_of(proposer));
    const double r_cp = double(pc->reserve_of(common));
    const double r_ac = double(ac->reserve_of(acceptor));
    const double r_ca = double(ac->reserve_of(common));
    if (r_pc <= 0 || r_cp <= 0 || r_ac <= 0 || r_ca <= 0) return std::nullopt;

    // Forward: proposer -> acceptor -> common -> proposer.
    RealTriangle fwd{d, d, r_ac, r_ca, r_cp, r_pc};
    // Reverse: proposer -> common -> acceptor -> proposer.
    RealTriangle rev{r_pc, r_cp, r_ca, r_ac, d, d};

    auto settle = [&](CreditAmount& out_p, CreditAmount& out_a) -> bool {
        VirtualReserves vf = virtual_reserves_real(fwd);
        double df = optimal_volume(vf.a, vf.a_prime);
        if (df > 0) {
            RealTriangle t = execute_cycle_real(fwd, df);
            out_p = CreditAmount(std::llround(std::max(1.0, t.r_ij)));
            out_a = CreditAmount(std::llround(std::max(1.0, t.r_ji)));
            return true;
        }
        VirtualReserves vr = virtual_reserves_real(rev);
        double dr = optimal_volume(vr.a, vr.a_prime);
        if (dr > 0) {
            RealTriangle t = execute_cycle_real(rev, dr);
            out_p = CreditAmount(std::llround(std::max(1.0, t.r_ik)));
            out_a = CreditAmount(std::llround(std::max(1.0, t.r_ki)));
            return true;
        }
        out_p = params_.default_reserve;
        out_a = params_.default_reserve;
        return true;
    };
    CreditAmount rp = 0, ra = 0;
    if (!settle(rp, ra)) return std::nullopt;
    return std::make_pair(rp, ra);
}

void Node::on_edge_open_propose(const Digest& from, const EdgeOpenPropose& m) {
    if (address_of(m.pub) != from) return;
    auto refuse = [&] {
        send(from, EdgeOpenAccept{m.op, keys_.pub, false, 0, {}, {}, {}});
    };
    if (banned_.count(from)) return;
    learn_peer(from, m.pub);
    if (edges_.count(from) || !pending_.empty() || !auto_accept_edges) {
        refuse();
        return;
    }
    if (m.r_proposer == 0 || m.r_acceptor == 0) {
        refuse();
        return;
    }
    if (m.mode == EdgeOpenMode::CommonPeer) {
        auto rate = common_peer_rate(from, addr_, m.common);
        if (!rate || rate->first != m.r_proposer || rate->second != m.r_acceptor) {
            refuse();
            return;
        }
    }
    std::uint64_t m_mine = alloc_counter();
    EdgeState next = EdgeState::open(from, m.r_proposer, m.m_proposer, addr_, m.r_acceptor, m_mine);
    Digest key = next.key();
    SparseMerkleTree candidate = tree_;
    candidate.put(key, edge_hash(next));
    Signature sig = keys_.sign(state_digest(candidate.root(), m_mine));
    send(from, EdgeOpenAccept{m.op, keys_.pub, true, m_mine, candidate.root(), sig,
                              candidate.prove(key).encode()});
    PendingAccept acc;
    acc.peer = from;
    acc.next = std::move(next);
    acc.m_mine = m_mine;
    acc.candidate = std::move(candidate);
    pending_[m.op] = Pending{m.op, now_, std::move(acc)};
}

void Node::on_edge_open_accept(const Digest& from, const EdgeOpenAccept& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    auto* open = std::get_if<PendingOpen>(&it->second.state);
    if (!open || open->peer != from) return;
    if (address_of(m.pub) != from) return;
    if (!m.accepted) {
        record(OpResult{m.op, "edge-open", false, "refused", from, 0, 0, 0});
        finish_op(m.op);
        return;
    }
    learn_peer(from, m.pub);
    EdgeState next = EdgeState::open(addr_, open->r_mine, open->m_mine, from, open->r_theirs, m.m_next);
    Digest key = next.key();
    Digest h = edge_hash(next);
    MerkleProof proof;
    try {
        proof = MerkleProof::decode(m.proof);
    } catch (const DecodeError&) {
        record(OpResult{m.op, "edge-open", false, "bad acceptance proof", from, 0, 0, 0});
        finish_op(m.op);
        return;
    }
    SignedEdgeRecord rec{m.root, m.m_next, m.sig, std::move(proof)};
    if (!verify_record(m.pub, rec, key, h)) {
        record(OpResult{m.op, "edge-open", false, "invalid acceptance", from, 0, 0, 0});
        finish_op(m.op);
        return;
    }
    next.set_record(from, std::move(rec));
    add_peer_scaffolding(from);
    edges_[from] = std::move(next);
    edge_peers_[key] = from;
    tree_.put(key, h);
    commit(open->m_mine, {key});
    // The gossiped bundle carrying both records is the acceptor's commit signal.
    gossip_edge(from, {from});
    publish({key});
    record(OpResult{m.op, "edge-open", true, "", from, 0, 0, 0});
    finish_op(m.op);
}

std::vector<Digest> Node::prune_stale(std::uint64_t now) {
    std::vector<Digest> pruned;
    std::vector<Digest> keys;
    for (const auto& [p, e] : edges_) {
        auto mit = meta_.find(p);
        if (mit == meta_.end() || !mit->second.have_state) continue;
        if (mit->second.m <= e.counter_of(p)) continue;
        if (mit->second.m - e.counter_of(p) <= params_.v) continue;
        if (now - mit->second.last_seen <= params_.unreachable_after) continue;
        pruned.push_back(p);
        keys.push_back(e.key());
    }
    for (std::size_t i = 0; i < pruned.size(); ++i) {
        const Digest& p = pruned[i];
        const Digest& key = keys[i];
        const auto& rec = edges_[p].record_of(p);
        if (rec) retained_[key] = *rec;  // the peer's own endorsement survives the edge
        tree_.remove(key);
        edges_.erase(p);
        edge_peers_.erase(key);
        replicas_.erase(p);
        needs_resync_.erase(key);
        ++stats_.edges_pruned;
    }
    if (!pruned.empty()) {
        // Deleting at a counter at least v past the last endorsement
        // keeps the gap provably stale for any observer.
        commit(std::max(alloc_counter(), m_ + params_.v), {});
        publish({});
    }
    return pruned;
}

// --- payments ---

std::uint64_t Node::pay(const Digest& receiver, CreditAmount price, bool with_arbitrage) {
    if (receiver == addr_) throw ConfigError("cannot pay self");
    if (!edges_.count(receiver)) throw ConfigError("no edge with receiver");
    std::uint64_t op = fresh_op();
    if (price == 0) {
        record(OpResult{op, "pay", true, "no-op", receiver, 0, 0, 0});
        return op;
    }
    QueuedOp q;
    q.kind = QueuedOp::Kind::Pay;
    q.op = op;
    q.peer = receiver;
    q.price = price;
    q.want_arb = with_arbitrage;
    if (!pending_.empty()) {
        queued_.push_back(q);
    } else {
        begin(q);
    }
    return op;
}

std::uint64_t Node::request_arbitrage(const Digest& counterparty) {
    if (!edges_.count(counterparty)) throw ConfigError("no edge with counterparty");
    QueuedOp q;
    q.kind = QueuedOp::Kind::Arb;
    q.op = fresh_op();
    q.peer = counterparty;
    if (!pending_.empty()) {
        queued_.push_back(q);
    } else {
        begin(q);
    }
    return q.op;
}

void Node::begin(QueuedOp q) {
    switch (q.kind) {
    case QueuedOp::Kind::Pay: {
        if (!edges_.count(q.peer)) {
            record(OpResult{q.op, "pay", false, "edge gone", q.peer, q.price, 0, 0});
            return;
        }
        PendingPay pay;
        pay.receiver = q.peer;
        pay.price = q.price;
        pay.want_arb = q.want_arb;
        pay.arb_rounds_left = q.want_arb ? params_.arbitrage_rounds : 0;
        pending_[q.op] = Pending{q.op, now_, std::move(pay)};
        auto mit = meta_.find(q.peer);
        bool divergent = needs_resync_.count(edge_key(addr_, q.peer)) ||
                         (mit != meta_.end() && mit->second.have_state && replicas_.count(q.peer) &&
                          replicas_.at(q.peer).root() != mit->second.root);
        if (divergent) {
            std::get<PendingPay>(pending_[q.op].state).phase = PendingPay::Phase::Sync;
            sync_with(q.peer);
            if (!sync_by_peer_.count(q.peer)) resume_pay(q.op);  // sync finished inline
        } else {
            resume_pay(q.op);
        }
        break;
    }
    case QueuedOp::Kind::Arb: {
        if (!edges_.count(q.peer)) {
            record(OpResult{q.op, "arbitrage", false, "edge gone", q.peer, 0, 0, 0});
            return;
        }
        PendingArbReq req;
        req.counterparty = q.peer;
        pending_[q.op] = Pending{q.op, now_, std::move(req)};
        send(q.peer, ArbitrageRequest{q.op});
        break;
    }
    case QueuedOp::Kind::Open: {
        PendingOpen open;
        open.peer = q.peer;
        open.r_mine = q.r_mine;
        open.r_theirs = q.r_theirs;
        open.mode = EdgeOpenMode::Negotiated;
        open.m_mine = alloc_counter();
        pending_[q.op] = Pending{q.op, now_, open};
        send(q.peer, EdgeOpenPropose{q.op, keys_.pub, open.m_mine, open.r_mine, open.r_theirs,
                                     EdgeOpenMode::Negotiated, {}});
        break;
    }
    case QueuedOp::Kind::OpenCommon: {
        auto rate = common_peer_rate(addr_, q.peer, q.common);
        if (!rate) {
            record(OpResult{q.op, "edge-open", false, "no rate via common peer", q.peer, 0, 0, 0});
            return;
        }
        PendingOpen open;
        open.peer = q.peer;
        open.r_mine = rate->first;
        open.r_theirs = rate->second;
        open.mode = EdgeOpenMode::CommonPeer;
        open.common = q.common;
        open.m_mine = alloc_counter();
        pending_[q.op] = Pending{q.op, now_, open};
        send(q.peer, EdgeOpenPropose{q.op, keys_.pub, open.m_mine, open.r_mine, open.r_theirs,
                                     EdgeOpenMode::CommonPeer, q.common});
        break;
    }
    }
}

void Node::resume_pay(std::uint64_t op) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* pay = std::get_if<PendingPay>(&it->second.state);
    if (!pay) return;
    if (pay->arb_rounds_left > 0) {
        pay->arb_rounds_left -= 1;
        pay->phase = PendingPay::Phase::Arb;
        it->second.started = now_;
        std::uint64_t arb_op = fresh_op();
        pay->arb_op = arb_op;
        PendingArbReq req;
        req.counterparty = pay->receiver;
        req.parent_pay = op;
        pending_[arb_op] = Pending{arb_op, now_, std::move(req)};
        send(pay->receiver, ArbitrageRequest{arb_op});
        return;
    }
    propose_payment(op);
}

void Node::propose_payment(std::uint64_t op) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* pay = std::get_if<PendingPay>(&it->second.state);
    if (!pay) return;
    auto eit = edges_.find(pay->receiver);
    if (eit == edges_.end()) {
        record(OpResult{op, "pay", false, "edge gone", pay->receiver, pay->price, 0, 0});
        ++stats_.payments_aborted;
        finish_op(op);
        return;
    }
    EdgeState staged = eit->second;
    staged.sig_lo.reset();
    staged.sig_hi.reset();
    Digest base = edge_hash(eit->second);
    CreditAmount delta_in = 0;
    try {
        delta_in = quote_input(staged.oriented(addr_), pay->price);
    } catch (const InsufficientDepthError&) {
        record(OpResult{op, "pay", false, "insufficient depth", pay->receiver, pay->price, 0, 0});
        ++stats_.payments_aborted;
        finish_op(op);
        return;
    }
    staged.trade(addr_, delta_in);
    std::uint64_t m_mine = alloc_counter();
    staged.set_counter(addr_, m_mine);
    pay->phase = PendingPay::Phase::Proposed;
    pay->delta_in = delta_in;
    pay->m_mine = m_mine;
    pay->staged = staged;
    it->second.started = now_;
    send(pay->receiver, PaymentPropose{op, staged.key(), pay->price, delta_in, base, m_mine});
}

void Node::on_payment_propose(const Digest& from, const PaymentPropose& m) {
    auto abort_with = [&](AbortReason r) {
        send(from, PaymentAbort{m.op, r});
    };
    auto eit = edges_.find(from);
    if (eit == edges_.end()) {
        abort_with(AbortReason::Invalid);
        return;
    }
    if (!pending_.empty() || needs_resync_.count(eit->second.key())) {
        abort_with(AbortReason::Refused);
        return;
    }
    const EdgeState& cur = eit->second;
    if (m.edge != cur.key() || m.price == 0) {
        abort_with(AbortReason::Invalid);
        return;
    }
    if (m.base_hash != edge_hash(cur)) {
        abort_with(AbortReason::Stale);
        return;
    }
    if (m.m_payer <= cur.counter_of(from)) {
        abort_with(AbortReason::Invalid);
        return;
    }
    CreditAmount expect = 0;
    try {
        expect = quote_input(cur.oriented(from), m.price);
    } catch (const InsufficientDepthError&) {
        abort_with(AbortReason::Invalid);
        return;
    }
    if (expect != m.delta_in) {
        abort_with(AbortReason::Invalid);
        return;
    }
    EdgeState next = cur;
    next.sig_lo.reset();
    next.sig_hi.reset();
    next.trade(from, m.delta_in);
    next.set_counter(from, m.m_payer);
    std::uint64_t m_mine = alloc_counter();
    next.set_counter(addr_, m_mine);
    Digest key = next.key();
    SparseMerkleTree candidate = tree_;
    candidate.put(key, edge_hash(next));
    Signature sig = keys_.sign(state_digest(candidate.root(), m_mine));
    send(from, PaymentAccept{m.op, m_mine, candidate.root(), sig,
                             {ProofEntry{key, candidate.prove(key).encode()}}});
    PendingRecv recv;
    recv.payer = from;
    recv.price = m.price;
    recv.delta_in = m.delta_in;
    recv.m_mine = m_mine;
    recv.m_payer = m.m_payer;
    recv.next = std::move(next);
    recv.candidate = std::move(candidate);
    pending_[m.op] = Pending{m.op, now_, std::move(recv)};
}

void Node::on_payment_accept(const Digest& from, const PaymentAccept& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    if (auto* pay = std::get_if<PendingPay>(&it->second.state)) {
        if (pay->receiver != from || pay->phase != PendingPay::Phase::Proposed) return;
        auto mit = meta_.find(from);
        if (mit == meta_.end() || !mit->second.have_pub) return;
        EdgeState final_edge = pay->staged;
        if (m.m_next <= final_edge.counter_of(from)) {
            send(from, PaymentAbort{m.op, AbortReason::Invalid});
            abort_pay(m.op, "stale counter in acceptance");
            return;
        }
        final_edge.set_counter(from, m.m_next);
        Digest key = final_edge.key();
        Digest h = edge_hash(final_edge);
        auto proof = find_proof(m.proofs, key);
        SignedEdgeRecord rec{m.root, m.m_next, m.sig, proof ? *proof : MerkleProof{}};
        if (!proof || !verify_record(mit->second.pub, rec, key, h)) {
            send(from, PaymentAbort{m.op, AbortReason::Invalid});
            abort_pay(m.op, "invalid acceptance");
            return;
        }
        final_edge.set_record(from, std::move(rec));
        edges_[from] = std::move(final_edge);
        tree_.put(key, h);
        commit(pay->m_mine, {key});
        send(from, PaymentCommit{m.op, pay->m_mine, tree_.root(), own_sig_,
                                 {ProofEntry{key, tree_.prove(key).encode()}}});
        publish({key});
        ++stats_.payments_ok;
        record(OpResult{m.op, "pay", true, "", from, pay->price, pay->delta_in, 0});
        finish_op(m.op);
        return;
    }
    if (auto* cp = std::get_if<PendingArbCp>(&it->second.state)) {
        if (from != cp->common) return;
        PartyRecord pr;
        pr.party = from;
        pr.m_next = m.m_next;
        pr.root = m.root;
        pr.sig = m.sig;
        pr.proofs = m.proofs;
        cp->m_c = m.m_next;
        cp->c_record = std::move(pr);
        arb_try_commit(m.op);
    }
}

void Node::abort_pay(std::uint64_t op, const char* why) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* pay = std::get_if<PendingPay>(&it->second.state);
    if (!pay) return;
    record(OpResult{op, "pay", false, why, pay->receiver, pay->price, pay->delta_in, 0});
    ++stats_.payments_aborted;
    finish_op(op);
}

void Node::on_payment_commit(const Digest& from, const PaymentCommit& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    if (auto* recv = std::get_if<PendingRecv>(&it->second.state)) {
        if (recv->payer != from) return;
        auto mit = meta_.find(from);
        if (mit == meta_.end() || !mit->second.have_pub) return;
        if (m.m_next != recv->next.counter_of(from)) return;
        Digest key = recv->next.key();
        Digest h = edge_hash(recv->next);
        auto proof = find_proof(m.proofs, key);
        if (!proof) return;
        SignedEdgeRecord rec{m.root, m.m_next, m.sig, std::move(*proof)};
        if (!verify_record(mit->second.pub, rec, key, h)) return;
        EdgeState final_edge = recv->next;
        final_edge.set_record(from, std::move(rec));
        edges_[from] = std::move(final_edge);
        tree_.put(key, h);
        std::uint64_t m_mine = recv->m_mine;
        CreditAmount price = recv->price;
        CreditAmount delta_in = recv->delta_in;
        commit(m_mine, {key});
        publish({key});
        ++stats_.payments_received;
        record(OpResult{m.op, "recv", true, "", from, price, delta_in, 0});
        finish_op(m.op);
        return;
    }
    if (auto* cp = std::get_if<PendingArbCp>(&it->second.state)) {
        if (from != cp->requester || !cp->committed) return;
        arb_finalize_counterparty(m.op, m);
        return;
    }
    if (auto* third = std::get_if<PendingArbThird>(&it->second.state)) {
        if (from != third->b) return;
        auto mit = meta_.find(from);
        if (mit == meta_.end() || !mit->second.have_pub) return;
        Digest key_bc = third->next_bc.key();
        auto rec = record_from_party(PartyRecord{from, m.m_next, m.root, m.sig, m.proofs}, key_bc);
        if (!rec || m.m_next != third->next_bc.counter_of(from)) return;
        if (!verify_record(mit->second.pub, *rec, key_bc, edge_hash(third->next_bc))) return;
        PartyRecord pr;
        pr.party = from;
        pr.m_next = m.m_next;
        pr.root = m.root;
        pr.sig = m.sig;
        pr.proofs = m.proofs;
        third->b_record = std::move(pr);
        third_try_apply(m.op);
    }
}

void Node::on_payment_abort(const Digest& from, const PaymentAbort& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    Pending& p = it->second;
    if (auto* pay = std::get_if<PendingPay>(&p.state)) {
        if (pay->receiver != from) return;
        abort_pay(m.op, abort_reason_name(m.reason));
        return;
    }
    if (auto* recv = std::get_if<PendingRecv>(&p.state)) {
        if (recv->payer != from) return;
        // The payer renounced the op before committing; the signed
        // candidate is burned and the edge left untouched.
        record(OpResult{m.op, "recv", false, abort_reason_name(m.reason), from, 0, 0, 0});
        finish_op(m.op);
        return;
    }
    if (auto* req = std::get_if<PendingArbReq>(&p.state)) {
        if (from != req->counterparty && from != req->common) return;
        arb_req_failed(m.op, m.reason, from);
        return;
    }
    if (auto* cp = std::get_if<PendingArbCp>(&p.state)) {
        if (from != cp->requester && from != cp->common) return;
        // Relay so all three parties converge.
        if (from != cp->requester) send(cp->requester, PaymentAbort{m.op, m.reason});
        if (from != cp->common && !cp->common.is_zero()) send(cp->common, PaymentAbort{m.op, m.reason});
        arb_cp_failed(m.op, abort_reason_name(m.reason));
        return;
    }
    if (auto* third = std::get_if<PendingArbThird>(&p.state)) {
        if (from != third->a && from != third->b) return;
        burn_third(m.op, abort_reason_name(m.reason));
        return;
    }
    if (std::get_if<PendingOpen>(&p.state) || std::get_if<PendingAccept>(&p.state)) {
        record(OpResult{m.op, "edge-open", false, abort_reason_name(m.reason), from, 0, 0, 0});
        finish_op(m.op);
    }
}

// --- arbitrage ---

// Plan one forward cycle through each common peer; forward insertion of
// this node's credit into the shared edge is what raises the
// requester's exchange value there. The initiating choice follows the
// global tie-break rule.
std::optional<CyclePlan> Node::plan_for_requester(const Digest& requester, Digest* common_out) {
    std::vector<std::pair<Digest, CyclePlan>> candidates;
    auto eit = edges_.find(requester);
    if (eit == edges_.end()) return std::nullopt;
    const EdgeState& e_ab = eit->second;
    for (const auto& [c, e_ac] : edges_) {
        if (c == requester) continue;
        auto mit = mirrors_.find(edge_key(requester, c));
        if (mit == mirrors_.end()) continue;
        const EdgeState& e_bc = mit->second;
        TriangleView view;
        view.node_i = addr_;
        view.node_j = requester;
        view.node_k = c;
        view.r_ij = e_ab.reserve_of(addr_);
        view.r_ji = e_ab.reserve_of(requester);
        view.r_jk = e_bc.reserve_of(requester);
        view.r_kj = e_bc.reserve_of(c);
        view.r_ki = e_ac.reserve_of(c);
        view.r_ik = e_ac.reserve_of(addr_);
        if (!view.positive()) continue;
        auto plan = best_cycle(view, addr_);
        if (!plan || plan->direction != CycleDirection::Forward) continue;
        candidates.emplace_back(c, *plan);
    }
    auto chosen = select_initiator(candidates);
    if (!chosen) return std::nullopt;
    if (common_out) *common_out = chosen->first;
    return chosen->second;
}

void Node::on_arbitrage_request(const Digest& from, const ArbitrageRequest& m) {
    if (!edges_.count(from)) return;
    auto none = [&] {
        send(from, PeerChoice{m.op, false, {}, 0, 0, 0, 0, {}, 0});
    };
    if (!pending_.empty() || needs_resync_.count(edge_key(addr_, from))) {
        none();
        return;
    }
    Digest common{};
    auto plan = plan_for_requester(from, &common);
    if (!plan) {
        ++stats_.cycles_none;
        none();
        return;
    }
    if (needs_resync_.count(edge_key(addr_, common))) {
        none();
        return;
    }
    std::uint64_t m_a = alloc_counter();
    PendingArbCp cp;
    cp.requester = from;
    cp.common = common;
    cp.plan = *plan;
    cp.m_a = m_a;
    pending_[m.op] = Pending{m.op, now_, std::move(cp)};
    send(from, PeerChoice{m.op, true, common, plan->delta_in, plan->hop_amounts[0], plan->hop_amounts[1],
                          plan->hop_amounts[2], edge_hash(edges_.at(common)), m_a});
}

void Node::arb_req_failed(std::uint64_t op, AbortReason reason, const Digest&) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* req = std::get_if<PendingArbReq>(&it->second.state);
    if (!req) return;
    std::uint64_t parent = req->parent_pay;
    Digest counterparty = req->counterparty;
    bool retry = reason == AbortReason::Stale && !req->retried;
    record(OpResult{op, "arbitrage", false, abort_reason_name(reason), counterparty, 0, req->delta_in, 0});
    pending_.erase(op);
    if (retry) {
        // Refresh the counterparty's view of the edges this side owns,
        // then ask once more.
        gossip_edge(counterparty, {counterparty});
        for (const auto& [p, e] : edges_) {
            if (p != counterparty && mirrors_.count(edge_key(counterparty, p)))
                gossip_edge(p, {counterparty});
        }
        std::uint64_t arb_op = fresh_op();
        PendingArbReq again;
        again.counterparty = counterparty;
        again.parent_pay = parent;
        again.retried = true;
        pending_[arb_op] = Pending{arb_op, now_, std::move(again)};
        if (parent) {
            auto pit = pending_.find(parent);
            if (pit != pending_.end())
                if (auto* pay = std::get_if<PendingPay>(&pit->second.state)) pay->arb_op = arb_op;
        }
        send(counterparty, ArbitrageRequest{arb_op});
        return;
    }
    if (parent) {
        resume_pay_after_arb(parent);
    } else {
        start_queued();
    }
}

void Node::resume_pay_after_arb(std::uint64_t pay_op) {
    auto it = pending_.find(pay_op);
    if (it == pending_.end()) return;
    auto* pay = std::get_if<PendingPay>(&it->second.state);
    if (!pay || pay->phase != PendingPay::Phase::Arb) return;
    propose_payment(pay_op);
}

void Node::on_peer_choice(const Digest& from, const PeerChoice& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    auto* req = std::get_if<PendingArbReq>(&it->second.state);
    if (!req || req->counterparty != from || req->proposed) return;
    if (!m.found) {
        std::uint64_t parent = req->parent_pay;
        record(OpResult{m.op, "arbitrage", false, "no cycle", from, 0, 0, 0});
        pending_.erase(m.op);
        if (parent) {
            resume_pay_after_arb(parent);
        } else {
            start_queued();
        }
        return;
    }
    auto fail = [&](AbortReason r, const char* why) {
        send(from, PaymentAbort{m.op, r});
        arb_req_failed(m.op, r, addr_);
        (void)why;
    };
    auto ab_it = edges_.find(from);
    auto bc_it = edges_.find(m.common);
    if (ab_it == edges_.end() || bc_it == edges_.end() || m.common == addr_) {
        fail(AbortReason::Invalid, "unknown parties");
        return;
    }
    const EdgeState& e_ab = ab_it->second;
    const EdgeState& e_bc = bc_it->second;
    if (needs_resync_.count(e_ab.key()) || needs_resync_.count(e_bc.key())) {
        fail(AbortReason::Refused, "edge frozen");
        return;
    }
    if (m.delta_in == 0 || m.m_next <= e_ab.counter_of(from)) {
        fail(AbortReason::Invalid, "bad choice");
        return;
    }
    // Check the two hops this side can see.
    if (quote_output(e_ab.oriented(from), m.delta_in) != m.hop1 ||
        quote_output(e_bc.oriented(addr_), m.hop1) != m.hop2 || m.hop2 >= e_bc.reserve_of(m.common)) {
        fail(AbortReason::Stale, "hops diverge");
        return;
    }
    std::uint64_t m_b = alloc_counter();
    req->proposed = true;
    req->common = m.common;
    req->delta_in = m.delta_in;
    req->hop1 = m.hop1;
    req->hop2 = m.hop2;
    req->hop3 = m.hop3;
    req->m_a = m.m_next;
    req->m_b = m_b;
    req->base_ca = m.base_ca;
    it->second.started = now_;
    CyclePropose prop{m.op,    from,   addr_,  m.common, m.delta_in,           m.hop1,
                      m.hop2,  m.hop3, edge_hash(e_ab),  edge_hash(e_bc),      m.base_ca,
                      m.m_next, m_b};
    send(m.common, prop);
    send(from, prop);
}

void Node::on_cycle_propose(const Digest& from, const CyclePropose& m) {
    // Echo back to the counterparty: it carries the requester's counter.
    if (addr_ == m.node_a) {
        auto it = pending_.find(m.op);
        if (it == pending_.end()) return;
        auto* cp = std::get_if<PendingArbCp>(&it->second.state);
        if (!cp || from != cp->requester || cp->have_b) return;
        if (m.node_b != cp->requester || m.node_c != cp->common || m.m_a != cp->m_a ||
            m.delta_in != cp->plan.delta_in || m.hop1 != cp->plan.hop_amounts[0] ||
            m.hop2 != cp->plan.hop_amounts[1] || m.hop3 != cp->plan.hop_amounts[2]) {
            send(cp->requester, PaymentAbort{m.op, AbortReason::Invalid});
            send(cp->common, PaymentAbort{m.op, AbortReason::Invalid});
            arb_cp_failed(m.op, "mismatched echo");
            return;
        }
        auto ab_it = edges_.find(cp->requester);
        if (ab_it == edges_.end() || edge_hash(ab_it->second) != m.base_ab ||
            m.m_b <= ab_it->second.counter_of(cp->requester)) {
            send(cp->requester, PaymentAbort{m.op, AbortReason::Stale});
            send(cp->common, PaymentAbort{m.op, AbortReason::Stale});
            arb_cp_failed(m.op, "stale base");
            return;
        }
        auto bc_mirror = mirrors_.find(edge_key(cp->requester, cp->common));
        if (bc_mirror == mirrors_.end() || edge_hash(bc_mirror->second) != m.base_bc) {
            send(cp->requester, PaymentAbort{m.op, AbortReason::Stale});
            send(cp->common, PaymentAbort{m.op, AbortReason::Stale});
            arb_cp_failed(m.op, "mirror diverged");
            return;
        }
        cp->m_b = m.m_b;
        cp->have_b = true;
        arb_try_commit(m.op);
        return;
    }
    if (addr_ != m.node_c) return;
    auto abort_both = [&](AbortReason r) {
        send(m.node_a, PaymentAbort{m.op, r});
        send(m.node_b, PaymentAbort{m.op, r});
    };
    if (from != m.node_b) return;
    if (pending_.count(m.op)) return;
    if (!pending_.empty()) {
        abort_both(AbortReason::Refused);
        return;
    }
    auto bc_it = edges_.find(m.node_b);
    auto ca_it = edges_.find(m.node_a);
    if (bc_it == edges_.end() || ca_it == edges_.end()) {
        abort_both(AbortReason::Invalid);
        return;
    }
    const EdgeState& e_bc = bc_it->second;
    const EdgeState& e_ca = ca_it->second;
    if (needs_resync_.count(e_bc.key()) || needs_resync_.count(e_ca.key())) {
        abort_both(AbortReason::Refused);
        return;
    }
    if (edge_hash(e_bc) != m.base_bc || edge_hash(e_ca) != m.base_ca) {
        abort_both(AbortReason::Stale);
        return;
    }
    if (m.m_b <= e_bc.counter_of(m.node_b) || m.m_a <= e_ca.counter_of(m.node_a)) {
        abort_both(AbortReason::Invalid);
        return;
    }
    // Check the two hops through this corner.
    if (quote_output(e_bc.oriented(m.node_b), m.hop1) != m.hop2 ||
        quote_output(e_ca.oriented(addr_), m.hop2) != m.hop3 || m.hop2 >= e_bc.reserve_of(addr_) ||
        m.hop3 >= e_ca.reserve_of(m.node_a)) {
        abort_both(AbortReason::Stale);
        return;
    }
    std::uint64_t m_c = alloc_counter();
    EdgeState next_bc = e_bc;
    next_bc.sig_lo.reset();
    next_bc.sig_hi.reset();
    next_bc.set_reserve(m.node_b, next_bc.reserve_of(m.node_b) + m.hop1);
    next_bc.set_reserve(addr_, next_bc.reserve_of(addr_) - m.hop2);
    next_bc.set_counter(m.node_b, m.m_b);
    next_bc.set_counter(addr_, m_c);
    EdgeState next_ca = e_ca;
    next_ca.sig_lo.reset();
    next_ca.sig_hi.reset();
    next_ca.set_reserve(addr_, next_ca.reserve_of(addr_) + m.hop2);
    next_ca.set_reserve(m.node_a, next_ca.reserve_of(m.node_a) - m.hop3);
    next_ca.set_counter(addr_, m_c);
    next_ca.set_counter(m.node_a, m.m_a);
    SparseMerkleTree candidate = tree_;
    candidate.put(next_bc.key(), edge_hash(next_bc));
    candidate.put(next_ca.key(), edge_hash(next_ca));
    Signature sig = keys_.sign(state_digest(candidate.root(), m_c));
    send(m.node_a,
         PaymentAccept{m.op, m_c, candidate.root(), sig,
                       {ProofEntry{next_bc.key(), candidate.prove(next_bc.key()).encode()},
                        ProofEntry{next_ca.key(), candidate.prove(next_ca.key()).encode()}}});
    PendingArbThird third;
    third.a = m.node_a;
    third.b = m.node_b;
    third.m_c = m_c;
    third.next_bc = std::move(next_bc);
    third.next_ca = std::move(next_ca);
    third.candidate = std::move(candidate);
    pending_[m.op] = Pending{m.op, now_, std::move(third)};
}

void Node::arb_cp_failed(std::uint64_t op, const char* why) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* cp = std::get_if<PendingArbCp>(&it->second.state);
    if (!cp) return;
    if (cp->committed) {
        // The candidate signature is in the wild; freeze both edges
        // until a sync confirms what the others committed.
        needs_resync_.insert(edge_key(addr_, cp->requester));
        needs_resync_.insert(edge_key(addr_, cp->common));
        sync_with(cp->requester);
        sync_with(cp->common);
    }
    record(OpResult{op, "cycle-assist", false, why, cp->requester, 0, cp->plan.delta_in, 0});
    finish_op(op);
}

void Node::burn_third(std::uint64_t op, const char* why) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* third = std::get_if<PendingArbThird>(&it->second.state);
    if (!third) return;
    // Signed at accept time, so both touched edges freeze until synced.
    needs_resync_.insert(edge_key(addr_, third->a));
    needs_resync_.insert(edge_key(addr_, third->b));
    sync_with(third->a);
    sync_with(third->b);
    record(OpResult{op, "cycle-assist", false, why, third->a, 0, 0, 0});
    finish_op(op);
}

void Node::arb_try_commit(std::uint64_t op) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* cp = std::get_if<PendingArbCp>(&it->second.state);
    if (!cp || !cp->have_b || !cp->c_record || cp->committed) return;
    auto fail = [&](AbortReason r, const char* why) {
        send(cp->requester, PaymentAbort{op, r});
        send(cp->common, PaymentAbort{op, r});
        arb_cp_failed(op, why);
    };
    auto ab_it = edges_.find(cp->requester);
    auto ca_it = edges_.find(cp->common);
    auto bc_mirror = mirrors_.find(edge_key(cp->requester, cp->common));
    auto c_meta = meta_.find(cp->common);
    if (ab_it == edges_.end() || ca_it == edges_.end() || bc_mirror == mirrors_.end() ||
        c_meta == meta_.end() || !c_meta->second.have_pub) {
        fail(AbortReason::Invalid, "lost context");
        return;
    }
    const auto& hops = cp->plan.hop_amounts;
    CreditAmount delta = cp->plan.delta_in;
    EdgeState next_ab = ab_it->second;
    next_ab.sig_lo.reset();
    next_ab.sig_hi.reset();
    next_ab.set_reserve(addr_, next_ab.reserve_of(addr_) + delta);
    next_ab.set_reserve(cp->requester, next_ab.reserve_of(cp->requester) - hops[0]);
    next_ab.set_counter(addr_, cp->m_a);
    next_ab.set_counter(cp->requester, cp->m_b);
    EdgeState next_ca = ca_it->second;
    next_ca.sig_lo.reset();
    next_ca.sig_hi.reset();
    next_ca.set_reserve(cp->common, next_ca.reserve_of(cp->common) + hops[1]);
    next_ca.set_reserve(addr_, next_ca.reserve_of(addr_) - hops[2]);
    next_ca.set_counter(cp->common, cp->m_c);
    next_ca.set_counter(addr_, cp->m_a);
    EdgeState next_bc = bc_mirror->second;
    next_bc.sig_lo.reset();
    next_bc.sig_hi.reset();
    next_bc.set_reserve(cp->requester, next_bc.reserve_of(cp->requester) + hops[0]);
    next_bc.set_reserve(cp->common, next_bc.reserve_of(cp->common) - hops[1]);
    next_bc.set_counter(cp->requester, cp->m_b);
    next_bc.set_counter(cp->common, cp->m_c);
    // The third party's candidate must cover exactly these two leaves.
    auto rec_bc = record_from_party(*cp->c_record, next_bc.key());
    auto rec_ca = record_from_party(*cp->c_record, next_ca.key());
    if (!rec_bc || !rec_ca ||
        !verify_record(c_meta->second.pub, *rec_bc, next_bc.key(), edge_hash(next_bc)) ||
        !verify_record(c_meta->second.pub, *rec_ca, next_ca.key(), edge_hash(next_ca))) {
        fail(AbortReason::Invalid, "third-party acceptance invalid");
        return;
    }
    SparseMerkleTree candidate = tree_;
    candidate.put(next_ab.key(), edge_hash(next_ab));
    candidate.put(next_ca.key(), edge_hash(next_ca));
    Signature sig = keys_.sign(state_digest(candidate.root(), cp->m_a));
    PartyRecord mine;
    mine.party = addr_;
    mine.m_next = cp->m_a;
    mine.root = candidate.root();
    mine.sig = sig;
    mine.proofs = {ProofEntry{next_ab.key(), candidate.prove(next_ab.key()).encode()},
                   ProofEntry{next_ca.key(), candidate.prove(next_ca.key()).encode()}};
    send(cp->requester, CycleCommit{op, {mine, *cp->c_record}});
    send(cp->common, CycleCommit{op, {mine}});
    cp->next_ab = std::move(next_ab);
    cp->next_ca = std::move(next_ca);
    cp->candidate = std::move(candidate);
    cp->committed = true;
    it->second.started = now_;
}

void Node::on_cycle_commit(const Digest& from, const CycleCommit& m) {
    auto it = pending_.find(m.op);
    if (it == pending_.end()) return;
    if (auto* req = std::get_if<PendingArbReq>(&it->second.state)) {
        if (from != req->counterparty || !req->proposed) return;
        const PartyRecord* a_rec = nullptr;
        const PartyRecord* c_rec = nullptr;
        for (const auto& r : m.records) {
            if (r.party == req->counterparty) a_rec = &r;
            if (r.party == req->common) c_rec = &r;
        }
        auto a_meta = meta_.find(req->counterparty);
        auto c_meta = meta_.find(req->common);
        auto ab_it = edges_.find(req->counterparty);
        auto bc_it = edges_.find(req->common);
        if (!a_rec || !c_rec || a_meta == meta_.end() || !a_meta->second.have_pub ||
            c_meta == meta_.end() || !c_meta->second.have_pub || ab_it == edges_.end() ||
            bc_it == edges_.end()) {
            send(req->counterparty, PaymentAbort{m.op, AbortReason::Invalid});
            arb_req_failed(m.op, AbortReason::Invalid, addr_);
            return;
        }
        if (a_rec->m_next != req->m_a || c_rec->m_next <= bc_it->second.counter_of(req->common)) {
            send(req->counterparty, PaymentAbort{m.op, AbortReason::Invalid});
            arb_req_failed(m.op, AbortReason::Invalid, addr_);
            return;
        }
        EdgeState next_ab = ab_it->second;
        next_ab.sig_lo.reset();
        next_ab.sig_hi.reset();
        next_ab.set_reserve(req->counterparty, next_ab.reserve_of(req->counterparty) + req->delta_in);
        next_ab.set_reserve(addr_, next_ab.reserve_of(addr_) - req->hop1);
        next_ab.set_counter(req->counterparty, req->m_a);
        next_ab.set_counter(addr_, req->m_b);
        EdgeState next_bc = bc_it->second;
        next_bc.sig_lo.reset();
        next_bc.sig_hi.reset();
        next_bc.set_reserve(addr_, next_bc.reserve_of(addr_) + req->hop1);
        next_bc.set_reserve(req->common, next_bc.reserve_of(req->common) - req->hop2);
        next_bc.set_counter(addr_, req->m_b);
        next_bc.set_counter(req->common, c_rec->m_next);
        auto rec_a = record_from_party(*a_rec, next_ab.key());
        auto rec_c = record_from_party(*c_rec, next_bc.key());
        if (!rec_a || !rec_c ||
            !verify_record(a_meta->second.pub, *rec_a, next_ab.key(), edge_hash(next_ab)) ||
            !verify_record(c_meta->second.pub, *rec_c, next_bc.key(), edge_hash(next_bc))) {
            send(req->counterparty, PaymentAbort{m.op, AbortReason::Invalid});
            arb_req_failed(m.op, AbortReason::Invalid, addr_);
            return;
        }
        next_ab.set_record(req->counterparty, *rec_a);
        next_bc.set_record(req->common, *rec_c);
        Digest key_ab = next_ab.key();
        Digest key_bc = next_bc.key();
        tree_.put(key_ab, edge_hash(next_ab));
        tree_.put(key_bc, edge_hash(next_bc));
        edges_[req->counterparty] = std::move(next_ab);
        edges_[req->common] = std::move(next_bc);
        std::uint64_t m_b = req->m_b;
        std::uint64_t parent = req->parent_pay;
        Digest counterparty = req->counterparty;
        Digest common = req->common;
        CreditAmount delta = req->delta_in;
        commit(m_b, {key_ab, key_bc});
        PaymentCommit done{m.op, m_b, tree_.root(), own_sig_,
                           {ProofEntry{key_ab, tree_.prove(key_ab).encode()},
                            ProofEntry{key_bc, tree_.prove(key_bc).encode()}}};
        send(counterparty, done);
        send(common, done);
        publish({key_ab, key_bc});
        record(OpResult{m.op, "arbitrage", true, "", counterparty, 0, delta, 0});
        pending_.erase(m.op);
        if (parent) {
            resume_pay_after_arb(parent);
        } else {
            start_queued();
        }
        return;
    }
    if (auto* third = std::get_if<PendingArbThird>(&it->second.state)) {
        if (from != third->a) return;
        auto a_meta = meta_.find(third->a);
        if (a_meta == meta_.end() || !a_meta->second.have_pub) return;
        const PartyRecord* a_rec = nullptr;
        for (const auto& r : m.records)
            if (r.party == third->a) a_rec = &r;
        if (!a_rec || a_rec->m_next != third->next_ca.counter_of(third->a)) return;
        auto rec = record_from_party(*a_rec, third->next_ca.key());
        if (!rec || !verify_record(a_meta->second.pub, *rec, third->next_ca.key(), edge_hash(third->next_ca)))
            return;
        third->a_record = *a_rec;
        third_try_apply(m.op);
    }
}

void Node::third_try_apply(std::uint64_t op) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* third = std::get_if<PendingArbThird>(&it->second.state);
    if (!third || !third->a_record || !third->b_record) return;
    EdgeState next_bc = third->next_bc;
    EdgeState next_ca = third->next_ca;
    auto rec_b = record_from_party(*third->b_record, next_bc.key());
    auto rec_a = record_from_party(*third->a_record, next_ca.key());
    if (rec_b) next_bc.set_record(third->b, *rec_b);
    if (rec_a) next_ca.set_record(third->a, *rec_a);
    Digest key_bc = next_bc.key();
    Digest key_ca = next_ca.key();
    Digest b = third->b;
    Digest a = third->a;
    std::uint64_t m_c = third->m_c;
    tree_.put(key_bc, edge_hash(next_bc));
    tree_.put(key_ca, edge_hash(next_ca));
    edges_[b] = std::move(next_bc);
    edges_[a] = std::move(next_ca);
    commit(m_c, {key_bc, key_ca});
    publish({key_bc, key_ca});
    record(OpResult{op, "cycle-assist", true, "", a, 0, 0, 0});
    finish_op(op);
}

void Node::arb_finalize_counterparty(std::uint64_t op, const PaymentCommit& m) {
    auto it = pending_.find(op);
    if (it == pending_.end()) return;
    auto* cp = std::get_if<PendingArbCp>(&it->second.state);
    if (!cp) return;
    auto b_meta = meta_.find(cp->requester);
    if (b_meta == meta_.end() || !b_meta->second.have_pub) return;
    if (m.m_next != cp->m_b) return;
    Digest key_ab = cp->next_ab.key();
    auto rec_b = record_from_party(PartyRecord{cp->requester, m.m_next, m.root, m.sig, m.proofs}, key_ab);
    if (!rec_b || !verify_record(b_meta->second.pub, *rec_b, key_ab, edge_hash(cp->next_ab))) return;
    EdgeState next_ab = cp->next_ab;
    EdgeState next_ca = cp->next_ca;
    next_ab.set_record(cp->requester, *rec_b);
    auto rec_c = record_from_party(*cp->c_record, next_ca.key());
    if (rec_c) next_ca.set_record(cp->common, *rec_c);
    Digest key_ca = next_ca.key();
    Digest requester = cp->requester;
    Digest common = cp->common;
    std::uint64_t m_a = cp->m_a;
    CreditAmount delta = cp->plan.delta_in;
    CreditAmount profit = cp->plan.hop_amounts[2] - delta;
    tree_.put(key_ab, edge_hash(next_ab));
    tree_.put(key_ca, edge_hash(next_ca));
    edges_[requester] = std::move(next_ab);
    edges_[common] = std::move(next_ca);
    commit(m_a, {key_ab, key_ca});
    publish({key_ab, key_ca});
    ++stats_.cycles_executed;
    stats_.cycle_profit += profit;
    record(OpResult{op, "cycle", true, "", requester, 0, delta, profit});
    finish_op(op);
}

// --- announce, timeouts, dispatch ---

void Node::on_state_announce(const Digest& from, const StateAnnounce& m) {
    process_signed_state(from, m.root, m.m, m.sig);
}

void Node::on_tick(std::uint64_t now) {
    now_ = now;
    // Expire stalled syncs first so a blocked payment can retry.
    std::vector<std::uint64_t> dead_syncs;
    for (const auto& [session, sync] : syncs_)
        if (now_ - sync.started > params_.op_timeout) dead_syncs.push_back(session);
    for (std::uint64_t s : dead_syncs) fail_sync(s, "timeout");

    std::vector<std::uint64_t> expired;
    for (const auto& [op, p] : pending_)
        if (now_ - p.started > params_.op_timeout) expired.push_back(op);
    for (std::uint64_t op : expired) {
        auto it = pending_.find(op);
        if (it == pending_.end()) continue;
        if (auto* pay = std::get_if<PendingPay>(&it->second.state)) {
            if (pay->phase == PendingPay::Phase::Proposed)
                send(pay->receiver, PaymentAbort{op, AbortReason::Timeout});
            abort_pay(op, "timeout");
        } else if (auto* recv = std::get_if<PendingRecv>(&it->second.state)) {
            // Candidate signed but never committed: freeze the edge
            // until a sync shows whether the payer landed it.
            needs_resync_.insert(recv->next.key());
            Digest payer = recv->payer;
            record(OpResult{op, "recv", false, "timeout", payer, 0, 0, 0});
            pending_.erase(op);
            sync_with(payer);
            start_queued();
        } else if (std::get_if<PendingArbReq>(&it->second.state)) {
            arb_req_failed(op, AbortReason::Timeout, addr_);
        } else if (auto* cp = std::get_if<PendingArbCp>(&it->second.state)) {
            send(cp->requester, PaymentAbort{op, AbortReason::Timeout});
            send(cp->common, PaymentAbort{op, AbortReason::Timeout});
            arb_cp_failed(op, "timeout");
        } else if (std::get_if<PendingArbThird>(&it->second.state)) {
            burn_third(op, "timeout");
        } else if (auto* open = std::get_if<PendingOpen>(&it->second.state)) {
            record(OpResult{op, "edge-open", false, "timeout", open->peer, 0, 0, 0});
            finish_op(op);
        } else if (std::get_if<PendingAccept>(&it->second.state)) {
            // Burned candidate; adoption heals if the proposer committed.
            pending_.erase(op);
            start_queued();
        }
    }

    if (params_.announce_interval && now_ % params_.announce_interval == 0 && !edges_.empty()) {
        StateAnnounce ann = make_announce();
        for (const auto& [p, e] : edges_) send(p, ann);
    }
    if (params_.sync_interval && now_ % params_.sync_interval == 0) {
        for (const auto& [p, meta] : meta_) {
            if (!meta.have_state || !replicas_.count(p) || sync_by_peer_.count(p)) continue;
            if (replicas_.at(p).root() != meta.root || needs_resync_.count(edge_key(addr_, p)))
                start_sync(p);
        }
    }
    start_queued();
}

void Node::handle(const Envelope& env) {
    if (env.to != addr_) return;
    ++stats_.messages_received;
    const Digest& from = env.from;
    if (banned_.count(from)) return;
    auto mit = meta_.find(from);
    if (mit != meta_.end()) mit->second.last_seen = now_;
    try {
        std::visit(
            [&](const auto& m) {
                using T = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<T, SyncRequest>) on_sync_request(from, m);
                else if constexpr (std::is_same_v<T, SubtreeDigests>) on_subtree_digests(from, m);
                else if constexpr (std::is_same_v<T, LeafTransfer>) on_leaf_transfer(from, m);
                else if constexpr (std::is_same_v<T, PaymentPropose>) on_payment_propose(from, m);
                else if constexpr (std::is_same_v<T, PaymentAccept>) on_payment_accept(from, m);
                else if constexpr (std::is_same_v<T, PaymentCommit>) on_payment_commit(from, m);
                else if constexpr (std::is_same_v<T, PaymentAbort>) on_payment_abort(from, m);
                else if constexpr (std::is_same_v<T, ArbitrageRequest>) on_arbitrage_request(from, m);
                else if constexpr (std::is_same_v<T, PeerChoice>) on_peer_choice(from, m);
                else if constexpr (std::is_same_v<T, CyclePropose>) on_cycle_propose(from, m);
                else if constexpr (std::is_same_v<T, CycleCommit>) on_cycle_commit(from, m);
                else if constexpr (std::is_same_v<T, EdgeOpenPropose>) on_edge_open_propose(from, m);
                else if constexpr (std::is_same_v<T, EdgeOpenAccept>) on_edge_open_accept(from, m);
                else if constexpr (std::is_same_v<T, MisbehaviorBroadcast>) on_misbehavior(from, m);
                else if constexpr (std::is_same_v<T, StateAnnounce>) on_state_announce(from, m);
            },
            env.msg);
    } catch (const DecodeError&) {
        // Malformed remote data never tears the node down.
    } catch (const OverflowError&) {
        // Absurd amounts are dropped the same way.
    }
}

}  // namespace hypersyn
