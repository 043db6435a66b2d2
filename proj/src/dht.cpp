#include "hypersyn/dht.hpp"

#include <algorithm>

#include "hypersyn/errors.hpp"
#include "hypersyn/smt.hpp"

namespace hypersyn {

namespace {

void put_signature(Encoder& enc, const Signature& sig) { enc.put_bytes(ByteView{sig.bytes}); }

Signature get_signature(Decoder& dec) {
    ByteView b = dec.get_bytes();
    Signature sig;
    if (b.size() != sig.bytes.size()) throw DecodeError("bad signature length");
    std::copy(b.begin(), b.end(), sig.bytes.begin());
    return sig;
}

Digest xor_distance(const Digest& a, const Digest& b) {
    Digest d;
    for (std::size_t i = 0; i < d.bytes.size(); ++i) d.bytes[i] = a.bytes[i] ^ b.bytes[i];
    return d;
}

}  // namespace

bool xor_closer(const Digest& a, const Digest& b, const Digest& target) {
    return xor_distance(a, target) < xor_distance(b, target);
}

std::size_t shared_prefix_bits(const Digest& a, const Digest& b) {
    for (std::size_t i = 0; i < 256; ++i)
        if (a.bit(i) != b.bit(i)) return i;
    return 256;
}

// --- HypersynFile ---

bool HypersynFile::valid() const {
    if (address_of(public_key) != node_id) return false;
    if (!verify_signature(public_key, state_digest(root, m), sig)) return false;
    std::set<Digest> seen;
    for (const PeerEntry& p : peers)
        if (!seen.insert(p.node_id).second) return false;
    return true;
}

Bytes HypersynFile::encode() const {
    Encoder enc;
    enc.put_digest(node_id);
    enc.put_digest(public_key);
    enc.put_digest(root);
    enc.put_u64(m);
    put_signature(enc, sig);
    enc.put_u64(peers.size());
    for (const PeerEntry& p : peers) {
        enc.put_digest(p.node_id);
        enc.put_string(p.address);
    }
    return enc.take();
}

HypersynFile HypersynFile::decode(ByteView wire) {
    Decoder dec(wire);
    HypersynFile f;
    f.node_id = dec.get_digest();
    f.public_key = dec.get_digest();
    f.root = dec.get_digest();
    f.m = dec.get_u64();
    f.sig = get_signature(dec);
    std::uint64_t count = dec.get_u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        PeerEntry p;
        p.node_id = dec.get_digest();
        p.address = dec.get_string();
        f.peers.push_back(std::move(p));
    }
    if (!dec.done()) throw DecodeError("trailing bytes after file");
    return f;
}

// --- RoutingTable ---

RoutingTable::RoutingTable(Digest self, std::size_t k) : self_(self), k_(k), buckets_(257) {}

void RoutingTable::observe(const Digest& id, const std::string& address, std::uint64_t now) {
    if (id == self_) return;
    auto& bucket = buckets_[shared_prefix_bits(self_, id)];
    auto it = std::find_if(bucket.begin(), bucket.end(),
                           [&](const RoutingEntry& e) { return e.id == id; });
    if (it != bucket.end()) {
        it->address = address;
        it->last_seen = now;
        std::rotate(it, it + 1, bucket.end());  // freshest last
        return;
    }
    if (bucket.size() >= k_) bucket.erase(bucket.begin());  // evict stalest
    bucket.push_back(RoutingEntry{id, address, now});
}

std::vector<RoutingEntry> RoutingTable::closest(const Digest& target, std::size_t n) const {
    std::vector<RoutingEntry> all;
    for (const auto& bucket : buckets_) all.insert(all.end(), bucket.begin(), bucket.end());
    std::sort(all.begin(), all.end(), [&](const RoutingEntry& a, const RoutingEntry& b) {
        return xor_closer(a.id, b.id, target);
    });
    if (all.size() > n) all.resize(n);
    return all;
}

const std::vector<RoutingEntry>& RoutingTable::bucket(std::size_t prefix_len) const {
    return buckets_.at(prefix_len);
}

std::size_t RoutingTable::size() const {
    std::size_t total = 0;
    for (const auto& bucket : buckets_) total += bucket.size();
    return total;
}

// --- participant ---

DhtParticipant::DhtParticipant(Digest id, std::string address, DhtParams params)
    : id_(id), address_(std::move(address)), params_(params), routing_(id, params.k) {}

void DhtParticipant::seed_routing(const Digest& id, const std::string& address) {
    routing_.observe(id, address, 0);
}

std::vector<DhtEnvelope> DhtParticipant::drain_outbox() {
    std::vector<DhtEnvelope> out(outbox_.begin(), outbox_.end());
    outbox_.clear();
    return out;
}

void DhtParticipant::send(const Digest& to, DhtMessage msg) {
    ++stats_.messages_sent;
    outbox_.push_back(DhtEnvelope{id_, address_, to, std::move(msg)});
}

std::uint64_t DhtParticipant::fresh_op() { return next_op_++; }

const HypersynFile* DhtParticipant::stored(const Digest& target) const {
    auto it = storage_.find(target);
    return it == storage_.end() ? nullptr : &it->second.file;
}

StoreStatus DhtParticipant::store_local(const HypersynFile& file) {
    if (!file.valid()) {
        ++stats_.stores_invalid;
        return StoreStatus::Invalid;
    }
    auto it = storage_.find(file.node_id);
    if (it != storage_.end() && file.m <= it->second.file.m) {
        // A second valid signature at the held counter with different
        // content is the owner's own equivocation; keep the evidence.
        if (file.m == it->second.file.m && file.root != it->second.file.root) {
            const HypersynFile& held = it->second.file;
            SignedStatement s1{held.public_key, held.root, held.m, held.sig, {}, {}};
            SignedStatement s2{file.public_key, file.root, file.m, file.sig, {}, {}};
            proofs_.push_back(make_equivocation(std::move(s1), std::move(s2)));
        }
        ++stats_.stores_stale;
        return StoreStatus::Stale;
    }
    storage_[file.node_id] = StoredFile{file, now_ + params_.file_ttl};
    ++stats_.stores_accepted;
    return StoreStatus::Stored;
}

bool DhtParticipant::refresh_local(const Digest& target, const Digest& refresher,
                                   const SignedStatement& evidence) {
    auto it = storage_.find(target);
    if (it == storage_.end()) {
        ++stats_.refreshes_rejected;
        return false;
    }
    const HypersynFile& held = it->second.file;
    // All evidence is the owner's word: its key, a (root, m) it signed.
    bool ok = evidence.pub == held.public_key && evidence.sig_valid();
    if (ok && refresher == target) {
        // The owner extends its own file with any fresh signed state.
        ok = evidence.m + params_.v >= held.m;
    } else if (ok) {
        // A peer must show the owner committed to an edge between the
        // two of them recently enough.
        ok = false;
        try {
            Decoder cd(evidence.edge_core);
            EdgeState core = EdgeState::decode_core(cd);
            if (!cd.done()) throw DecodeError("trailing bytes after edge core");
            Digest key = core.key();
            if (key == edge_key(target, refresher) &&
                (held.m <= evidence.m || held.m - evidence.m <= params_.v)) {
                MerkleProof proof = MerkleProof::decode(evidence.proof_wire);
                ok = proof.key == key && proof.leaf_value == edge_hash(core) &&
                     verify_proof(evidence.root, proof);
            }
        } catch (const Error&) {
            ok = false;
        } catch (const DecodeError&) {
            ok = false;
        }
    }
    if (!ok) {
        ++stats_.refreshes_rejected;
        return false;
    }
    it->second.expires_at = now_ + params_.file_ttl;
    ++stats_.refreshes_accepted;
    return true;
}

std::vector<MisbehaviorProof> DhtParticipant::drain_proofs() {
    std::vector<MisbehaviorProof> out;
    out.swap(proofs_);
    return out;
}

// --- iterative ops ---

std::vector<PeerEntry> DhtParticipant::closest_entries(const Digest& target) const {
    std::vector<PeerEntry> out;
    for (const RoutingEntry& e : routing_.closest(target, params_.k))
        out.push_back(PeerEntry{e.id, e.address});
    return out;
}

std::uint64_t DhtParticipant::lookup(const Digest& target) {
    std::uint64_t op_id = fresh_op();
    DhtOp op;
    op.kind = DhtOp::Kind::Lookup;
    op.target = target;
    op.started = now_;
    if (const HypersynFile* own = stored(target)) op.best = *own;
    merge_candidates(op, closest_entries(target));
    ops_[op_id] = std::move(op);
    advance(op_id);
    return op_id;
}

std::uint64_t DhtParticipant::publish(HypersynFile file) {
    std::uint64_t op_id = fresh_op();
    DhtOp op;
    op.kind = DhtOp::Kind::Publish;
    op.target = file.node_id;
    op.file = std::move(file);
    op.started = now_;
    merge_candidates(op, closest_entries(op.target));
    ops_[op_id] = std::move(op);
    advance(op_id);
    return op_id;
}

std::uint64_t DhtParticipant::refresh(const Digest& target, SignedStatement evidence) {
    std::uint64_t op_id = fresh_op();
    DhtOp op;
    op.kind = DhtOp::Kind::Refresh;
    op.target = target;
    op.evidence = std::move(evidence);
    op.started = now_;
    merge_candidates(op, closest_entries(target));
    ops_[op_id] = std::move(op);
    advance(op_id);
    return op_id;
}

void DhtParticipant::merge_candidates(DhtOp& op, const std::vector<PeerEntry>& entries) {
    for (const PeerEntry& e : entries) {
        if (e.node_id == id_) continue;
        bool known = std::any_of(op.shortlist.begin(), op.shortlist.end(),
                                 [&](const PeerEntry& s) { return s.node_id == e.node_id; });
        if (!known) op.shortlist.push_back(e);
    }
    std::sort(op.shortlist.begin(), op.shortlist.end(), [&](const PeerEntry& a, const PeerEntry& b) {
        return xor_closer(a.node_id, b.node_id, op.target);
    });
    if (op.shortlist.size() > params_.k) op.shortlist.resize(params_.k);
}

// Query the closest unqueried candidates, alpha at a time. The walk
// stops once the `replicas` closest known candidates have all answered:
// for a lookup that is the full replica set, so the highest counter
// among divergent copies wins.
void DhtParticipant::advance(std::uint64_t op_id) {
    auto it = ops_.find(op_id);
    if (it == ops_.end()) return;
    DhtOp& op = it->second;

    if (op.storing) {
        if (op.acks_pending.empty()) finish(op_id);
        return;
    }

    // Probing stops once the `replicas` closest known candidates have
    // all answered; until then keep alpha queries in the air.
    std::size_t top = std::min(params_.replicas, op.shortlist.size());
    bool converged = true;
    for (std::size_t i = 0; i < top; ++i) {
        const Digest& cid = op.shortlist[i].node_id;
        if (!op.queried.count(cid) || op.inflight.count(cid)) {
            converged = false;
            break;
        }
    }
    if (!converged) {
        for (const PeerEntry& e : op.shortlist) {
            if (op.inflight.size() >= params_.alpha) break;
            if (op.queried.count(e.node_id)) continue;
            op.queried.insert(e.node_id);
            op.inflight.insert(e.node_id);
            ++op.queries;
            ++stats_.queries_sent;
            if (op.kind == DhtOp::Kind::Lookup)
                send(e.node_id, DhtGet{op_id, op.target});
            else
                send(e.node_id, DhtFindNode{op_id, op.target});
        }
        if (!op.inflight.empty()) return;
        // Nothing left to ask; settle for what the walk reached.
    }

    if (op.kind == DhtOp::Kind::Lookup) {
        finish(op_id);
        return;
    }
    // Write phase: the replica set is the `replicas` closest ids found,
    // this participant included at its own distance rank.
    op.storing = true;
    bool self_in = false;
    std::size_t taken = 0;
    while (taken + (self_in ? 1 : 0) < params_.replicas) {
        bool self_next = !self_in && (taken >= op.shortlist.size() ||
                                      xor_closer(id_, op.shortlist[taken].node_id, op.target));
        if (self_next) {
            self_in = true;
            continue;
        }
        if (taken >= op.shortlist.size()) break;
        const Digest& to = op.shortlist[taken++].node_id;
        op.acks_pending.insert(to);
        if (op.kind == DhtOp::Kind::Publish)
            send(to, DhtStore{op_id, op.file});
        else
            send(to, DhtRefresh{op_id, op.target, id_, op.evidence});
    }
    if (self_in) {
        bool ok = op.kind == DhtOp::Kind::Publish
                      ? store_local(op.file) == StoreStatus::Stored
                      : refresh_local(op.target, id_, op.evidence);
        if (ok) op.stored_at.push_back(id_);
    }
    if (op.acks_pending.empty()) finish(op_id);
}

void DhtParticipant::finish(std::uint64_t op_id) {
    auto it = ops_.find(op_id);
    if (it == ops_.end()) return;
    DhtOp& op = it->second;
    DhtResult r;
    r.op = op_id;
    r.queries = op.queries;
    switch (op.kind) {
        case DhtOp::Kind::Lookup:
            r.kind = "lookup";
            r.ok = op.best.has_value();
            r.file = op.best;
            if (r.ok) ++stats_.lookups_ok;
            else ++stats_.lookups_failed;
            break;
        case DhtOp::Kind::Publish:
            r.kind = "publish";
            r.stored_at = op.stored_at;
            r.ok = !op.stored_at.empty();
            break;
        case DhtOp::Kind::Refresh:
            r.kind = "refresh";
            r.stored_at = op.stored_at;
            r.ok = !op.stored_at.empty();
            break;
    }
    results_.push_back(std::move(r));
    ops_.erase(it);
}

void DhtParticipant::handle(const DhtEnvelope& env) {
    if (env.to != id_) return;
    ++stats_.messages_received;
    routing_.observe(env.from, env.from_addr, now_);

    if (const auto* m = std::get_if<DhtFindNode>(&env.msg)) {
        send(env.from, DhtNodes{m->op, closest_entries(m->target)});
        return;
    }
    if (const auto* m = std::get_if<DhtGet>(&env.msg)) {
        DhtFound reply;
        reply.op = m->op;
        if (const HypersynFile* f = stored(m->target)) {
            reply.found = true;
            reply.file = *f;
        }
        reply.closer = closest_entries(m->target);
        send(env.from, std::move(reply));
        return;
    }
    if (const auto* m = std::get_if<DhtStore>(&env.msg)) {
        send(env.from, DhtStoreAck{m->op, store_local(m->file)});
        return;
    }
    if (const auto* m = std::get_if<DhtRefresh>(&env.msg)) {
        if (m->refresher != env.from) {
            send(env.from, DhtRefreshAck{m->op, false});
            return;
        }
        send(env.from, DhtRefreshAck{m->op, refresh_local(m->target, m->refresher, m->evidence)});
        return;
    }

    // Replies to an op this participant is driving.
    if (const auto* m = std::get_if<DhtNodes>(&env.msg)) {
        auto it = ops_.find(m->op);
        if (it == ops_.end() || !it->second.inflight.count(env.from)) return;
        it->second.inflight.erase(env.from);
        for (const PeerEntry& e : m->entries) routing_.observe(e.node_id, e.address, now_);
        merge_candidates(it->second, m->entries);
        advance(m->op);
        return;
    }
    if (const auto* m = std::get_if<DhtFound>(&env.msg)) {
        auto it = ops_.find(m->op);
        if (it == ops_.end() || !it->second.inflight.count(env.from)) return;
        DhtOp& op = it->second;
        op.inflight.erase(env.from);
        for (const PeerEntry& e : m->closer) routing_.observe(e.node_id, e.address, now_);
        merge_candidates(op, m->closer);
        if (m->found && m->file.valid() && m->file.node_id == op.target &&
            (!op.best || m->file.m > op.best->m))
            op.best = m->file;
        advance(m->op);
        return;
    }
    if (const auto* m = std::get_if<DhtStoreAck>(&env.msg)) {
        auto it = ops_.find(m->op);
        if (it == ops_.end() || !it->second.acks_pending.count(env.from)) return;
        it->second.acks_pending.erase(env.from);
        if (m->status == StoreStatus::Stored) it->second.stored_at.push_back(env.from);
        advance(m->op);
        return;
    }
    if (const auto* m = std::get_if<DhtRefreshAck>(&env.msg)) {
        auto it = ops_.find(m->op);
        if (it == ops_.end() || !it->second.acks_pending.count(env.from)) return;
        it->second.acks_pending.erase(env.from);
        if (m->accepted) it->second.stored_at.push_back(env.from);
        advance(m->op);
        return;
    }
}

void DhtParticipant::on_tick(std::uint64_t now) {
    now_ = now;
    for (auto it = storage_.begin(); it != storage_.end();) {
        if (it->second.expires_at <= now) {
            it = storage_.erase(it);
            ++stats_.files_expired;
        } else {
            ++it;
        }
    }
    std::vector<std::uint64_t> expired;
    for (auto& [op_id, op] : ops_)
        if (now - op.started > params_.op_timeout) expired.push_back(op_id);
    for (std::uint64_t op_id : expired) {
        // Unanswered probes are written off; whatever was gathered counts.
        DhtOp& op = ops_[op_id];
        op.inflight.clear();
        op.acks_pending.clear();
        finish(op_id);
    }
}

// --- peer-entry validation ---

bool validate_peer_entry(const HypersynFile& file, const PeerEntry& entry,
                         const LiveQuery& live_query) {
    if (entry.node_id == file.node_id) return false;
    Digest key = edge_key(file.node_id, entry.node_id);
    std::optional<SignedStatement> answer;
    try {
        answer = live_query(entry.node_id, key);
    } catch (const Error&) {
        return false;
    }
    if (!answer) return false;  // unreachable fails closed
    const SignedStatement& stmt = *answer;
    if (stmt.signer() != entry.node_id || !stmt.sig_valid()) return false;
    try {
        Decoder cd(stmt.edge_core);
        EdgeState core = EdgeState::decode_core(cd);
        if (!cd.done()) return false;
        if (core.key() != key) return false;
        if (core.other(entry.node_id) != file.node_id) return false;
        MerkleProof proof = MerkleProof::decode(stmt.proof_wire);
        return proof.key == key && proof.leaf_value == edge_hash(core) &&
               verify_proof(stmt.root, proof);
    } catch (const Error&) {
        return false;
    } catch (const DecodeError&) {
        return false;
    }
}

}  // namespace hypersyn
