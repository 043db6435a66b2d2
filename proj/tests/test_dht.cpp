#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "hypersyn/dht.hpp"
#include "hypersyn/smt.hpp"

using namespace hypersyn;
using nlohmann::json;

namespace {

json load_json(const std::string& rel) {
    std::ifstream in(std::string(SOURCE_ROOT) + "/" + rel);
    REQUIRE(in.good());
    return json::parse(in);
}

Keypair kp(int seed) {
    Digest d{};
    d.bytes[31] = std::uint8_t(seed & 0xff);
    d.bytes[30] = std::uint8_t(seed >> 8);
    d.bytes[0] = 0x3d;
    return Keypair::from_seed(d);
}

Digest dg(int n) {
    Digest d{};
    d.bytes[31] = std::uint8_t(n & 0xff);
    d.bytes[30] = std::uint8_t(n >> 8);
    d.bytes[1] = 0x77;
    return d;
}

Digest did(const std::string& s) {
    Bytes b(s.begin(), s.end());
    return sha256(b);
}

HypersynFile make_file(const Keypair& owner, const Digest& root, std::uint64_t m,
                       std::vector<PeerEntry> peers = {}) {
    HypersynFile f;
    f.node_id = address_of(owner.pub);
    f.public_key = owner.pub;
    f.root = root;
    f.m = m;
    f.sig = owner.sign(state_digest(root, m));
    f.peers = std::move(peers);
    return f;
}

// In-process overlay: pumps every outbox until quiescent, delivering
// in id order. No loss, per-link FIFO.
struct DhtNet {
    std::map<Digest, DhtParticipant*> parts;
    std::uint64_t now = 0;

    void add(DhtParticipant& p) { parts[p.id()] = &p; }

    void deliver() {
        bool moved = true;
        while (moved) {
            moved = false;
            for (auto& [id, p] : parts) {
                for (const DhtEnvelope& env : p->drain_outbox()) {
                    moved = true;
                    auto it = parts.find(env.to);
                    if (it != parts.end()) it->second->handle(env);
                }
            }
        }
    }

    void tick() {
        ++now;
        for (auto& [id, p] : parts) p->on_tick(now);
        deliver();
    }

    // Every participant knows every other, as after a long-running
    // bootstrap; buckets self-cap at K.
    void full_mesh() {
        for (auto& [ida, a] : parts)
            for (auto& [idb, b] : parts)
                if (ida != idb) a->seed_routing(idb, b->address());
    }

    std::vector<Digest> closest_ids(const Digest& target, std::size_t n) const {
        std::vector<Digest> ids;
        for (auto& [id, p] : parts) ids.push_back(id);
        std::sort(ids.begin(), ids.end(),
                  [&](const Digest& a, const Digest& b) { return xor_closer(a, b, target); });
        ids.resize(std::min(n, ids.size()));
        return ids;
    }
};

const DhtResult& last_result(const DhtParticipant& p) {
    REQUIRE(!p.results().empty());
    return p.results().back();
}

}  // namespace

TEST_CASE("discovery file encoding matches the frozen vectors") {
    json j = load_json("fixtures/file_encoding/cases.json");
    REQUIRE(j["cases"].size() >= 4);
    for (const auto& c : j["cases"]) {
        HypersynFile f;
        f.node_id = Digest::from_hex(c["node_id_hex"].get<std::string>());
        f.public_key = Digest::from_hex(c["public_hex"].get<std::string>());
        f.root = Digest::from_hex(c["root_hex"].get<std::string>());
        f.m = std::stoull(c["m"].get<std::string>());
        f.sig = Signature::from_hex(c["sig_hex"].get<std::string>());
        for (const auto& p : c["peers"])
            f.peers.push_back(PeerEntry{Digest::from_hex(p["node_id"].get<std::string>()),
                                        p["address"].get<std::string>()});

        CHECK(f.node_id == address_of(f.public_key));
        CHECK(f.valid());
        CHECK(to_hex(f.encode()) == c["encoding_hex"].get<std::string>());

        HypersynFile d = HypersynFile::decode(from_hex(c["encoding_hex"].get<std::string>()));
        CHECK(d.node_id == f.node_id);
        CHECK(d.public_key == f.public_key);
        CHECK(d.root == f.root);
        CHECK(d.m == f.m);
        CHECK(d.sig == f.sig);
        CHECK(d.peers == f.peers);
        CHECK(d.valid());

        // The signature is the owner's, reproducible from its seed.
        Keypair owner = Keypair::from_seed(Digest::from_hex(c["seed_hex"].get<std::string>()));
        CHECK(owner.pub == f.public_key);
        CHECK(owner.sign(state_digest(f.root, f.m)) == f.sig);
    }
}

TEST_CASE("replicas accept only strictly newer counters") {
    Keypair owner = kp(1);
    Digest target = address_of(owner.pub);
    DhtParticipant p(did("replica"), "sim://r");

    CHECK(p.store_local(make_file(owner, dg(5), 5)) == StoreStatus::Stored);
    REQUIRE(p.stored(target) != nullptr);
    CHECK(p.stored(target)->m == 5);

    CHECK(p.store_local(make_file(owner, dg(7), 7)) == StoreStatus::Stored);
    CHECK(p.stored(target)->m == 7);

    // Downgrade and replay both bounce; the held copy is untouched.
    CHECK(p.store_local(make_file(owner, dg(5), 5)) == StoreStatus::Stale);
    CHECK(p.store_local(make_file(owner, dg(7), 7)) == StoreStatus::Stale);
    CHECK(p.stored(target)->m == 7);
    CHECK(p.stored(target)->root == dg(7));

    // A forged signature never lands, whatever the counter says.
    HypersynFile forged = make_file(owner, dg(9), 9);
    forged.sig = kp(2).sign(state_digest(dg(9), 9));
    CHECK(p.store_local(forged) == StoreStatus::Invalid);
    CHECK(p.stored(target)->m == 7);

    // Neither does a file whose id does not hash from its key.
    HypersynFile moved = make_file(owner, dg(9), 9);
    moved.node_id = did("elsewhere");
    CHECK(moved.valid() == false);
    CHECK(p.store_local(moved) == StoreStatus::Invalid);

    CHECK(p.stats().stores_accepted == 2);
    CHECK(p.stats().stores_stale == 2);
    CHECK(p.stats().stores_invalid == 2);
}

TEST_CASE("duplicate peer entries invalidate a file") {
    Keypair owner = kp(3);
    std::vector<PeerEntry> peers{{did("peer-a"), "sim://a"}, {did("peer-b"), "sim://b"}};
    HypersynFile f = make_file(owner, dg(1), 4, peers);
    CHECK(f.valid());

    HypersynFile roundtrip = HypersynFile::decode(f.encode());
    CHECK(roundtrip.peers == peers);

    // Same id twice, even under different addresses, is malformed.
    f.peers.push_back(PeerEntry{did("peer-a"), "sim://a2"});
    CHECK(f.valid() == false);
    DhtParticipant p(did("replica"), "sim://r");
    CHECK(p.store_local(f) == StoreStatus::Invalid);
}

TEST_CASE("routing table keeps the freshest K per bucket in XOR order") {
    Digest self{};  // all zeros: bucket b is reached by flipping bit b
    RoutingTable table(self, 4);

    auto in_bucket = [&](std::size_t b, int salt) {
        Digest d{};
        d.bytes[b >> 3] ^= std::uint8_t(1u << (7 - (b & 7)));
        d.bytes[31] = std::uint8_t(salt);
        return d;
    };

    for (int i = 0; i < 7; ++i) table.observe(in_bucket(0, i), "x", std::uint64_t(i));
    CHECK(table.bucket(0).size() == 4);
    CHECK(table.size() == 4);

    // Oldest three were evicted; the rest kept least-recent first.
    std::vector<Digest> kept;
    for (const RoutingEntry& e : table.bucket(0)) kept.push_back(e.id);
    CHECK(std::find(kept.begin(), kept.end(), in_bucket(0, 2)) == kept.end());
    CHECK(std::find(kept.begin(), kept.end(), in_bucket(0, 3)) != kept.end());

    // Re-observing refreshes: 3 moves to the back and survives the next
    // insertion, which evicts 4 instead.
    table.observe(in_bucket(0, 3), "x", 10);
    CHECK(table.bucket(0).back().id == in_bucket(0, 3));
    table.observe(in_bucket(0, 7), "x", 11);
    kept.clear();
    for (const RoutingEntry& e : table.bucket(0)) kept.push_back(e.id);
    CHECK(std::find(kept.begin(), kept.end(), in_bucket(0, 4)) == kept.end());
    CHECK(std::find(kept.begin(), kept.end(), in_bucket(0, 3)) != kept.end());

    // Entries land in the bucket of their differing bit.
    table.observe(in_bucket(5, 1), "x", 12);
    table.observe(in_bucket(13, 1), "x", 13);
    CHECK(table.bucket(5).size() == 1);
    CHECK(table.bucket(13).size() == 1);
    CHECK(shared_prefix_bits(self, in_bucket(13, 1)) == 13);

    // The owner itself is never stored.
    table.observe(self, "x", 14);
    CHECK(table.size() == 6);

    // closest() ranks across buckets by XOR distance to the target.
    Digest target = in_bucket(13, 0);
    std::vector<RoutingEntry> near = table.closest(target, 3);
    REQUIRE(near.size() == 3);
    CHECK(near[0].id == in_bucket(13, 1));
    CHECK(near[1].id == in_bucket(5, 1));
    for (std::size_t i = 1; i < near.size(); ++i)
        CHECK(xor_closer(near[i].id, near[i - 1].id, target) == false);
}

TEST_CASE("published files are found within the query bound") {
    const int n = 128;
    std::vector<DhtParticipant> parts;
    parts.reserve(n);
    DhtNet net;
    for (int i = 0; i < n; ++i)
        parts.emplace_back(did("dht-node-" + std::to_string(i)), "sim://d" + std::to_string(i));
    for (auto& p : parts) net.add(p);
    net.full_mesh();

    Keypair owner = kp(42);
    HypersynFile file = make_file(owner, dg(6), 12);
    Digest target = file.node_id;

    DhtParticipant& publisher = parts[0];
    std::uint64_t pub_op = publisher.publish(file);
    net.deliver();

    const DhtResult& pr = last_result(publisher);
    REQUIRE(pr.op == pub_op);
    CHECK(pr.kind == "publish");
    CHECK(pr.ok);
    CHECK(pr.stored_at.size() == publisher.params().replicas);

    // The copies sit exactly on the replica set closest to the file id.
    std::vector<Digest> expect = net.closest_ids(target, publisher.params().replicas);
    for (const Digest& id : expect) {
        REQUIRE(net.parts.at(id)->stored(target) != nullptr);
        CHECK(net.parts.at(id)->stored(target)->m == 12);
    }
    std::vector<Digest> got = pr.stored_at;
    std::sort(got.begin(), got.end());
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);

    // A far-away reader retrieves it within 3*log2(n) queries.
    DhtParticipant& reader = parts[100];
    reader.lookup(target);
    net.deliver();

    const DhtResult& lr = last_result(reader);
    CHECK(lr.kind == "lookup");
    REQUIRE(lr.ok);
    CHECK(lr.file->m == 12);
    CHECK(lr.file->root == dg(6));
    CHECK(lr.file->valid());
    std::size_t bound = std::size_t(3 * std::log2(double(n)));
    CHECK(lr.queries <= bound);
    CHECK(reader.stats().lookups_ok == 1);
    CHECK(reader.stats().queries_sent == lr.queries);

    // Looking up an id nobody published comes back empty, still bounded.
    reader.lookup(did("nobody-home"));
    net.deliver();
    const DhtResult& miss = last_result(reader);
    CHECK(miss.ok == false);
    CHECK(miss.queries <= bound);
    CHECK(reader.stats().lookups_failed == 1);
}

TEST_CASE("a lookup returns the newest replica under partial propagation") {
    const int n = 16;
    std::vector<DhtParticipant> parts;
    parts.reserve(n);
    DhtNet net;
    for (int i = 0; i < n; ++i)
        parts.emplace_back(did("small-" + std::to_string(i)), "sim://s" + std::to_string(i));
    for (auto& p : parts) net.add(p);
    net.full_mesh();

    Keypair owner = kp(9);
    Digest target = address_of(owner.pub);
    std::vector<Digest> replicas = net.closest_ids(target, 3);

    // One replica missed the latest update: it still holds counter 5
    // while another has 7. The third has nothing at all.
    CHECK(net.parts.at(replicas[0])->store_local(make_file(owner, dg(5), 5)) ==
          StoreStatus::Stored);
    CHECK(net.parts.at(replicas[1])->store_local(make_file(owner, dg(7), 7)) ==
          StoreStatus::Stored);

    // The reader must not settle for the first hit.
    DhtParticipant* reader = nullptr;
    for (auto& p : parts)
        if (std::find(replicas.begin(), replicas.end(), p.id()) == replicas.end()) {
            reader = &p;
            break;
        }
    REQUIRE(reader != nullptr);
    reader->lookup(target);
    net.deliver();

    const DhtResult& r = last_result(*reader);
    REQUIRE(r.ok);
    CHECK(r.file->m == 7);
    CHECK(r.file->root == dg(7));
}

TEST_CASE("refresh extends lifetime under owner or edge evidence") {
    Keypair owner = kp(11);
    Keypair peer = kp(12);
    Digest target = address_of(owner.pub);
    Digest peer_id = address_of(peer.pub);
    DhtParams params;
    params.file_ttl = 50;
    params.op_timeout = 8;

    // The owner's tree holds one edge with the peer; evidence quotes it.
    EdgeState edge = EdgeState::open(target, 100, 3, peer_id, 100, 2);
    SparseMerkleTree tree;
    tree.insert(edge.key(), edge_hash(edge));
    Digest root = tree.root();

    auto owner_statement = [&](std::uint64_t m) {
        return SignedStatement{owner.pub, root, m, owner.sign(state_digest(root, m)), {}, {}};
    };
    auto presence_statement = [&](std::uint64_t m) {
        return SignedStatement{owner.pub,
                               root,
                               m,
                               owner.sign(state_digest(root, m)),
                               tree.prove(edge.key()).encode(),
                               edge.encode_core()};
    };

    SUBCASE("owner word alone extends its own file") {
        DhtParticipant p(did("replica"), "sim://r", params);
        CHECK(p.store_local(make_file(owner, root, 10)) == StoreStatus::Stored);
        p.on_tick(40);
        CHECK(p.refresh_local(target, target, owner_statement(10)));
        p.on_tick(60);  // past the original expiry of 50
        CHECK(p.stored(target) != nullptr);
        p.on_tick(91);  // past the extended expiry of 90
        CHECK(p.stored(target) == nullptr);
        CHECK(p.stats().refreshes_accepted == 1);
        CHECK(p.stats().files_expired == 1);
    }

    SUBCASE("a peer refreshes with a fresh presence proof") {
        DhtParticipant p(did("replica"), "sim://r", params);
        CHECK(p.store_local(make_file(owner, root, 10)) == StoreStatus::Stored);
        CHECK(p.refresh_local(target, peer_id, presence_statement(10)));
        CHECK(p.stats().refreshes_accepted == 1);
    }

    SUBCASE("evidence staler than the bound is refused") {
        DhtParticipant p(did("replica"), "sim://r", params);
        CHECK(p.store_local(make_file(owner, root, 10 + params.v + 1)) == StoreStatus::Stored);
        CHECK(p.refresh_local(target, peer_id, presence_statement(10)) == false);
        CHECK(p.stats().refreshes_rejected == 1);
    }

    SUBCASE("evidence not signed by the owner is refused") {
        DhtParticipant p(did("replica"), "sim://r", params);
        CHECK(p.store_local(make_file(owner, root, 10)) == StoreStatus::Stored);
        SignedStatement forged = presence_statement(10);
        forged.sig = peer.sign(state_digest(root, 10));
        CHECK(p.refresh_local(target, peer_id, forged) == false);
        SignedStatement wrong_key = presence_statement(10);
        wrong_key.pub = peer.pub;
        wrong_key.sig = peer.sign(state_digest(root, 10));
        CHECK(p.refresh_local(target, peer_id, wrong_key) == false);
        CHECK(p.refresh_local(did("missing"), peer_id, presence_statement(10)) == false);
        CHECK(p.stats().refreshes_rejected == 3);
    }

    SUBCASE("evidence about a different edge is refused") {
        DhtParticipant p(did("replica"), "sim://r", params);
        CHECK(p.store_local(make_file(owner, root, 10)) == StoreStatus::Stored);
        // A third party replaying the owner-peer proof as its own.
        Digest stranger = address_of(kp(13).pub);
        CHECK(p.refresh_local(target, stranger, presence_statement(10)) == false);
    }

    SUBCASE("the refresh op renews every replica over the wire") {
        const int n = 8;
        std::vector<DhtParticipant> parts;
        parts.reserve(n + 1);
        DhtNet net;
        for (int i = 0; i < n; ++i)
            parts.emplace_back(did("ref-" + std::to_string(i)), "sim://f" + std::to_string(i),
                               params);
        parts.emplace_back(peer_id, "sim://peer", params);  // the refresher
        for (auto& p : parts) net.add(p);
        net.full_mesh();

        parts[0].publish(make_file(owner, root, 10));
        net.deliver();
        CHECK(last_result(parts[0]).ok);

        while (net.now < 20) net.tick();
        DhtParticipant& refresher = parts.back();
        refresher.refresh(target, presence_statement(10));
        net.deliver();
        const DhtResult& rr = last_result(refresher);
        CHECK(rr.kind == "refresh");
        CHECK(rr.ok);
        CHECK(rr.stored_at.size() == params.replicas);

        // Past the original expiry the file is still served...
        while (net.now < 60) net.tick();
        refresher.lookup(target);
        net.deliver();
        CHECK(last_result(refresher).ok);

        // ...and past the extended one it is gone everywhere.
        while (net.now < 80) net.tick();
        refresher.lookup(target);
        net.deliver();
        CHECK(last_result(refresher).ok == false);
    }
}

TEST_CASE("unrefreshed files expire after their ttl") {
    DhtParams params;
    params.file_ttl = 50;
    DhtParticipant p(did("replica"), "sim://r", params);
    Keypair owner = kp(21);
    CHECK(p.store_local(make_file(owner, dg(2), 1)) == StoreStatus::Stored);
    p.on_tick(49);
    CHECK(p.stored_count() == 1);
    p.on_tick(50);
    CHECK(p.stored_count() == 0);
    CHECK(p.stored(address_of(owner.pub)) == nullptr);
    CHECK(p.stats().files_expired == 1);
}

TEST_CASE("advertised peers are checked live before use") {
    Keypair owner = kp(31);
    Keypair peer = kp(32);
    Digest owner_id = address_of(owner.pub);
    Digest peer_id = address_of(peer.pub);

    // The peer's own tree holds its edge with the owner.
    EdgeState edge = EdgeState::open(owner_id, 500, 4, peer_id, 250, 6);
    SparseMerkleTree peer_tree;
    peer_tree.insert(edge.key(), edge_hash(edge));
    Digest peer_root = peer_tree.root();

    HypersynFile file = make_file(owner, dg(3), 9, {{peer_id, "sim://peer"}});
    PeerEntry entry = file.peers[0];

    auto honest = [&](const Digest& who, const Digest& key) -> std::optional<SignedStatement> {
        CHECK(who == peer_id);
        CHECK(key == edge.key());
        return SignedStatement{peer.pub,
                               peer_root,
                               6,
                               peer.sign(state_digest(peer_root, 6)),
                               peer_tree.prove(key).encode(),
                               edge.encode_core()};
    };
    CHECK(validate_peer_entry(file, entry, honest));

    // A peer that cannot exhibit the shared edge is refused: here it
    // proves an edge with someone else instead.
    Keypair stranger = kp(33);
    EdgeState other_edge = EdgeState::open(address_of(stranger.pub), 500, 4, peer_id, 250, 6);
    SparseMerkleTree other_tree;
    other_tree.insert(other_edge.key(), edge_hash(other_edge));
    auto edgeless = [&](const Digest&, const Digest&) -> std::optional<SignedStatement> {
        Digest r = other_tree.root();
        return SignedStatement{peer.pub,
                               r,
                               6,
                               peer.sign(state_digest(r, 6)),
                               other_tree.prove(other_edge.key()).encode(),
                               other_edge.encode_core()};
    };
    CHECK(validate_peer_entry(file, entry, edgeless) == false);

    // A proof against a root the peer never signed fails.
    auto garbage_root = [&](const Digest&, const Digest& key) -> std::optional<SignedStatement> {
        Digest r = dg(77);
        return SignedStatement{peer.pub,
                               r,
                               6,
                               peer.sign(state_digest(r, 6)),
                               peer_tree.prove(key).encode(),
                               edge.encode_core()};
    };
    CHECK(validate_peer_entry(file, entry, garbage_root) == false);

    // Unreachable peers fail closed.
    auto silent = [](const Digest&, const Digest&) -> std::optional<SignedStatement> {
        return std::nullopt;
    };
    CHECK(validate_peer_entry(file, entry, silent) == false);

    // An answer signed by the wrong node fails even with a valid shape.
    auto imposter = [&](const Digest&, const Digest& key) -> std::optional<SignedStatement> {
        SignedStatement s = *honest(peer_id, key);
        s.pub = owner.pub;
        s.sig = owner.sign(state_digest(peer_root, 6));
        return s;
    };
    CHECK(validate_peer_entry(file, entry, imposter) == false);

    // A file may not list its owner as its own peer.
    CHECK(validate_peer_entry(file, PeerEntry{owner_id, "sim://self"}, honest) == false);
}

TEST_CASE("conflicting stores at one counter yield an equivocation proof") {
    Keypair owner = kp(41);
    DhtParticipant p(did("replica"), "sim://r");

    CHECK(p.store_local(make_file(owner, dg(10), 9)) == StoreStatus::Stored);
    CHECK(p.store_local(make_file(owner, dg(11), 9)) == StoreStatus::Stale);

    std::vector<MisbehaviorProof> proofs = p.drain_proofs();
    REQUIRE(proofs.size() == 1);
    CHECK(proofs[0].kind == MisbehaviorProof::Kind::Equivocation);
    CHECK(proofs[0].valid(16));
    REQUIRE(proofs[0].implicated().size() == 1);
    CHECK(proofs[0].implicated()[0] == address_of(owner.pub));

    // Replaying the held copy is stale but proves nothing.
    CHECK(p.store_local(make_file(owner, dg(10), 9)) == StoreStatus::Stale);
    CHECK(p.drain_proofs().empty());
}
