#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>

#include "hypersyn/edge.hpp"
#include "hypersyn/errors.hpp"

using namespace hypersyn;
using nlohmann::json;

namespace {

json load_json(const std::string& rel) {
    std::ifstream in(std::string(SOURCE_ROOT) + "/" + rel);
    REQUIRE(in.good());
    return json::parse(in);
}

EdgeState edge_from(const json& c) {
    EdgeState e;
    e.p_lo = Digest::from_hex(c["p_lo"].get<std::string>());
    e.p_hi = Digest::from_hex(c["p_hi"].get<std::string>());
    e.r_lo = amount_from_string(c["r_lo"].get<std::string>());
    e.r_hi = amount_from_string(c["r_hi"].get<std::string>());
    e.m_lo = std::stoull(c["m_lo"].get<std::string>());
    e.m_hi = std::stoull(c["m_hi"].get<std::string>());
    return e;
}

}  // namespace

TEST_CASE("edge hash and key match frozen vectors") {
    json j = load_json("fixtures/edge_hash/cases.json");
    REQUIRE(j["cases"].size() >= 10);
    for (const auto& c : j["cases"]) {
        EdgeState e = edge_from(c);
        CHECK(edge_hash(e).hex() == c["edge_hash_hex"].get<std::string>());
        CHECK(e.key().hex() == c["key_hex"].get<std::string>());
    }
}

TEST_CASE("every field is load-bearing in the edge hash") {
    Digest a = sha256(Bytes{'a'});
    Digest b = sha256(Bytes{'b'});
    EdgeState base = EdgeState::open(a, 80, 3, b, 125, 7);
    Digest h = edge_hash(base);

    EdgeState e = base;
    e.m_hi += 1;
    CHECK(edge_hash(e) != h);

    e = base;
    e.m_lo += 1;
    CHECK(edge_hash(e) != h);

    e = base;
    std::swap(e.r_lo, e.r_hi);
    CHECK(edge_hash(e) != h);

    e = base;
    e.r_lo += 1;
    CHECK(edge_hash(e) != h);

    // Signature records are endorsements of the state, not part of it.
    e = base;
    e.sig_lo = SignedEdgeRecord{};
    CHECK(edge_hash(e) == h);
}

TEST_CASE("open canonicalizes side order") {
    Digest a = sha256(Bytes{'a'});
    Digest b = sha256(Bytes{'b'});
    EdgeState e1 = EdgeState::open(a, 80, 3, b, 125, 7);
    EdgeState e2 = EdgeState::open(b, 125, 7, a, 80, 3);
    CHECK(e1.p_lo == e2.p_lo);
    CHECK(edge_hash(e1) == edge_hash(e2));
    CHECK(e1.key() == e2.key());
    CHECK(edge_key(a, b) == edge_key(b, a));
    CHECK(e1.reserve_of(a) == 80);
    CHECK(e1.reserve_of(b) == 125);
    CHECK(e1.counter_of(a) == 3);
    CHECK(e1.counter_of(b) == 7);
    CHECK(e1.other(a) == b);
    CHECK(e1.other(b) == a);
    CHECK_THROWS_AS(EdgeState::open(a, 1, 0, a, 1, 0), ConfigError);
}

TEST_CASE("oriented reserves and trades update the right side") {
    Digest a = sha256(Bytes{'a'});
    Digest b = sha256(Bytes{'b'});
    EdgeState e = EdgeState::open(a, 1000, 0, b, 1000, 0);

    ReservePair from_a = e.oriented(a);
    CHECK(from_a.r_a == e.reserve_of(a));
    CHECK(from_a.r_b == e.reserve_of(b));

    // a pays in 100 of its own credit, receives b's credit.
    CreditAmount out = e.trade(a, 100);
    CHECK(out == 90);  // floor(100 * 1000 / 1100)
    CHECK(e.reserve_of(a) == 1100);
    CHECK(e.reserve_of(b) == 910);

    // Mirror direction from the canonical-hi side.
    EdgeState f = EdgeState::open(a, 1000, 0, b, 1000, 0);
    CreditAmount out_b = f.trade(b, 100);
    CHECK(out_b == 90);
    CHECK(f.reserve_of(b) == 1100);
    CHECK(f.reserve_of(a) == 910);
}

TEST_CASE("core codec round-trips and rejects unsorted sides") {
    Digest a = sha256(Bytes{'a'});
    Digest b = sha256(Bytes{'b'});
    EdgeState e = EdgeState::open(a, kMaxCreditAmount, 42, b, 1, 0);
    Bytes wire = e.encode_core();
    Decoder dec(wire);
    EdgeState back = EdgeState::decode_core(dec);
    CHECK(dec.done());
    CHECK(back.p_lo == e.p_lo);
    CHECK(back.p_hi == e.p_hi);
    CHECK(back.r_lo == e.r_lo);
    CHECK(back.r_hi == e.r_hi);
    CHECK(back.m_lo == e.m_lo);
    CHECK(back.m_hi == e.m_hi);
    CHECK(edge_hash(back) == edge_hash(e));

    // Swap the endpoint fields in place: decode must refuse.
    Encoder enc;
    enc.put_digest(e.p_hi);
    enc.put_digest(e.p_lo);
    enc.put_u128(e.r_lo);
    enc.put_u128(e.r_hi);
    enc.put_u64(e.m_lo);
    enc.put_u64(e.m_hi);
    Bytes bad = enc.take();
    Decoder dec2(bad);
    CHECK_THROWS_AS(EdgeState::decode_core(dec2), DecodeError);
}

TEST_CASE("signed record verifies signature and membership together") {
    Keypair kp = Keypair::from_seed(sha256(Bytes{'s'}));
    Digest me = address_of(kp.pub);
    Digest peer = sha256(Bytes{'p'});
    EdgeState e = EdgeState::open(me, 500, 1, peer, 700, 1);

    SparseMerkleTree tree;
    tree.insert(e.key(), edge_hash(e));
    tree.insert(sha256(Bytes{'x'}), sha256(Bytes{'y'}));

    SignedEdgeRecord rec;
    rec.root = tree.root();
    rec.m = 1;
    rec.sig = kp.sign(state_digest(rec.root, rec.m));
    rec.proof = tree.prove(e.key());

    CHECK(rec.valid_for(kp.pub, e.key(), edge_hash(e)));

    // Wrong value, wrong key, wrong signer, tampered counter: all rejected.
    CHECK_FALSE(rec.valid_for(kp.pub, e.key(), sha256(Bytes{'z'})));
    CHECK_FALSE(rec.valid_for(kp.pub, sha256(Bytes{'q'}), edge_hash(e)));
    Keypair other = Keypair::from_seed(sha256(Bytes{'t'}));
    CHECK_FALSE(rec.valid_for(other.pub, e.key(), edge_hash(e)));
    SignedEdgeRecord bumped = rec;
    bumped.m = 2;
    CHECK_FALSE(bumped.valid_for(kp.pub, e.key(), edge_hash(e)));

    Bytes wire = rec.encode();
    Decoder dec(wire);
    SignedEdgeRecord back = SignedEdgeRecord::decode(dec);
    CHECK(dec.done());
    CHECK(back.valid_for(kp.pub, e.key(), edge_hash(e)));
}
