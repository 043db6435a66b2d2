#include <doctest.h>

#include <functional>
#include <map>

#include "hypersyn/arbitrage.hpp"
#include "hypersyn/errors.hpp"
#include "hypersyn/node.hpp"

using namespace hypersyn;

namespace {

Keypair kp(int seed) {
    Digest d;
    d.bytes[31] = std::uint8_t(seed);
    d.bytes[0] = 0x9c;
    return Keypair::from_seed(d);
}

// Immediate-delivery network: pump every outbox until quiescent.
// Delivery order is per-link FIFO, which the sync protocol relies on.
struct LoopNet {
    std::map<Digest, Node*> nodes;
    // Return true to swallow the message.
    std::function<bool(const Envelope&)> drop;
    std::uint64_t now = 0;

    void add(Node& n) { nodes[n.addr()] = &n; }

    void deliver() {
        bool moved = true;
        while (moved) {
            moved = false;
            for (auto& [addr, n] : nodes) {
                for (Envelope& env : n->drain_outbox()) {
                    if (drop && drop(env)) continue;
                    auto it = nodes.find(env.to);
                    if (it == nodes.end()) continue;
                    it->second->handle(env);
                    moved = true;
                }
            }
        }
    }

    void tick() {
        ++now;
        for (auto& [addr, n] : nodes) n->on_tick(now);
        deliver();
    }

    void run(std::uint64_t ticks) {
        for (std::uint64_t i = 0; i < ticks; ++i) tick();
    }
};

void befriend(Node& a, Node& b) {
    a.learn_peer(b.addr(), b.pub());
    b.learn_peer(a.addr(), a.pub());
}

void open(LoopNet& net, Node& a, Node& b, CreditAmount r_a, CreditAmount r_b) {
    befriend(a, b);
    a.open_edge(b.addr(), r_a, r_b);
    net.deliver();
    REQUIRE(a.has_edge(b.addr()));
    REQUIRE(b.has_edge(a.addr()));
}

bool edges_equal(const Node& a, const Node& b) {
    const EdgeState* ea = a.edge_with(b.addr());
    const EdgeState* eb = b.edge_with(a.addr());
    return ea && eb && edge_hash(*ea) == edge_hash(*eb);
}

const OpResult& result_of(const Node& n, std::uint64_t op) {
    for (const auto& r : n.results())
        if (r.op == op) return r;
    static OpResult missing;
    return missing;
}

}  // namespace

TEST_CASE("negotiated edge open settles on both sides") {
    Node a(kp(1)), b(kp(2));
    LoopNet net;
    net.add(a);
    net.add(b);
    befriend(a, b);
    std::uint64_t op = a.open_edge(b.addr(), 1000, 2000);
    net.deliver();

    REQUIRE(a.has_edge(b.addr()));
    REQUIRE(b.has_edge(a.addr()));
    const EdgeState& ea = *a.edge_with(b.addr());
    const EdgeState& eb = *b.edge_with(a.addr());
    CHECK(edge_hash(ea) == edge_hash(eb));
    CHECK(ea.reserve_of(a.addr()) == 1000);
    CHECK(ea.reserve_of(b.addr()) == 2000);
    CHECK(ea.records_valid(a.addr() < b.addr() ? a.pub() : b.pub(),
                           a.addr() < b.addr() ? b.pub() : a.pub()));
    CHECK(result_of(a, op).ok);
    CHECK(a.tree().contains(ea.key()));
    CHECK(b.tree().contains(ea.key()));
    CHECK_FALSE(a.busy());
    CHECK_FALSE(b.busy());

    // Counters moved off zero and the roots are signed at them.
    CHECK(a.counter() >= 1);
    CHECK(b.counter() >= 1);

    // Both replicas converge once announces flow.
    net.run(2);
    REQUIRE(a.replica_of(b.addr()) != nullptr);
    CHECK(a.replica_of(b.addr())->root() == b.tree().root());
    CHECK(b.replica_of(a.addr())->root() == a.tree().root());
}

TEST_CASE("payment moves reserves exactly like the quoted trade") {
    Node a(kp(3)), b(kp(4));
    LoopNet net;
    net.add(a);
    net.add(b);
    open(net, a, b, 80, 125);

    std::uint64_t op = a.pay(b.addr(), 25);
    net.deliver();

    const OpResult& r = result_of(a, op);
    REQUIRE(r.ok);
    CHECK(r.delta_in == 20);  // ceil(80*25 / (125-25))
    const EdgeState& ea = *a.edge_with(b.addr());
    CHECK(ea.reserve_of(a.addr()) == 100);
    CHECK(ea.reserve_of(b.addr()) == 100);
    CHECK(edges_equal(a, b));
    CHECK(a.stats().payments_ok == 1);
    CHECK(b.stats().payments_received == 1);
    CHECK(a.tree().root() != Digest{});
    // Conservation: the reserve product never decreased.
    CHECK(CreditAmount(100) * 100 >= CreditAmount(80) * 125);
}

TEST_CASE("zero price payment is a no-op") {
    Node a(kp(5)), b(kp(6));
    LoopNet net;
    net.add(a);
    net.add(b);
    open(net, a, b, 500, 500);
    Digest root_before = a.tree().root();
    std::uint64_t sent_before = a.stats().messages_sent;

    std::uint64_t op = a.pay(b.addr(), 0);
    net.deliver();

    CHECK(result_of(a, op).ok);
    CHECK(result_of(a, op).detail == "no-op");
    CHECK(a.tree().root() == root_before);
    CHECK(a.stats().messages_sent == sent_before);
}

TEST_CASE("aborted payment leaves the edge byte-identical") {
    Node a(kp(7)), b(kp(8));
    LoopNet net;
    net.add(a);
    net.add(b);
    open(net, a, b, 400, 400);

    Bytes before_a = a.edge_with(b.addr())->encode_core();
    Bytes before_b = b.edge_with(a.addr())->encode_core();
    std::uint64_t m_a = a.counter();
    std::uint64_t m_b = b.counter();

    // The acceptance never arrives; the payer times out and renounces.
    net.drop = [&](const Envelope& env) {
        return message_name(env.msg) == std::string("payment-accept");
    };
    std::uint64_t op = a.pay(b.addr(), 50);
    net.deliver();
    CHECK(a.busy());
    net.run(a.params().op_timeout + 2);
    net.drop = nullptr;
    net.run(2);

    CHECK_FALSE(a.busy());
    CHECK_FALSE(b.busy());
    CHECK_FALSE(result_of(a, op).ok);
    CHECK(a.stats().payments_aborted == 1);
    CHECK(a.edge_with(b.addr())->encode_core() == before_a);
    CHECK(b.edge_with(a.addr())->encode_core() == before_b);
    // Burned counters never reappear: the next commit is strictly newer.
    std::uint64_t op2 = a.pay(b.addr(), 50);
    net.deliver();
    CHECK(result_of(a, op2).ok);
    CHECK(a.counter() > m_a);
    CHECK(b.counter() > m_b);
    CHECK(edges_equal(a, b));
}

TEST_CASE("lost commit heals through gossip adoption") {
    Node a(kp(9)), b(kp(10));
    LoopNet net;
    net.add(a);
    net.add(b);
    open(net, a, b, 300, 300);

    bool dropped = false;
    net.drop = [&](const Envelope& env) {
        if (!dropped && message_name(env.msg) == std::string("payment-commit")) {
            dropped = true;
            return true;
        }
        return false;
    };
    std::uint64_t op = a.pay(b.addr(), 30);
    net.deliver();
    net.drop = nullptr;
    net.run(3);

    // The payer committed; the receiver adopted the fully endorsed
    // state carried by gossip instead of the lost commit message.
    CHECK(dropped);
    CHECK(result_of(a, op).ok);
    CHECK(edges_equal(a, b));
    CHECK(b.stats().payments_received == 1);
    CHECK_FALSE(a.busy());
    CHECK_FALSE(b.busy());
}

TEST_CASE("payments serialize locally and refuse remotely while busy") {
    Node a(kp(11)), b(kp(12)), c(kp(13));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    open(net, a, b, 1000, 1000);
    open(net, b, c, 1000, 1000);

    // Local queueing: both payments land in order.
    std::uint64_t op1 = a.pay(b.addr(), 10);
    std::uint64_t op2 = a.pay(b.addr(), 10);
    net.deliver();
    CHECK(result_of(a, op1).ok);
    CHECK(result_of(a, op2).ok);
    CHECK(a.stats().payments_ok == 2);

    // Remote refusal: keep b pending by stalling c's acceptance.
    net.drop = [&](const Envelope& env) {
        return env.from == c.addr() && message_name(env.msg) == std::string("payment-accept");
    };
    b.pay(c.addr(), 10);
    net.deliver();
    REQUIRE(b.busy());
    net.drop = nullptr;

    std::uint64_t op3 = a.pay(b.addr(), 10);
    net.deliver();
    CHECK_FALSE(result_of(a, op3).ok);
    CHECK(result_of(a, op3).detail == "refused");
}

TEST_CASE("counters are strictly monotone across operations") {
    Node a(kp(14)), b(kp(15));
    LoopNet net;
    net.add(a);
    net.add(b);
    open(net, a, b, 10000, 10000);

    std::uint64_t last_a = a.counter();
    std::uint64_t last_edge_a = a.edge_with(b.addr())->counter_of(a.addr());
    for (int i = 0; i < 5; ++i) {
        a.pay(b.addr(), 100);
        net.deliver();
        CHECK(a.counter() > last_a);
        std::uint64_t edge_a = a.edge_with(b.addr())->counter_of(a.addr());
        CHECK(edge_a > last_edge_a);
        CHECK(edge_a <= a.counter());
        last_a = a.counter();
        last_edge_a = edge_a;
    }
    // Signed tree counter covers every edge counter it stores.
    const EdgeState& e = *b.edge_with(a.addr());
    CHECK(e.counter_of(b.addr()) <= b.counter());
    CHECK(e.counter_of(a.addr()) <= a.counter());
}

TEST_CASE("one changed edge syncs as exactly one leaf") {
    Node a(kp(16)), b(kp(17)), c(kp(18));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    open(net, a, b, 1000, 1000);
    open(net, a, c, 1000, 1000);
    open(net, b, c, 1000, 1000);
    net.run(30);  // past the sync backoff so all replicas settle
    REQUIRE(a.replica_of(b.addr())->root() == b.tree().root());
    REQUIRE(a.replica_of(c.addr())->root() == c.tree().root());

    std::uint64_t fetched_before = a.stats().leaves_fetched;
    b.pay(c.addr(), 100);
    net.deliver();
    net.run(30);

    // a's replicas of b and of c each re-fetched the single changed
    // leaf; nothing else moved.
    CHECK(a.replica_of(b.addr())->root() == b.tree().root());
    CHECK(a.replica_of(c.addr())->root() == c.tree().root());
    CHECK(a.stats().leaves_fetched - fetched_before == 2);

    // The changed edge is visible through the replica at the new value.
    Digest key = edge_key(b.addr(), c.addr());
    auto via_replica = a.replica_of(b.addr())->get(key);
    REQUIRE(via_replica.has_value());
    CHECK(*via_replica == edge_hash(*b.edge_with(c.addr())));
}

TEST_CASE("mutual arbitrage executes one cycle and converges all corners") {
    Node a(kp(19)), b(kp(20)), c(kp(21));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    // One skewed edge: a's credit is scarce against b, so the forward
    // cycle a->b->c->a profits and deepens a's side of that edge.
    open(net, a, b, 1000000, 2000000);
    open(net, b, c, 1000000, 1000000);
    open(net, c, a, 1000000, 1000000);
    net.run(2);

    // The triangle as the counterparty sees it must have a forward plan.
    TriangleView view;
    view.node_i = a.addr();
    view.node_j = b.addr();
    view.node_k = c.addr();
    view.r_ij = 1000000;
    view.r_ji = 2000000;
    view.r_jk = 1000000;
    view.r_kj = 1000000;
    view.r_ki = 1000000;
    view.r_ik = 1000000;
    auto plan = best_cycle(view, a.addr());
    REQUIRE(plan.has_value());
    REQUIRE(plan->direction == CycleDirection::Forward);

    double value_before = double(b.edge_with(a.addr())->reserve_of(a.addr())) /
                          double(b.edge_with(a.addr())->reserve_of(b.addr()));
    std::uint64_t op = b.request_arbitrage(a.addr());
    net.deliver();
    net.run(2);

    CHECK(result_of(b, op).ok);
    CHECK(a.stats().cycles_executed == 1);
    CHECK(a.stats().cycle_profit == CreditAmount(plan->expected_profit));
    CHECK(edges_equal(a, b));
    CHECK(edges_equal(b, c));
    CHECK(edges_equal(c, a));
    CHECK_FALSE(a.busy());
    CHECK_FALSE(b.busy());
    CHECK_FALSE(c.busy());

    // The requester's credit got more valuable on the shared edge.
    double value_after = double(b.edge_with(a.addr())->reserve_of(a.addr())) /
                         double(b.edge_with(a.addr())->reserve_of(b.addr()));
    CHECK(value_after > value_before);

    // Each hop applied the planned amounts.
    const EdgeState& ab = *a.edge_with(b.addr());
    CHECK(ab.reserve_of(a.addr()) == 1000000 + plan->delta_in);
    CHECK(ab.reserve_of(b.addr()) == 2000000 - plan->hop_amounts[0]);
    const EdgeState& bc = *b.edge_with(c.addr());
    CHECK(bc.reserve_of(b.addr()) == 1000000 + plan->hop_amounts[0]);
    CHECK(bc.reserve_of(c.addr()) == 1000000 - plan->hop_amounts[1]);
    const EdgeState& ca = *c.edge_with(a.addr());
    CHECK(ca.reserve_of(c.addr()) == 1000000 + plan->hop_amounts[1]);
    CHECK(ca.reserve_of(a.addr()) == 1000000 - plan->hop_amounts[2]);
    CHECK(plan->hop_amounts[2] > plan->delta_in);
}

TEST_CASE("payment with arbitrage runs the cycle before quoting") {
    Node a(kp(22)), b(kp(23)), c(kp(24));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    open(net, a, b, 1000000, 2000000);
    open(net, b, c, 1000000, 1000000);
    open(net, c, a, 1000000, 1000000);
    net.run(2);

    CreditAmount plain_quote = quote_input(b.edge_with(a.addr())->oriented(b.addr()), 5000);
    std::uint64_t op = b.pay(a.addr(), 5000, true);
    net.deliver();
    net.run(2);

    const OpResult& r = result_of(b, op);
    REQUIRE(r.ok);
    CHECK(a.stats().cycles_executed == 1);
    CHECK(b.stats().payments_ok == 1);
    // The cycle moved the rate in the payer's favor.
    CHECK(r.delta_in < plain_quote);
    CHECK(edges_equal(a, b));
    CHECK(edges_equal(b, c));
    CHECK(edges_equal(c, a));
}

TEST_CASE("no profitable cycle degrades to a plain payment") {
    Node a(kp(25)), b(kp(26)), c(kp(27));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    open(net, a, b, 1000, 1000);
    open(net, b, c, 1000, 1000);
    open(net, c, a, 1000, 1000);
    net.run(2);

    std::uint64_t op = b.pay(a.addr(), 50, true);
    net.deliver();
    net.run(2);

    CHECK(result_of(b, op).ok);
    CHECK(a.stats().cycles_executed == 0);
    CHECK(a.stats().cycles_none == 1);
    CHECK(edges_equal(a, b));
}

TEST_CASE("equivocation is proven, punished everywhere, and deduplicated") {
    Keypair evil_keys = kp(28);
    Node a(kp(29)), b(kp(30)), evil(evil_keys);
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(evil);
    open(net, a, b, 1000, 1000);
    open(net, a, evil, 1000, 1000);
    open(net, b, evil, 1000, 1000);
    net.run(2);

    // The adversary signs a second, different root at its current counter.
    Digest fake_root;
    fake_root.bytes[0] = 0xde;
    fake_root.bytes[1] = 0xad;
    std::uint64_t m = evil.counter();
    REQUIRE(fake_root != evil.tree().root());
    Signature sig = evil_keys.sign(state_digest(fake_root, m));
    a.handle(Envelope{evil.addr(), a.addr(), StateAnnounce{fake_root, m, sig}});
    net.deliver();
    net.run(1);

    CHECK(a.banned(evil.addr()));
    CHECK(b.banned(evil.addr()));
    CHECK_FALSE(a.has_edge(evil.addr()));
    CHECK_FALSE(b.has_edge(evil.addr()));
    CHECK(a.has_edge(b.addr()));
    CHECK(a.stats().proofs_emitted == 1);
    CHECK(b.stats().proofs_forwarded == 1);
    CHECK(a.stats().edges_dropped == 1);
    CHECK(b.stats().edges_dropped == 1);

    // Replaying the same evidence changes nothing.
    std::uint64_t dropped_before = a.stats().edges_dropped;
    a.handle(Envelope{evil.addr(), a.addr(), StateAnnounce{fake_root, m, sig}});
    net.deliver();
    CHECK(a.stats().edges_dropped == dropped_before);

    // Honest nodes keep operating with each other afterwards.
    std::uint64_t op = a.pay(b.addr(), 10);
    net.deliver();
    CHECK(result_of(a, op).ok);
}

TEST_CASE("premature deletion is detected from the replica diff") {
    ProtocolParams honest;
    ProtocolParams rogue;
    rogue.v = 0;                  // deletes without aging the edge out
    rogue.unreachable_after = 2;  // and barely waits
    Node victim(kp(31), honest), deleter(kp(32), rogue), witness(kp(33), honest);
    LoopNet net;
    net.add(victim);
    net.add(deleter);
    net.add(witness);
    open(net, victim, deleter, 1000, 1000);
    open(net, victim, witness, 1000, 1000);
    net.run(2);

    // Counters move on the shared edge; the witness holds a fresh
    // mirror of it from the victim's gossip.
    victim.pay(deleter.addr(), 10);
    net.deliver();
    deleter.pay(victim.addr(), 5);
    net.deliver();
    REQUIRE(edges_equal(victim, deleter));
    // The victim stays active elsewhere, then falls silent toward the
    // deleter. Its announced counter now leads the shared edge.
    victim.pay(witness.addr(), 7);
    net.deliver();
    // The deleter needs a surviving edge for its post-deletion state to
    // reach anyone at all; a payment on it keeps it fully fresh so even
    // the rogue staleness bound of zero leaves it alone.
    open(net, deleter, witness, 1000, 1000);
    deleter.pay(witness.addr(), 1);
    net.deliver();
    net.run(2);

    // The deleter drops the edge while the counter gap is tiny.
    net.now += 10;
    auto pruned = deleter.prune_stale(net.now);
    REQUIRE(pruned == std::vector<Digest>{victim.addr()});
    net.deliver();
    net.run(30);

    // The witness's replica of the deleter lost a leaf it holds a
    // freshly endorsed mirror for; the gap is far below the honest
    // staleness bound, so the deletion is provably malicious.
    CHECK(witness.stats().proofs_emitted == 1);
    CHECK(witness.banned(deleter.addr()));
    CHECK_FALSE(witness.has_edge(deleter.addr()));
    // The proof travelled to the victim, which shuns the deleter too.
    CHECK(victim.banned(deleter.addr()));
    CHECK_FALSE(victim.has_edge(deleter.addr()));
    CHECK(victim.has_edge(witness.addr()));
    CHECK(victim.stats().proofs_forwarded == 1);
}

TEST_CASE("aged-out pruning is not punishable") {
    ProtocolParams p;
    p.v = 4;
    p.unreachable_after = 10;
    Node keeper(kp(34), p), quiet(kp(35), p), extra(kp(36), p);
    LoopNet net;
    net.add(keeper);
    net.add(quiet);
    net.add(extra);
    open(net, keeper, quiet, 1000, 1000);
    open(net, keeper, extra, 1000, 1000);
    open(net, quiet, extra, 1000, 1000);
    net.run(2);

    // The quiet peer stays busy elsewhere: its announced counter races
    // past the keeper edge without ever touching it.
    for (int i = 0; i < 6; ++i) {
        quiet.pay(extra.addr(), 5);
        net.deliver();
    }
    const PeerMeta* meta = keeper.meta_of(quiet.addr());
    REQUIRE(meta != nullptr);
    REQUIRE(meta->m - keeper.edge_with(quiet.addr())->counter_of(quiet.addr()) > p.v);
    // The other edge stays fresh so only the quiet one is prunable.
    extra.pay(keeper.addr(), 5);
    net.deliver();

    // Long radio silence, then the keeper prunes.
    net.now += 100;
    auto pruned = keeper.prune_stale(net.now);
    REQUIRE(pruned == std::vector<Digest>{quiet.addr()});
    CHECK_FALSE(keeper.has_edge(quiet.addr()));
    CHECK(keeper.has_edge(extra.addr()));
    CHECK(keeper.stats().edges_pruned == 1);
    net.deliver();
    net.run(30);

    // The deletion commit jumped the counter past the staleness bound,
    // so observers find the gap aged out and nobody is punished.
    CHECK_FALSE(extra.banned(keeper.addr()));
    CHECK(extra.stats().proofs_emitted == 0);
    CHECK_FALSE(quiet.banned(keeper.addr()));
    CHECK(quiet.stats().proofs_emitted == 0);
}

TEST_CASE("edge opened through a common peer matches the implied rate") {
    Node a(kp(37)), b(kp(38)), c(kp(39));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    // Both parties trade with c at skewed rates; the new edge must
    // open at the rate the triangle implies rather than 1:1.
    open(net, a, c, 2000000, 1000000);
    open(net, b, c, 1000000, 1000000);
    // Touch both edges so c's gossip hands each endpoint a current
    // mirror of the far one.
    c.pay(a.addr(), 1);
    net.deliver();
    c.pay(b.addr(), 1);
    net.deliver();
    net.run(2);
    befriend(a, b);

    std::uint64_t op = a.open_edge_common(b.addr(), c.addr());
    net.deliver();
    net.run(2);

    REQUIRE(result_of(a, op).ok);
    REQUIRE(a.has_edge(b.addr()));
    REQUIRE(b.has_edge(a.addr()));
    CHECK(edges_equal(a, b));
    const EdgeState& e = *a.edge_with(b.addr());
    // a's credit trades below par against c, so the implied opening
    // rate gives a's side more units than b's.
    CHECK(e.reserve_of(a.addr()) > e.reserve_of(b.addr()));
    CHECK(e.reserve_of(a.addr()) != a.params().default_reserve);
}

TEST_CASE("replicas converge on the signed root after every operation") {
    Node a(kp(40)), b(kp(41)), c(kp(42));
    LoopNet net;
    net.add(a);
    net.add(b);
    net.add(c);
    open(net, a, b, 5000, 5000);
    open(net, b, c, 5000, 5000);
    open(net, a, c, 5000, 5000);
    net.run(2);

    a.pay(b.addr(), 100);
    net.deliver();
    b.pay(c.addr(), 200);
    net.deliver();
    c.pay(a.addr(), 300);
    net.deliver();
    net.run(30);

    for (Node* n : {&a, &b, &c}) {
        for (Node* peer : {&a, &b, &c}) {
            if (n == peer) continue;
            REQUIRE(n->replica_of(peer->addr()) != nullptr);
            CHECK(n->replica_of(peer->addr())->root() == peer->tree().root());
        }
        CHECK(n->idle());
    }
}
