#include <doctest.h>

#include <string>

#include "hypersyn/errors.hpp"
#include "hypersyn/exchange.hpp"
#include "hypersyn/sim.hpp"

using namespace hypersyn;

namespace {

std::string triangle_config(std::uint64_t seed, const std::string& extra = "") {
    return R"({
        "seed": )" + std::to_string(seed) + R"(,
        "horizon": 600,
        "sample_every": 100,
        "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2}, {"name": "c", "seed": 3}],
        "edges": [
            {"a": "a", "b": "b", "r_a": "1000000", "r_b": "1000000"},
            {"a": "b", "b": "c", "r_a": "1000000", "r_b": "1000000"},
            {"a": "c", "b": "a", "r_a": "1000000", "r_b": "1000000"}
        ],
        "random_trades": {"start": 10, "every": 3, "count": 40,
                          "price_min": "5", "price_max": "200"})" +
           (extra.empty() ? "" : "," + extra) + R"(
    })";
}

CreditAmount quote_between(const World& w, const std::string& payer, const Digest& to,
                           CreditAmount price) {
    const EdgeState* e = w.node(payer).edge_with(to);
    REQUIRE(e != nullptr);
    return quote_input(e->oriented(w.addr(payer)), price);
}

}  // namespace

TEST_CASE("a triangle config builds three nodes, edges, and files") {
    World w = World::build(ScenarioConfig::parse(triangle_config(7)));
    CHECK(w.names().size() == 3);
    CHECK(w.edge_count() == 3);
    CHECK(w.diameter() == 1);
    for (const std::string& n : w.names()) {
        // Every node published a discovery file; with three replicas in
        // a three-party overlay, everyone holds everyone.
        const HypersynFile* f = w.dht(n).stored(w.addr(n));
        REQUIRE(f != nullptr);
        CHECK(f->valid());
        CHECK(f->peers.size() == 2);
        CHECK(f->root == w.node(n).tree().root());
    }
    MetricsFrame frame = w.snapshot();
    CHECK(frame.edges.size() == 3);
    CHECK(frame.nodes.size() == 3);
    CHECK(frame.payments == 0);
}

TEST_CASE("config validation names the offending field") {
    auto parse_err = [](const std::string& text) {
        try {
            ScenarioConfig::parse(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };

    CHECK(parse_err(R"({"nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 1}]})") ==
          "nodes[1].seed: duplicate");
    CHECK(parse_err(R"({"nodes": [{"name": "a", "seed": 1}, {"name": "a", "seed": 2}]})") ==
          "nodes[1].name: duplicate");
    CHECK(parse_err(R"({"nodes": [{"name": "a", "seed": 1}],
                        "edges": [{"a": "a", "b": "zz", "r_a": "5", "r_b": "5"}]})") ==
          "edges[0].b: unknown node");
    CHECK(parse_err(R"({"network": {"delay_min": 0}})") == "network.delay_min: must be >= 1");
    CHECK(parse_err(R"({"network": {"drop": 1.5}})") == "network.drop: outside [0, 1]");
    CHECK(parse_err("{nonsense").rfind("json:", 0) == 0);
    CHECK(parse_err(R"({"adversaries": [{"role": "ghost", "node": "a", "at": 5}]})")
              .rfind("adversaries[0].role", 0) == 0);

    // A trade over a missing edge surfaces at build, when topology is known.
    ScenarioConfig c = ScenarioConfig::parse(R"({
        "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2}, {"name": "c", "seed": 3}],
        "edges": [{"a": "a", "b": "b", "r_a": "10", "r_b": "10"}],
        "trades": [{"at": 5, "from": "a", "to": "c", "price": "1"}]
    })");
    CHECK_THROWS_WITH_AS(World::build(c), "trades[0]: no edge a-c", ConfigError);
}

TEST_CASE("a seeded random graph hits its exact edge budget") {
    World w = World::build(ScenarioConfig::parse(R"({
        "seed": 11,
        "random_graph": {"count": 40, "degree": 4,
                         "reserve_min": "200000", "reserve_max": "900000"}
    })"));
    CHECK(w.names().size() == 40);
    CHECK(w.edge_count() == 40 * 4 / 2);
    // The ring guarantees one connected component.
    CHECK(w.diameter() > 0);
    CHECK(w.diameter() < 40);
}

TEST_CASE("identical config and seed replay byte-identical metrics") {
    std::string cfg = triangle_config(
        21, R"("network": {"delay_min": 1, "delay_max": 4, "drop": 0.05})");
    World w1 = World::build(ScenarioConfig::parse(cfg));
    World w2 = World::build(ScenarioConfig::parse(cfg));
    w1.run_until(600);
    w2.run_until(600);
    CHECK(w1.metrics_jsonl() == w2.metrics_jsonl());
    CHECK(w1.edges_csv() == w2.edges_csv());
    CHECK(w1.snapshot().to_json() == w2.snapshot().to_json());
    CHECK(!w1.metrics_jsonl().empty());

    // A different seed takes a different path.
    World w3 = World::build(ScenarioConfig::parse(triangle_config(
        22, R"("network": {"delay_min": 1, "delay_max": 4, "drop": 0.05})")));
    w3.run_until(600);
    CHECK(w3.metrics_jsonl() != w1.metrics_jsonl());
}

TEST_CASE("running in stages equals running in one go") {
    std::string cfg = triangle_config(31);
    World w1 = World::build(ScenarioConfig::parse(cfg));
    World w2 = World::build(ScenarioConfig::parse(cfg));
    w1.run_until(150);
    w1.run_until(400);
    w2.run_until(400);
    CHECK(w1.clock() == w2.clock());
    CHECK(w1.metrics_jsonl() == w2.metrics_jsonl());
    CHECK(w1.snapshot().to_json() == w2.snapshot().to_json());
}

TEST_CASE("the worked payment flows through a scenario") {
    World w = World::build(ScenarioConfig::parse(R"({
        "seed": 1,
        "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2}],
        "edges": [{"a": "a", "b": "b", "r_a": "80", "r_b": "125"}],
        "trades": [{"at": 5, "from": "a", "to": "b", "price": "25"}]
    })"));
    w.run_to_quiescence(500);
    CHECK(w.node("a").stats().payments_ok == 1);
    MetricsFrame frame = w.snapshot();
    REQUIRE(frame.edges.size() == 1);
    CHECK(frame.edges[0].r_a == 100);
    CHECK(frame.edges[0].r_b == 100);
    CHECK(frame.payments == 1);
    CHECK(w.metrics_jsonl().find("\"delta_in\":\"20\"") != std::string::npos);
}

TEST_CASE("a fault-free trade loop reaches quiescence with matching replicas") {
    World w = World::build(ScenarioConfig::parse(triangle_config(41)));
    std::uint64_t end = w.run_to_quiescence(5000);
    CHECK(end < 5000);
    REQUIRE(w.quiescent());
    // Every replica equals the peer's actual tree root.
    for (const std::string& n : w.names())
        for (const std::string& m : w.names()) {
            if (n == m || !w.node(n).has_edge(w.addr(m))) continue;
            REQUIRE(w.node(n).replica_of(w.addr(m)) != nullptr);
            CHECK(w.node(n).replica_of(w.addr(m))->root() == w.node(m).tree().root());
        }
    CHECK(w.snapshot().payments > 0);
}

TEST_CASE("lossy links still converge through announce-driven repair") {
    World w = World::build(ScenarioConfig::parse(triangle_config(
        51, R"("network": {"delay_min": 1, "delay_max": 3, "drop": 0.1})")));
    w.run_to_quiescence(20000);
    REQUIRE(w.quiescent());
    for (const std::string& n : w.names())
        for (const std::string& m : w.names()) {
            if (n == m || !w.node(n).has_edge(w.addr(m))) continue;
            CHECK(w.node(n).replica_of(w.addr(m))->root() == w.node(m).tree().root());
        }
}

TEST_CASE("a partition stalls payments and heals afterwards") {
    World w = World::build(ScenarioConfig::parse(R"({
        "seed": 61,
        "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2}],
        "edges": [{"a": "a", "b": "b", "r_a": "100000", "r_b": "100000"}],
        "trades": [{"at": 10, "from": "a", "to": "b", "price": "50"},
                   {"at": 300, "from": "a", "to": "b", "price": "50"}],
        "network": {"partitions": [{"from": 5, "until": 150, "side": ["a"]}]}
    })"));
    w.run_to_quiescence(3000);
    // The first payment died in the dark; the second went through.
    CHECK(w.node("a").stats().payments_aborted == 1);
    CHECK(w.node("a").stats().payments_ok == 1);
    CHECK(w.node("b").stats().payments_received == 1);
    CHECK(w.node("a").replica_of(w.addr("b"))->root() == w.node("b").tree().root());
}

TEST_CASE("an equivocator is contained within the broadcast radius") {
    World w = World::build(ScenarioConfig::parse(R"({
        "seed": 71,
        "horizon": 400,
        "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2},
                  {"name": "c", "seed": 3}, {"name": "d", "seed": 4}],
        "edges": [
            {"a": "a", "b": "b", "r_a": "1000000", "r_b": "1000000"},
            {"a": "b", "b": "c", "r_a": "1000000", "r_b": "1000000"},
            {"a": "c", "b": "d", "r_a": "1000000", "r_b": "1000000"},
            {"a": "d", "b": "a", "r_a": "1000000", "r_b": "1000000"},
            {"a": "a", "b": "c", "r_a": "1000000", "r_b": "1000000"}
        ],
        "trades": [{"at": 10, "from": "c", "to": "b", "price": "100"}],
        "adversaries": [{"role": "equivocator", "node": "c", "at": 100, "targets": ["a"]}]
    })"));
    w.run_until(400);

    const AdversaryOutcome& out = w.adversary_outcomes().at("c");
    REQUIRE(out.first_detection.has_value());
    REQUIRE(out.contained_at.has_value());
    CHECK(*out.first_detection >= 100);
    // Diameter 2, delay 1: the proof floods everyone within three rounds.
    CHECK(*out.contained_at - *out.first_detection <= (w.diameter() + 1) * 1);
    for (const char* n : {"a", "b", "d"}) {
        CHECK(w.node(n).banned(w.addr("c")));
        CHECK(!w.node(n).has_edge(w.addr("c")));
    }
    CHECK(w.snapshot().misbehavior_events > 0);
    CHECK(w.metrics_jsonl().find("\"type\":\"adversary\"") != std::string::npos);
}

TEST_CASE("a premature deleter is punished by the surviving witness") {
    World w = World::build(ScenarioConfig::parse(R"({
        "seed": 81,
        "horizon": 600,
        "nodes": [{"name": "v", "seed": 1}, {"name": "m", "seed": 2}, {"name": "w", "seed": 3}],
        "edges": [
            {"a": "v", "b": "m", "r_a": "1000000", "r_b": "1000000"},
            {"a": "v", "b": "w", "r_a": "1000000", "r_b": "1000000"},
            {"a": "m", "b": "w", "r_a": "1000000", "r_b": "1000000"}
        ],
        "trades": [
            {"at": 10, "from": "v", "to": "m", "price": "100"},
            {"at": 20, "from": "v", "to": "m", "price": "100"},
            {"at": 30, "from": "v", "to": "w", "price": "100"},
            {"at": 40, "from": "v", "to": "w", "price": "100"},
            {"at": 50, "from": "v", "to": "w", "price": "100"},
            {"at": 60, "from": "v", "to": "w", "price": "100"},
            {"at": 70, "from": "v", "to": "w", "price": "100"},
            {"at": 80, "from": "v", "to": "w", "price": "100"},
            {"at": 90, "from": "v", "to": "w", "price": "100"},
            {"at": 140, "from": "w", "to": "m", "price": "100"}
        ],
        "adversaries": [{"role": "malicious-deleter", "node": "m", "at": 150}]
    })"));
    w.run_until(600);

    const AdversaryOutcome& out = w.adversary_outcomes().at("m");
    REQUIRE(out.first_detection.has_value());
    REQUIRE(out.contained_at.has_value());
    CHECK(w.node("m").stats().edges_pruned >= 1);
    for (const char* n : {"v", "w"}) {
        CHECK(w.node(n).banned(w.addr("m")));
        CHECK(!w.node(n).has_edge(w.addr("m")));
    }
    CHECK(w.node("v").has_edge(w.addr("w")));  // honest pair survives
    CHECK(w.metrics_jsonl().find("\"type\":\"proof-emitted\"") != std::string::npos);
}

TEST_CASE("a stale file replay never wins over the newer copy") {
    World w = World::build(ScenarioConfig::parse(triangle_config(
        91, R"("adversaries": [{"role": "stale-file-replayer", "node": "a", "at": 300}])")));
    w.run_until(500);

    std::uint64_t stale = 0;
    for (const std::string& n : w.names()) stale += w.dht(n).stats().stores_stale;
    CHECK(stale >= 1);

    // A fresh lookup still returns the newest counter the owner signed.
    w.dht("b").lookup(w.addr("a"));
    w.run_until(520);
    REQUIRE(!w.dht("b").results().empty());
    const DhtResult& r = w.dht("b").results().back();
    REQUIRE(r.ok);
    CHECK(r.file->m == w.node("a").counter());
    CHECK(w.metrics_jsonl().find("\"type\":\"dht-stale\"") != std::string::npos);
}

TEST_CASE("a forged accusation moves no one") {
    World w = World::build(ScenarioConfig::parse(triangle_config(
        101,
        R"("adversaries": [{"role": "proof-forger", "node": "c", "at": 200, "targets": ["a"]}])")));
    w.run_until(400);

    // Nobody believes the forgery: the accused keeps every edge.
    CHECK(!w.node("b").banned(w.addr("a")));
    CHECK(!w.node("c").banned(w.addr("a")));
    CHECK(w.node("b").has_edge(w.addr("a")));
    CHECK(w.node("c").has_edge(w.addr("a")));
    CHECK(w.node("a").stats().edges_dropped == 0);
    const AdversaryOutcome& out = w.adversary_outcomes().at("c");
    CHECK(!out.first_detection.has_value());
}

TEST_CASE("an empty world is a valid fixed point") {
    World w = World::build(ScenarioConfig::parse(R"({"seed": 3})"));
    CHECK(w.names().empty());
    CHECK(w.quiescent());
    w.run_until(10);
    MetricsFrame frame = w.snapshot();
    CHECK(frame.edges.empty());
    CHECK(frame.nodes.empty());
    CHECK(frame.payments == 0);
    CHECK(w.metrics_jsonl().empty());
}

TEST_CASE("one-way consumption drifts without arbitrage and holds with it") {
    auto cycle_config = [](bool with_arbitrage) {
        std::string trades;
        for (int k = 0; k < 60; ++k) {
            std::uint64_t at = 10 + std::uint64_t(k) * 30;
            auto one = [&](const std::string& from, const std::string& to) {
                if (!trades.empty()) trades += ",";
                trades += R"({"at": )" + std::to_string(at) + R"(, "from": ")" + from +
                          R"(", "to": ")" + to + R"(", "price": "40", "arbitrage": )" +
                          (with_arbitrage ? "true" : "false") + "}";
                at += 10;  // circular payments at one tick would starve each other
            };
            one("a", "b");
            one("b", "c");
            one("c", "a");
        }
        return R"({
            "seed": 5,
            "nodes": [{"name": "a", "seed": 1}, {"name": "b", "seed": 2}, {"name": "c", "seed": 3}],
            "edges": [
                {"a": "a", "b": "b", "r_a": "4000", "r_b": "4000"},
                {"a": "b", "b": "c", "r_a": "4000", "r_b": "4000"},
                {"a": "c", "b": "a", "r_a": "4000", "r_b": "4000"}
            ],
            "trades": [)" + trades + R"(]
        })";
    };

    World drift = World::build(ScenarioConfig::parse(cycle_config(false)));
    drift.run_to_quiescence(20000);
    World held = World::build(ScenarioConfig::parse(cycle_config(true)));
    held.run_to_quiescence(20000);

    CreditAmount q0 = 40 + 1;  // balanced 4000/4000 quote for price 40, ceil
    CreditAmount q_drift = quote_between(drift, "a", drift.addr("b"), 40);
    CreditAmount q_held = quote_between(held, "a", held.addr("b"), 40);
    CHECK(q_drift > q0);
    CHECK(q_held < q_drift);
    CHECK(held.snapshot().arbitrations > 0);
    CHECK(held.snapshot().arbitrage_profit > 0);
}
