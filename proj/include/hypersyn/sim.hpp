#pragma once

// Deterministic discrete-event simulator. A World hosts credit nodes
// and their DHT participants over a virtual network with configurable
// delay, loss, and partitions; identical (config, seed) pairs replay
// to byte-identical metrics. Time is an unsigned tick counter and all
// randomness flows from one master seed through labeled substreams.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hypersyn/dht.hpp"
#include "hypersyn/node.hpp"

namespace hypersyn {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t u64() { return gen_(); }
    // Uniform in [lo, hi], inclusive on both ends.
    std::uint64_t range(std::uint64_t lo, std::uint64_t hi);
    double unit();  // [0, 1)
    // Independent child stream; same (seed, salt) gives the same stream
    // no matter how much the parent has been consumed.
    Rng substream(std::uint64_t salt) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

// --- scenario configuration ---

struct NodeSpec {
    std::string name;
    std::uint64_t seed = 0;
};

struct EdgeSpec {
    std::string a, b;
    CreditAmount r_a = 0, r_b = 0;
    std::string via;  // when set, open b through this common peer
};

struct RandomGraphSpec {
    std::size_t count = 0;
    std::size_t degree = 0;  // count*degree/2 edges, exact
    CreditAmount reserve_min = 0, reserve_max = 0;
    std::string name_prefix = "n";
    std::uint64_t seed_base = 1000;
};

struct TradeSpec {
    std::uint64_t at = 0;
    std::string from, to;
    CreditAmount price = 0;
    bool arbitrage = false;
};

struct RandomTradesSpec {
    std::uint64_t start = 0;
    std::uint64_t every = 1;
    std::uint64_t count = 0;
    CreditAmount price_min = 1, price_max = 1;
    bool arbitrage = false;
};

struct ArbitrageSpec {
    std::uint64_t every = 0;  // 0 disables the periodic schedule
    std::vector<std::pair<std::string, std::string>> pairs;  // defaults to all edges
};

struct PartitionSpec {
    std::uint64_t from = 0, until = 0;
    std::set<std::string> side;  // messages crossing this cut are lost
};

struct NetworkSpec {
    std::uint64_t delay_min = 1, delay_max = 1;
    double drop = 0.0;
    std::vector<PartitionSpec> partitions;
};

struct AdversarySpec {
    std::string role;  // equivocator | malicious-deleter | stale-file-replayer | proof-forger
    std::string node;
    std::uint64_t at = 0;
    std::vector<std::string> targets;
};

struct DhtSpec {
    bool enabled = true;
    std::uint64_t lookup_every = 0;  // periodic random lookups, 0 = off
};

struct ScenarioConfig {
    std::uint64_t seed = 0;
    std::uint64_t horizon = 0;
    std::uint64_t sample_every = 0;  // 0 = no CSV sampling
    std::vector<NodeSpec> nodes;
    std::optional<RandomGraphSpec> random_graph;
    std::vector<EdgeSpec> edges;
    std::vector<TradeSpec> trades;
    std::optional<RandomTradesSpec> random_trades;
    ArbitrageSpec arbitrage;
    NetworkSpec network;
    std::vector<AdversarySpec> adversaries;
    DhtSpec dht;
    ProtocolParams node_params;

    // Throws ConfigError naming the offending field.
    void validate() const;
    static ScenarioConfig parse(const std::string& json_text);
    static ScenarioConfig load(const std::string& path);
};

// --- metrics ---

struct EdgeMetric {
    std::string a, b;  // lower address first
    std::string key_hex;
    CreditAmount r_a = 0, r_b = 0;
    double ratio = 0.0;  // r_a / r_b
};

struct NodeMetric {
    std::string name;
    Digest root{};
    std::uint64_t counter = 0;
    NodeStats stats;
};

struct MetricsFrame {
    std::uint64_t tick = 0;
    std::vector<EdgeMetric> edges;
    std::vector<NodeMetric> nodes;
    std::map<std::string, std::uint64_t> messages_by_type;
    std::uint64_t payments = 0;
    std::uint64_t arbitrations = 0;
    std::uint64_t misbehavior_events = 0;
    CreditAmount arbitrage_volume = 0;
    CreditAmount arbitrage_profit = 0;

    std::string to_json() const;
};

struct AdversaryOutcome {
    Digest addr{};
    std::optional<std::uint64_t> first_detection;  // first honest proof
    std::optional<std::uint64_t> contained_at;     // last honest edge dropped
};

// --- world ---

class World {
public:
    static World build(const ScenarioConfig& cfg);

    void run_until(std::uint64_t until);
    // Ticks until quiescent or `limit`; returns the final clock.
    std::uint64_t run_to_quiescence(std::uint64_t limit);
    bool quiescent() const;
    std::uint64_t clock() const { return clock_; }

    const std::vector<std::string>& names() const { return names_; }
    const Digest& addr(const std::string& name) const;
    Node& node(const std::string& name);
    const Node& node(const std::string& name) const;
    DhtParticipant& dht(const std::string& name);
    std::size_t edge_count() const;
    // Longest shortest path over the configured topology.
    std::size_t diameter() const;

    MetricsFrame snapshot() const;
    const std::string& metrics_jsonl() const { return jsonl_; }
    const std::string& edges_csv() const { return csv_; }
    const std::map<std::string, AdversaryOutcome>& adversary_outcomes() const {
        return outcomes_;
    }

private:
    struct Actor {
        std::string name;
        Keypair keys;
        std::unique_ptr<Node> node;
        std::unique_ptr<DhtParticipant> dht;
        std::size_t results_seen = 0;
        std::size_t dht_results_seen = 0;
        NodeStats last_stats;
        DhtStats last_dht_stats;
        Digest published_root{};
        bool adversary = false;
    };

    struct Action {
        enum class Kind { Trade, Arbitrage } kind = Kind::Trade;
        std::uint64_t at = 0;
        Digest from{}, to{};
        CreditAmount price = 0;
        bool with_arbitrage = false;
    };

    using AnyEnvelope = std::variant<Envelope, DhtEnvelope>;

    World() : rng_(0) {}

    void step();
    void collect_outboxes();
    void pump_build();
    void drain_results(Actor& actor);
    void sample();
    void publish_file(Actor& actor);
    bool partitioned(const Digest& a, const Digest& b) const;
    void trigger(const AdversarySpec& adv);
    void emit(const std::string& line);
    Actor& actor_at(const Digest& addr);
    const std::string& name_of(const Digest& addr) const;

    ScenarioConfig cfg_;
    Rng rng_;       // master stream: build-time choices
    Rng net_rng_{0};
    Rng trade_rng_{0};
    Rng dht_rng_{0};
    std::uint64_t clock_ = 0;
    std::uint64_t seq_ = 0;
    std::map<Digest, Actor> actors_;
    std::map<std::string, Digest> by_name_;
    std::vector<std::string> names_;
    std::multimap<std::pair<std::uint64_t, std::uint64_t>, AnyEnvelope> queue_;
    // FIFO floor per directed link so random jitter cannot reorder.
    std::map<std::pair<Digest, Digest>, std::uint64_t> link_floor_;
    std::map<std::pair<Digest, Digest>, std::uint64_t> dht_link_floor_;
    std::vector<Action> schedule_;
    std::size_t next_action_ = 0;
    std::vector<AdversarySpec> adversaries_;
    std::set<std::string> triggered_;
    std::map<Digest, HypersynFile> first_files_;
    std::map<std::string, std::uint64_t> msg_counts_;
    std::map<std::string, AdversaryOutcome> outcomes_;
    std::vector<std::pair<std::string, std::string>> edge_names_;
    std::string jsonl_;
    std::string csv_;
};

}  // namespace hypersyn
