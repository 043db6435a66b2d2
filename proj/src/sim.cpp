#include "hypersyn/sim.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "hypersyn/errors.hpp"

namespace hypersyn {

using nlohmann::json;

namespace {

// splitmix64, the usual seed scrambler.
std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Digest seed_digest(std::uint64_t seed) {
    Digest d{};
    d.bytes[0] = 0x51;
    for (int i = 0; i < 8; ++i) d.bytes[31 - i] = std::uint8_t(seed >> (8 * i));
    return d;
}

const char* dht_message_name(const DhtMessage& msg) {
    struct Namer {
        const char* operator()(const DhtFindNode&) { return "dht-find-node"; }
        const char* operator()(const DhtNodes&) { return "dht-nodes"; }
        const char* operator()(const DhtGet&) { return "dht-get"; }
        const char* operator()(const DhtFound&) { return "dht-found"; }
        const char* operator()(const DhtStore&) { return "dht-store"; }
        const char* operator()(const DhtStoreAck&) { return "dht-store-ack"; }
        const char* operator()(const DhtRefresh&) { return "dht-refresh"; }
        const char* operator()(const DhtRefreshAck&) { return "dht-refresh-ack"; }
    };
    return std::visit(Namer{}, msg);
}

CreditAmount amount_field(const json& j, const std::string& path) {
    try {
        if (j.is_string()) return amount_from_string(j.get<std::string>());
        if (j.is_number_unsigned()) return CreditAmount(j.get<std::uint64_t>());
    } catch (const Error&) {
    }
    throw ConfigError(path + ": not an amount");
}

std::uint64_t uint_field(const json& j, const std::string& path) {
    if (!j.is_number_unsigned()) throw ConfigError(path + ": not an unsigned integer");
    return j.get<std::uint64_t>();
}

std::string string_field(const json& j, const std::string& path) {
    if (!j.is_string()) throw ConfigError(path + ": not a string");
    return j.get<std::string>();
}

}  // namespace

std::uint64_t Rng::range(std::uint64_t lo, std::uint64_t hi) {
    if (lo >= hi) return lo;
    return lo + u64() % (hi - lo + 1);
}

double Rng::unit() { return double(u64() >> 11) * (1.0 / 9007199254740992.0); }

Rng Rng::substream(std::uint64_t salt) const { return Rng(mix(seed_ ^ mix(salt))); }

// --- configuration ---

void ScenarioConfig::validate() const {
    if (network.delay_min < 1) throw ConfigError("network.delay_min: must be >= 1");
    if (network.delay_max < network.delay_min)
        throw ConfigError("network.delay_max: below delay_min");
    if (!(network.drop >= 0.0 && network.drop <= 1.0))
        throw ConfigError("network.drop: outside [0, 1]");

    std::set<std::string> names;
    std::set<std::uint64_t> seeds;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::string at = "nodes[" + std::to_string(i) + "]";
        if (nodes[i].name.empty()) throw ConfigError(at + ".name: empty");
        if (!names.insert(nodes[i].name).second) throw ConfigError(at + ".name: duplicate");
        if (!seeds.insert(nodes[i].seed).second) throw ConfigError(at + ".seed: duplicate");
    }

    if (random_graph) {
        if (!nodes.empty()) throw ConfigError("random_graph: exclusive with explicit nodes");
        if (!edges.empty()) throw ConfigError("random_graph: exclusive with explicit edges");
        const RandomGraphSpec& g = *random_graph;
        if (g.count < 3) throw ConfigError("random_graph.count: must be >= 3");
        if (g.degree < 2 || g.degree >= g.count)
            throw ConfigError("random_graph.degree: infeasible");
        if (g.count * g.degree % 2 != 0)
            throw ConfigError("random_graph.degree: count*degree must be even");
        if (g.reserve_min < 1) throw ConfigError("random_graph.reserve_min: must be positive");
        if (g.reserve_max < g.reserve_min)
            throw ConfigError("random_graph.reserve_max: below reserve_min");
    }

    auto known = [&](const std::string& n) {
        return random_graph ? n.rfind(random_graph->name_prefix, 0) == 0 : names.count(n) != 0;
    };

    std::set<std::pair<std::string, std::string>> pairs;
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const std::string at = "edges[" + std::to_string(i) + "]";
        const EdgeSpec& e = edges[i];
        if (!known(e.a)) throw ConfigError(at + ".a: unknown node");
        if (!known(e.b)) throw ConfigError(at + ".b: unknown node");
        if (e.a == e.b) throw ConfigError(at + ": self edge");
        auto key = std::minmax(e.a, e.b);
        if (!pairs.insert({key.first, key.second}).second)
            throw ConfigError(at + ": duplicate edge");
        if (e.via.empty()) {
            if (e.r_a < 1) throw ConfigError(at + ".r_a: must be positive");
            if (e.r_b < 1) throw ConfigError(at + ".r_b: must be positive");
        } else {
            if (!known(e.via)) throw ConfigError(at + ".via: unknown node");
            if (e.via == e.a || e.via == e.b) throw ConfigError(at + ".via: must be a third node");
        }
    }

    for (std::size_t i = 0; i < trades.size(); ++i) {
        const std::string at = "trades[" + std::to_string(i) + "]";
        const TradeSpec& t = trades[i];
        if (!known(t.from)) throw ConfigError(at + ".from: unknown node");
        if (!known(t.to)) throw ConfigError(at + ".to: unknown node");
        if (t.from == t.to) throw ConfigError(at + ": self trade");
        if (t.price < 1) throw ConfigError(at + ".price: must be positive");
        if (t.at < 1) throw ConfigError(at + ".at: ticks start at 1");
    }

    if (random_trades) {
        const RandomTradesSpec& r = *random_trades;
        if (r.every < 1) throw ConfigError("random_trades.every: must be >= 1");
        if (r.price_min < 1) throw ConfigError("random_trades.price_min: must be positive");
        if (r.price_max < r.price_min)
            throw ConfigError("random_trades.price_max: below price_min");
        if (r.count > 0 && edges.empty() && !random_graph)
            throw ConfigError("random_trades: no edges to trade on");
    }

    if (arbitrage.every > 0 && horizon == 0)
        throw ConfigError("arbitrage.every: periodic schedule needs a horizon");
    for (std::size_t i = 0; i < arbitrage.pairs.size(); ++i) {
        const std::string at = "arbitrage.pairs[" + std::to_string(i) + "]";
        if (!known(arbitrage.pairs[i].first) || !known(arbitrage.pairs[i].second))
            throw ConfigError(at + ": unknown node");
    }

    for (std::size_t i = 0; i < network.partitions.size(); ++i) {
        const std::string at = "network.partitions[" + std::to_string(i) + "]";
        const PartitionSpec& p = network.partitions[i];
        if (p.until <= p.from) throw ConfigError(at + ".until: must exceed from");
        for (const std::string& n : p.side)
            if (!known(n)) throw ConfigError(at + ".side: unknown node " + n);
    }

    static const std::set<std::string> roles{"equivocator", "malicious-deleter",
                                             "stale-file-replayer", "proof-forger"};
    for (std::size_t i = 0; i < adversaries.size(); ++i) {
        const std::string at = "adversaries[" + std::to_string(i) + "]";
        const AdversarySpec& a = adversaries[i];
        if (!roles.count(a.role)) throw ConfigError(at + ".role: unknown role " + a.role);
        if (!known(a.node)) throw ConfigError(at + ".node: unknown node");
        if (a.at < 1) throw ConfigError(at + ".at: ticks start at 1");
        for (const std::string& t : a.targets)
            if (!known(t)) throw ConfigError(at + ".targets: unknown node " + t);
        if ((a.role == "equivocator" || a.role == "proof-forger") && a.targets.empty())
            throw ConfigError(at + ".targets: required for " + a.role);
        if (a.role == "stale-file-replayer" && !dht.enabled)
            throw ConfigError(at + ".role: stale-file-replayer needs dht.enabled");
    }
}

ScenarioConfig ScenarioConfig::parse(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("json: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("json: top level must be an object");

    ScenarioConfig c;
    if (j.contains("seed")) c.seed = uint_field(j["seed"], "seed");
    if (j.contains("horizon")) c.horizon = uint_field(j["horizon"], "horizon");
    if (j.contains("sample_every")) c.sample_every = uint_field(j["sample_every"], "sample_every");

    if (j.contains("nodes")) {
        if (!j["nodes"].is_array()) throw ConfigError("nodes: not an array");
        std::size_t i = 0;
        for (const json& n : j["nodes"]) {
            const std::string at = "nodes[" + std::to_string(i++) + "]";
            NodeSpec s;
            s.name = string_field(n.value("name", json()), at + ".name");
            s.seed = uint_field(n.value("seed", json()), at + ".seed");
            c.nodes.push_back(std::move(s));
        }
    }

    if (j.contains("random_graph")) {
        const json& g = j["random_graph"];
        RandomGraphSpec s;
        s.count = uint_field(g.value("count", json()), "random_graph.count");
        s.degree = uint_field(g.value("degree", json()), "random_graph.degree");
        s.reserve_min = amount_field(g.value("reserve_min", json()), "random_graph.reserve_min");
        s.reserve_max = amount_field(g.value("reserve_max", json()), "random_graph.reserve_max");
        if (g.contains("name_prefix"))
            s.name_prefix = string_field(g["name_prefix"], "random_graph.name_prefix");
        if (g.contains("seed_base"))
            s.seed_base = uint_field(g["seed_base"], "random_graph.seed_base");
        c.random_graph = std::move(s);
    }

    if (j.contains("edges")) {
        if (!j["edges"].is_array()) throw ConfigError("edges: not an array");
        std::size_t i = 0;
        for (const json& n : j["edges"]) {
            const std::string at = "edges[" + std::to_string(i++) + "]";
            EdgeSpec e;
            e.a = string_field(n.value("a", json()), at + ".a");
            e.b = string_field(n.value("b", json()), at + ".b");
            if (n.contains("via")) {
                e.via = string_field(n["via"], at + ".via");
            } else {
                e.r_a = amount_field(n.value("r_a", json()), at + ".r_a");
                e.r_b = amount_field(n.value("r_b", json()), at + ".r_b");
            }
            c.edges.push_back(std::move(e));
        }
    }

    if (j.contains("trades")) {
        if (!j["trades"].is_array()) throw ConfigError("trades: not an array");
        std::size_t i = 0;
        for (const json& n : j["trades"]) {
            const std::string at = "trades[" + std::to_string(i++) + "]";
            TradeSpec t;
            t.at = uint_field(n.value("at", json()), at + ".at");
            t.from = string_field(n.value("from", json()), at + ".from");
            t.to = string_field(n.value("to", json()), at + ".to");
            t.price = amount_field(n.value("price", json()), at + ".price");
            t.arbitrage = n.value("arbitrage", false);
            c.trades.push_back(std::move(t));
        }
    }

    if (j.contains("random_trades")) {
        const json& r = j["random_trades"];
        RandomTradesSpec s;
        if (r.contains("start")) s.start = uint_field(r["start"], "random_trades.start");
        if (r.contains("every")) s.every = uint_field(r["every"], "random_trades.every");
        s.count = uint_field(r.value("count", json()), "random_trades.count");
        s.price_min = amount_field(r.value("price_min", json()), "random_trades.price_min");
        s.price_max = amount_field(r.value("price_max", json()), "random_trades.price_max");
        s.arbitrage = r.value("arbitrage", false);
        c.random_trades = std::move(s);
    }

    if (j.contains("arbitrage")) {
        const json& a = j["arbitrage"];
        if (a.contains("every")) c.arbitrage.every = uint_field(a["every"], "arbitrage.every");
        if (a.contains("pairs")) {
            std::size_t i = 0;
            for (const json& p : a["pairs"]) {
                const std::string at = "arbitrage.pairs[" + std::to_string(i++) + "]";
                if (!p.is_array() || p.size() != 2) throw ConfigError(at + ": not a pair");
                c.arbitrage.pairs.emplace_back(string_field(p[0], at), string_field(p[1], at));
            }
        }
    }

    if (j.contains("network")) {
        const json& n = j["network"];
        if (n.contains("delay_min"))
            c.network.delay_min = uint_field(n["delay_min"], "network.delay_min");
        if (n.contains("delay_max"))
            c.network.delay_max = uint_field(n["delay_max"], "network.delay_max");
        if (n.contains("drop")) {
            if (!n["drop"].is_number()) throw ConfigError("network.drop: not a number");
            c.network.drop = n["drop"].get<double>();
        }
        if (n.contains("partitions")) {
            std::size_t i = 0;
            for (const json& p : n["partitions"]) {
                const std::string at = "network.partitions[" + std::to_string(i++) + "]";
                PartitionSpec s;
                s.from = uint_field(p.value("from", json()), at + ".from");
                s.until = uint_field(p.value("until", json()), at + ".until");
                for (const json& m : p.value("side", json::array()))
                    s.side.insert(string_field(m, at + ".side"));
                c.network.partitions.push_back(std::move(s));
            }
        }
    }

    if (j.contains("adversaries")) {
        std::size_t i = 0;
        for (const json& a : j["adversaries"]) {
            const std::string at = "adversaries[" + std::to_string(i++) + "]";
            AdversarySpec s;
            s.role = string_field(a.value("role", json()), at + ".role");
            s.node = string_field(a.value("node", json()), at + ".node");
            s.at = uint_field(a.value("at", json()), at + ".at");
            for (const json& t : a.value("targets", json::array()))
                s.targets.push_back(string_field(t, at + ".targets"));
            c.adversaries.push_back(std::move(s));
        }
    }

    if (j.contains("dht")) {
        const json& d = j["dht"];
        c.dht.enabled = d.value("enabled", true);
        if (d.contains("lookup_every"))
            c.dht.lookup_every = uint_field(d["lookup_every"], "dht.lookup_every");
    }

    if (j.contains("node_params")) {
        const json& p = j["node_params"];
        if (p.contains("v")) c.node_params.v = uint_field(p["v"], "node_params.v");
        if (p.contains("arbitrage_rounds"))
            c.node_params.arbitrage_rounds =
                std::uint32_t(uint_field(p["arbitrage_rounds"], "node_params.arbitrage_rounds"));
        if (p.contains("sync_interval"))
            c.node_params.sync_interval = uint_field(p["sync_interval"], "node_params.sync_interval");
        if (p.contains("announce_interval"))
            c.node_params.announce_interval =
                uint_field(p["announce_interval"], "node_params.announce_interval");
        if (p.contains("op_timeout"))
            c.node_params.op_timeout = uint_field(p["op_timeout"], "node_params.op_timeout");
        if (p.contains("unreachable_after"))
            c.node_params.unreachable_after =
                uint_field(p["unreachable_after"], "node_params.unreachable_after");
        if (p.contains("default_reserve"))
            c.node_params.default_reserve =
                amount_field(p["default_reserve"], "node_params.default_reserve");
    }

    c.validate();
    return c;
}

ScenarioConfig ScenarioConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw ConfigError(path + ": unreadable");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

// --- world construction ---

World World::build(const ScenarioConfig& cfg) {
    cfg.validate();
    World w;
    w.cfg_ = cfg;
    w.rng_ = Rng(cfg.seed);
    w.net_rng_ = w.rng_.substream(1);
    w.trade_rng_ = w.rng_.substream(2);
    w.dht_rng_ = w.rng_.substream(3);

    std::vector<NodeSpec> nodes = cfg.nodes;
    std::vector<EdgeSpec> edges = cfg.edges;

    if (cfg.random_graph) {
        const RandomGraphSpec& g = *cfg.random_graph;
        Rng graph_rng = w.rng_.substream(4);
        for (std::size_t i = 0; i < g.count; ++i)
            nodes.push_back(NodeSpec{g.name_prefix + std::to_string(i), g.seed_base + i});
        // A ring for connectivity, then random chords up to the exact
        // edge budget count*degree/2.
        std::set<std::pair<std::size_t, std::size_t>> taken;
        auto push = [&](std::size_t a, std::size_t b) {
            auto key = std::minmax(a, b);
            if (!taken.insert(key).second) return false;
            EdgeSpec e;
            e.a = nodes[a].name;
            e.b = nodes[b].name;
            e.r_a = CreditAmount(graph_rng.range(std::uint64_t(g.reserve_min),
                                                 std::uint64_t(g.reserve_max)));
            e.r_b = CreditAmount(graph_rng.range(std::uint64_t(g.reserve_min),
                                                 std::uint64_t(g.reserve_max)));
            edges.push_back(std::move(e));
            return true;
        };
        for (std::size_t i = 0; i < g.count; ++i) push(i, (i + 1) % g.count);
        const std::size_t budget = g.count * g.degree / 2;
        while (edges.size() < budget) {
            std::size_t a = graph_rng.range(0, g.count - 1);
            std::size_t b = graph_rng.range(0, g.count - 1);
            if (a != b) push(a, b);
        }
    }

    // Per-role parameter doctoring: a malicious deleter runs with the
    // staleness guards off so its own pruning rule fires early. Its
    // messages stay perfectly well-formed; only its judgment is wrong.
    std::map<std::string, std::string> roles;
    for (const AdversarySpec& a : cfg.adversaries) roles[a.node] = a.role;

    for (const NodeSpec& spec : nodes) {
        Keypair keys = Keypair::from_seed(seed_digest(spec.seed));
        ProtocolParams params = cfg.node_params;
        auto role = roles.find(spec.name);
        if (role != roles.end() && role->second == "malicious-deleter") {
            params.v = 0;
            params.unreachable_after = 1;
        }
        Actor actor;
        actor.name = spec.name;
        actor.keys = keys;
        actor.node = std::make_unique<Node>(keys, params);
        actor.adversary = role != roles.end();
        Digest addr = actor.node->addr();
        if (w.actors_.count(addr))
            throw ConfigError("nodes: seed collision on " + spec.name);
        if (cfg.dht.enabled)
            actor.dht = std::make_unique<DhtParticipant>(addr, "sim://" + spec.name);
        w.by_name_[spec.name] = addr;
        w.actors_.emplace(addr, std::move(actor));
    }
    for (const auto& [addr, actor] : w.actors_) w.names_.push_back(actor.name);
    std::sort(w.names_.begin(), w.names_.end());

    for (const AdversarySpec& a : cfg.adversaries)
        w.outcomes_[a.node] = AdversaryOutcome{w.by_name_.at(a.node), {}, {}};

    // Direct edges first, then common-peer openings which need the
    // mirrors that the first wave's gossip seeds.
    auto open_one = [&](const EdgeSpec& e, std::size_t i) {
        Actor& a = w.actors_.at(w.by_name_.at(e.a));
        Actor& b = w.actors_.at(w.by_name_.at(e.b));
        a.node->learn_peer(b.node->addr(), b.keys.pub);
        b.node->learn_peer(a.node->addr(), a.keys.pub);
        if (e.via.empty()) {
            a.node->open_edge(b.node->addr(), e.r_a, e.r_b);
        } else {
            a.node->open_edge_common(b.node->addr(), w.by_name_.at(e.via));
        }
        w.pump_build();
        if (!a.node->has_edge(b.node->addr()))
            throw ConfigError("edges[" + std::to_string(i) + "]: failed to open " + e.a + "-" +
                              e.b);
        w.edge_names_.emplace_back(e.a, e.b);
    };
    for (std::size_t i = 0; i < edges.size(); ++i)
        if (edges[i].via.empty()) open_one(edges[i], i);
    for (std::size_t i = 0; i < edges.size(); ++i)
        if (!edges[i].via.empty()) open_one(edges[i], i);

    // DHT bootstrap: everyone knows everyone's contact (as after a long
    // bootstrap phase), then publishes its discovery file.
    if (cfg.dht.enabled) {
        for (auto& [ia, a] : w.actors_)
            for (auto& [ib, b] : w.actors_)
                if (ia != ib) a.dht->seed_routing(ib, b.dht->address());
        for (auto& [addr, actor] : w.actors_) {
            w.publish_file(actor);
            w.pump_build();
            if (const HypersynFile* f = actor.dht->stored(addr)) w.first_files_[addr] = *f;
        }
    }

    // The build exchanges settle all results; they are scaffolding, not
    // observations, so the metric streams start empty.
    for (auto& [addr, actor] : w.actors_) {
        actor.results_seen = actor.node->results().size();
        if (actor.dht) actor.dht_results_seen = actor.dht->results().size();
        actor.last_stats = actor.node->stats();
        if (actor.dht) actor.last_dht_stats = actor.dht->stats();
    }

    // Expand the trade and arbitrage schedules up front so the run loop
    // is a pure function of (clock, queue).
    auto resolve = [&](const std::string& n) { return w.by_name_.at(n); };
    for (std::size_t i = 0; i < cfg.trades.size(); ++i) {
        const TradeSpec& t = cfg.trades[i];
        if (!w.actors_.at(resolve(t.from)).node->has_edge(resolve(t.to)))
            throw ConfigError("trades[" + std::to_string(i) + "]: no edge " + t.from + "-" + t.to);
        w.schedule_.push_back(Action{Action::Kind::Trade, t.at, resolve(t.from), resolve(t.to),
                                     t.price, t.arbitrage});
    }
    if (cfg.random_trades && cfg.random_trades->count > 0) {
        const RandomTradesSpec& r = *cfg.random_trades;
        std::uint64_t start = std::max<std::uint64_t>(r.start, 1);
        for (std::uint64_t k = 0; k < r.count; ++k) {
            const auto& e = w.edge_names_[w.trade_rng_.range(0, w.edge_names_.size() - 1)];
            bool flip = w.trade_rng_.u64() & 1;
            CreditAmount price = CreditAmount(w.trade_rng_.range(
                std::uint64_t(r.price_min), std::uint64_t(r.price_max)));
            w.schedule_.push_back(Action{Action::Kind::Trade, start + k * r.every,
                                         resolve(flip ? e.second : e.first),
                                         resolve(flip ? e.first : e.second), price, r.arbitrage});
        }
    }
    if (cfg.arbitrage.every > 0) {
        std::vector<std::pair<std::string, std::string>> pairs = cfg.arbitrage.pairs;
        if (pairs.empty()) pairs = w.edge_names_;
        for (std::uint64_t t = cfg.arbitrage.every; t <= cfg.horizon; t += cfg.arbitrage.every)
            for (const auto& p : pairs)
                w.schedule_.push_back(
                    Action{Action::Kind::Arbitrage, t, resolve(p.first), resolve(p.second), 0, false});
    }
    std::stable_sort(w.schedule_.begin(), w.schedule_.end(),
                     [](const Action& a, const Action& b) { return a.at < b.at; });

    w.adversaries_ = cfg.adversaries;
    return w;
}

// Build-phase transport: immediate, lossless, in-order. Topology setup
// is scaffolding; the configured network model applies to the run only.
void World::pump_build() {
    bool moved = true;
    while (moved) {
        moved = false;
        for (auto& [addr, actor] : actors_) {
            for (const Envelope& env : actor.node->drain_outbox()) {
                moved = true;
                auto it = actors_.find(env.to);
                if (it != actors_.end()) it->second.node->handle(env);
            }
            if (actor.dht)
                for (const DhtEnvelope& env : actor.dht->drain_outbox()) {
                    moved = true;
                    auto it = actors_.find(env.to);
                    if (it != actors_.end() && it->second.dht) it->second.dht->handle(env);
                }
        }
    }
}

void World::publish_file(Actor& actor) {
    StateAnnounce ann = actor.node->make_announce();
    HypersynFile file;
    file.node_id = actor.node->addr();
    file.public_key = actor.keys.pub;
    file.root = ann.root;
    file.m = ann.m;
    file.sig = ann.sig;
    for (const Digest& p : actor.node->peer_addrs()) {
        auto it = actors_.find(p);
        file.peers.push_back(
            PeerEntry{p, it != actors_.end() && it->second.dht ? it->second.dht->address() : ""});
    }
    actor.dht->publish(std::move(file));
    actor.published_root = ann.root;
}

// --- accessors ---

const Digest& World::addr(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown node " + name);
    return it->second;
}

Node& World::node(const std::string& name) { return *actors_.at(addr(name)).node; }
const Node& World::node(const std::string& name) const { return *actors_.at(addr(name)).node; }
DhtParticipant& World::dht(const std::string& name) {
    Actor& a = actors_.at(addr(name));
    if (!a.dht) throw ConfigError("dht disabled for this scenario");
    return *a.dht;
}

World::Actor& World::actor_at(const Digest& a) { return actors_.at(a); }

const std::string& World::name_of(const Digest& a) const { return actors_.at(a).name; }

std::size_t World::edge_count() const {
    std::size_t n = 0;
    for (const auto& [addr, actor] : actors_)
        for (const Digest& p : actor.node->peer_addrs())
            if (addr < p && actor.node->has_edge(p)) ++n;
    return n;
}

std::size_t World::diameter() const {
    // BFS from every node over the built topology.
    std::map<std::string, std::vector<std::string>> adj;
    for (const auto& [a, b] : edge_names_) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::size_t best = 0;
    for (const std::string& start : names_) {
        std::map<std::string, std::size_t> dist{{start, 0}};
        std::deque<std::string> q{start};
        while (!q.empty()) {
            std::string u = q.front();
            q.pop_front();
            for (const std::string& v : adj[u])
                if (!dist.count(v)) {
                    dist[v] = dist[u] + 1;
                    best = std::max(best, dist[v]);
                    q.push_back(v);
                }
        }
    }
    return best;
}

// --- run loop ---

bool World::partitioned(const Digest& a, const Digest& b) const {
    for (const PartitionSpec& p : cfg_.network.partitions) {
        if (clock_ < p.from || clock_ >= p.until) continue;
        bool sa = p.side.count(name_of(a)) != 0;
        bool sb = p.side.count(name_of(b)) != 0;
        if (sa != sb) return true;
    }
    return false;
}

void World::collect_outboxes() {
    // Each message draws delay then drop from the network stream, so the
    // draw sequence is a pure function of the message sequence. A floor
    // per directed link keeps jitter from reordering: the protocol
    // relies on FIFO links.
    auto schedule = [&](const Digest& from, const Digest& to,
                        std::map<std::pair<Digest, Digest>, std::uint64_t>& floors,
                        AnyEnvelope env) {
        if (partitioned(from, to)) return;
        std::uint64_t delay = net_rng_.range(cfg_.network.delay_min, cfg_.network.delay_max);
        if (cfg_.network.drop > 0.0 && net_rng_.unit() < cfg_.network.drop) return;
        auto link = std::make_pair(from, to);
        std::uint64_t at = std::max(clock_ + delay, floors[link]);
        floors[link] = at;
        queue_.emplace(std::make_pair(at, seq_++), std::move(env));
    };
    for (auto& [addr, actor] : actors_) {
        for (Envelope& env : actor.node->drain_outbox()) {
            Digest from = env.from, to = env.to;
            schedule(from, to, link_floor_, AnyEnvelope{std::move(env)});
        }
        if (!actor.dht) continue;
        for (DhtEnvelope& env : actor.dht->drain_outbox()) {
            Digest from = env.from, to = env.to;
            schedule(from, to, dht_link_floor_, AnyEnvelope{std::move(env)});
        }
    }
}

void World::emit(const std::string& line) {
    jsonl_ += line;
    jsonl_ += '\n';
}

void World::drain_results(Actor& actor) {
    const auto& results = actor.node->results();
    for (; actor.results_seen < results.size(); ++actor.results_seen) {
        const OpResult& r = results[actor.results_seen];
        json e;
        e["tick"] = clock_;
        e["type"] = "op";
        e["node"] = actor.name;
        e["kind"] = r.kind;
        e["ok"] = r.ok;
        e["detail"] = r.detail;
        auto peer = actors_.find(r.peer);
        e["peer"] = peer != actors_.end() ? peer->second.name : to_hex(r.peer.bytes).substr(0, 8);
        e["price"] = amount_to_string(r.price);
        e["delta_in"] = amount_to_string(r.delta_in);
        e["profit"] = amount_to_string(r.profit);
        emit(e.dump());
    }

    const NodeStats& s = actor.node->stats();
    auto delta = [&](std::uint64_t now, std::uint64_t then, const char* type) {
        if (now > then) {
            json e;
            e["tick"] = clock_;
            e["type"] = type;
            e["node"] = actor.name;
            e["count"] = now - then;
            emit(e.dump());
        }
    };
    delta(s.proofs_emitted, actor.last_stats.proofs_emitted, "proof-emitted");
    delta(s.edges_dropped, actor.last_stats.edges_dropped, "edge-dropped");
    delta(s.edges_pruned, actor.last_stats.edges_pruned, "edge-pruned");
    actor.last_stats = s;

    if (!actor.dht) return;
    const auto& dresults = actor.dht->results();
    for (; actor.dht_results_seen < dresults.size(); ++actor.dht_results_seen) {
        const DhtResult& r = dresults[actor.dht_results_seen];
        json e;
        e["tick"] = clock_;
        e["type"] = "dht";
        e["node"] = actor.name;
        e["kind"] = r.kind;
        e["ok"] = r.ok;
        e["queries"] = r.queries;
        emit(e.dump());
        // Lookups feed the node's out-of-band state knowledge: the same
        // monotonicity and equivocation checks as a live announce.
        if (r.kind == "lookup" && r.ok && r.file && r.file->node_id != actor.node->addr()) {
            actor.node->learn_peer(r.file->node_id, r.file->public_key);
            actor.node->observe_state(r.file->node_id, r.file->root, r.file->m, r.file->sig);
        }
    }
    // Conflicting valid stores caught by the replica layer feed the
    // credit layer's punishment machinery.
    for (MisbehaviorProof& proof : actor.dht->drain_proofs())
        actor.node->handle_misbehavior(proof);

    delta(actor.dht->stats().stores_stale, actor.last_dht_stats.stores_stale, "dht-stale");
    actor.last_dht_stats = actor.dht->stats();
}

void World::trigger(const AdversarySpec& adv) {
    Actor& actor = actors_.at(by_name_.at(adv.node));
    {
        json e;
        e["tick"] = clock_;
        e["type"] = "adversary";
        e["role"] = adv.role;
        e["node"] = adv.node;
        emit(e.dump());
    }

    if (adv.role == "equivocator") {
        // Sign a second root at the current counter and slip it to the
        // targets; everyone else already holds the honest announce.
        StateAnnounce honest = actor.node->make_announce();
        Digest fake_root = sha256(honest.root.bytes);
        Signature sig = actor.keys.sign(state_digest(fake_root, honest.m));
        for (const std::string& t : adv.targets) {
            Envelope env{actor.node->addr(), by_name_.at(t),
                         StateAnnounce{fake_root, honest.m, sig}};
            queue_.emplace(std::make_pair(clock_ + cfg_.network.delay_min, seq_++),
                           AnyEnvelope{std::move(env)});
        }
        return;
    }
    if (adv.role == "malicious-deleter") {
        // Runs the node's own pruning rule, which its doctored staleness
        // parameters make fire while peers still count the edge as live.
        actor.node->prune_stale(clock_);
        return;
    }
    if (adv.role == "stale-file-replayer") {
        auto it = first_files_.find(actor.node->addr());
        if (it != first_files_.end() && it->second.valid()) actor.dht->publish(it->second);
        return;
    }
    if (adv.role == "proof-forger") {
        // A fabricated accusation: statements with signatures that do
        // not verify. Honest validators must shrug it off.
        const Actor& accused = actors_.at(by_name_.at(adv.targets.front()));
        SignedStatement s1{accused.keys.pub, sha256(ByteView{accused.keys.pub.bytes}), 999,
                           actor.keys.sign(state_digest(Digest{}, 999)), {}, {}};
        SignedStatement s2 = s1;
        s2.root = sha256(s1.root.bytes);
        MisbehaviorProof proof = make_equivocation(std::move(s1), std::move(s2));
        for (const Digest& p : actor.node->peer_addrs()) {
            Envelope env{actor.node->addr(), p, MisbehaviorBroadcast{proof.encode()}};
            queue_.emplace(std::make_pair(clock_ + cfg_.network.delay_min, seq_++),
                           AnyEnvelope{std::move(env)});
        }
        return;
    }
}

void World::sample() {
    if (csv_.empty()) csv_ = "tick,edge,a,b,r_a,r_b,ratio\n";
    MetricsFrame frame = snapshot();
    for (const EdgeMetric& e : frame.edges) {
        char ratio[32];
        std::snprintf(ratio, sizeof ratio, "%.6f", e.ratio);
        csv_ += std::to_string(clock_) + "," + e.key_hex.substr(0, 12) + "," + e.a + "," + e.b +
                "," + amount_to_string(e.r_a) + "," + amount_to_string(e.r_b) + "," + ratio + "\n";
    }
}

void World::step() {
    ++clock_;

    for (const AdversarySpec& adv : adversaries_)
        if (adv.at == clock_ && triggered_.insert(adv.node + "@" + std::to_string(adv.at)).second)
            trigger(adv);

    while (next_action_ < schedule_.size() && schedule_[next_action_].at <= clock_) {
        const Action& a = schedule_[next_action_++];
        Actor& from = actors_.at(a.from);
        if (a.kind == Action::Kind::Trade)
            from.node->pay(a.to, a.price, a.with_arbitrage);
        else
            from.node->request_arbitrage(a.to);
    }

    auto end = queue_.upper_bound(std::make_pair(clock_, ~std::uint64_t(0)));
    for (auto it = queue_.begin(); it != end; ++it) {
        if (const Envelope* env = std::get_if<Envelope>(&it->second)) {
            ++msg_counts_[message_name(env->msg)];
            auto target = actors_.find(env->to);
            if (target != actors_.end()) target->second.node->handle(*env);
        } else {
            const DhtEnvelope& denv = std::get<DhtEnvelope>(it->second);
            ++msg_counts_[dht_message_name(denv.msg)];
            auto target = actors_.find(denv.to);
            if (target != actors_.end() && target->second.dht) target->second.dht->handle(denv);
        }
    }
    queue_.erase(queue_.begin(), end);

    for (auto& [addr, actor] : actors_) {
        actor.node->on_tick(clock_);
        if (actor.dht) actor.dht->on_tick(clock_);
    }

    // Periodic directory upkeep: republish on root change, plus any
    // scheduled random lookups.
    if (cfg_.dht.enabled) {
        std::uint64_t cadence = std::max<std::uint64_t>(cfg_.node_params.announce_interval, 1);
        if (clock_ % cadence == 0)
            for (auto& [addr, actor] : actors_)
                if (actor.node->tree().root() != actor.published_root) publish_file(actor);
        if (cfg_.dht.lookup_every > 0 && clock_ % cfg_.dht.lookup_every == 0 &&
            actors_.size() > 1) {
            std::uint64_t who = dht_rng_.range(0, actors_.size() - 1);
            std::uint64_t whom = dht_rng_.range(0, actors_.size() - 2);
            auto it = actors_.begin();
            std::advance(it, who);
            auto jt = actors_.begin();
            std::advance(jt, whom + (whom >= who ? 1 : 0));
            it->second.dht->lookup(jt->first);
        }
    }

    collect_outboxes();

    for (auto& [addr, actor] : actors_) drain_results(actor);

    // Containment bookkeeping, one adversary at a time.
    for (auto& [name, outcome] : outcomes_) {
        if (!outcome.first_detection) {
            for (const auto& [addr, actor] : actors_)
                if (!actor.adversary && (actor.node->stats().proofs_emitted > 0 ||
                                         actor.node->banned(outcome.addr))) {
                    outcome.first_detection = clock_;
                    break;
                }
        }
        if (outcome.first_detection && !outcome.contained_at) {
            bool any_edge = false;
            for (const auto& [addr, actor] : actors_)
                if (!actor.adversary && actor.node->has_edge(outcome.addr)) any_edge = true;
            if (!any_edge) outcome.contained_at = clock_;
        }
    }

    if (cfg_.sample_every > 0 && clock_ % cfg_.sample_every == 0) sample();
}

void World::run_until(std::uint64_t until) {
    while (clock_ < until) step();
}

bool World::quiescent() const {
    if (next_action_ < schedule_.size()) return false;
    for (const AdversarySpec& adv : adversaries_)
        if (adv.at > clock_) return false;
    if (!queue_.empty()) return false;
    if (cfg_.dht.lookup_every > 0) return false;  // periodic forever
    for (const auto& [addr, actor] : actors_) {
        if (!actor.node->idle() || !actor.node->outbox_empty()) return false;
        if (actor.dht && (!actor.dht->idle() || !actor.dht->outbox_empty())) return false;
        if (actor.dht && actor.node->tree().root() != actor.published_root) return false;
        // A stale replica of a live peer means the next periodic announce
        // will start a sync, so the world has not actually settled.
        for (const Digest& p : actor.node->peer_addrs()) {
            auto it = actors_.find(p);
            if (it == actors_.end() || !it->second.node->has_edge(addr)) continue;
            const PrunedSmt* replica = actor.node->replica_of(p);
            if (replica && replica->root() != it->second.node->tree().root()) return false;
        }
    }
    return true;
}

std::uint64_t World::run_to_quiescence(std::uint64_t limit) {
    while (clock_ < limit && !quiescent()) step();
    return clock_;
}

// --- metrics ---

MetricsFrame World::snapshot() const {
    MetricsFrame frame;
    frame.tick = clock_;
    for (const auto& [addr, actor] : actors_) {
        for (const Digest& p : actor.node->peer_addrs()) {
            if (!(addr < p)) continue;
            const EdgeState* e = actor.node->edge_with(p);
            if (!e) continue;
            EdgeMetric m;
            m.a = actor.name;
            m.b = name_of(p);
            m.key_hex = e->key().hex();
            m.r_a = e->reserve_of(addr);
            m.r_b = e->reserve_of(p);
            m.ratio = m.r_b == 0 ? 0.0 : amount_to_double(m.r_a) / amount_to_double(m.r_b);
            frame.edges.push_back(std::move(m));
        }
        NodeMetric n;
        n.name = actor.name;
        n.root = actor.node->tree().root();
        n.counter = actor.node->counter();
        n.stats = actor.node->stats();
        frame.payments += n.stats.payments_ok;
        frame.arbitrations += n.stats.cycles_executed;
        frame.misbehavior_events += n.stats.proofs_emitted;
        frame.arbitrage_profit += n.stats.cycle_profit;
        frame.nodes.push_back(std::move(n));
    }
    // Volume is the sum of executed first-hop inputs, recorded by the
    // initiating side of each cycle.
    for (const auto& [addr, actor] : actors_)
        for (const OpResult& r : actor.node->results())
            if (r.kind == "arbitrage" && r.ok) frame.arbitrage_volume += r.delta_in;
    frame.messages_by_type = msg_counts_;
    return frame;
}

std::string MetricsFrame::to_json() const {
    json j;
    j["tick"] = tick;
    j["payments"] = payments;
    j["arbitrations"] = arbitrations;
    j["misbehavior_events"] = misbehavior_events;
    j["arbitrage_volume"] = amount_to_string(arbitrage_volume);
    j["arbitrage_profit"] = amount_to_string(arbitrage_profit);
    j["messages"] = messages_by_type;
    j["edges"] = json::array();
    for (const EdgeMetric& e : edges) {
        json je;
        je["a"] = e.a;
        je["b"] = e.b;
        je["key"] = e.key_hex;
        je["r_a"] = amount_to_string(e.r_a);
        je["r_b"] = amount_to_string(e.r_b);
        je["ratio"] = e.ratio;
        j["edges"].push_back(std::move(je));
    }
    j["nodes"] = json::array();
    for (const NodeMetric& n : nodes) {
        json jn;
        jn["name"] = n.name;
        jn["root"] = n.root.hex();
        jn["counter"] = n.counter;
        jn["payments_ok"] = n.stats.payments_ok;
        jn["payments_aborted"] = n.stats.payments_aborted;
        jn["payments_received"] = n.stats.payments_received;
        jn["cycles_executed"] = n.stats.cycles_executed;
        jn["proofs_emitted"] = n.stats.proofs_emitted;
        jn["edges_dropped"] = n.stats.edges_dropped;
        jn["edges_pruned"] = n.stats.edges_pruned;
        j["nodes"].push_back(std::move(jn));
    }
    return j.dump();
}

}  // namespace hypersyn
