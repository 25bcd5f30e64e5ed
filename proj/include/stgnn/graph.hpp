#pragma once

// GNN graph construction. Two strategies:
//   measured_only  nodes are the sensor buses, wired to mirror electrical adjacency
//   full_topology  one node per bus, one edge per closed segment, unmeasured nodes masked

#include <algorithm>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stgnn/feeder.hpp"

namespace stgnn {

enum class GraphStrategy { measured_only, full_topology };

inline std::string_view to_string(GraphStrategy s) {
    return s == GraphStrategy::measured_only ? "measured-only" : "full";
}

inline std::optional<GraphStrategy> parse_graph_strategy(std::string_view s) {
    if (s == "measured-only" || s == "measured_only") return GraphStrategy::measured_only;
    if (s == "full" || s == "full-topology" || s == "full_topology") return GraphStrategy::full_topology;
    return std::nullopt;
}

struct GraphNode {
    std::string bus;
    PhaseClass phase_class = PhaseClass::three_phase;
    bool observed = true;

    bool operator==(const GraphNode&) const = default;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Undirected, unweighted graph over ordered nodes. Edges are stored with
/// i < j, deduplicated and sorted; the binary adjacency is kept in sync.
class SensorGraph {
public:
    SensorGraph() = default;

    SensorGraph(std::vector<GraphNode> nodes, std::vector<Edge> edges) : nodes_(std::move(nodes)) {
        const std::size_t n = nodes_.size();
        for (auto [a, b] : edges) {
            if (a >= n || b >= n) throw GraphConstructionError("edge references unknown node");
            if (a == b) throw GraphConstructionError("self loop on node " + std::to_string(a));
            edges_.emplace_back(std::min(a, b), std::max(a, b));
        }
        std::sort(edges_.begin(), edges_.end());
        edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
        neighbors_.assign(n, {});
        for (auto [a, b] : edges_) {
            neighbors_[a].push_back(b);
            neighbors_[b].push_back(a);
        }
        for (auto& list : neighbors_) std::sort(list.begin(), list.end());
    }

    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<GraphNode>& nodes() const { return nodes_; }
    const GraphNode& node(std::size_t i) const { return nodes_.at(i); }
    const std::vector<Edge>& edges() const { return edges_; }

    /// Neighbors of v in ascending index order, excluding v.
    const std::vector<std::size_t>& neighbors(std::size_t v) const { return neighbors_.at(v); }
    std::size_t degree(std::size_t v) const { return neighbors_.at(v).size(); }

    bool has_edge(std::size_t a, std::size_t b) const {
        const auto& l = neighbors_.at(a);
        return std::binary_search(l.begin(), l.end(), b);
    }

    Eigen::MatrixXd adjacency() const {
        const auto n = static_cast<Eigen::Index>(nodes_.size());
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
        for (auto [i, j] : edges_) {
            a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
            a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = 1.0;
        }
        return a;
    }

    std::vector<bool> observed_mask() const {
        std::vector<bool> m(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) m[i] = nodes_[i].observed;
        return m;
    }

    std::size_t observed_count() const {
        return static_cast<std::size_t>(
            std::count_if(nodes_.begin(), nodes_.end(), [](const GraphNode& n) { return n.observed; }));
    }

    std::optional<std::size_t> find_node(std::string_view bus) const {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].bus == bus) return i;
        return std::nullopt;
    }

    /// First node not reachable from node 0, if any.
    std::optional<std::size_t> first_disconnected() const {
        if (nodes_.empty()) return std::nullopt;
        std::vector<bool> seen(nodes_.size(), false);
        std::vector<std::size_t> stack{0};
        seen[0] = true;
        while (!stack.empty()) {
            auto u = stack.back();
            stack.pop_back();
            for (auto w : neighbors_[u])
                if (!seen[w]) {
                    seen[w] = true;
                    stack.push_back(w);
                }
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i]) return i;
        return std::nullopt;
    }

    bool connected() const { return !first_disconnected().has_value(); }

    /// Edge set expressed as unordered bus-id pairs (smaller id first).
    std::set<std::pair<std::string, std::string>> bus_edges() const {
        std::set<std::pair<std::string, std::string>> out;
        for (auto [a, b] : edges_) {
            std::string x = nodes_[a].bus, y = nodes_[b].bus;
            if (bus_id_less(y, x)) std::swap(x, y);
            out.emplace(std::move(x), std::move(y));
        }
        return out;
    }

    bool operator==(const SensorGraph& o) const { return nodes_ == o.nodes_ && edges_ == o.edges_; }

private:
    std::vector<GraphNode> nodes_;
    std::vector<Edge> edges_;
    std::vector<std::vector<std::size_t>> neighbors_;
};

/// N(v) with the self loop: v first, then neighbors in ascending index.
inline std::vector<std::size_t> neighbor_sets(const SensorGraph& g, std::size_t v) {
    if (v >= g.node_count()) throw std::out_of_range("unknown node " + std::to_string(v));
    std::vector<std::size_t> out{v};
    const auto& nb = g.neighbors(v);
    out.insert(out.end(), nb.begin(), nb.end());
    return out;
}

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
inline Eigen::MatrixXd normalized_adjacency(const SensorGraph& g) {
    Eigen::MatrixXd a = g.adjacency();
    a.diagonal().array() += 1.0;
    const Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
    return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

/// Node i of the result is node perm[i] of g.
inline SensorGraph permute_graph(const SensorGraph& g, const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inverse(perm.size());
    std::vector<GraphNode> nodes(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        nodes[i] = g.node(perm[i]);
        inverse[perm[i]] = i;
    }
    std::vector<Edge> edges;
    for (auto [a, b] : g.edges()) edges.emplace_back(inverse[a], inverse[b]);
    return SensorGraph(std::move(nodes), std::move(edges));
}

// ---------------------------------------------------------------------------
// Measured-only construction

namespace detail {

struct Reach {
    std::size_t sensor;   // placement index
    std::size_t branch;   // first-hop bus out of the origin
};

/// Sensors reachable from sensor bus `origin` over closed segments without
/// passing through any other sensor bus. Breadth-first, neighbors in bus-id order.
inline std::vector<Reach> accessible_sensors(const FeederTopology& topo, std::size_t origin,
                                             const std::vector<std::optional<std::size_t>>& sensor_at) {
    std::vector<Reach> out;
    std::vector<bool> seen(topo.bus_count(), false);
    std::vector<std::size_t> branch(topo.bus_count(), 0);
    std::queue<std::size_t> q;
    seen[origin] = true;
    q.push(origin);
    while (!q.empty()) {
        auto u = q.front();
        q.pop();
        for (const auto& inc : topo.incident(u)) {
            if (!topo.is_closed(inc.segment) || seen[inc.neighbor]) continue;
            seen[inc.neighbor] = true;
            branch[inc.neighbor] = (u == origin) ? inc.neighbor : branch[u];
            if (sensor_at[inc.neighbor]) {
                out.push_back({*sensor_at[inc.neighbor], branch[inc.neighbor]});
            } else {
                q.push(inc.neighbor);
            }
        }
    }
    return out;
}

} // namespace detail

/// Builds the measured-only graph.
///
/// Three-phase sensors are visited breadth-first from the substation; each is
/// linked to the three-phase sensors accessible from it in ascending
/// electrical distance (ties by bus id), skipping links that would close a
/// loop among the nodes added so far. A single/two-phase sensor is then linked
/// to the two nearest three-phase sensors on different sides of it when it
/// sits between them, otherwise to the nearest accessible three-phase sensor,
/// otherwise to the nearest accessible single/two-phase sensor.
///
/// "Accessible" means reachable through closed segments without traversing
/// another sensor bus.
inline SensorGraph build_measured_only(const FeederTopology& topo, const SensorPlacement& placement) {
    const std::size_t n = placement.size();
    if (n == 0) throw GraphConstructionError("empty placement");

    std::vector<std::size_t> bus_of(n);
    std::vector<std::optional<std::size_t>> sensor_at(topo.bus_count());
    std::vector<GraphNode> nodes;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = placement.entries[i];
        bus_of[i] = topo.bus_index(e.bus);
        if (sensor_at[bus_of[i]]) throw GraphConstructionError("duplicate sensor at bus " + e.bus);
        sensor_at[bus_of[i]] = i;
        nodes.push_back({e.bus, e.phase_class, true});
    }
    auto three_phase = [&](std::size_t i) { return placement.entries[i].phase_class == PhaseClass::three_phase; };

    std::vector<std::vector<std::optional<double>>> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto all = shortest_distances(topo, bus_of[i]);
        dist[i].resize(n);
        for (std::size_t j = 0; j < n; ++j) dist[i][j] = all[bus_of[j]];
    }
    auto closer = [&](std::size_t from) {
        return [&, from](std::size_t a, std::size_t b) {
            const double da = dist[from][a].value_or(std::numeric_limits<double>::infinity());
            const double db = dist[from][b].value_or(std::numeric_limits<double>::infinity());
            if (da != db) return da < db;
            return bus_id_less(placement.entries[a].bus, placement.entries[b].bus);
        };
    };

    std::vector<Edge> edges;
    detail::UnionFind uf(n);

    // Three-phase backbone, in breadth-first order from the substation.
    std::vector<std::size_t> order;
    std::vector<bool> queued(n, false);
    for (auto b : bfs_order(topo, topo.substation()))
        if (sensor_at[b] && three_phase(*sensor_at[b])) {
            order.push_back(*sensor_at[b]);
            queued[*sensor_at[b]] = true;
        }
    for (std::size_t i = 0; i < n; ++i)
        if (three_phase(i) && !queued[i]) order.push_back(i);

    for (auto v : order) {
        std::vector<std::size_t> cands;
        for (const auto& r : detail::accessible_sensors(topo, bus_of[v], sensor_at))
            if (three_phase(r.sensor)) cands.push_back(r.sensor);
        std::sort(cands.begin(), cands.end(), closer(v));
        for (auto w : cands)
            if (uf.unite(v, w)) edges.emplace_back(v, w);
    }

    // Single- and two-phase sensors.
    for (std::size_t u = 0; u < n; ++u) {
        if (three_phase(u)) continue;
        const auto reach = detail::accessible_sensors(topo, bus_of[u], sensor_at);
        std::vector<std::size_t> n3, n12;
        for (const auto& r : reach) (three_phase(r.sensor) ? n3 : n12).push_back(r.sensor);

        // Nearest three-phase sensor per side of u.
        std::vector<std::pair<std::size_t, std::size_t>> per_branch; // (branch, sensor)
        for (const auto& r : reach) {
            if (!three_phase(r.sensor)) continue;
            auto it = std::find_if(per_branch.begin(), per_branch.end(),
                                   [&](const auto& p) { return p.first == r.branch; });
            if (it == per_branch.end())
                per_branch.emplace_back(r.branch, r.sensor);
            else if (closer(u)(r.sensor, it->second))
                it->second = r.sensor;
        }

        if (per_branch.size() >= 2) {
            std::vector<std::size_t> best;
            for (const auto& p : per_branch) best.push_back(p.second);
            std::sort(best.begin(), best.end(), closer(u));
            edges.emplace_back(u, best[0]);
            edges.emplace_back(u, best[1]);
        } else if (!n3.empty()) {
            edges.emplace_back(u, *std::min_element(n3.begin(), n3.end(), closer(u)));
        } else if (!n12.empty()) {
            edges.emplace_back(u, *std::min_element(n12.begin(), n12.end(), closer(u)));
        }
    }

    SensorGraph g(std::move(nodes), std::move(edges));
    if (auto bad = g.first_disconnected())
        throw GraphConstructionError("measured-only graph is disconnected: sensor at bus " + g.node(*bad).bus +
                                     " is not connected to sensor at bus " + g.node(0).bus);
    return g;
}

inline SensorGraph build_full_topology(const FeederTopology& topo, const SensorPlacement& placement) {
    std::vector<GraphNode> nodes;
    nodes.reserve(topo.bus_count());
    for (const Bus& b : topo.buses()) {
        const int k = b.phases.size();
        nodes.push_back({b.id, k == 3 ? PhaseClass::three_phase : k == 2 ? PhaseClass::two_phase : PhaseClass::single_phase,
                         false});
    }
    for (const auto& e : placement.entries) {
        auto& node = nodes[topo.bus_index(e.bus)];
        node.observed = true;
        node.phase_class = e.phase_class;
    }
    std::vector<Edge> edges;
    for (std::size_t s = 0; s < topo.segments().size(); ++s) {
        if (!topo.is_closed(s)) continue;
        const auto& seg = topo.segments()[s];
        edges.emplace_back(topo.bus_index(seg.from_bus), topo.bus_index(seg.to_bus));
    }
    SensorGraph g(std::move(nodes), std::move(edges));
    if (auto bad = g.first_disconnected())
        throw GraphConstructionError("full-topology graph is disconnected at bus " + g.node(*bad).bus);
    return g;
}

inline SensorGraph build_graph(GraphStrategy s, const FeederTopology& topo, const SensorPlacement& placement) {
    return s == GraphStrategy::measured_only ? build_measured_only(topo, placement)
                                             : build_full_topology(topo, placement);
}

// ---------------------------------------------------------------------------
// Export formats

inline std::string export_graph(const SensorGraph& g) {
    std::ostringstream out;
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        const auto& n = g.node(i);
        out << "node " << i << ' ' << n.bus << ' ' << to_string(n.phase_class) << ' ' << (n.observed ? 1 : 0) << '\n';
    }
    for (auto [a, b] : g.edges()) out << "edge " << a << ' ' << b << '\n';
    return out.str();
}

inline SensorGraph parse_graph(std::string_view text) {
    std::vector<GraphNode> nodes;
    std::vector<Edge> edges;
    detail::for_each_record(text, [&](std::size_t line, const std::vector<std::string_view>& f) {
        if (f[0] == "node") {
            if (f.size() != 5) throw ParseError(line, "expected: node <idx> <bus> <phase_class> <observed>");
            if (std::to_string(nodes.size()) != f[1]) throw ParseError(line, "node indices must be consecutive");
            auto cls = parse_phase_class(f[3]);
            if (!cls) throw ParseError(line, "invalid phase class");
            if (f[4] != "0" && f[4] != "1") throw ParseError(line, "observed must be 0 or 1");
            nodes.push_back({std::string(f[2]), *cls, f[4] == "1"});
        } else if (f[0] == "edge") {
            if (f.size() != 3) throw ParseError(line, "expected: edge <i> <j>");
            std::size_t a = 0, b = 0;
            auto r1 = std::from_chars(f[1].data(), f[1].data() + f[1].size(), a);
            auto r2 = std::from_chars(f[2].data(), f[2].data() + f[2].size(), b);
            if (r1.ec != std::errc{} || r2.ec != std::errc{}) throw ParseError(line, "invalid edge index");
            edges.emplace_back(a, b);
        } else {
            throw ParseError(line, "unknown record '" + std::string(f[0]) + "'");
        }
    });
    return SensorGraph(std::move(nodes), std::move(edges));
}

inline std::string export_dot(const SensorGraph& g, std::string_view name = "G") {
    std::ostringstream out;
    out << "graph " << name << " {\n  node [shape=circle];\n";
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        const auto& n = g.node(i);
        out << "  n" << i << " [label=\"" << n.bus << "\"";
        if (!n.observed) out << ", style=dashed, color=gray";
        else if (n.phase_class != PhaseClass::three_phase) out << ", shape=box";
        out << "];\n";
    }
    for (auto [a, b] : g.edges()) out << "  n" << a << " -- n" << b << ";\n";
    out << "}\n";
    return out.str();
}

} // namespace stgnn
