#pragma once

// Physical feeder model: buses, phased segments, switch states, and the
// line-oriented feeder file format.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stgnn/errors.hpp"

namespace stgnn {

enum class Phase : std::uint8_t { A = 0, B = 1, C = 2 };

inline constexpr std::array<Phase, 3> kAllPhases{Phase::A, Phase::B, Phase::C};

class PhaseSet {
public:
    constexpr PhaseSet() = default;
    constexpr explicit PhaseSet(std::uint8_t bits) : bits_(bits & 0x7u) {}

    static constexpr PhaseSet all() { return PhaseSet{0x7u}; }

    /// Parses a subset string of "ABC" ("A", "AC", "ABC", ...). Order-insensitive.
    static std::optional<PhaseSet> parse(std::string_view text) {
        if (text.empty()) return std::nullopt;
        std::uint8_t bits = 0;
        for (char c : text) {
            std::uint8_t bit = 0;
            switch (c) {
                case 'A': case 'a': bit = 1u; break;
                case 'B': case 'b': bit = 2u; break;
                case 'C': case 'c': bit = 4u; break;
                default: return std::nullopt;
            }
            if (bits & bit) return std::nullopt;
            bits |= bit;
        }
        return PhaseSet{bits};
    }

    constexpr bool contains(Phase p) const { return bits_ & (1u << static_cast<unsigned>(p)); }
    constexpr int size() const { return (bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u); }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr bool subset_of(PhaseSet other) const { return (bits_ & ~other.bits_) == 0; }
    constexpr std::uint8_t bits() const { return bits_; }
    constexpr PhaseSet operator&(PhaseSet o) const { return PhaseSet{static_cast<std::uint8_t>(bits_ & o.bits_)}; }
    constexpr PhaseSet operator|(PhaseSet o) const { return PhaseSet{static_cast<std::uint8_t>(bits_ | o.bits_)}; }
    constexpr bool operator==(const PhaseSet&) const = default;

    std::string str() const {
        std::string s;
        if (bits_ & 1u) s += 'A';
        if (bits_ & 2u) s += 'B';
        if (bits_ & 4u) s += 'C';
        return s;
    }

private:
    std::uint8_t bits_ = 0;
};

/// Orders bus ids by their leading integer, then by the remaining suffix ("9" < "9r" < "10").
/// Ids without a leading integer sort after numbered ids, lexicographically.
inline bool bus_id_less(std::string_view a, std::string_view b) {
    auto split = [](std::string_view s) {
        std::size_t n = 0;
        while (n < s.size() && s[n] >= '0' && s[n] <= '9') ++n;
        std::uint64_t value = std::numeric_limits<std::uint64_t>::max();
        if (n > 0) std::from_chars(s.data(), s.data() + n, value);
        return std::pair{value, s.substr(n)};
    };
    auto [va, sa] = split(a);
    auto [vb, sb] = split(b);
    if (va != vb) return va < vb;
    return sa < sb;
}

struct Bus {
    std::string id;
    PhaseSet phases;
    bool is_substation = false;

    bool operator==(const Bus&) const = default;
};

enum class SegmentKind { line, switch_, regulator, transformer };

inline std::string_view to_string(SegmentKind k) {
    switch (k) {
        case SegmentKind::line: return "line";
        case SegmentKind::switch_: return "switch";
        case SegmentKind::regulator: return "reg";
        case SegmentKind::transformer: return "xfmr";
    }
    return "?";
}

struct LineSegment {
    std::string from_bus;
    std::string to_bus;
    PhaseSet phases;
    double length = 0.0;
    SegmentKind kind = SegmentKind::line;

    bool operator==(const LineSegment&) const = default;
};

struct SwitchState {
    std::size_t segment = 0;
    bool closed = true;

    bool operator==(const SwitchState&) const = default;
};

enum class PhaseClass { three_phase, two_phase, single_phase };

inline std::string_view to_string(PhaseClass c) {
    switch (c) {
        case PhaseClass::three_phase: return "three_phase";
        case PhaseClass::two_phase: return "two_phase";
        case PhaseClass::single_phase: return "single_phase";
    }
    return "?";
}

inline std::optional<PhaseClass> parse_phase_class(std::string_view s) {
    if (s == "three_phase") return PhaseClass::three_phase;
    if (s == "two_phase") return PhaseClass::two_phase;
    if (s == "single_phase") return PhaseClass::single_phase;
    return std::nullopt;
}

struct SensorEntry {
    std::string bus;
    PhaseClass phase_class = PhaseClass::three_phase;

    bool operator==(const SensorEntry&) const = default;
};

struct SensorPlacement {
    std::vector<SensorEntry> entries;

    std::size_t size() const { return entries.size(); }
    bool contains(std::string_view bus) const {
        return std::any_of(entries.begin(), entries.end(), [&](const SensorEntry& e) { return e.bus == bus; });
    }
};

/// Immutable feeder. Construction enforces the structural invariants
/// (known endpoints, phase consistency, one substation); connectivity is
/// reported by validate() instead.
class FeederTopology {
public:
    struct Incidence {
        std::size_t segment;
        std::size_t neighbor;
    };

    FeederTopology(std::vector<Bus> buses, std::vector<LineSegment> segments,
                   std::vector<SwitchState> switch_states = {})
        : buses_(std::move(buses)), segments_(std::move(segments)), switch_states_(std::move(switch_states)) {
        std::size_t substations = 0;
        for (std::size_t i = 0; i < buses_.size(); ++i) {
            const Bus& b = buses_[i];
            if (b.id.empty()) throw SemanticError("bus with empty id");
            if (b.phases.empty()) throw SemanticError("bus " + b.id + " has no phases");
            if (!index_.emplace(b.id, i).second) throw SemanticError("duplicate bus " + b.id);
            if (b.is_substation) {
                substation_ = i;
                ++substations;
            }
        }
        if (substations != 1)
            throw SemanticError("expected exactly one substation bus, found " + std::to_string(substations));

        incident_.resize(buses_.size());
        for (std::size_t s = 0; s < segments_.size(); ++s) {
            const LineSegment& seg = segments_[s];
            auto from = find_bus(seg.from_bus);
            auto to = find_bus(seg.to_bus);
            if (!from) throw SemanticError("segment references undeclared bus " + seg.from_bus);
            if (!to) throw SemanticError("segment references undeclared bus " + seg.to_bus);
            if (*from == *to) throw SemanticError("segment " + seg.from_bus + "-" + seg.to_bus + " is a self loop");
            if (seg.phases.empty()) throw SemanticError("segment " + seg.from_bus + "-" + seg.to_bus + " has no phases");
            if (!seg.phases.subset_of(buses_[*from].phases & buses_[*to].phases))
                throw SemanticError("segment " + seg.from_bus + "-" + seg.to_bus + " phases " + seg.phases.str() +
                                    " not present at both endpoints");
            if (!(seg.length >= 0.0))
                throw SemanticError("segment " + seg.from_bus + "-" + seg.to_bus + " has negative length");
            incident_[*from].push_back({s, *to});
            incident_[*to].push_back({s, *from});
        }
        for (auto& list : incident_) {
            std::stable_sort(list.begin(), list.end(), [&](const Incidence& a, const Incidence& b) {
                return bus_id_less(buses_[a.neighbor].id, buses_[b.neighbor].id);
            });
        }

        closed_.assign(segments_.size(), true);
        std::vector<bool> seen(segments_.size(), false);
        for (const SwitchState& st : switch_states_) {
            if (st.segment >= segments_.size()) throw SemanticError("switch state references unknown segment");
            if (segments_[st.segment].kind != SegmentKind::switch_)
                throw SemanticError("switch state on non-switch segment " + segments_[st.segment].from_bus + "-" +
                                    segments_[st.segment].to_bus);
            if (seen[st.segment]) throw SemanticError("duplicate switch state");
            seen[st.segment] = true;
            closed_[st.segment] = st.closed;
        }
        for (std::size_t s = 0; s < segments_.size(); ++s) {
            if (segments_[s].kind == SegmentKind::switch_ && !seen[s]) switch_states_.push_back({s, true});
        }
        std::sort(switch_states_.begin(), switch_states_.end(),
                  [](const SwitchState& a, const SwitchState& b) { return a.segment < b.segment; });
    }

    const std::vector<Bus>& buses() const { return buses_; }
    const std::vector<LineSegment>& segments() const { return segments_; }
    const std::vector<SwitchState>& switch_states() const { return switch_states_; }
    std::size_t bus_count() const { return buses_.size(); }
    std::size_t substation() const { return substation_; }
    const Bus& bus(std::size_t i) const { return buses_[i]; }

    std::optional<std::size_t> find_bus(std::string_view id) const {
        auto it = index_.find(std::string(id));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t bus_index(std::string_view id) const {
        auto i = find_bus(id);
        if (!i) throw SemanticError("unknown bus " + std::string(id));
        return *i;
    }

    bool is_closed(std::size_t segment) const { return closed_[segment]; }

    /// Segments touching `bus`, ordered by neighbor bus id.
    const std::vector<Incidence>& incident(std::size_t bus) const { return incident_[bus]; }

    /// Segment joining the two buses (either direction), preferring switches.
    std::optional<std::size_t> find_segment(std::string_view a, std::string_view b) const {
        std::optional<std::size_t> found;
        for (std::size_t s = 0; s < segments_.size(); ++s) {
            const auto& seg = segments_[s];
            if ((seg.from_bus == a && seg.to_bus == b) || (seg.from_bus == b && seg.to_bus == a)) {
                if (seg.kind == SegmentKind::switch_) return s;
                if (!found) found = s;
            }
        }
        return found;
    }

    bool operator==(const FeederTopology& o) const {
        return buses_ == o.buses_ && segments_ == o.segments_ && switch_states_ == o.switch_states_;
    }

private:
    std::vector<Bus> buses_;
    std::vector<LineSegment> segments_;
    std::vector<SwitchState> switch_states_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::vector<Incidence>> incident_;
    std::vector<bool> closed_;
    std::size_t substation_ = 0;
};

// ---------------------------------------------------------------------------
// Feeder file format

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::string_view strip_comment(std::string_view line) {
    auto hash = line.find('#');
    return hash == std::string_view::npos ? line : line.substr(0, hash);
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

template <typename Fn>
void for_each_record(std::string_view text, Fn&& fn) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        ++line_no;
        auto fields = split_ws(strip_comment(line));
        if (!fields.empty()) fn(line_no, fields);
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace detail

inline FeederTopology parse_feeder(std::string_view text) {
    std::vector<Bus> buses;
    std::vector<LineSegment> segments;
    std::vector<SwitchState> states;
    std::unordered_map<std::string, std::size_t> declared;
    std::vector<std::pair<std::size_t, std::size_t>> segment_lines;

    auto phases_of = [](std::size_t line, std::string_view s) {
        auto p = PhaseSet::parse(s);
        if (!p) throw ParseError(line, "invalid phase string '" + std::string(s) + "'");
        return *p;
    };

    detail::for_each_record(text, [&](std::size_t line, const std::vector<std::string_view>& f) {
        const std::string_view kind = f[0];
        if (kind == "bus") {
            if (f.size() != 3 && f.size() != 4) throw ParseError(line, "expected: bus <id> <phases> [substation]");
            bool sub = false;
            if (f.size() == 4) {
                if (f[3] != "substation") throw ParseError(line, "unexpected token '" + std::string(f[3]) + "'");
                sub = true;
            }
            buses.push_back({std::string(f[1]), phases_of(line, f[2]), sub});
            declared.emplace(std::string(f[1]), line);
            return;
        }
        LineSegment seg;
        if (kind == "line") {
            if (f.size() != 5) throw ParseError(line, "expected: line <from> <to> <phases> <length>");
            auto len = detail::parse_double(f[4]);
            if (!len) throw ParseError(line, "invalid length '" + std::string(f[4]) + "'");
            seg = {std::string(f[1]), std::string(f[2]), phases_of(line, f[3]), *len, SegmentKind::line};
        } else if (kind == "switch") {
            if (f.size() != 5) throw ParseError(line, "expected: switch <from> <to> <phases> <closed|open>");
            if (f[4] != "closed" && f[4] != "open") throw ParseError(line, "switch state must be closed or open");
            seg = {std::string(f[1]), std::string(f[2]), phases_of(line, f[3]), 0.0, SegmentKind::switch_};
            states.push_back({segments.size(), f[4] == "closed"});
        } else if (kind == "xfmr" || kind == "reg") {
            if (f.size() != 4) throw ParseError(line, "expected: " + std::string(kind) + " <from> <to> <phases>");
            seg = {std::string(f[1]), std::string(f[2]), phases_of(line, f[3]), 0.0,
                   kind == "xfmr" ? SegmentKind::transformer : SegmentKind::regulator};
        } else {
            throw ParseError(line, "unknown record '" + std::string(kind) + "'");
        }
        segment_lines.emplace_back(segments.size(), line);
        segments.push_back(std::move(seg));
    });

    // Dangling references are reported against the offending record.
    for (auto [s, line] : segment_lines) {
        for (const auto* id : {&segments[s].from_bus, &segments[s].to_bus}) {
            if (!declared.count(*id)) throw SemanticError("line " + std::to_string(line) + ": undeclared bus " + *id);
        }
    }
    return FeederTopology(std::move(buses), std::move(segments), std::move(states));
}

inline FeederTopology load_feeder(const std::string& path) { return parse_feeder(detail::read_file(path)); }

inline std::string serialize_feeder(const FeederTopology& topo) {
    std::ostringstream out;
    out.precision(17);
    for (const Bus& b : topo.buses())
        out << "bus " << b.id << ' ' << b.phases.str() << (b.is_substation ? " substation" : "") << '\n';
    for (std::size_t s = 0; s < topo.segments().size(); ++s) {
        const LineSegment& seg = topo.segments()[s];
        out << to_string(seg.kind) << ' ' << seg.from_bus << ' ' << seg.to_bus << ' ' << seg.phases.str();
        if (seg.kind == SegmentKind::line) out << ' ' << seg.length;
        if (seg.kind == SegmentKind::switch_) out << (topo.is_closed(s) ? " closed" : " open");
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Sensor placement file: `pmu <bus> <three_phase|two_phase|single_phase>`

inline SensorPlacement parse_placement(std::string_view text, const FeederTopology& topo) {
    SensorPlacement placement;
    detail::for_each_record(text, [&](std::size_t line, const std::vector<std::string_view>& f) {
        if (f[0] != "pmu" || f.size() != 3) throw ParseError(line, "expected: pmu <bus> <phase_class>");
        auto cls = parse_phase_class(f[2]);
        if (!cls) throw ParseError(line, "invalid phase class '" + std::string(f[2]) + "'");
        placement.entries.push_back({std::string(f[1]), *cls});
    });
    std::unordered_map<std::string, bool> seen;
    for (const auto& e : placement.entries) {
        auto idx = topo.find_bus(e.bus);
        if (!idx) throw SemanticError("placement references unknown bus " + e.bus);
        if (!seen.emplace(e.bus, true).second) throw SemanticError("duplicate placement bus " + e.bus);
        const int n = topo.bus(*idx).phases.size();
        const bool ok = (e.phase_class == PhaseClass::three_phase && n == 3) ||
                        (e.phase_class == PhaseClass::two_phase && n >= 2) ||
                        (e.phase_class == PhaseClass::single_phase && n >= 1);
        if (!ok)
            throw SemanticError("placement at bus " + e.bus + " is " + std::string(to_string(e.phase_class)) +
                                " but the bus has phases " + topo.bus(*idx).phases.str());
    }
    return placement;
}

inline SensorPlacement load_placement(const std::string& path, const FeederTopology& topo) {
    return parse_placement(detail::read_file(path), topo);
}

// ---------------------------------------------------------------------------
// Switch reconfiguration

struct SwitchOp {
    std::string bus_a;
    std::string bus_b;
    bool close = false;
};

/// Green (lateral-redirected) configuration of the IEEE 123-bus feeder.
inline std::vector<SwitchOp> green_switch_ops() { return {{"60", "160", false}, {"54", "94", true}}; }

inline std::vector<SwitchOp> parse_switch_ops(std::string_view text) {
    std::vector<SwitchOp> ops;
    detail::for_each_record(text, [&](std::size_t line, const std::vector<std::string_view>& f) {
        if (f.size() != 3 || (f[0] != "open" && f[0] != "close"))
            throw ParseError(line, "expected: open|close <bus> <bus>");
        ops.push_back({std::string(f[1]), std::string(f[2]), f[0] == "close"});
    });
    return ops;
}

inline FeederTopology apply_switch_ops(const FeederTopology& topo, const std::vector<SwitchOp>& ops) {
    std::vector<SwitchState> states = topo.switch_states();
    for (const SwitchOp& op : ops) {
        auto seg = topo.find_segment(op.bus_a, op.bus_b);
        if (!seg) throw SemanticError("no segment between " + op.bus_a + " and " + op.bus_b);
        if (topo.segments()[*seg].kind != SegmentKind::switch_)
            throw SemanticError("segment " + op.bus_a + "-" + op.bus_b + " is not a switch");
        for (auto& st : states)
            if (st.segment == *seg) st.closed = op.close;
    }
    return FeederTopology(topo.buses(), topo.segments(), std::move(states));
}

// ---------------------------------------------------------------------------
// Distances and traversal over closed segments

/// Single-source shortest path lengths over closed segments. Unreachable buses are nullopt.
inline std::vector<std::optional<double>> shortest_distances(const FeederTopology& topo, std::size_t source) {
    const std::size_t n = topo.bus_count();
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<bool> done(n, false);
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[source] = 0.0;
    pq.emplace(0.0, source);
    while (!pq.empty()) {
        auto [d, u] = pq.top();
        pq.pop();
        if (done[u]) continue;
        done[u] = true;
        for (const auto& inc : topo.incident(u)) {
            if (!topo.is_closed(inc.segment)) continue;
            const double nd = d + topo.segments()[inc.segment].length;
            if (nd < dist[inc.neighbor]) {
                dist[inc.neighbor] = nd;
                pq.emplace(nd, inc.neighbor);
            }
        }
    }
    std::vector<std::optional<double>> out(n);
    for (std::size_t i = 0; i < n; ++i)
        if (done[i]) out[i] = dist[i];
    return out;
}

inline std::optional<double> electrical_distance(const FeederTopology& topo, std::string_view a, std::string_view b) {
    return shortest_distances(topo, topo.bus_index(a))[topo.bus_index(b)];
}

/// Breadth-first visiting order over closed segments, neighbors taken in bus-id order.
inline std::vector<std::size_t> bfs_order(const FeederTopology& topo, std::size_t source) {
    std::vector<std::size_t> order;
    std::vector<bool> seen(topo.bus_count(), false);
    std::queue<std::size_t> q;
    q.push(source);
    seen[source] = true;
    while (!q.empty()) {
        auto u = q.front();
        q.pop();
        order.push_back(u);
        for (const auto& inc : topo.incident(u)) {
            if (!topo.is_closed(inc.segment) || seen[inc.neighbor]) continue;
            seen[inc.neighbor] = true;
            q.push(inc.neighbor);
        }
    }
    return order;
}

// ---------------------------------------------------------------------------
// Validation

enum class Severity { info, warning, error };

struct Diagnostic {
    Severity severity;
    std::string code;
    std::string message;
};

struct ValidationReport {
    std::vector<Diagnostic> diagnostics;
    std::vector<std::string> orphans;
    /// Closed segments (from, to) whose addition closes a loop.
    std::vector<std::pair<std::string, std::string>> loops;
    std::size_t phase_issues = 0;

    bool connected() const { return orphans.empty(); }
    bool radial() const { return loops.empty(); }
    bool ok() const {
        return std::none_of(diagnostics.begin(), diagnostics.end(),
                            [](const Diagnostic& d) { return d.severity == Severity::error; });
    }
};

namespace detail {

class UnionFind {
public:
    explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    /// Returns false if a and b were already joined.
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent_[b] = a;
        if (rank_[a] == rank_[b]) ++rank_[a];
        return true;
    }

private:
    std::vector<std::size_t> parent_;
    std::vector<int> rank_;
};

} // namespace detail

inline ValidationReport validate(const FeederTopology& topo) {
    ValidationReport r;
    const auto dist = shortest_distances(topo, topo.substation());
    for (std::size_t i = 0; i < topo.bus_count(); ++i) {
        if (!dist[i]) r.orphans.push_back(topo.bus(i).id);
    }
    if (!r.orphans.empty()) {
        std::string list;
        for (const auto& id : r.orphans) list += (list.empty() ? "" : " ") + id;
        r.diagnostics.push_back({Severity::error, "orphan",
                                 std::to_string(r.orphans.size()) + " bus(es) unreachable from substation: " + list});
    }

    detail::UnionFind uf(topo.bus_count());
    for (std::size_t s = 0; s < topo.segments().size(); ++s) {
        if (!topo.is_closed(s)) continue;
        const auto& seg = topo.segments()[s];
        if (!uf.unite(topo.bus_index(seg.from_bus), topo.bus_index(seg.to_bus))) {
            r.loops.emplace_back(seg.from_bus, seg.to_bus);
            r.diagnostics.push_back({Severity::warning, "loop",
                                     "closed segment " + seg.from_bus + "-" + seg.to_bus + " closes a loop"});
        }
    }

    // Construction already rejects segment phases missing at an endpoint; what
    // remains is a bus carrying phases that no closed segment delivers to it.
    for (std::size_t i = 0; i < topo.bus_count(); ++i) {
        if (i == topo.substation()) continue;
        PhaseSet fed;
        for (const auto& inc : topo.incident(i))
            if (topo.is_closed(inc.segment)) fed = fed | topo.segments()[inc.segment].phases;
        if (dist[i] && !topo.bus(i).phases.subset_of(fed)) {
            ++r.phase_issues;
            r.diagnostics.push_back({Severity::warning, "phase",
                                     "bus " + topo.bus(i).id + " declares phases " + topo.bus(i).phases.str() +
                                         " but connected segments carry " + fed.str()});
        }
    }
    if (r.diagnostics.empty()) r.diagnostics.push_back({Severity::info, "ok", "connected and radial"});
    return r;
}

} // namespace stgnn
