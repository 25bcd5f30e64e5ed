#pragma once

// Labeled window datasets: surrogate fault-signature generator, CSV ingestion,
// window slicing, z-score normalization, grouped splitting, binary cache.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "stgnn/errors.hpp"
#include "stgnn/feeder.hpp"
#include "stgnn/util.hpp"

namespace stgnn {

inline constexpr std::size_t kFeatures = 3;
inline constexpr std::size_t kWindow = 20;
inline constexpr std::size_t kRunSamples = 60;
inline constexpr std::size_t kFaultOnset = 40;
inline constexpr std::size_t kFaultDuration = 20;
inline constexpr std::size_t kWindowsPerRun = kRunSamples - kWindow;
inline constexpr std::size_t kClasses = 26;

// ---------------------------------------------------------------------------
// Fault taxonomy

enum class FaultType : std::uint8_t { AG, BG, CG, AB, BC, CA, ABG, BCG, CAG, ABC, ABCG };

inline constexpr std::array<FaultType, 11> kAllFaultTypes{FaultType::AG,  FaultType::BG,  FaultType::CG,
                                                         FaultType::AB,  FaultType::BC,  FaultType::CA,
                                                         FaultType::ABG, FaultType::BCG, FaultType::CAG,
                                                         FaultType::ABC, FaultType::ABCG};

inline std::string_view to_string(FaultType t) {
    static constexpr std::array<std::string_view, 11> names{"AG",  "BG",  "CG",  "AB",  "BC", "CA",
                                                            "ABG", "BCG", "CAG", "ABC", "ABCG"};
    return names[static_cast<std::size_t>(t)];
}

inline std::optional<FaultType> parse_fault_type(std::string_view s) {
    for (auto t : kAllFaultTypes)
        if (to_string(t) == s) return t;
    return std::nullopt;
}

inline PhaseSet fault_phases(FaultType t) {
    switch (t) {
        case FaultType::AG: return PhaseSet{1};
        case FaultType::BG: return PhaseSet{2};
        case FaultType::CG: return PhaseSet{4};
        case FaultType::AB: case FaultType::ABG: return PhaseSet{3};
        case FaultType::BC: case FaultType::BCG: return PhaseSet{6};
        case FaultType::CA: case FaultType::CAG: return PhaseSet{5};
        case FaultType::ABC: case FaultType::ABCG: return PhaseSet{7};
    }
    return {};
}

inline bool involves_ground(FaultType t) {
    switch (t) {
        case FaultType::AB: case FaultType::BC: case FaultType::CA: case FaultType::ABC: return false;
        default: return true;
    }
}

inline const std::vector<std::string>& default_fault_positions() {
    static const std::vector<std::string> positions{"7",  "13", "18", "21", "25", "29", "35", "42", "47",
                                                    "51", "53", "55", "57", "62", "65", "72", "80", "83",
                                                    "86", "89", "93", "97", "99", "101", "108"};
    return positions;
}

// ---------------------------------------------------------------------------
// Configuration

struct SurrogateConfig {
    double v0 = 1.0;
    double kappa_load = 0.05;
    double load_reference = 0.9;
    double noise_sigma = 0.002;
    double beta = 0.5;
    int load_radius_hops = 2;
    std::map<double, double> depth{{0.1, 0.6}, {1.0, 0.35}, {10.0, 0.12}};
    double swell = 0.03;
    double load_min = 0.5;
    double load_max = 1.3;

    /// Sag depth for a fault resistance; table values exactly, log-linear in between, clamped outside.
    double depth_for(double resistance) const {
        if (!(resistance > 0.0)) throw std::invalid_argument("fault resistance must be positive");
        if (depth.empty()) throw std::invalid_argument("empty depth table");
        if (auto it = depth.find(resistance); it != depth.end()) return it->second;
        auto hi = depth.lower_bound(resistance);
        if (hi == depth.begin()) return hi->second;
        if (hi == depth.end()) return std::prev(hi)->second;
        auto lo = std::prev(hi);
        const double w = (std::log(resistance) - std::log(lo->first)) / (std::log(hi->first) - std::log(lo->first));
        return lo->second + w * (hi->second - lo->second);
    }
};

struct DatagenConfig {
    std::vector<std::string> fault_positions = default_fault_positions();
    std::size_t locations = 25;
    std::size_t types = 11;
    std::vector<double> resistances{0.1, 1.0, 10.0};
    std::size_t runs = 4;
    SurrogateConfig surrogate;
};

inline nlohmann::json to_json(const DatagenConfig& c) {
    nlohmann::json depth = nlohmann::json::array();
    for (auto [r, d] : c.surrogate.depth) depth.push_back({r, d});
    return {{"fault_positions", c.fault_positions},
            {"locations", c.locations},
            {"types", c.types},
            {"resistances", c.resistances},
            {"runs", c.runs},
            {"surrogate",
             {{"v0", c.surrogate.v0},
              {"kappa_load", c.surrogate.kappa_load},
              {"load_reference", c.surrogate.load_reference},
              {"noise_sigma", c.surrogate.noise_sigma},
              {"beta", c.surrogate.beta},
              {"load_radius_hops", c.surrogate.load_radius_hops},
              {"depth", depth},
              {"swell", c.surrogate.swell},
              {"load_min", c.surrogate.load_min},
              {"load_max", c.surrogate.load_max}}}};
}

inline DatagenConfig datagen_config_from_json(const nlohmann::json& j) {
    DatagenConfig c;
    c.fault_positions = j.value("fault_positions", c.fault_positions);
    c.locations = j.value("locations", c.locations);
    c.types = j.value("types", c.types);
    c.resistances = j.value("resistances", c.resistances);
    c.runs = j.value("runs", c.runs);
    if (j.contains("surrogate")) {
        const auto& s = j.at("surrogate");
        auto& o = c.surrogate;
        o.v0 = s.value("v0", o.v0);
        o.kappa_load = s.value("kappa_load", o.kappa_load);
        o.load_reference = s.value("load_reference", o.load_reference);
        o.noise_sigma = s.value("noise_sigma", o.noise_sigma);
        o.beta = s.value("beta", o.beta);
        o.load_radius_hops = s.value("load_radius_hops", o.load_radius_hops);
        o.swell = s.value("swell", o.swell);
        o.load_min = s.value("load_min", o.load_min);
        o.load_max = s.value("load_max", o.load_max);
        if (s.contains("depth")) {
            o.depth.clear();
            for (const auto& p : s.at("depth")) o.depth[p.at(0).get<double>()] = p.at(1).get<double>();
        }
    }
    return c;
}

inline std::string fingerprint(const DatagenConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Domain records

struct FaultScenario {
    std::string location;
    FaultType fault_type = FaultType::AG;
    double resistance = 1.0;
    std::vector<double> load_multipliers; // per topology bus; empty when unknown (imported data)
};

/// Sensor buses in dataset node order and the phases each one measures.
struct SensorLayout {
    std::vector<std::string> buses;
    std::vector<PhaseSet> phases;

    std::size_t size() const { return buses.size(); }
    bool operator==(const SensorLayout&) const = default;
};

inline SensorLayout sensor_layout(const FeederTopology& topo, const SensorPlacement& placement) {
    SensorLayout l;
    for (const auto& e : placement.entries) {
        l.buses.push_back(e.bus);
        l.phases.push_back(topo.bus(topo.bus_index(e.bus)).phases);
    }
    return l;
}

struct RunRecord {
    std::uint32_t id = 0;
    FaultScenario scenario;
    std::uint8_t label = 0; // class of the fault windows
    std::size_t sensors = 0;
    std::size_t samples = kRunSamples;
    std::size_t onset = kFaultOnset;
    std::size_t duration = kFaultDuration;
    std::vector<float> traces; // [sensor][phase][sample]

    float at(std::size_t m, std::size_t p, std::size_t t) const { return traces[(m * kFeatures + p) * samples + t]; }
    float& at(std::size_t m, std::size_t p, std::size_t t) { return traces[(m * kFeatures + p) * samples + t]; }
};

struct WindowSample {
    std::uint32_t run = 0; // index into the dataset's run pool
    std::uint16_t start = 0;
    std::uint8_t label = 0;

    std::pair<std::uint32_t, std::uint16_t> group_key() const { return {run, start}; }
    bool operator==(const WindowSample&) const = default;
};

struct NormStats {
    std::array<double, kFeatures> mean{};
    std::array<double, kFeatures> stddev{1.0, 1.0, 1.0};
    std::array<bool, kFeatures> clamped{};
};

struct DatasetMeta {
    std::string fingerprint;
    std::uint64_t seed = 0;
};

using RunPool = std::shared_ptr<const std::vector<RunRecord>>;

/// Immutable window dataset: samples index into a shared pool of run traces.
class Dataset {
public:
    Dataset() : runs_(std::make_shared<const std::vector<RunRecord>>()) {}
    Dataset(SensorLayout layout, RunPool runs, std::vector<WindowSample> samples, DatasetMeta meta = {},
            std::optional<NormStats> norm = std::nullopt)
        : layout_(std::move(layout)), runs_(std::move(runs)), samples_(std::move(samples)), meta_(std::move(meta)),
          norm_(norm) {
        for (const auto& s : samples_) {
            if (s.run >= runs_->size()) throw std::out_of_range("window references unknown run");
            if (s.start + kWindow > (*runs_)[s.run].samples) throw std::out_of_range("window exceeds run length");
        }
    }

    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    std::size_t node_count() const { return layout_.size(); }
    const SensorLayout& layout() const { return layout_; }
    const RunPool& run_pool() const { return runs_; }
    const std::vector<RunRecord>& runs() const { return *runs_; }
    const std::vector<WindowSample>& samples() const { return samples_; }
    const WindowSample& sample(std::size_t i) const { return samples_[i]; }
    std::uint8_t label(std::size_t i) const { return samples_[i].label; }
    const DatasetMeta& meta() const { return meta_; }
    const std::optional<NormStats>& norm_stats() const { return norm_; }

    float value(std::size_t i, std::size_t node, std::size_t phase, std::size_t step) const {
        const auto& s = samples_[i];
        return (*runs_)[s.run].at(node, phase, s.start + step);
    }

    /// N×F×S features of window i, row-major.
    std::vector<float> features(std::size_t i) const {
        std::vector<float> out(node_count() * kFeatures * kWindow);
        for (std::size_t n = 0; n < node_count(); ++n)
            for (std::size_t f = 0; f < kFeatures; ++f)
                for (std::size_t k = 0; k < kWindow; ++k) out[(n * kFeatures + f) * kWindow + k] = value(i, n, f, k);
        return out;
    }

    std::array<std::size_t, kClasses> histogram() const {
        std::array<std::size_t, kClasses> h{};
        for (const auto& s : samples_) ++h[s.label];
        return h;
    }

    Dataset subset(const std::vector<std::size_t>& indices) const {
        std::vector<WindowSample> picked;
        picked.reserve(indices.size());
        for (auto i : indices) picked.push_back(samples_.at(i));
        return Dataset(layout_, runs_, std::move(picked), meta_, norm_);
    }

private:
    SensorLayout layout_;
    RunPool runs_;
    std::vector<WindowSample> samples_;
    DatasetMeta meta_;
    std::optional<NormStats> norm_;
};

/// True when two datasets hold the same layout, scenarios, windows and bit-identical traces.
inline bool same_content(const Dataset& a, const Dataset& b) {
    if (!(a.layout() == b.layout()) || a.samples() != b.samples() || a.runs().size() != b.runs().size()) return false;
    for (std::size_t r = 0; r < a.runs().size(); ++r) {
        const auto& x = a.runs()[r];
        const auto& y = b.runs()[r];
        if (x.id != y.id || x.label != y.label || x.samples != y.samples || x.onset != y.onset ||
            x.scenario.location != y.scenario.location || x.scenario.fault_type != y.scenario.fault_type ||
            x.scenario.resistance != y.scenario.resistance || x.traces.size() != y.traces.size())
            return false;
        if (!std::equal(x.traces.begin(), x.traces.end(), y.traces.begin(),
                        [](float u, float v) { return std::bit_cast<std::uint32_t>(u) == std::bit_cast<std::uint32_t>(v); }))
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Surrogate generator

/// Per-(topology, placement) geometry reused across runs.
class SurrogateContext {
public:
    SurrogateContext(const FeederTopology& topo, const SensorPlacement& placement, SurrogateConfig config = {})
        : topo_(&topo), layout_(sensor_layout(topo, placement)), config_(std::move(config)) {
        const std::size_t n = layout_.size();
        distances_.resize(n);
        neighborhood_.resize(n);
        for (std::size_t m = 0; m < n; ++m) {
            const std::size_t src = topo.bus_index(layout_.buses[m]);
            distances_[m] = shortest_distances(topo, src);
            // buses within the load radius, counted in closed-segment hops
            std::vector<int> hops(topo.bus_count(), -1);
            std::vector<std::size_t> frontier{src};
            hops[src] = 0;
            neighborhood_[m].push_back(src);
            for (int h = 1; h <= config_.load_radius_hops; ++h) {
                std::vector<std::size_t> next;
                for (auto u : frontier)
                    for (const auto& inc : topo.incident(u)) {
                        if (!topo.is_closed(inc.segment) || hops[inc.neighbor] >= 0) continue;
                        hops[inc.neighbor] = h;
                        next.push_back(inc.neighbor);
                        neighborhood_[m].push_back(inc.neighbor);
                    }
                frontier = std::move(next);
            }
        }
    }

    const FeederTopology& topology() const { return *topo_; }
    const SensorLayout& layout() const { return layout_; }
    const SurrogateConfig& config() const { return config_; }

    /// Electrical distance from sensor m to a bus; +inf when unreachable.
    double distance(std::size_t m, std::size_t bus) const {
        const auto& d = distances_[m][bus];
        return d ? *d : std::numeric_limits<double>::infinity();
    }

    double mean_load(std::size_t m, const std::vector<double>& loads) const {
        if (loads.empty()) return 1.0;
        double s = 0.0;
        for (auto b : neighborhood_[m]) s += loads[b];
        return s / static_cast<double>(neighborhood_[m].size());
    }

private:
    const FeederTopology* topo_;
    SensorLayout layout_;
    SurrogateConfig config_;
    std::vector<std::vector<std::optional<double>>> distances_;
    std::vector<std::vector<std::size_t>> neighborhood_;
};

/// Draws load multipliers for every bus and builds a scenario.
inline FaultScenario sample_scenario(const SurrogateContext& ctx, std::string location, FaultType type,
                                     double resistance, Rng& rng) {
    FaultScenario s{std::move(location), type, resistance, {}};
    std::uniform_real_distribution<double> load(ctx.config().load_min, ctx.config().load_max);
    s.load_multipliers.resize(ctx.topology().bus_count());
    for (auto& l : s.load_multipliers) l = load(rng);
    return s;
}

/// Noise-free multiplicative fault factor for sensor m, phase p (1 when unaffected).
inline double fault_factor(const SurrogateContext& ctx, const FaultScenario& s, std::size_t m, Phase p) {
    const auto& cfg = ctx.config();
    const double d = ctx.distance(m, ctx.topology().bus_index(s.location));
    const double decay = std::isfinite(d) ? std::exp(-cfg.beta * d) : 0.0;
    if (fault_phases(s.fault_type).contains(p)) return 1.0 - cfg.depth_for(s.resistance) * decay;
    if (involves_ground(s.fault_type)) return 1.0 + cfg.swell * decay;
    return 1.0;
}

inline RunRecord generate_run(const SurrogateContext& ctx, const FaultScenario& scenario, Rng& rng,
                              std::uint32_t id = 0, std::uint8_t label = 0) {
    const auto& topo = ctx.topology();
    const auto loc = topo.find_bus(scenario.location);
    if (!loc) throw SemanticError("fault location " + scenario.location + " not in topology");
    if (!fault_phases(scenario.fault_type).subset_of(topo.bus(*loc).phases))
        throw SemanticError("fault type " + std::string(to_string(scenario.fault_type)) + " needs phases absent at bus " +
                            scenario.location);
    if (!(scenario.resistance > 0.0)) throw SemanticError("fault resistance must be positive");
    if (!scenario.load_multipliers.empty() && scenario.load_multipliers.size() != topo.bus_count())
        throw SemanticError("load multiplier count does not match bus count");

    const auto& cfg = ctx.config();
    const auto& layout = ctx.layout();
    RunRecord run;
    run.id = id;
    run.label = label;
    run.scenario = scenario;
    run.sensors = layout.size();
    run.traces.assign(run.sensors * kFeatures * run.samples, 0.0f);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t m = 0; m < run.sensors; ++m) {
        const double base = cfg.v0 * (1.0 - cfg.kappa_load * (ctx.mean_load(m, scenario.load_multipliers) - cfg.load_reference));
        for (auto p : kAllPhases) {
            if (!layout.phases[m].contains(p)) continue;
            const double during = base * fault_factor(ctx, scenario, m, p);
            const auto pi = static_cast<std::size_t>(p);
            for (std::size_t t = 0; t < run.samples; ++t) {
                const bool faulted = t >= run.onset && t < run.onset + run.duration;
                const double eps = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * noise(rng) : 0.0;
                run.at(m, pi, t) = static_cast<float>((faulted ? during : base) + eps);
            }
        }
    }
    return run;
}

/// Windows of S samples at offsets 1..40; label 0 until a window reaches the fault onset.
inline std::vector<WindowSample> slice_windows(const RunRecord& run, std::uint32_t run_index = 0) {
    if (run.samples != kRunSamples || run.onset != kFaultOnset || run.duration != kFaultDuration ||
        run.traces.size() != run.sensors * kFeatures * run.samples)
        throw ShapeError("malformed run length: expected " + std::to_string(kRunSamples) + " samples with onset " +
                         std::to_string(kFaultOnset));
    std::vector<WindowSample> out;
    out.reserve(kWindowsPerRun);
    for (std::size_t s = 1; s <= kWindowsPerRun; ++s) {
        const bool contains_fault = s + kWindow - 1 >= run.onset;
        out.push_back({run_index, static_cast<std::uint16_t>(s), contains_fault ? run.label : std::uint8_t{0}});
    }
    return out;
}

inline std::uint8_t fault_label(const std::vector<std::string>& positions, std::string_view bus) {
    auto it = std::find(positions.begin(), positions.end(), bus);
    if (it == positions.end()) throw SemanticError("bus " + std::string(bus) + " is not a fault position");
    const auto idx = static_cast<std::size_t>(it - positions.begin());
    if (idx + 1 >= kClasses) throw SemanticError("too many fault positions");
    return static_cast<std::uint8_t>(idx + 1);
}

inline Dataset build_dataset(const DatagenConfig& config, const FeederTopology& topo, const SensorPlacement& placement,
                             std::uint64_t seed) {
    if (config.locations > config.fault_positions.size()) throw std::invalid_argument("locations exceeds fault positions");
    if (config.types > kAllFaultTypes.size()) throw std::invalid_argument("types exceeds 11");
    if (config.resistances.empty()) throw std::invalid_argument("no fault resistances");
    SurrogateContext ctx(topo, placement, config.surrogate);
    auto runs = std::make_shared<std::vector<RunRecord>>();
    runs->reserve(config.locations * config.types * config.runs);
    std::vector<WindowSample> samples;
    samples.reserve(runs->capacity() * kWindowsPerRun);
    for (std::size_t l = 0; l < config.locations; ++l) {
        const auto& bus = config.fault_positions[l];
        const auto label = fault_label(config.fault_positions, bus);
        for (std::size_t t = 0; t < config.types; ++t) {
            for (std::size_t r = 0; r < config.runs; ++r) {
                const auto id = static_cast<std::uint32_t>(runs->size());
                Rng rng(derive_seed(seed, id));
                // resistances cycle so every value is covered evenly across the sweep
                const double res = config.resistances[(l * config.types + t + r) % config.resistances.size()];
                auto scenario = sample_scenario(ctx, bus, kAllFaultTypes[t], res, rng);
                runs->push_back(generate_run(ctx, scenario, rng, id, label));
                auto w = slice_windows(runs->back(), id);
                samples.insert(samples.end(), w.begin(), w.end());
            }
        }
    }
    return Dataset(ctx.layout(), std::move(runs), std::move(samples), {fingerprint(config), seed});
}

// ---------------------------------------------------------------------------
// Normalization

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

/// Per-phase z-score statistics over observed entries of the training windows,
/// counting each trace sample once per window that covers it.
inline NormStats fit_normalizer(const Dataset& train, const WarningSink& warn = warn_to_stderr) {
    if (train.empty()) throw std::invalid_argument("cannot fit normalizer on an empty dataset");
    const auto& runs = train.runs();
    std::map<std::uint32_t, std::vector<double>> cover;
    for (const auto& s : train.samples()) {
        auto& c = cover[s.run];
        if (c.empty()) c.assign(runs[s.run].samples, 0.0);
        for (std::size_t k = 0; k < kWindow; ++k) c[s.start + k] += 1.0;
    }
    const auto& phases = train.layout().phases;
    NormStats st;
    for (std::size_t f = 0; f < kFeatures; ++f) {
        double w = 0.0, sum = 0.0;
        for (const auto& [r, c] : cover)
            for (std::size_t m = 0; m < train.node_count(); ++m) {
                if (!phases[m].contains(static_cast<Phase>(f))) continue;
                for (std::size_t t = 0; t < c.size(); ++t) {
                    w += c[t];
                    sum += c[t] * runs[r].at(m, f, t);
                }
            }
        const double mean = w > 0 ? sum / w : 0.0;
        double ss = 0.0;
        for (const auto& [r, c] : cover)
            for (std::size_t m = 0; m < train.node_count(); ++m) {
                if (!phases[m].contains(static_cast<Phase>(f))) continue;
                for (std::size_t t = 0; t < c.size(); ++t) {
                    const double d = runs[r].at(m, f, t) - mean;
                    ss += c[t] * d * d;
                }
            }
        const double sd = w > 0 ? std::sqrt(ss / w) : 0.0;
        st.mean[f] = mean;
        if (sd > 1e-12) {
            st.stddev[f] = sd;
        } else {
            st.stddev[f] = 1.0;
            st.clamped[f] = true;
            if (warn) warn("phase channel " + std::to_string(f) + " has zero variance; std clamped to 1");
        }
    }
    return st;
}

/// Returns a dataset whose run traces are z-scored; missing phases stay 0.
inline Dataset apply_normalizer(const Dataset& ds, const NormStats& st) {
    auto runs = std::make_shared<std::vector<RunRecord>>(ds.runs());
    const auto& phases = ds.layout().phases;
    for (auto& run : *runs)
        for (std::size_t m = 0; m < run.sensors; ++m)
            for (std::size_t f = 0; f < kFeatures; ++f) {
                if (!phases[m].contains(static_cast<Phase>(f))) continue;
                for (std::size_t t = 0; t < run.samples; ++t) {
                    float& x = run.at(m, f, t);
                    x = static_cast<float>((static_cast<double>(x) - st.mean[f]) / st.stddev[f]);
                }
            }
    return Dataset(ds.layout(), std::move(runs), ds.samples(), ds.meta(), st);
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;
};

/// Sample indices of the train/val/test partitions; whole groups move together.
inline std::array<std::vector<std::size_t>, 3> split_indices(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
    for (double r : {ratios.train, ratios.val, ratios.test})
        if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("split ratios must lie in [0, 1]");
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");

    std::map<std::pair<std::uint32_t, std::uint16_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < ds.size(); ++i) groups[ds.sample(i).group_key()].push_back(i);
    std::vector<const std::vector<std::size_t>*> order;
    order.reserve(groups.size());
    for (const auto& [k, members] : groups) order.push_back(&members);
    Rng rng(derive_seed(seed, 0x5b1d));
    std::shuffle(order.begin(), order.end(), rng);

    const auto n = static_cast<double>(order.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
    const auto n_val = std::min(order.size() - n_train, static_cast<std::size_t>(std::llround(ratios.val * n)));
    std::array<std::vector<std::size_t>, 3> out;
    for (std::size_t g = 0; g < order.size(); ++g) {
        const std::size_t part = g < n_train ? 0 : g < n_train + n_val ? 1 : 2;
        out[part].insert(out[part].end(), order[g]->begin(), order[g]->end());
    }
    for (auto& part : out) std::sort(part.begin(), part.end());
    return out;
}

struct DatasetSplit {
    Dataset train, val, test;
};

inline DatasetSplit split(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
    auto idx = split_indices(ds, ratios, seed);
    return {ds.subset(idx[0]), ds.subset(idx[1]), ds.subset(idx[2])};
}

// ---------------------------------------------------------------------------
// CSV interchange

inline constexpr std::array<std::string_view, 8> kCsvColumns{"run_id",   "sensor_bus", "phase",      "t_ms",
                                                             "v_rms_pu", "fault_bus",  "fault_type", "resistance_ohm"};

namespace detail {

template <typename T>
std::string shortest(T v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        auto comma = line.find(',', pos);
        out.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    for (auto& f : out) {
        while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.remove_suffix(1);
        while (!f.empty() && f.front() == ' ') f.remove_prefix(1);
    }
    return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

} // namespace detail

/// One row per (run, sensor, present phase, sample). Floats use shortest round-trip form.
inline void export_csv(const Dataset& ds, std::ostream& out) {
    out << "run_id,sensor_bus,phase,t_ms,v_rms_pu,fault_bus,fault_type,resistance_ohm\n";
    const auto& layout = ds.layout();
    for (const auto& run : ds.runs()) {
        const std::string tail = "," + run.scenario.location + "," + std::string(to_string(run.scenario.fault_type)) +
                                 "," + detail::shortest(run.scenario.resistance) + "\n";
        for (std::size_t m = 0; m < run.sensors; ++m)
            for (auto p : kAllPhases) {
                if (!layout.phases[m].contains(p)) continue;
                const char ph = "ABC"[static_cast<std::size_t>(p)];
                for (std::size_t t = 0; t < run.samples; ++t)
                    out << run.id << ',' << layout.buses[m] << ',' << ph << ',' << t << ','
                        << detail::shortest(run.at(m, static_cast<std::size_t>(p), t)) << tail;
            }
    }
}

inline void export_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    export_csv(ds, out);
}

/// Reads the CSV interchange format and windows every run. Runs keep first-appearance order;
/// sensors keep first-appearance order; each sensor's phases are those present in the file.
inline Dataset import_csv(std::istream& in, const std::vector<std::string>& fault_positions = default_fault_positions()) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("row 1: empty CSV, missing header");
    std::array<std::size_t, kCsvColumns.size()> col{};
    {
        auto header = detail::split_csv(line);
        for (std::size_t c = 0; c < kCsvColumns.size(); ++c) {
            auto it = std::find(header.begin(), header.end(), kCsvColumns[c]);
            if (it == header.end()) throw SchemaError("row 1: missing column " + std::string(kCsvColumns[c]));
            col[c] = static_cast<std::size_t>(it - header.begin());
        }
    }
    const std::size_t width = *std::max_element(col.begin(), col.end()) + 1;

    struct Cell {
        float v;
        bool set;
    };
    struct PendingRun {
        std::int64_t id;
        std::string fault_bus;
        FaultType type;
        double resistance;
        std::size_t first_row;
        std::map<std::pair<std::size_t, std::size_t>, std::array<Cell, kRunSamples>> channels; // (sensor, phase)
    };
    std::vector<PendingRun> runs;
    std::map<std::int64_t, std::size_t> run_index;
    std::vector<std::string> sensors;
    std::map<std::string, std::size_t, std::less<>> sensor_index;

    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        auto f = detail::split_csv(line);
        auto fail = [&](const std::string& what) { return SchemaError("row " + std::to_string(row) + ": " + what); };
        if (f.size() < width) throw fail("expected at least " + std::to_string(width) + " fields");

        std::int64_t id = 0;
        if (!detail::parse_number(f[col[0]], id)) throw fail("bad run_id");
        const auto bus = f[col[1]];
        if (bus.empty()) throw fail("empty sensor_bus");
        const auto ph = f[col[2]];
        if (ph.size() != 1 || !PhaseSet::parse(ph)) throw fail("bad phase '" + std::string(ph) + "'");
        const auto p = static_cast<std::size_t>(std::string_view("ABC").find(static_cast<char>(std::toupper(ph[0]))));
        long long t = 0;
        if (!detail::parse_number(f[col[3]], t)) throw fail("bad t_ms");
        if (t < 0 || t >= static_cast<long long>(kRunSamples))
            throw fail("malformed run length: t_ms " + std::to_string(t) + " outside [0, " + std::to_string(kRunSamples) + ")");
        float v = 0;
        if (!detail::parse_number(f[col[4]], v)) throw fail("bad v_rms_pu");
        auto type = parse_fault_type(f[col[6]]);
        if (!type) throw fail("unknown fault_type '" + std::string(f[col[6]]) + "'");
        double res = 0;
        if (!detail::parse_number(f[col[7]], res) || !(res > 0)) throw fail("bad resistance_ohm");
        const std::string fault_bus(f[col[5]]);
        if (std::find(fault_positions.begin(), fault_positions.end(), fault_bus) == fault_positions.end())
            throw fail("fault_bus " + fault_bus + " is not a fault position");

        auto [rit, fresh] = run_index.emplace(id, runs.size());
        if (fresh) runs.push_back({id, fault_bus, *type, res, row, {}});
        auto& run = runs[rit->second];
        if (run.fault_bus != fault_bus || run.type != *type || run.resistance != res)
            throw fail("fault metadata differs from earlier rows of run " + std::to_string(id));

        auto sit = sensor_index.find(bus);
        if (sit == sensor_index.end()) {
            sit = sensor_index.emplace(std::string(bus), sensors.size()).first;
            sensors.emplace_back(bus);
        }
        auto& cells = run.channels.try_emplace({sit->second, p}).first->second;
        auto& cell = cells[static_cast<std::size_t>(t)];
        if (cell.set) throw fail("duplicate sample t_ms " + std::to_string(t));
        cell = {v, true};
    }
    if (runs.empty()) throw SchemaError("CSV contains no data rows");

    SensorLayout layout;
    layout.buses = sensors;
    layout.phases.assign(sensors.size(), PhaseSet{});
    for (const auto& run : runs)
        for (const auto& [key, cells] : run.channels)
            layout.phases[key.first] = layout.phases[key.first] | PhaseSet{static_cast<std::uint8_t>(1u << key.second)};

    auto pool = std::make_shared<std::vector<RunRecord>>();
    std::vector<WindowSample> samples;
    for (const auto& pr : runs) {
        RunRecord rec;
        if (pr.id < 0 || pr.id > std::numeric_limits<std::uint32_t>::max())
            throw SchemaError("row " + std::to_string(pr.first_row) + ": run_id out of range");
        rec.id = static_cast<std::uint32_t>(pr.id);
        rec.scenario = {pr.fault_bus, pr.type, pr.resistance, {}};
        rec.label = fault_label(fault_positions, pr.fault_bus);
        rec.sensors = sensors.size();
        rec.traces.assign(rec.sensors * kFeatures * rec.samples, 0.0f);
        for (std::size_t m = 0; m < sensors.size(); ++m)
            for (std::size_t p = 0; p < kFeatures; ++p) {
                if (!layout.phases[m].contains(static_cast<Phase>(p))) continue;
                auto it = pr.channels.find({m, p});
                if (it == pr.channels.end())
                    throw SchemaError("row " + std::to_string(pr.first_row) + ": run " + std::to_string(pr.id) +
                                      " has no samples for sensor " + sensors[m] + " phase " + "ABC"[p]);
                for (std::size_t t = 0; t < kRunSamples; ++t) {
                    if (!it->second[t].set)
                        throw SchemaError("row " + std::to_string(pr.first_row) + ": malformed run length, run " +
                                          std::to_string(pr.id) + " sensor " + sensors[m] + " lacks t_ms " +
                                          std::to_string(t));
                    rec.at(m, p, t) = it->second[t].v;
                }
            }
        const auto index = static_cast<std::uint32_t>(pool->size());
        pool->push_back(std::move(rec));
        auto w = slice_windows(pool->back(), index);
        samples.insert(samples.end(), w.begin(), w.end());
    }
    return Dataset(std::move(layout), std::move(pool), std::move(samples), {"csv", 0});
}

inline Dataset import_csv(const std::string& path,
                          const std::vector<std::string>& fault_positions = default_fault_positions()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return import_csv(in, fault_positions);
}

// ---------------------------------------------------------------------------
// Binary cache
//
// header: "STGD" u32 version, u32 N, u32 F, u32 S, u64 sample count
// then: fingerprint, seed, sensor table, optional norm stats, runs, window table.

inline constexpr std::uint32_t kCacheVersion = 1;

inline void write_cache(const Dataset& ds, std::ostream& out) {
    using namespace io;
    out.write("STGD", 4);
    put<std::uint32_t>(out, kCacheVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.node_count()));
    put<std::uint32_t>(out, kFeatures);
    put<std::uint32_t>(out, kWindow);
    put<std::uint64_t>(out, ds.size());
    put_string(out, ds.meta().fingerprint);
    put<std::uint64_t>(out, ds.meta().seed);
    for (std::size_t m = 0; m < ds.node_count(); ++m) {
        put_string(out, ds.layout().buses[m]);
        put<std::uint8_t>(out, ds.layout().phases[m].bits());
    }
    put<std::uint8_t>(out, ds.norm_stats() ? 1 : 0);
    if (const auto& st = ds.norm_stats()) {
        for (std::size_t f = 0; f < kFeatures; ++f) {
            put<double>(out, st->mean[f]);
            put<double>(out, st->stddev[f]);
            put<std::uint8_t>(out, st->clamped[f]);
        }
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.runs().size()));
    for (const auto& run : ds.runs()) {
        put<std::uint32_t>(out, run.id);
        put<std::uint8_t>(out, run.label);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(run.scenario.fault_type));
        put<double>(out, run.scenario.resistance);
        put_string(out, run.scenario.location);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(run.samples));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(run.onset));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(run.duration));
        put_array(out, run.traces.data(), run.traces.size());
    }
    for (const auto& s : ds.samples()) {
        put<std::uint32_t>(out, s.run);
        put<std::uint16_t>(out, s.start);
        put<std::uint8_t>(out, s.label);
    }
}

inline void write_cache(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    write_cache(ds, out);
}

inline Dataset read_cache(std::istream& in) {
    using namespace io;
    char magic[4];
    if (!in.read(magic, 4) || std::string_view(magic, 4) != "STGD") throw SchemaError("not a dataset cache");
    if (auto v = get<std::uint32_t>(in); v != kCacheVersion)
        throw SchemaError("unsupported dataset cache version " + std::to_string(v));
    const auto n = get<std::uint32_t>(in);
    if (get<std::uint32_t>(in) != kFeatures || get<std::uint32_t>(in) != kWindow)
        throw SchemaError("dataset cache has unexpected feature or window size");
    const auto count = get<std::uint64_t>(in);
    DatasetMeta meta;
    meta.fingerprint = get_string(in);
    meta.seed = get<std::uint64_t>(in);
    SensorLayout layout;
    for (std::uint32_t m = 0; m < n; ++m) {
        layout.buses.push_back(get_string(in));
        layout.phases.push_back(PhaseSet{get<std::uint8_t>(in)});
    }
    std::optional<NormStats> norm;
    if (get<std::uint8_t>(in)) {
        NormStats st;
        for (std::size_t f = 0; f < kFeatures; ++f) {
            st.mean[f] = get<double>(in);
            st.stddev[f] = get<double>(in);
            st.clamped[f] = get<std::uint8_t>(in) != 0;
        }
        norm = st;
    }
    auto runs = std::make_shared<std::vector<RunRecord>>(get<std::uint32_t>(in));
    for (auto& run : *runs) {
        run.id = get<std::uint32_t>(in);
        run.label = get<std::uint8_t>(in);
        const auto type = get<std::uint8_t>(in);
        if (type >= kAllFaultTypes.size()) throw SchemaError("corrupt fault type in dataset cache");
        run.scenario.fault_type = static_cast<FaultType>(type);
        run.scenario.resistance = get<double>(in);
        run.scenario.location = get_string(in);
        run.samples = get<std::uint32_t>(in);
        run.onset = get<std::uint32_t>(in);
        run.duration = get<std::uint32_t>(in);
        if (run.samples > 1u << 20) throw SchemaError("corrupt run length in dataset cache");
        run.sensors = n;
        run.traces.resize(static_cast<std::size_t>(n) * kFeatures * run.samples);
        get_array(in, run.traces.data(), run.traces.size());
    }
    std::vector<WindowSample> samples(count);
    for (auto& s : samples) {
        s.run = get<std::uint32_t>(in);
        s.start = get<std::uint16_t>(in);
        s.label = get<std::uint8_t>(in);
        if (s.label >= kClasses) throw SchemaError("corrupt label in dataset cache");
    }
    return Dataset(std::move(layout), std::move(runs), std::move(samples), std::move(meta), norm);
}

inline Dataset read_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return read_cache(in);
}

} // namespace stgnn
