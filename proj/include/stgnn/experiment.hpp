#pragma once

// Experiment manifests, desk-scale presets and the data pipeline shared by the
// command-line tool and the acceptance runner.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgnn/datagen.hpp"
#include "stgnn/feeder.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/trainer.hpp"

namespace stgnn {

#ifdef STGNN_DATA_DIR
inline const std::string kDataDir = STGNN_DATA_DIR;
#else
inline const std::string kDataDir = "data";
#endif

// ---------------------------------------------------------------------------
// Desk-scale presets

/// Sizes used for laptop-scale reproductions: narrower layers and a higher learning rate than the
/// full protocol so that every variant moves past the no-fault plateau within a few epochs.
inline constexpr int kDeskHidden = 32;
inline constexpr double kDeskLearningRate = 3e-3;
inline constexpr int kDeskEpochs = 6;

inline TrainConfig desk_train_config(Arch arch, GraphStrategy topology = GraphStrategy::measured_only,
                                     int epochs = kDeskEpochs, std::uint64_t seed = 0) {
    TrainConfig c;
    c.model.arch = arch;
    c.model.gru_hidden = kDeskHidden;
    c.model.gnn_hidden = kDeskHidden;
    c.topology = topology;
    c.epochs = epochs;
    c.optimizer.lr = kDeskLearningRate;
    c.seed = seed;
    return c;
}

// ---------------------------------------------------------------------------
// Manifest

struct ExperimentManifest {
    std::string feeder = kDataDir + "/ieee123.feeder";
    std::string placement = kDataDir + "/ieee123.placement";
    std::string configuration = "default"; // label only; the switch ops define the topology
    std::vector<SwitchOp> switch_ops;
    DatagenConfig datagen;
    std::vector<TrainConfig> train;
    std::string output = "stgnn_out";
    std::uint64_t seed = 1;
    std::size_t seeds = 5; // seed-sweep length

    /// Referenced files must exist and the output directory must be creatable and writable.
    void validate() const {
        for (const auto* p : {&feeder, &placement})
            if (!std::filesystem::is_regular_file(*p)) throw std::invalid_argument("file not found: " + *p);
        std::filesystem::create_directories(output);
        const auto probe = std::filesystem::path(output) / ".write_probe";
        {
            std::ofstream f(probe);
            if (!f) throw std::invalid_argument("output directory not writable: " + output);
        }
        std::filesystem::remove(probe);
        for (const auto& t : train) t.validate();
        if (seeds == 0) throw std::invalid_argument("seeds must be positive");
    }
};

inline nlohmann::json to_json(const std::vector<SwitchOp>& ops) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& op : ops) out.push_back({op.close ? "close" : "open", op.bus_a, op.bus_b});
    return out;
}

inline std::vector<SwitchOp> switch_ops_from_json(const nlohmann::json& j) {
    std::vector<SwitchOp> ops;
    for (const auto& e : j) {
        const auto verb = e.at(0).get<std::string>();
        if (verb != "open" && verb != "close") throw std::invalid_argument("switch op must be open or close, got " + verb);
        ops.push_back({e.at(1).get<std::string>(), e.at(2).get<std::string>(), verb == "close"});
    }
    return ops;
}

inline nlohmann::json to_json(const ExperimentManifest& m) {
    nlohmann::json train = nlohmann::json::array();
    for (const auto& t : m.train) train.push_back(to_json(t));
    return {{"feeder", m.feeder},       {"placement", m.placement}, {"configuration", m.configuration},
            {"switch_ops", to_json(m.switch_ops)}, {"datagen", to_json(m.datagen)}, {"train", train},
            {"output", m.output},       {"seed", m.seed},           {"seeds", m.seeds}};
}

/// Parses a manifest; errors name the offending key.
inline ExperimentManifest manifest_from_json(const nlohmann::json& j) {
    ExperimentManifest m;
    auto field = [&](const char* key, auto&& apply) {
        if (!j.contains(key)) return;
        try {
            apply(j.at(key));
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string(key) + ": " + e.what());
        }
    };
    field("feeder", [&](const auto& v) { m.feeder = v.template get<std::string>(); });
    field("placement", [&](const auto& v) { m.placement = v.template get<std::string>(); });
    field("configuration", [&](const auto& v) { m.configuration = v.template get<std::string>(); });
    field("switch_ops", [&](const auto& v) { m.switch_ops = switch_ops_from_json(v); });
    field("datagen", [&](const auto& v) { m.datagen = datagen_config_from_json(v); });
    field("train", [&](const auto& v) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            try {
                m.train.push_back(train_config_from_json(v.at(i)));
            } catch (const std::exception& e) {
                throw std::invalid_argument("[" + std::to_string(i) + "]: " + e.what());
            }
        }
    });
    field("output", [&](const auto& v) { m.output = v.template get<std::string>(); });
    field("seed", [&](const auto& v) { m.seed = v.template get<std::uint64_t>(); });
    field("seeds", [&](const auto& v) { m.seeds = v.template get<std::size_t>(); });
    return m;
}

inline ExperimentManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
        return manifest_from_json(j);
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

inline void save_manifest(const ExperimentManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_json(m).dump(2) << '\n';
}

inline std::string fingerprint(const ExperimentManifest& m) { return hex64(fnv1a64(to_json(m).dump())); }

/// Desk manifest for one feeder configuration: all architectures, both topologies.
inline ExperimentManifest default_manifest(std::string_view configuration = "default") {
    ExperimentManifest m;
    if (configuration == "green") {
        m.configuration = "green";
        m.switch_ops = green_switch_ops();
    } else if (configuration != "default") {
        throw std::invalid_argument("unknown configuration " + std::string(configuration) + " (default|green)");
    }
    for (auto topo : {GraphStrategy::measured_only, GraphStrategy::full_topology})
        for (auto a : kAllArchs)
            if (a != Arch::gru || topo == GraphStrategy::measured_only) m.train.push_back(desk_train_config(a, topo));
    return m;
}

// ---------------------------------------------------------------------------
// Pipeline

struct FeederSetup {
    FeederTopology topology;
    SensorPlacement placement;
};

inline FeederSetup load_setup(const ExperimentManifest& m) {
    auto topo = load_feeder(m.feeder);
    auto placement = load_placement(m.placement, topo);
    if (!m.switch_ops.empty()) topo = apply_switch_ops(topo, m.switch_ops);
    return {std::move(topo), std::move(placement)};
}

/// Normalized splits; statistics come from the training part only.
struct PreparedData {
    Dataset full;
    DatasetSplit split;
    NormStats stats;
};

inline PreparedData prepare(const Dataset& ds, std::uint64_t split_seed, const WarningSink& warn = warn_to_stderr) {
    PreparedData p;
    p.full = ds;
    auto raw = split(ds, SplitRatios{}, split_seed);
    p.stats = fit_normalizer(raw.train, warn);
    p.split = {apply_normalizer(raw.train, p.stats), apply_normalizer(raw.val, p.stats),
               apply_normalizer(raw.test, p.stats)};
    return p;
}

inline PreparedData prepare(const ExperimentManifest& m, const FeederSetup& f, const WarningSink& warn = warn_to_stderr) {
    return prepare(build_dataset(m.datagen, f.topology, f.placement, m.seed), m.seed, warn);
}

} // namespace stgnn
