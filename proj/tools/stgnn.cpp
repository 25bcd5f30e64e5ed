// stgnn: command-line driver for graph construction, data generation, training,
// evaluation and timing benchmarks.
//
// Artifacts land under an output root chosen by --out, then $STGNN_OUT, then the
// manifest's "output" field:
//   manifest.json
//   graphs/<strategy>-<config>.graph|.dot
//   data/dataset.cache, data/dataset.json, data/split.json
//   runs/<arch>-<topology>-s<seed>.ckpt (+ .ckpt.json, .loss.csv)
//   reports/<run>.json, reports/reports.csv
//   sweeps/<arch>-<topology>.json
//   bench/timing.json

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stgnn/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stgnn;

namespace {

struct Common {
    std::string out;
    std::string manifest;
};

struct Context {
    ExperimentManifest manifest;
    std::string manifest_fp;
    fs::path root;
};

/// Explicit manifest > <root>/manifest.json > built-in desk manifest for `config`.
Context open_context(const Common& c, const std::string& config = "default") {
    Context ctx;
    const char* env = std::getenv("STGNN_OUT");
    std::optional<fs::path> root;
    if (!c.out.empty()) root = c.out;
    else if (env && *env) root = env;

    if (!c.manifest.empty()) {
        ctx.manifest = load_manifest(c.manifest);
    } else if (auto p = root.value_or("stgnn_out") / "manifest.json"; fs::exists(p)) {
        ctx.manifest = load_manifest(p.string());
    } else {
        ctx.manifest = default_manifest(config);
    }
    if (root) ctx.manifest.output = root->string();
    ctx.root = ctx.manifest.output;
    ctx.manifest.validate();
    ctx.manifest_fp = fingerprint(ctx.manifest);
    return ctx;
}

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing artifact " + path.string());
    return json::parse(in);
}

GraphStrategy strategy_arg(const std::string& s) {
    auto g = parse_graph_strategy(s);
    if (!g) throw std::invalid_argument("unknown topology " + s);
    return *g;
}

std::string topology_tag(GraphStrategy g) { return g == GraphStrategy::measured_only ? "measured-only" : "full"; }

std::string run_stem(Arch a, GraphStrategy g, std::uint64_t seed) {
    return std::string(to_string(a)) + "-" + topology_tag(g) + "-s" + std::to_string(seed);
}

/// The generated dataset together with the manifest it was built from.
struct Workspace {
    ExperimentManifest manifest;
    std::string manifest_fp;
    std::string checksum;
    FeederSetup setup;
    PreparedData data;
};

Workspace open_workspace(const fs::path& root) {
    const auto dir = root / "data";
    if (!fs::exists(dir / "dataset.cache")) throw std::runtime_error("missing dataset " + (dir / "dataset.cache").string() + "; run gen-data first");
    const auto meta = read_json(dir / "dataset.json");
    auto manifest = manifest_from_json(meta.at("manifest"));
    const auto checksum = file_checksum((dir / "dataset.cache").string());
    if (checksum != meta.at("checksum").get<std::string>())
        throw std::runtime_error("dataset cache checksum does not match dataset.json");
    auto setup = load_setup(manifest);
    Workspace w{std::move(manifest), meta.at("manifest_fingerprint").get<std::string>(), checksum, std::move(setup), {}};

    const auto ds = read_cache((dir / "dataset.cache").string());
    const auto parts = read_json(dir / "split.json");
    auto pick = [&](const char* k) { return ds.subset(parts.at(k).get<std::vector<std::size_t>>()); };
    auto train = pick("train");
    w.data.full = ds;
    w.data.stats = fit_normalizer(train);
    w.data.split = {apply_normalizer(train, w.data.stats), apply_normalizer(pick("val"), w.data.stats),
                    apply_normalizer(pick("test"), w.data.stats)};
    return w;
}

TrainConfig resolve_train_config(const ExperimentManifest& m, Arch arch, GraphStrategy topo) {
    for (const auto& t : m.train)
        if (t.model.arch == arch && t.topology == topo) return t;
    return desk_train_config(arch, topo);
}

void print_histogram(const Dataset& ds) {
    const auto h = ds.histogram();
    std::cout << "class histogram (" << ds.size() << " windows)\n";
    for (std::size_t c = 0; c < h.size(); ++c)
        if (h[c]) std::cout << "  " << std::setw(2) << c << "  " << h[c] << '\n';
    std::cout << "no-fault share: " << std::fixed << std::setprecision(4)
              << (ds.empty() ? 0.0 : static_cast<double>(h[0]) / static_cast<double>(ds.size())) << '\n';
    std::cout.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_manifest(const Common& c, const std::string& config, bool show) {
    // start from the desk defaults unless a manifest is named explicitly
    Context ctx;
    ctx.manifest = c.manifest.empty() ? default_manifest(config) : load_manifest(c.manifest);
    const char* env = std::getenv("STGNN_OUT");
    if (!c.out.empty()) ctx.manifest.output = c.out;
    else if (env && *env) ctx.manifest.output = env;
    ctx.manifest.validate();
    ctx.root = ctx.manifest.output;
    ctx.manifest_fp = fingerprint(ctx.manifest);
    if (show) {
        std::cout << to_json(ctx.manifest).dump(2) << '\n';
    } else {
        const auto path = ctx.root / "manifest.json";
        save_manifest(ctx.manifest, path.string());
        std::cout << "wrote " << path.string() << '\n';
    }
    std::cout << "fingerprint " << ctx.manifest_fp << '\n';
    return 0;
}

int cmd_build_graph(const Common& c, const std::string& strategy, const std::string& config) {
    auto ctx = open_context(c, config);
    // the flag picks the switch state regardless of the manifest's own configuration
    auto m = ctx.manifest;
    m.switch_ops = config == "green" ? green_switch_ops() : std::vector<SwitchOp>{};
    const auto setup = load_setup(m);
    const auto g = build_graph(strategy_arg(strategy), setup.topology, setup.placement);
    const auto base = ctx.root / "graphs" / (topology_tag(strategy_arg(strategy)) + "-" + config);
    fs::create_directories(base.parent_path());
    {
        std::ofstream out(base.string() + ".graph");
        out << "# manifest " << ctx.manifest_fp << '\n' << export_graph(g);
    }
    {
        std::ofstream out(base.string() + ".dot");
        out << "// manifest " << ctx.manifest_fp << '\n' << export_dot(g);
    }
    std::cout << strategy << " graph (" << config << "): " << g.node_count() << " nodes, " << g.edges().size()
              << " edges\nwrote " << base.string() << ".graph and .dot\n";
    return 0;
}

struct GenOverrides {
    std::optional<std::size_t> runs, locations, types;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const Common& c, const std::string& config, const GenOverrides& o) {
    auto ctx = open_context(c, config);
    auto& m = ctx.manifest;
    if (o.runs) m.datagen.runs = *o.runs;
    if (o.locations) m.datagen.locations = *o.locations;
    if (o.types) m.datagen.types = *o.types;
    if (o.seed) m.seed = *o.seed;
    ctx.manifest_fp = fingerprint(m);

    const auto setup = load_setup(m);
    const auto ds = build_dataset(m.datagen, setup.topology, setup.placement, m.seed);
    const auto dir = ctx.root / "data";
    fs::create_directories(dir);
    write_cache(ds, (dir / "dataset.cache").string());
    const auto checksum = file_checksum((dir / "dataset.cache").string());
    const auto parts = split_indices(ds, SplitRatios{}, m.seed);

    write_json(dir / "split.json", {{"manifest_fingerprint", ctx.manifest_fp},
                                    {"seed", m.seed},
                                    {"ratios", {0.70, 0.15, 0.15}},
                                    {"train", parts[0]},
                                    {"val", parts[1]},
                                    {"test", parts[2]}});
    const auto h = ds.histogram();
    write_json(dir / "dataset.json", {{"manifest", to_json(m)},
                                      {"manifest_fingerprint", ctx.manifest_fp},
                                      {"datagen_fingerprint", ds.meta().fingerprint},
                                      {"checksum", checksum},
                                      {"windows", ds.size()},
                                      {"histogram", h},
                                      {"split_sizes", {parts[0].size(), parts[1].size(), parts[2].size()}}});
    print_histogram(ds);
    std::cout << "split train/val/test: " << parts[0].size() << '/' << parts[1].size() << '/' << parts[2].size() << '\n'
              << "cache " << (dir / "dataset.cache").string() << "\nchecksum " << checksum << "\nfingerprint "
              << ctx.manifest_fp << '\n';
    return 0;
}

json run_record(const Workspace& w, const TrainConfig& cfg) {
    return {{"manifest_fingerprint", w.manifest_fp},
            {"train_fingerprint", fingerprint(cfg)},
            {"dataset_checksum", w.checksum},
            {"topology", topology_tag(cfg.topology)},
            {"train", to_json(cfg)}};
}

EvalReport label_report(EvalReport r, const std::string& stem, const TrainConfig& cfg, const std::string& fp) {
    r.run_id = stem;
    r.topology = topology_tag(cfg.topology);
    r.fingerprint = fp;
    return r;
}

int cmd_train(const Common& c, const std::string& arch_s, const std::string& topo_s, std::optional<int> epochs,
              std::optional<std::uint64_t> seed, std::size_t seeds) {
    auto ctx = open_context(c);
    auto w = open_workspace(ctx.root);
    const auto arch = parse_arch(arch_s);
    if (!arch) throw std::invalid_argument("unknown architecture " + arch_s);
    auto cfg = resolve_train_config(w.manifest, *arch, strategy_arg(topo_s));
    if (epochs) cfg.epochs = *epochs;
    cfg.seed = seed.value_or(ctx.manifest.seed);
    cfg.validate();
    const auto graph = build_graph(cfg.topology, w.setup.topology, w.setup.placement);
    const auto runs = ctx.root / "runs";
    fs::create_directories(runs);

    auto save_run = [&](std::uint64_t s, TrainResult& res) {
        auto run_cfg = cfg;
        run_cfg.seed = s;
        const auto stem = run_stem(*arch, cfg.topology, s);
        auto extra = run_record(w, run_cfg);
        extra["train_seconds"] = res.seconds;
        save_checkpoint(res.model, (runs / (stem + ".ckpt")).string(), extra);
        std::ofstream loss(runs / (stem + ".loss.csv"));
        write_loss_csv(res.history, loss);
        std::cout << stem << ": " << res.history.size() << " steps, final loss "
                  << (res.history.empty() ? 0.0 : res.history.back().loss) << ", " << res.seconds << " s\n";
        return stem;
    };

    if (seeds <= 1) {
        auto res = train(cfg, w.data.split.train, graph);
        save_run(cfg.seed, res);
        return 0;
    }
    std::vector<std::uint64_t> list;
    for (std::size_t i = 0; i < seeds; ++i) list.push_back(cfg.seed + i);
    json runs_json = json::array();
    auto sweep = seed_sweep(cfg, list, w.data.split.train, w.data.split.test, graph,
                            [&](std::uint64_t s, TrainResult& res, const EvalReport& rep) {
                                const auto stem = save_run(s, res);
                                auto r = label_report(rep, stem, cfg, w.manifest_fp);
                                runs_json.push_back(to_json(r));
                            });
    auto out = to_json(sweep);
    out["arch"] = to_string(*arch);
    out["topology"] = topology_tag(cfg.topology);
    out["confidence"] = 0.90;
    out["manifest_fingerprint"] = w.manifest_fp;
    out["train_fingerprint"] = fingerprint(cfg);
    out["runs"] = runs_json;
    const auto path = ctx.root / "sweeps" / (std::string(to_string(*arch)) + "-" + topology_tag(cfg.topology) + ".json");
    write_json(path, out);
    std::cout << "macro F1 " << sweep.mean << " ± " << sweep.half_width << " (90% CI, " << seeds << " seeds)\nwrote "
              << path.string() << '\n';
    return 0;
}

int cmd_eval(const Common& c, std::string checkpoint, const std::string& split_name, bool timing, bool weighted) {
    auto ctx = open_context(c);
    auto w = open_workspace(ctx.root);
    if (!fs::exists(checkpoint) && fs::exists(ctx.root / "runs" / checkpoint)) checkpoint = (ctx.root / "runs" / checkpoint).string();
    if (!fs::exists(checkpoint) && fs::exists(ctx.root / "runs" / (checkpoint + ".ckpt")))
        checkpoint = (ctx.root / "runs" / (checkpoint + ".ckpt")).string();
    auto model = load_checkpoint<float>(checkpoint);
    const json side = fs::exists(checkpoint + ".json") ? read_json(checkpoint + ".json") : json::object();
    const json run = side.value("run", json::object());
    if (run.contains("dataset_checksum") && run.at("dataset_checksum") != w.checksum)
        std::cerr << "warning: checkpoint was trained on a different dataset cache\n";

    const Dataset* part = split_name == "val" ? &w.data.split.val : split_name == "train" ? &w.data.split.train : &w.data.split.test;
    auto rep = evaluate(model, *part);
    rep.run_id = fs::path(checkpoint).stem().string();
    rep.topology = run.value("topology", model.graph().node_count() == w.data.full.node_count() ? "measured-only" : "full");
    rep.fingerprint = w.manifest_fp;
    rep.train_seconds = run.value("train_seconds", 0.0);

    auto j = to_json(rep, timing);
    j["split"] = split_name;
    j["dataset_checksum"] = w.checksum;
    const auto reports = ctx.root / "reports";
    const auto path = reports / (rep.run_id + "-" + split_name + ".json");
    write_json(path, j);
    const auto csv = reports / "reports.csv";
    const bool fresh = !fs::exists(csv);
    std::ofstream out(csv, std::ios::app);
    if (fresh) out << csv_header() << '\n';
    out << csv_row(rep) << '\n';
    std::cout << rep.run_id << " on " << split_name << ": macro F1 " << rep.macro_f1;
    if (weighted) std::cout << ", weighted F1 " << rep.weighted_f1;
    std::cout << ", accuracy " << rep.accuracy << "\nwrote " << path.string() << '\n';
    return 0;
}

int cmd_bench(const Common& c, const std::string& archs, int repeats, int epochs, std::size_t windows) {
    auto ctx = open_context(c);
    auto w = open_workspace(ctx.root);
    std::vector<Arch> list;
    std::stringstream ss(archs);
    for (std::string tok; std::getline(ss, tok, ',');) {
        auto a = parse_arch(tok);
        if (!a) throw std::invalid_argument("unknown architecture " + tok);
        list.push_back(*a);
    }
    const auto& train_set = w.data.split.train;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(windows, train_set.size()); ++i) idx.push_back(i);
    const auto data = train_set.subset(idx);
    const auto g_meas = build_graph(GraphStrategy::measured_only, w.setup.topology, w.setup.placement);
    const auto g_full = build_graph(GraphStrategy::full_topology, w.setup.topology, w.setup.placement);

    json rows = json::array();
    std::cout << std::left << std::setw(12) << "arch" << std::setw(18) << "measured-only s" << std::setw(12) << "full s"
              << "ratio\n";
    for (auto a : list) {
        auto cfg = resolve_train_config(w.manifest, a, GraphStrategy::measured_only);
        cfg.epochs = epochs;
        auto row = benchmark_topologies(cfg, data, g_meas, g_full, repeats, ctx.manifest.seed);
        rows.push_back(to_json(row));
        std::cout << std::setw(12) << row.arch << std::setw(18) << row.a.mean << std::setw(12) << row.b.mean << row.ratio
                  << '\n';
    }
    const auto path = ctx.root / "bench" / "timing.json";
    write_json(path, {{"manifest_fingerprint", w.manifest_fp},
                      {"windows", data.size()},
                      {"epochs", epochs},
                      {"repeats", repeats},
                      {"rows", rows}});
    std::cout << "wrote " << path.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatio-temporal GNN fault location on distribution feeders"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--out", common.out, "output root (default: $STGNN_OUT, then the manifest's output)");
    app.add_option("--manifest", common.manifest, "experiment manifest JSON");

    const std::vector<std::string> configs{"default", "green"};
    const std::vector<std::string> topologies{"measured-only", "full"};

    std::string config = "default";
    bool show = false;
    auto* man = app.add_subcommand("manifest", "write (or print) the desk experiment manifest");
    man->add_option("--config", config, "feeder configuration")->check(CLI::IsMember(configs));
    man->add_flag("--print", show, "print instead of writing");

    std::string strategy;
    auto* bg = app.add_subcommand("build-graph", "export a sensor graph and its DOT rendering");
    bg->add_option("--strategy", strategy, "graph strategy")->required()->check(CLI::IsMember(topologies));
    bg->add_option("--config", config, "feeder configuration")->check(CLI::IsMember(configs));

    GenOverrides gen;
    auto* gd = app.add_subcommand("gen-data", "generate the window dataset cache and split manifest");
    gd->add_option("--config", config, "feeder configuration when no manifest exists")->check(CLI::IsMember(configs));
    gd->add_option("--runs", gen.runs, "runs per location and fault type")->check(CLI::PositiveNumber);
    gd->add_option("--locations", gen.locations, "number of fault positions")->check(CLI::Range(1, 25));
    gd->add_option("--types", gen.types, "number of fault types")->check(CLI::Range(1, 11));
    gd->add_option("--seed", gen.seed, "generation and split seed (model seeds come from train --seed)");

    std::string arch = "rgcn", topology = "measured-only";
    std::optional<int> epochs;
    std::optional<std::uint64_t> seed;
    std::size_t seeds = 1;
    auto* tr = app.add_subcommand("train", "train one model or a seed sweep");
    tr->add_option("--arch", arch, "gru|rgcn|rsage-mean|rsage-max|rgatv2");
    tr->add_option("--topology", topology, "graph strategy")->check(CLI::IsMember(topologies));
    tr->add_option("--epochs", epochs, "override the configured epoch count")->check(CLI::NonNegativeNumber);
    tr->add_option("--seed", seed, "model seed (first seed of a sweep)");
    tr->add_option("--seeds", seeds, "train this many seeds and report a 90% CI")->check(CLI::PositiveNumber);

    std::string checkpoint, split_name = "test";
    bool timing = false, weighted = false;
    auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    ev->add_option("--checkpoint", checkpoint, "checkpoint path or run name under runs/")->required();
    ev->add_option("--split", split_name, "split")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_flag("--timing", timing, "include training wall-clock in the report JSON");
    ev->add_flag("--weighted", weighted, "also print support-weighted F1");

    std::string archs = "rgcn,rgatv2,rsage-mean,rsage-max";
    int repeats = 3, bench_epochs = 2;
    std::size_t windows = 3200;
    auto* be = app.add_subcommand("bench", "measured-only vs full-topology training wall-clock");
    be->add_option("--archs", archs, "comma-separated architectures");
    be->add_option("--repeats", repeats, "serial repetitions per topology")->check(CLI::PositiveNumber);
    be->add_option("--epochs", bench_epochs, "epochs per timed run")->check(CLI::PositiveNumber);
    be->add_option("--windows", windows, "training windows per timed run")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*man) return cmd_manifest(common, config, show);
        if (*bg) return cmd_build_graph(common, strategy, config);
        if (*gd) return cmd_gen_data(common, config, gen);
        if (*tr) return cmd_train(common, arch, topology, epochs, seed, seeds);
        if (*ev) return cmd_eval(common, checkpoint, split_name, timing, weighted);
        if (*be) return cmd_bench(common, archs, repeats, bench_epochs, windows);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
