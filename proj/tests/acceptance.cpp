// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance                 run all criteria
//   acceptance --criterion 5   run one

#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "layer_oracles.hpp"
#include "stgnn/experiment.hpp"
#include "test_support.hpp"

using namespace stgnn;
using namespace stgnn::testing;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& what) {
        if (!ok) pass = false;
        notes.push_back(std::string(ok ? "ok: " : "FAILED: ") + what);
    }
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int prec = 4) {
    std::ostringstream s;
    s << std::setprecision(prec) << x;
    return s.str();
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

std::string arch_name(Arch a) { return std::string(to_string(a)); }

// --- shared desk data ---------------------------------------------------------------

constexpr std::uint64_t kDataSeed = 1;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

PreparedData desk_data(const FeederTopology& topo) {
    return prepare(build_dataset(DatagenConfig{}, topo, ieee123_placement(), kDataSeed), kDataSeed,
                   [](const std::string&) {});
}

Dataset head(const Dataset& ds, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, ds.size()));
    std::iota(idx.begin(), idx.end(), 0);
    return ds.subset(idx);
}

SeedSweepResult sweep(Arch arch, GraphStrategy topo, int epochs, const PreparedData& d, const SensorGraph& g) {
    auto cfg = desk_train_config(arch, topo, epochs);
    auto r = seed_sweep(cfg, kSeeds, d.split.train, d.split.test, g, [&](std::uint64_t s, TrainResult& res, const EvalReport& rep) {
        progress(std::string(arch_name(arch)) + " " + std::string(to_string(topo)) + " seed " + std::to_string(s) +
                 ": macro F1 " + fmt(rep.macro_f1) + " (" + fmt(res.seconds, 3) + " s)");
    });
    return r;
}

// --- 1: measured-only construction ---------------------------------------------------

Outcome criterion1() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto green = ieee123_green();
    const std::pair<const char*, const FeederTopology*> cases[] = {{"default", &ieee123()}, {"green", &green}};
    for (auto [name, topo] : cases) {
        const auto g = build_measured_only(*topo, ieee123_placement());
        o.require(g.node_count() == 25, std::string(name) + ": " + std::to_string(g.node_count()) + " nodes (want 25)");
        const auto fixture = load_edge_fixture(std::string("measured_only_") + name + ".edges");
        o.require(!fixture.empty() && g.bus_edges() == fixture,
                  std::string(name) + ": " + std::to_string(g.bus_edges().size()) + " edges vs " +
                      std::to_string(fixture.size()) + " in the hand-traced fixture");
    }
    const double secs = since(t0);
    o.require(secs < 1.0, "runtime " + fmt(secs, 3) + " s < 1 s");
    return o;
}

// --- 2: gradients -------------------------------------------------------------------

Outcome criterion2() {
    Outcome o;
    const auto t0 = Clock::now();
    for (auto arch : kAllArchs) {
        double worst = 0.0;
        std::string where;
        const auto reports = model_gradient_check(arch, 1);
        for (const auto& r : reports)
            if (r.rel_error > worst) worst = r.rel_error, where = r.param;
        o.require(!reports.empty() && worst <= 1e-4, std::string(arch_name(arch)) + ": " + std::to_string(reports.size()) +
                                                         " tensors, max rel error " + fmt(worst, 3) +
                                                         (where.empty() ? "" : " (" + where + ")"));
    }
    const double secs = since(t0);
    o.require(secs < 30.0, "runtime " + fmt(secs, 3) + " s < 30 s");
    return o;
}

// --- 3: layer oracles -------------------------------------------------------------

Outcome criterion3() {
    Outcome o;
    constexpr int kTrials = 20;
    std::mt19937_64 rng(301);
    Rng init(302);

    double gcn = 0.0;
    for (int t = 0; t < kTrials; ++t) {
        auto g = random_graph(rng, 5 + static_cast<std::size_t>(t % 4));
        auto ops = GraphOps<double>::from(g);
        const std::size_t batch = 1 + static_cast<std::size_t>(t % 4);
        GcnLayer<double> layer("g", 4, 3);
        layer.init(init);
        M h = random_mat(static_cast<Eigen::Index>(g.node_count() * batch), 4, rng);
        auto y = layer.forward(h, ops, batch, false, dummy());
        gcn = std::max(gcn, (y - dense_gcn_oracle(g, h, layer.weight().value, batch)).cwiseAbs().maxCoeff());
    }
    o.require(gcn <= 1e-6, "GCN vs dense triple product, " + std::to_string(kTrials) + " instances: max |diff| " + fmt(gcn, 3));

    for (auto agg : {Aggregator::mean, Aggregator::max}) {
        double err = 0.0;
        for (int t = 0; t < kTrials; ++t) {
            auto g = random_graph(rng);
            auto ops = GraphOps<double>::from(g);
            const std::size_t batch = 1 + static_cast<std::size_t>(t % 3);
            SageLayer<double> layer("s", 3, 4, agg);
            layer.init(init);
            M h = random_mat(static_cast<Eigen::Index>(g.node_count() * batch), 3, rng);
            auto y = layer.forward(h, ops, batch, false, dummy());
            err = std::max(err, (y - sage_oracle(g, h, layer.weight().value, agg, batch)).cwiseAbs().maxCoeff());
        }
        o.require(err <= 1e-6, std::string("GraphSAGE-") + (agg == Aggregator::mean ? "mean" : "max") +
                                   " vs hand aggregation, " + std::to_string(kTrials) + " instances: max |diff| " + fmt(err, 3));
    }

    double out_err = 0.0, alpha_err = 0.0;
    for (int t = 0; t < kTrials; ++t) {
        auto g = random_graph(rng);
        auto ops = GraphOps<double>::from(g);
        Gatv2Layer<double> layer("a", 4, 2, 3);
        layer.init(init);
        // random attention vectors so negative LeakyReLU branches carry weight
        layer.att().value = random_mat(layer.att().value.rows(), layer.att().value.cols(), rng);
        M h = random_mat(static_cast<Eigen::Index>(g.node_count()), 4, rng);
        auto y = layer.forward(h, ops, 1, false, dummy());
        auto ref = gat_oracle(g, h, layer);
        out_err = std::max(out_err, (y - ref.out).cwiseAbs().maxCoeff());
        const auto nb = neighborhoods(g);
        for (std::size_t v = 0; v < g.node_count(); ++v) {
            auto sorted = nb[v];
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t e = ops.offsets[v]; e < ops.offsets[v + 1]; ++e) {
                const auto j = static_cast<std::size_t>(std::find(sorted.begin(), sorted.end(), ops.nbrs[e]) - sorted.begin());
                for (Eigen::Index k = 0; k < layer.heads(); ++k)
                    alpha_err = std::max(alpha_err, std::abs(layer.attention()[e](0, k) - ref.alpha[v][static_cast<std::size_t>(k)][j]));
            }
        }
    }
    o.require(out_err <= 1e-6 && alpha_err <= 1e-6, "GATv2 vs scalar attention, " + std::to_string(kTrials) +
                                                        " instances: max |diff| output " + fmt(out_err, 3) + ", alpha " +
                                                        fmt(alpha_err, 3));
    return o;
}

// --- 4: equivariance and normalization ------------------------------------------------

Outcome criterion4() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(401);
    Rng init(402);

    for (int kind = 0; kind < 4; ++kind) {
        double err = 0.0;
        for (int t = 0; t < 20; ++t) {
            auto g = random_graph(rng);
            const std::size_t n = g.node_count(), batch = 2;
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            auto layer = make_layer(kind, 3, init);
            M h = random_mat(static_cast<Eigen::Index>(n * batch), 3, rng);
            auto y = layer->forward(h, GraphOps<double>::from(g), batch, false, dummy());
            auto py = layer->forward(permute_rows(h, perm, batch), GraphOps<double>::from(permute_graph(g, perm)), batch, false, dummy());
            err = std::max(err, (py - permute_rows(y, perm, batch)).cwiseAbs().maxCoeff());
        }
        o.require(err <= 1e-9, std::string(kLayerNames[kind]) + " permutation equivariance: max |diff| " + fmt(err, 3));
    }

    // predict on real windows through permuted graphs: same weights, relabelled nodes
    {
        DatagenConfig small;
        small.locations = 3;
        small.types = 2;
        small.runs = 1;
        auto ds = build_dataset(small, ieee123(), ieee123_placement(), 7);
        ds = apply_normalizer(ds, fit_normalizer(ds, {}));
        std::vector<std::size_t> idx(ds.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (auto strategy : {GraphStrategy::measured_only, GraphStrategy::full_topology}) {
            const auto g = build_graph(strategy, ieee123(), ieee123_placement());
            std::vector<std::size_t> perm(g.node_count());
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            const auto pg = permute_graph(g, perm);
            std::size_t mismatches = 0;
            for (auto arch : kAllArchs) {
                ModelConfig cfg;
                cfg.arch = arch;
                cfg.gru_hidden = 16;
                cfg.gnn_hidden = 16;
                Model<float> a(cfg, g, 11), b(cfg, pg, 11);
                const auto pa = predict(a, ds, idx), pb = predict(b, ds, idx);
                for (std::size_t i = 0; i < pa.size(); ++i) mismatches += pa[i] != pb[i];
            }
            o.require(mismatches == 0, std::string(to_string(strategy)) + " predict under node permutation: " +
                                           std::to_string(mismatches) + " of " + std::to_string(5 * ds.size()) +
                                           " predictions changed");
        }
    }

    double alpha = 0.0;
    for (int t = 0; t < 50; ++t) {
        auto g = random_graph(rng);
        auto ops = GraphOps<double>::from(g);
        const std::size_t batch = 3;
        Gatv2Layer<double> layer("a", 3, 4, 4);
        layer.init(init);
        M h = random_mat(static_cast<Eigen::Index>(g.node_count() * batch), 3, rng, 4.0);
        layer.forward(h, ops, batch, false, dummy());
        for (std::size_t v = 0; v < g.node_count(); ++v) {
            M sum = M::Zero(static_cast<Eigen::Index>(batch), 4);
            for (std::size_t e = ops.offsets[v]; e < ops.offsets[v + 1]; ++e) sum += layer.attention()[e];
            alpha = std::max(alpha, (sum.array() - 1.0).abs().maxCoeff());
        }
    }
    o.require(alpha <= 1e-6, "sum of attention over each neighborhood: max |sum - 1| " + fmt(alpha, 3));

    double soft = 0.0;
    for (double scale : {0.1, 1.0, 10.0, 300.0}) {
        auto p = softmax_rows(random_mat(64, 26, rng, scale));
        soft = std::max(soft, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());
        if ((p.array() < 0.0).any()) soft = 1.0;
    }
    o.require(soft <= 1e-6, "softmax rows sum to 1: max |sum - 1| " + fmt(soft, 3));

    // two weak votes for class 0, one confident vote for class 1
    M probs(3, 2);
    probs << 0.55, 0.45,
             0.55, 0.45,
             0.05, 0.95;
    const auto vote = soft_vote(M(probs.array().log().matrix()), {true, true, true});
    int majority = 0;
    for (Eigen::Index v = 0; v < 3; ++v) majority += probs(v, 0) >= probs(v, 1) ? 1 : -1;
    o.require(vote.label == 1 && majority > 0 && std::abs(vote.probabilities(1) - 1.85) < 1e-12,
              "soft vote counterexample: summed (1.15, 1.85) picks class " + std::to_string(vote.label) +
                  " where the per-node majority picks class 0");

    const double secs = since(t0);
    o.require(secs < 120.0, "runtime " + fmt(secs, 3) + " s < 120 s");
    return o;
}

// --- 5: ordering on the default configuration --------------------------------------

Outcome criterion5() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto data = desk_data(ieee123());
    const auto g = build_measured_only(ieee123(), ieee123_placement());
    o.notes.push_back("desk dataset: " + std::to_string(data.full.size()) + " windows, " + std::to_string(kDeskEpochs) +
                      " epochs, hidden " + std::to_string(kDeskHidden) + ", seeds 1-3, test split");
    std::map<Arch, double> mean;
    for (auto arch : kAllArchs) mean[arch] = sweep(arch, GraphStrategy::measured_only, kDeskEpochs, data, g).mean;
    for (auto arch : kAllArchs) {
        if (arch == Arch::gru) continue;
        o.require(mean[arch] > mean[Arch::gru], std::string(arch_name(arch)) + " macro F1 " + fmt(mean[arch]) +
                                                     " > GRU " + fmt(mean[Arch::gru]));
    }
    o.notes.push_back("runtime " + fmt(since(t0) / 60.0, 3) + " min (expected <= 30)");
    return o;
}

// --- 6: robustness on the green configuration ----------------------------------------

/// Full-topology training costs several times the measured-only runs, so this criterion
/// uses a shorter schedule than criterion 5 for every model it compares.
constexpr int kRobustnessEpochs = 3;

Outcome criterion6() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto green = ieee123_green();
    const auto data = desk_data(green);
    const auto g_meas = build_measured_only(green, ieee123_placement());
    const auto g_full = build_full_topology(green, ieee123_placement());
    o.notes.push_back("green desk dataset: " + std::to_string(data.full.size()) + " windows, " +
                      std::to_string(kRobustnessEpochs) + " epochs, hidden " + std::to_string(kDeskHidden) +
                      ", seeds 1-3, test split");

    const auto gru = sweep(Arch::gru, GraphStrategy::measured_only, kRobustnessEpochs, data, g_meas);
    std::map<Arch, SeedSweepResult> meas, full;
    for (auto arch : kAllArchs) {
        if (arch == Arch::gru) continue;
        meas[arch] = sweep(arch, GraphStrategy::measured_only, kRobustnessEpochs, data, g_meas);
        full[arch] = sweep(arch, GraphStrategy::full_topology, kRobustnessEpochs, data, g_full);
    }
    for (auto& [arch, m] : meas)
        o.require(m.mean > full[arch].mean, std::string("(a) ") + arch_name(arch) + " measured-only " + fmt(m.mean) +
                                                " > full-topology " + fmt(full[arch].mean));
    for (auto& [arch, m] : meas)
        o.require(gru.half_width > m.half_width, std::string("(b) GRU 90% CI half-width ") + fmt(gru.half_width) + " > " +
                                                     arch_name(arch) + " " + fmt(m.half_width) + " (mean GRU " +
                                                     fmt(gru.mean) + ", " + arch_name(arch) + " " + fmt(m.mean) + ")");
    o.notes.push_back("runtime " + fmt(since(t0) / 60.0, 3) + " min");
    return o;
}

// --- 7: timing ---------------------------------------------------------------------

Outcome criterion7() {
    Outcome o;
    constexpr std::size_t kWindows = 1600;
    constexpr int kEpochs = 2, kRepeats = 3;
    const auto data = desk_data(ieee123());
    const auto subset = head(data.split.train, kWindows);
    const auto g_meas = build_measured_only(ieee123(), ieee123_placement());
    const auto g_full = build_full_topology(ieee123(), ieee123_placement());
    o.notes.push_back(std::to_string(subset.size()) + " training windows, " + std::to_string(kEpochs) + " epochs, " +
                      std::to_string(kRepeats) + " serial repetitions per topology, N=" +
                      std::to_string(g_meas.node_count()) + " vs N=" + std::to_string(g_full.node_count()));
    for (auto arch : kAllArchs) {
        if (arch == Arch::gru) continue;
        const auto row = benchmark_topologies(desk_train_config(arch, GraphStrategy::measured_only, kEpochs), subset,
                                              g_meas, g_full, kRepeats, 1);
        o.require(row.ratio >= 3.0, std::string(arch_name(arch)) + ": full " + fmt(row.b.mean, 3) + " s / measured-only " +
                                        fmt(row.a.mean, 3) + " s = " + fmt(row.ratio, 3) + "x (want >= 3)");
        o.notes.push_back(std::string("   epoch-time cv ") + fmt(row.a.max_epoch_cv, 2) + " / " + fmt(row.b.max_epoch_cv, 2));
    }
    return o;
}

// --- 8: dataset protocol -----------------------------------------------------------

Outcome criterion8() {
    Outcome o;
    const auto raw = build_dataset(DatagenConfig{}, ieee123(), ieee123_placement(), kDataSeed);
    const auto h = raw.histogram();
    o.require(2 * h[0] == raw.size(), std::to_string(h[0]) + " of " + std::to_string(raw.size()) + " windows are no-fault (want exactly half)");

    std::map<std::uint32_t, std::array<std::size_t, 2>> per_run; // [no-fault, fault]
    for (const auto& s : raw.samples()) ++per_run[s.run][s.label == 0 ? 0 : 1];
    bool slicing = per_run.size() == raw.runs().size();
    for (std::size_t r = 0; r < raw.runs().size() && slicing; ++r) {
        const auto& run = raw.runs()[r];
        const auto w = slice_windows(run, static_cast<std::uint32_t>(r));
        std::size_t faulted = 0;
        for (const auto& s : w) faulted += s.label != 0 && s.label == run.label;
        slicing = w.size() == 40 && faulted == 20 && per_run[static_cast<std::uint32_t>(r)] == std::array<std::size_t, 2>{20, 20};
    }
    o.require(slicing, std::to_string(raw.runs().size()) + " runs each slice into 40 windows, 20 no-fault / 20 fault");

    const auto data = prepare(raw, kDataSeed, {});
    const auto& train = data.split.train;
    std::array<double, kFeatures> sum{}, sq{}, count{};
    for (std::size_t i = 0; i < train.size(); ++i)
        for (std::size_t m = 0; m < train.node_count(); ++m)
            for (std::size_t f = 0; f < kFeatures; ++f) {
                if (!train.layout().phases[m].contains(static_cast<Phase>(f))) continue;
                for (std::size_t k = 0; k < kWindow; ++k) {
                    const double x = train.value(i, m, f, k);
                    sum[f] += x;
                    sq[f] += x * x;
                    count[f] += 1;
                }
            }
    double mean_err = 0.0, std_err = 0.0;
    for (std::size_t f = 0; f < kFeatures; ++f) {
        const double mu = sum[f] / count[f];
        mean_err = std::max(mean_err, std::abs(mu));
        std_err = std::max(std_err, std::abs(std::sqrt(sq[f] / count[f] - mu * mu) - 1.0));
    }
    o.require(mean_err <= 1e-6 && std_err <= 1e-6,
              "z-scored training features: max |mean| " + fmt(mean_err, 3) + ", max |std - 1| " + fmt(std_err, 3));

    const auto parts = split_indices(raw, SplitRatios{}, kDataSeed);
    std::array<std::set<std::pair<std::uint32_t, std::uint16_t>>, 3> keys;
    for (int p = 0; p < 3; ++p)
        for (auto i : parts[static_cast<std::size_t>(p)]) keys[static_cast<std::size_t>(p)].insert(raw.sample(i).group_key());
    std::size_t shared = 0;
    for (int p = 0; p < 3; ++p)
        for (int q = p + 1; q < 3; ++q)
            for (const auto& k : keys[static_cast<std::size_t>(p)]) shared += keys[static_cast<std::size_t>(q)].count(k);
    const double groups = static_cast<double>(keys[0].size() + keys[1].size() + keys[2].size());
    bool ratios = true;
    const double want[3] = {0.70, 0.15, 0.15};
    std::string shares;
    for (int p = 0; p < 3; ++p) {
        const double n = static_cast<double>(keys[static_cast<std::size_t>(p)].size());
        ratios = ratios && std::abs(n - want[p] * groups) <= 1.0;
        shares += (p ? "/" : "") + fmt(n / groups, 4);
    }
    o.require(shared == 0, "split group keys shared between partitions: " + std::to_string(shared));
    o.require(ratios, "group shares train/val/test " + shares + " (want 0.70/0.15/0.15 up to rounding)");
    return o;
}

// --- 9: determinism ----------------------------------------------------------------

std::string cache_bytes(const Dataset& ds) {
    std::ostringstream s;
    write_cache(ds, s);
    return s.str();
}

Outcome criterion9() {
    Outcome o;
    auto once = [] { return build_dataset(DatagenConfig{}, ieee123(), ieee123_placement(), kDataSeed); };
    const auto a = cache_bytes(once()), b = cache_bytes(once());
    o.require(a == b, "dataset cache checksum " + hex64(fnv1a64(a)) + " vs " + hex64(fnv1a64(b)));

    const auto data = desk_data(ieee123());
    const auto train_set = head(data.split.train, 600);
    const auto test_set = head(data.split.test, 300);
    for (auto strategy : {GraphStrategy::measured_only, GraphStrategy::full_topology}) {
        const auto g = build_graph(strategy, ieee123(), ieee123_placement());
        for (auto arch : kAllArchs) {
            if (arch == Arch::gru && strategy == GraphStrategy::full_topology) continue;
            auto cfg = desk_train_config(arch, strategy, 1, 5);
            std::string ckpt[2], report[2];
            for (int rep = 0; rep < 2; ++rep) {
                auto res = train(cfg, train_set, g);
                std::ostringstream s;
                save_checkpoint(res.model, s);
                ckpt[rep] = s.str();
                auto r = evaluate(res.model, test_set);
                r.fingerprint = fingerprint(cfg);
                report[rep] = to_json(r).dump();
            }
            o.require(ckpt[0] == ckpt[1] && report[0] == report[1],
                      std::string(arch_name(arch)) + " " + std::string(to_string(strategy)) + ": checkpoint " +
                          hex64(fnv1a64(ckpt[0])) + (ckpt[0] == ckpt[1] ? " identical" : " DIFFERS") + ", report " +
                          hex64(fnv1a64(report[0])) + (report[0] == report[1] ? " identical" : " DIFFERS"));
        }
    }
    return o;
}

const std::map<int, std::pair<const char*, std::function<Outcome()>>> kCriteria{
    {1, {"measured-only construction matches the hand-traced fixture", criterion1}},
    {2, {"reverse-mode gradients match finite differences", criterion2}},
    {3, {"layer outputs match independent oracles", criterion3}},
    {4, {"equivariance and normalization properties", criterion4}},
    {5, {"every STGNN beats the GRU baseline (default configuration)", criterion5}},
    {6, {"robustness on the green configuration", criterion6}},
    {7, {"full-topology training is at least 3x slower", criterion7}},
    {8, {"dataset protocol", criterion8}},
    {9, {"bit-identical reruns", criterion9}},
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    int only = 0;
    app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
    CLI11_PARSE(app, argc, argv);

    bool all = true;
    for (const auto& [id, entry] : kCriteria) {
        if (only && id != only) continue;
        const auto t0 = Clock::now();
        Outcome out;
        try {
            out = entry.second();
        } catch (const std::exception& e) {
            out.require(false, std::string("exception: ") + e.what());
        }
        for (const auto& n : out.notes) std::cout << "    " << n << '\n';
        std::cout << "criterion " << id << ": " << (out.pass ? "PASS" : "FAIL") << " - " << entry.first << " ("
                  << fmt(since(t0), 3) << " s)" << std::endl;
        all = all && out.pass;
    }
    return all ? 0 : 1;
}
