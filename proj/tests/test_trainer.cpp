#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>

#include "stgnn/trainer.hpp"
#include "test_support.hpp"

using namespace stgnn;
using namespace stgnn::testing;

namespace {

DatagenConfig tiny_data(std::size_t locations, std::size_t types, std::size_t runs) {
    DatagenConfig c;
    c.locations = locations;
    c.types = types;
    c.runs = runs;
    return c;
}

TrainConfig small_train(Arch arch, int epochs) {
    TrainConfig c;
    c.model.arch = arch;
    c.model.gru_hidden = 16;
    c.model.gnn_hidden = 16;
    c.epochs = epochs;
    c.seed = 3;
    return c;
}

bool same_params(Model<float>& a, Model<float>& b) {
    auto pa = a.params(), pb = b.params();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->value.size() != pb[i]->value.size() ||
            std::memcmp(pa[i]->value.data(), pb[i]->value.data(), sizeof(float) * static_cast<std::size_t>(pa[i]->value.size())))
            return false;
    return true;
}

const SensorGraph& measured() {
    static const SensorGraph g = build_measured_only(ieee123(), ieee123_placement());
    return g;
}

// Normalized dataset of a few scenarios, shared across tests.
const Dataset& small_normalized() {
    static const Dataset ds = [] {
        auto raw = build_dataset(tiny_data(4, 3, 1), ieee123(), ieee123_placement(), 9);
        return apply_normalizer(raw, fit_normalizer(raw, [](const std::string&) {}));
    }();
    return ds;
}

} // namespace

// --- metrics ------------------------------------------------------------------------

TEST(Metrics, PerfectPredictions) {
    std::vector<int> t{0, 0, 3, 5, 5, 25};
    auto r = metrics_from_predictions(t, t);
    EXPECT_DOUBLE_EQ(r.macro_f1, 1.0);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(r.weighted_f1, 1.0);
}

TEST(Metrics, AlwaysNoFaultOnBalancedSet) {
    std::vector<int> truth;
    for (int i = 0; i < 50; ++i) truth.push_back(0);
    for (int c = 1; c <= 25; ++c) truth.insert(truth.end(), 2, c);
    std::vector<int> pred(truth.size(), 0);
    auto r = metrics_from_predictions(truth, pred);
    EXPECT_NEAR(r.per_class_f1[0], 2.0 / 3.0, 1e-15);
    for (std::size_t c = 1; c < kClasses; ++c) EXPECT_EQ(r.per_class_f1[c], 0.0);
    EXPECT_NEAR(r.macro_f1, (2.0 / 3.0) / 26.0, 1e-15);
    EXPECT_NEAR(r.macro_f1, 0.0256, 1e-4);
}

TEST(Metrics, ConfusionInvariants) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> cls(0, 25);
    std::vector<int> t(500), p(500);
    for (auto& x : t) x = cls(rng);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = i % 3 ? t[i] : cls(rng);
    auto r = metrics_from_predictions(t, p);
    std::size_t trace = 0, correct = 0;
    for (std::size_t c = 0; c < kClasses; ++c) {
        trace += r.confusion[c][c];
        EXPECT_EQ(std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0}), r.support[c]);
        EXPECT_EQ(r.support[c], static_cast<std::size_t>(std::count(t.begin(), t.end(), static_cast<int>(c))));
    }
    for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] == p[i];
    EXPECT_EQ(trace, correct);
}

TEST(Metrics, MacroF1SkipsClassesWithoutSupport) {
    // only classes 0 and 1 occur; class 2 is predicted once but never true
    std::vector<int> t{0, 0, 1, 1}, p{0, 2, 1, 1};
    auto r = metrics_from_predictions(t, p);
    const double f0 = 2 * 1.0 * 0.5 / 1.5;
    EXPECT_NEAR(r.macro_f1, (f0 + 1.0) / 2, 1e-15);
    EXPECT_EQ(r.per_class_f1[2], 0.0);
}

TEST(Metrics, InvariantToClassRelabeling) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> cls(0, 25);
    std::vector<int> t(300), p(300);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = cls(rng);
        p[i] = i % 2 ? t[i] : cls(rng);
    }
    std::vector<int> perm(26);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> pt, pp;
    for (std::size_t i = 0; i < t.size(); ++i) {
        pt.push_back(perm[static_cast<std::size_t>(t[i])]);
        pp.push_back(perm[static_cast<std::size_t>(p[i])]);
    }
    EXPECT_NEAR(metrics_from_predictions(t, p).macro_f1, metrics_from_predictions(pt, pp).macro_f1, 1e-12);
}

TEST(Metrics, RejectsBadInput) {
    EXPECT_THROW(metrics_from_predictions({}, {}), std::invalid_argument);
    EXPECT_THROW(metrics_from_predictions({0}, {0, 1}), std::invalid_argument);
    EXPECT_THROW(metrics_from_predictions({26}, {0}), std::out_of_range);
}

TEST(Metrics, JsonAndCsvShapes) {
    auto r = metrics_from_predictions({0, 1, 2}, {0, 1, 1});
    r.run_id = "x";
    r.train_seconds = 12.5;
    auto j = to_json(r);
    EXPECT_TRUE(j.contains("macro_f1"));
    EXPECT_EQ(j.at("confusion").size(), kClasses);
    EXPECT_FALSE(j.contains("train_seconds"));
    EXPECT_TRUE(to_json(r, true).contains("train_seconds"));
    const auto row = csv_row(r);
    const auto header = csv_header();
    EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(header.begin(), header.end(), ','));
    EXPECT_NE(row.find(",12.5"), std::string::npos);
}

// --- confidence intervals ----------------------------------------------------------

TEST(ConfidenceInterval, IdenticalScores) {
    auto ci = confidence_interval({0.7, 0.7, 0.7, 0.7});
    EXPECT_DOUBLE_EQ(ci.mean, 0.7);
    EXPECT_EQ(ci.half_width, 0.0);
}

TEST(ConfidenceInterval, TwoPointClosedForm) {
    auto ci = confidence_interval({0.0, 1.0});
    EXPECT_DOUBLE_EQ(ci.mean, 0.5);
    EXPECT_NEAR(ci.half_width, 6.313751514675 * 0.5, 1e-9);
    EXPECT_NEAR(ci.half_width, 3.157, 1e-3);
}

TEST(ConfidenceInterval, ContainsMeanAndNeedsTwoScores) {
    std::vector<double> s{0.81, 0.84, 0.79, 0.90, 0.86};
    auto ci = confidence_interval(s);
    EXPECT_GE(ci.half_width, 0.0);
    EXPECT_GE(ci.mean, *std::min_element(s.begin(), s.end()));
    EXPECT_LE(ci.mean, *std::max_element(s.begin(), s.end()));
    EXPECT_THROW(confidence_interval({0.5}), std::invalid_argument);
    EXPECT_THROW(confidence_interval({0.5, 0.6}, 1.0), std::invalid_argument);
}

// --- training ---------------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialization) {
    auto cfg = small_train(Arch::rgcn, 0);
    auto res = train(cfg, small_normalized(), measured());
    Model<float> fresh(cfg.model, measured(), cfg.seed);
    EXPECT_TRUE(same_params(res.model, fresh));
    EXPECT_TRUE(res.history.empty());
}

TEST(Train, SameSeedSameParameters) {
    for (auto arch : {Arch::gru, Arch::rgatv2}) {
        auto cfg = small_train(arch, 1);
        auto a = train(cfg, small_normalized(), measured());
        auto b = train(cfg, small_normalized(), measured());
        EXPECT_TRUE(same_params(a.model, b.model)) << to_string(arch);
        cfg.seed = 4;
        auto c = train(cfg, small_normalized(), measured());
        EXPECT_FALSE(same_params(a.model, c.model)) << to_string(arch);
    }
}

TEST(Train, LossDecreases) {
    auto cfg = small_train(Arch::rsage_mean, 4);
    auto res = train(cfg, small_normalized(), measured());
    const auto per_epoch = res.history.size() / 4;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < per_epoch; ++i) {
        first += res.history[i].loss;
        last += res.history[res.history.size() - 1 - i].loss;
    }
    EXPECT_LT(last, first);
    EXPECT_EQ(res.epoch_seconds.size(), 4u);
}

TEST(Train, OverfitsFourWindows) {
    // two pre-fault and two in-fault windows of one scenario
    const auto& ds = small_normalized();
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < ds.size() && pick.size() < 4; ++i)
        if ((ds.label(i) == 0) == (pick.size() < 2) && ds.sample(i).run == 0) pick.push_back(i);
    ASSERT_EQ(pick.size(), 4u);
    auto tiny = ds.subset(pick);
    for (auto arch : kAllArchs) {
        auto cfg = small_train(arch, 200); // one batch per epoch: 200 steps
        auto res = train(cfg, tiny, measured());
        auto rep = evaluate(res.model, tiny);
        EXPECT_GE(rep.accuracy, 0.99) << to_string(arch);
    }
}

TEST(Train, RejectsMismatchAndBadConfig) {
    auto full = build_full_topology(ieee123(), ieee123_placement());
    std::vector<GraphNode> nodes{{"1", PhaseClass::three_phase, true}};
    SensorGraph wrong(std::move(nodes), {});
    EXPECT_THROW(train(small_train(Arch::rgcn, 1), small_normalized(), wrong), ShapeError);
    auto bad = small_train(Arch::rgcn, 1);
    bad.batch_size = 0;
    EXPECT_THROW(train(bad, small_normalized(), full), std::invalid_argument);
    bad = small_train(Arch::rgcn, -1);
    EXPECT_THROW(train(bad, small_normalized(), full), std::invalid_argument);
}

TEST(Evaluate, SideEffectFreeAndRepeatable) {
    auto res = train(small_train(Arch::rgatv2, 1), small_normalized(), measured());
    auto before = res.model.params();
    std::vector<nn::Mat<float>> snapshot;
    for (auto* p : before) snapshot.push_back(p->value);
    auto a = evaluate(res.model, small_normalized());
    auto b = evaluate(res.model, small_normalized());
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(before[i]->value == snapshot[i]);
    EXPECT_EQ(a.samples, small_normalized().size());
    EXPECT_THROW(evaluate(res.model, small_normalized().subset({})), std::invalid_argument);
}

TEST(SeedSweep, HeldFixedSplitVaryingSeeds) {
    auto cfg = small_train(Arch::gru, 1);
    std::vector<std::uint64_t> seen;
    auto r = seed_sweep(cfg, {1, 2, 3}, small_normalized(), small_normalized(), measured(),
                        [&](std::uint64_t s, const TrainResult&, const EvalReport&) { seen.push_back(s); });
    EXPECT_EQ(r.scores.size(), 3u);
    EXPECT_EQ(seen, (std::vector<std::uint64_t>{1, 2, 3}));
    EXPECT_GE(r.half_width, 0.0);
    EXPECT_GE(r.mean, *std::min_element(r.scores.begin(), r.scores.end()));
    EXPECT_LE(r.mean, *std::max_element(r.scores.begin(), r.scores.end()));
    EXPECT_EQ(to_json(r).at("scores").size(), 3u);
}

TEST(Benchmark, IdenticalGraphsTakeEqualTime) {
    auto cfg = small_train(Arch::rgcn, 3);
    auto row = benchmark_topologies(cfg, small_normalized(), measured(), measured(), 3);
    EXPECT_NEAR(row.ratio, 1.0, 0.2);
    EXPECT_LT(row.a.max_epoch_cv, 0.3);
    EXPECT_LT(row.b.max_epoch_cv, 0.3);
    EXPECT_EQ(row.a.seconds.size(), 3u);
}

// --- serialization ------------------------------------------------------------------

TEST(TrainConfigJson, RoundTripAndDefaults) {
    TrainConfig c;
    c.model.arch = Arch::rsage_max;
    c.topology = GraphStrategy::full_topology;
    c.epochs = 7;
    c.seed = 99;
    auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(fingerprint(back), fingerprint(c));
    EXPECT_EQ(TrainConfig::default_epochs(Arch::gru), 11);
    EXPECT_EQ(TrainConfig::default_epochs(Arch::rgcn), 15);
    EXPECT_EQ(c.batch_size, 32u);
    EXPECT_DOUBLE_EQ(c.optimizer.lr, 1e-3);
    EXPECT_DOUBLE_EQ(c.optimizer.weight_decay, 1e-4);
    EXPECT_DOUBLE_EQ(c.model.dropout, 0.35);
    EXPECT_DOUBLE_EQ(c.model.attn_dropout, 0.3);
}

TEST(LossCsv, Format) {
    std::ostringstream out;
    write_loss_csv({{0, 0, 3.25}, {0, 1, 2.5}}, out);
    EXPECT_EQ(out.str(), "epoch,step,loss\n0,0,3.25\n0,1,2.5\n");
}
