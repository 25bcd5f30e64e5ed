#pragma once

// Training loop, evaluation metrics, seed-sweep confidence intervals and the
// graph-strategy timing benchmark.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "stgnn/datagen.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/model.hpp"
#include "stgnn/nn.hpp"

namespace stgnn {

struct TrainConfig {
    ModelConfig model;
    GraphStrategy topology = GraphStrategy::measured_only;
    int epochs = 15;
    std::size_t batch_size = 32;
    nn::AdamConfig optimizer; // lr 1e-3, weight decay 1e-4
    std::uint64_t seed = 0;

    /// Epoch counts of the reference protocol: 11 for the GRU baseline, 15 for STGNN variants.
    static int default_epochs(Arch a) { return a == Arch::gru ? 11 : 15; }

    void validate() const {
        model.validate();
        if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
        if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
        if (!(optimizer.lr > 0) || !(optimizer.weight_decay >= 0)) throw std::invalid_argument("invalid optimizer settings");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"model", to_json(c.model)},
            {"topology", to_string(c.topology)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.optimizer.lr},
            {"weight_decay", c.optimizer.weight_decay},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("topology")) {
        auto s = parse_graph_strategy(j.at("topology").get<std::string>());
        if (!s) throw std::invalid_argument("unknown topology " + j.at("topology").get<std::string>());
        c.topology = *s;
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer.lr = j.value("lr", c.optimizer.lr);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = j.value("eps", c.optimizer.eps);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline std::string fingerprint(const TrainConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

struct LossRecord {
    int epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
};

struct TrainResult {
    Model<float> model;
    std::vector<LossRecord> history;
    double seconds = 0.0;
    std::vector<double> epoch_seconds;
};

inline void write_loss_csv(const std::vector<LossRecord>& history, std::ostream& out) {
    out << "epoch,step,loss\n";
    for (const auto& r : history) out << r.epoch << ',' << r.step << ',' << detail::shortest(r.loss) << '\n';
}

/// Mini-batch training; loss is the mean node-level cross-entropy over observed nodes.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const SensorGraph& graph) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("training dataset is empty");
    const auto binding = bind_nodes(graph, data.layout());
    TrainResult out{Model<float>(cfg.model, graph, cfg.seed), {}, 0.0, {}};
    nn::AdamW<float> opt(cfg.optimizer);
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5f1e));
    Rng dropout_rng(derive_seed(cfg.seed, 0xd0d0));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    auto params = out.model.params();

    const auto start = std::chrono::steady_clock::now();
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
            auto batch = assemble_batch<float>(data, idx, graph, binding);
            nn::zero_grad(params);
            auto logits = out.model.forward(batch.steps, batch.size, true, dropout_rng);
            nn::Mat<float> dlogits;
            const float loss = nn::masked_cross_entropy(logits, batch.node_labels, &dlogits);
            out.model.backward(dlogits);
            opt.step(params);
            out.history.push_back({epoch, step++, static_cast<double>(loss)});
        }
        out.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count());
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct EvalReport {
    std::string run_id;
    std::string arch;
    std::string topology;
    std::string fingerprint;
    std::size_t samples = 0;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    double accuracy = 0.0;
    std::vector<double> per_class_f1;
    std::vector<std::size_t> support;
    std::vector<std::vector<std::size_t>> confusion; // [true][predicted]
    double train_seconds = 0.0;
};

/// Per-class F1 = 2PR/(P+R), 0 when P+R = 0. Macro F1 averages over classes with support;
/// weighted F1 weights by support.
inline EvalReport metrics_from_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                           std::size_t classes = kClasses) {
    if (truth.size() != pred.size()) throw std::invalid_argument("prediction count does not match labels");
    if (truth.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
    EvalReport r;
    r.samples = truth.size();
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes || pred[i] < 0 ||
            static_cast<std::size_t>(pred[i]) >= classes)
            throw std::out_of_range("label outside the class range");
        ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
        correct += truth[i] == pred[i];
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    r.per_class_f1.assign(classes, 0.0);
    r.support.assign(classes, 0);
    double macro = 0.0, weighted = 0.0;
    std::size_t with_support = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t tp = r.confusion[c][c], predicted = 0;
        for (std::size_t t = 0; t < classes; ++t) predicted += r.confusion[t][c];
        for (std::size_t p = 0; p < classes; ++p) r.support[c] += r.confusion[c][p];
        const double precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double recall = r.support[c] ? static_cast<double>(tp) / static_cast<double>(r.support[c]) : 0.0;
        r.per_class_f1[c] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        if (r.support[c]) {
            macro += r.per_class_f1[c];
            weighted += r.per_class_f1[c] * static_cast<double>(r.support[c]);
            ++with_support;
        }
    }
    r.macro_f1 = macro / static_cast<double>(with_support);
    r.weighted_f1 = weighted / static_cast<double>(truth.size());
    return r;
}

/// Eval-mode soft-vote predictions over the whole dataset. Side-effect free on parameters.
inline EvalReport evaluate(Model<float>& model, const Dataset& ds) {
    if (ds.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto pred = predict(model, ds, idx);
    std::vector<int> truth;
    truth.reserve(ds.size());
    for (const auto& s : ds.samples()) truth.push_back(s.label);
    auto r = metrics_from_predictions(truth, pred);
    r.arch = std::string(to_string(model.config().arch));
    return r;
}

/// Deterministic report content; wall-clock time is only included on request.
inline nlohmann::json to_json(const EvalReport& r, bool with_timing = false) {
    nlohmann::json j{{"run_id", r.run_id},         {"arch", r.arch},
                     {"topology", r.topology},     {"fingerprint", r.fingerprint},
                     {"samples", r.samples},       {"macro_f1", r.macro_f1},
                     {"weighted_f1", r.weighted_f1}, {"accuracy", r.accuracy},
                     {"per_class_f1", r.per_class_f1}, {"support", r.support},
                     {"confusion", r.confusion}};
    if (with_timing) j["train_seconds"] = r.train_seconds;
    return j;
}

inline std::string csv_header() {
    std::string h = "run_id,arch,topology,fingerprint,macro_f1";
    for (std::size_t c = 0; c < kClasses; ++c) h += ",f1_" + std::to_string(c);
    return h + ",seconds";
}

inline std::string csv_row(const EvalReport& r) {
    std::ostringstream out;
    out << r.run_id << ',' << r.arch << ',' << r.topology << ',' << r.fingerprint << ',' << detail::shortest(r.macro_f1);
    for (double f : r.per_class_f1) out << ',' << detail::shortest(f);
    out << ',' << detail::shortest(r.train_seconds);
    return out.str();
}

// ---------------------------------------------------------------------------
// Confidence intervals and seed sweeps

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;
};

/// Student-t interval: mean ± t_{(1+level)/2, n−1} · s / √n.
inline Interval confidence_interval(const std::vector<double>& scores, double level = 0.90) {
    if (scores.size() < 2) throw std::invalid_argument("confidence interval needs at least two scores");
    if (!(level > 0 && level < 1)) throw std::invalid_argument("confidence level must lie in (0, 1)");
    const auto n = static_cast<double>(scores.size());
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
    double ss = 0.0;
    for (double s : scores) ss += (s - mean) * (s - mean);
    const double sd = std::sqrt(ss / (n - 1));
    boost::math::students_t dist(n - 1);
    const double t = boost::math::quantile(dist, 0.5 + level / 2);
    return {mean, t * sd / std::sqrt(n)};
}

struct SeedSweepResult {
    std::vector<std::uint64_t> seeds;
    std::vector<double> scores;
    double mean = 0.0;
    double half_width = 0.0;
};

inline nlohmann::json to_json(const SeedSweepResult& r) {
    return {{"seeds", r.seeds}, {"scores", r.scores}, {"mean", r.mean}, {"ci90_half_width", r.half_width}};
}

/// Trains one model per seed on a fixed split and scores each on the evaluation set.
template <typename OnRun = std::nullptr_t>
SeedSweepResult seed_sweep(TrainConfig cfg, const std::vector<std::uint64_t>& seeds, const Dataset& train_set,
                           const Dataset& eval_set, const SensorGraph& graph, OnRun on_run = nullptr) {
    SeedSweepResult out;
    for (auto s : seeds) {
        cfg.seed = s;
        auto res = train(cfg, train_set, graph);
        auto rep = evaluate(res.model, eval_set);
        rep.train_seconds = res.seconds;
        if constexpr (!std::is_same_v<OnRun, std::nullptr_t>) on_run(s, res, rep);
        out.seeds.push_back(s);
        out.scores.push_back(rep.macro_f1);
    }
    if (out.scores.size() >= 2) {
        auto ci = confidence_interval(out.scores);
        out.mean = ci.mean;
        out.half_width = ci.half_width;
    } else if (!out.scores.empty()) {
        out.mean = out.scores.front();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingSummary {
    std::vector<double> seconds;
    double mean = 0.0;
    double stddev = 0.0;
    double max_epoch_cv = 0.0; // worst std/mean of epoch times within a run
};

struct TimingRow {
    std::string arch;
    TimingSummary a, b; // a: reference graph (measured-only), b: comparison graph (full)
    double ratio = 0.0; // b.mean / a.mean
};

inline TimingSummary summarize_times(const std::vector<double>& secs, const std::vector<std::vector<double>>& epochs) {
    TimingSummary s;
    s.seconds = secs;
    const auto n = static_cast<double>(secs.size());
    s.mean = std::accumulate(secs.begin(), secs.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : secs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = secs.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    for (const auto& e : epochs) {
        if (e.size() < 2) continue;
        const double m = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
        double v = 0.0;
        for (double x : e) v += (x - m) * (x - m);
        s.max_epoch_cv = std::max(s.max_epoch_cv, std::sqrt(v / static_cast<double>(e.size() - 1)) / m);
    }
    return s;
}

/// Trains the same configuration serially on two graphs, `repeats` times each with seeds
/// base_seed + r, and reports wall-clock statistics and the b/a ratio.
inline TimingRow benchmark_topologies(TrainConfig cfg, const Dataset& data, const SensorGraph& graph_a,
                                      const SensorGraph& graph_b, int repeats, std::uint64_t base_seed = 0) {
    if (repeats < 1) throw std::invalid_argument("need at least one repetition");
    std::vector<double> sa, sb;
    std::vector<std::vector<double>> ea, eb;
    for (int r = 0; r < repeats; ++r) {
        cfg.seed = base_seed + static_cast<std::uint64_t>(r);
        auto ra = train(cfg, data, graph_a);
        sa.push_back(ra.seconds);
        ea.push_back(ra.epoch_seconds);
        auto rb = train(cfg, data, graph_b);
        sb.push_back(rb.seconds);
        eb.push_back(rb.epoch_seconds);
    }
    TimingRow row;
    row.arch = std::string(to_string(cfg.model.arch));
    row.a = summarize_times(sa, ea);
    row.b = summarize_times(sb, eb);
    row.ratio = row.b.mean / row.a.mean;
    return row;
}

inline nlohmann::json to_json(const TimingRow& r) {
    auto side = [](const TimingSummary& s) {
        return nlohmann::json{{"seconds", s.seconds}, {"mean", s.mean}, {"std", s.stddev}, {"max_epoch_cv", s.max_epoch_cv}};
    };
    return {{"arch", r.arch}, {"measured_only", side(r.a)}, {"full", side(r.b)}, {"ratio", r.ratio}};
}

} // namespace stgnn
