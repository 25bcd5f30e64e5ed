#pragma once

// Independent reference implementations of the graph layers, plus small graph and
// batch helpers shared by the layer tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "stgnn/gnn.hpp"

namespace stgnn::testing {

using namespace stgnn::nn;

using M = Mat<double>;

inline M random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    M m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

inline SensorGraph make_graph(std::size_t n, const std::vector<Edge>& edges) {
    std::vector<GraphNode> nodes;
    for (std::size_t i = 0; i < n; ++i) nodes.push_back({std::to_string(i + 1), PhaseClass::three_phase, true});
    return SensorGraph(std::move(nodes), edges);
}

inline SensorGraph random_graph(std::mt19937_64& rng, std::size_t max_nodes = 8) {
    std::uniform_int_distribution<std::size_t> size(1, max_nodes);
    const auto n = size(rng);
    std::bernoulli_distribution keep(0.4);
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (keep(rng)) edges.emplace_back(i, j);
    return make_graph(n, edges);
}

inline std::vector<std::vector<std::size_t>> neighborhoods(const SensorGraph& g) {
    std::vector<std::vector<std::size_t>> out(g.node_count());
    for (std::size_t v = 0; v < g.node_count(); ++v) out[v].push_back(v);
    for (auto [a, b] : g.edges()) {
        out[a].push_back(b);
        out[b].push_back(a);
    }
    return out;
}

// Row (v, w) of a node-major batch.
inline Eigen::Index row(std::size_t v, std::size_t w, std::size_t batch) { return static_cast<Eigen::Index>(v * batch + w); }

// Rows of node-major activations reordered so node i of the result is node perm[i].
inline M permute_rows(const M& x, const std::vector<std::size_t>& perm, std::size_t batch) {
    M out(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t w = 0; w < batch; ++w) out.row(row(i, w, batch)) = x.row(row(perm[i], w, batch));
    return out;
}

inline M dense_gcn_oracle(const SensorGraph& g, const M& h, const M& w, std::size_t batch) {
    const auto n = g.node_count();
    auto nb = neighborhoods(g);
    M a = M::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t v = 0; v < n; ++v)
        for (auto u : nb[v])
            a(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(u)) =
                1.0 / std::sqrt(static_cast<double>(nb[v].size() * nb[u].size()));
    M out(h.rows(), w.cols());
    for (std::size_t b = 0; b < batch; ++b) {
        M hb(static_cast<Eigen::Index>(n), h.cols());
        for (std::size_t v = 0; v < n; ++v) hb.row(static_cast<Eigen::Index>(v)) = h.row(row(v, b, batch));
        M yb = a * hb * w;
        for (std::size_t v = 0; v < n; ++v) out.row(row(v, b, batch)) = yb.row(static_cast<Eigen::Index>(v));
    }
    return out;
}

inline M sage_oracle(const SensorGraph& g, const M& h, const M& w, Aggregator agg, std::size_t batch) {
    const auto d = h.cols();
    auto nb = neighborhoods(g);
    M out(h.rows(), w.cols());
    for (std::size_t v = 0; v < g.node_count(); ++v)
        for (std::size_t b = 0; b < batch; ++b) {
            Eigen::RowVectorXd a(d);
            for (Eigen::Index c = 0; c < d; ++c) {
                double acc = agg == Aggregator::mean ? 0.0 : -INFINITY;
                for (auto u : nb[v]) {
                    const double x = h(row(u, b, batch), c);
                    acc = agg == Aggregator::mean ? acc + x : std::max(acc, x);
                }
                a(c) = agg == Aggregator::mean ? acc / static_cast<double>(nb[v].size()) : acc;
            }
            Eigen::RowVectorXd cat(2 * d);
            cat << h.row(row(v, b, batch)), a;
            out.row(row(v, b, batch)) = cat * w;
        }
    return out;
}

struct GatOracle {
    std::vector<std::vector<std::vector<double>>> alpha; // [v][k][j over nb[v]]
    M out;
};

// Per node, head, neighbor: score = Σ_d a_kd · LeakyReLU((W1 h_v)_kd + (W2 h_u)_kd), single window.
inline GatOracle gat_oracle(const SensorGraph& g, const M& h, Gatv2Layer<double>& layer) {
    const auto heads = layer.heads(), hd = layer.head_dim();
    const M& w1 = layer.w1().value;
    const M& w2 = layer.w2().value;
    const M& a = layer.att().value;
    auto nb = neighborhoods(g);
    for (auto& l : nb) std::sort(l.begin(), l.end());
    GatOracle o;
    o.out = M::Zero(h.rows(), heads * hd);
    o.alpha.resize(g.node_count());
    for (std::size_t v = 0; v < g.node_count(); ++v) {
        o.alpha[v].resize(static_cast<std::size_t>(heads));
        for (Eigen::Index k = 0; k < heads; ++k) {
            std::vector<double> scores;
            for (auto u : nb[v]) {
                double s = 0.0;
                for (Eigen::Index d = 0; d < hd; ++d) {
                    const auto col = k * hd + d;
                    double pre = 0.0;
                    for (Eigen::Index i = 0; i < h.cols(); ++i)
                        pre += w1(i, col) * h(static_cast<Eigen::Index>(v), i) + w2(i, col) * h(static_cast<Eigen::Index>(u), i);
                    s += a(k, d) * (pre > 0 ? pre : 0.2 * pre);
                }
                scores.push_back(s);
            }
            const double mx = *std::max_element(scores.begin(), scores.end());
            double z = 0.0;
            for (double& s : scores) z += (s = std::exp(s - mx));
            for (double& s : scores) s /= z;
            o.alpha[v][static_cast<std::size_t>(k)] = scores;
            for (std::size_t j = 0; j < nb[v].size(); ++j)
                for (Eigen::Index d = 0; d < hd; ++d) {
                    double val = 0.0;
                    for (Eigen::Index i = 0; i < h.cols(); ++i) val += w2(i, k * hd + d) * h(static_cast<Eigen::Index>(nb[v][j]), i);
                    o.out(static_cast<Eigen::Index>(v), k * hd + d) += scores[j] * val;
                }
        }
    }
    return o;
}

inline Rng& dummy() {
    static Rng r(0);
    return r;
}

inline std::unique_ptr<GnnLayer<double>> make_layer(int kind, Eigen::Index in, Rng& init) {
    std::unique_ptr<GnnLayer<double>> l;
    switch (kind) {
        case 0: l = std::make_unique<GcnLayer<double>>("l", in, 4); break;
        case 1: l = std::make_unique<SageLayer<double>>("l", in, 4, Aggregator::mean); break;
        case 2: l = std::make_unique<SageLayer<double>>("l", in, 4, Aggregator::max); break;
        default: l = std::make_unique<Gatv2Layer<double>>("l", in, 2, 2); break;
    }
    l->init(init);
    return l;
}

inline const char* kLayerNames[] = {"gcn", "sage-mean", "sage-max", "gatv2"};

} // namespace stgnn::testing
