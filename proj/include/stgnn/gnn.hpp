#pragma once

// Spatial message-passing layers. Activations hold one row per (node, window)
// in node-major order, row = node * batch + window, so a graph operator acts on
// the N × (batch·d) view of the same buffer.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>

#include "stgnn/graph.hpp"
#include "stgnn/nn.hpp"

namespace stgnn::nn {

template <typename T>
using SpMat = Eigen::SparseMatrix<T, Eigen::RowMajor>;

/// Graph operators shared by all layers: neighborhoods including self, Â, and the mean operator.
template <typename T>
struct GraphOps {
    std::size_t n = 0;
    std::vector<std::size_t> offsets; // CSR over neighborhoods, size n + 1
    std::vector<std::size_t> nbrs;
    SpMat<T> a_hat;
    SpMat<T> a_mean;

    static GraphOps from(const SensorGraph& g) {
        GraphOps ops;
        ops.n = g.node_count();
        ops.offsets.push_back(0);
        std::vector<Eigen::Triplet<T>> mean;
        for (std::size_t v = 0; v < ops.n; ++v) {
            auto nb = neighbor_sets(g, v);
            for (auto u : nb) {
                ops.nbrs.push_back(u);
                mean.emplace_back(static_cast<int>(v), static_cast<int>(u), T(1) / static_cast<T>(nb.size()));
            }
            ops.offsets.push_back(ops.nbrs.size());
        }
        ops.a_mean.resize(static_cast<Eigen::Index>(ops.n), static_cast<Eigen::Index>(ops.n));
        ops.a_mean.setFromTriplets(mean.begin(), mean.end());
        Eigen::MatrixXd dense = normalized_adjacency(g);
        ops.a_hat = dense.cast<T>().sparseView();
        return ops;
    }

    std::size_t degree_with_self(std::size_t v) const { return offsets[v + 1] - offsets[v]; }
};

template <typename T>
using NodeView = Eigen::Map<Mat<T>>;
template <typename T>
using ConstNodeView = Eigen::Map<const Mat<T>>;

template <typename T>
ConstNodeView<T> node_view(const Mat<T>& x, std::size_t n) {
    return ConstNodeView<T>(x.data(), static_cast<Eigen::Index>(n), x.size() / static_cast<Eigen::Index>(n));
}

template <typename T>
NodeView<T> node_view(Mat<T>& x, std::size_t n) {
    return NodeView<T>(x.data(), static_cast<Eigen::Index>(n), x.size() / static_cast<Eigen::Index>(n));
}

inline void check_rows(Eigen::Index rows, std::size_t n, std::size_t batch) {
    require(rows == static_cast<Eigen::Index>(n * batch),
            "layer input has " + std::to_string(rows) + " rows, graph expects " + std::to_string(n) + " x " +
                std::to_string(batch));
}

/// Common interface; forward returns the pre-activation output.
template <typename T>
class GnnLayer {
public:
    virtual ~GnnLayer() = default;
    virtual void init(Rng& rng) = 0;
    virtual Mat<T> forward(const Mat<T>& h, const GraphOps<T>& g, std::size_t batch, bool train, Rng& rng) = 0;
    virtual Mat<T> backward(const Mat<T>& dy) = 0;
    virtual void collect(ParamList<T>& out) = 0;
    virtual Eigen::Index in_dim() const = 0;
    virtual Eigen::Index out_dim() const = 0;
};

// ---------------------------------------------------------------------------
// GCN: Â H W

template <typename T>
class GcnLayer final : public GnnLayer<T> {
public:
    GcnLayer(std::string name, Eigen::Index in, Eigen::Index out) : w_(name + ".weight", in, out) {}

    void init(Rng& rng) override { glorot_uniform(w_.value, rng); }

    Mat<T> forward(const Mat<T>& h, const GraphOps<T>& g, std::size_t batch, bool, Rng&) override {
        require(h.cols() == in_dim(), "gcn input width " + std::to_string(h.cols()));
        check_rows(h.rows(), g.n, batch);
        g_ = &g;
        h_ = h;
        Mat<T> hw = h * w_.value;
        Mat<T> y(h.rows(), out_dim());
        node_view(y, g.n) = g.a_hat * node_view(hw, g.n);
        return y;
    }

    Mat<T> backward(const Mat<T>& dy) override {
        Mat<T> dhw(dy.rows(), dy.cols());
        node_view(dhw, g_->n) = g_->a_hat.transpose() * node_view(dy, g_->n);
        w_.grad.noalias() += h_.transpose() * dhw;
        return dhw * w_.value.transpose();
    }

    void collect(ParamList<T>& out) override { out.push_back(&w_); }
    Eigen::Index in_dim() const override { return w_.value.rows(); }
    Eigen::Index out_dim() const override { return w_.value.cols(); }
    Param<T>& weight() { return w_; }

private:
    Param<T> w_;
    const GraphOps<T>* g_ = nullptr;
    Mat<T> h_;
};

// ---------------------------------------------------------------------------
// GraphSAGE: [h_v ‖ AGG{h_u : u ∈ N(v) ∪ {v}}] W

enum class Aggregator { mean, max };

template <typename T>
class SageLayer final : public GnnLayer<T> {
public:
    SageLayer(std::string name, Eigen::Index in, Eigen::Index out, Aggregator agg)
        : w_(name + ".weight", 2 * in, out), agg_(agg) {}

    void init(Rng& rng) override { glorot_uniform(w_.value, rng); }

    Mat<T> forward(const Mat<T>& h, const GraphOps<T>& g, std::size_t batch, bool, Rng&) override {
        require(h.cols() == in_dim(), "sage input width " + std::to_string(h.cols()));
        check_rows(h.rows(), g.n, batch);
        g_ = &g;
        h_ = h;
        agg_out_.resize(h.rows(), h.cols());
        auto hv = node_view(h, g.n);
        auto av = node_view(agg_out_, g.n);
        if (agg_ == Aggregator::mean) {
            av = g.a_mean * hv;
        } else {
            argmax_.resize(static_cast<std::size_t>(h.size()));
            const auto width = hv.cols();
            for (std::size_t v = 0; v < g.n; ++v) {
                const auto row = static_cast<Eigen::Index>(v);
                for (Eigen::Index c = 0; c < width; ++c) {
                    std::size_t best = g.nbrs[g.offsets[v]];
                    T bv = hv(static_cast<Eigen::Index>(best), c);
                    for (std::size_t e = g.offsets[v] + 1; e < g.offsets[v + 1]; ++e) {
                        const T x = hv(static_cast<Eigen::Index>(g.nbrs[e]), c);
                        if (x > bv) {
                            bv = x;
                            best = g.nbrs[e];
                        }
                    }
                    av(row, c) = bv;
                    argmax_[v * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)] = best;
                }
            }
        }
        const auto d = in_dim();
        Mat<T> y = h * w_.value.topRows(d);
        y.noalias() += agg_out_ * w_.value.bottomRows(d);
        return y;
    }

    Mat<T> backward(const Mat<T>& dy) override {
        const auto d = in_dim();
        w_.grad.topRows(d).noalias() += h_.transpose() * dy;
        w_.grad.bottomRows(d).noalias() += agg_out_.transpose() * dy;
        Mat<T> dh = dy * w_.value.topRows(d).transpose();
        Mat<T> dagg = dy * w_.value.bottomRows(d).transpose();
        auto dhv = node_view(dh, g_->n);
        auto dav = node_view(std::as_const(dagg), g_->n);
        if (agg_ == Aggregator::mean) {
            dhv += g_->a_mean.transpose() * dav;
        } else {
            const auto width = dav.cols();
            for (std::size_t v = 0; v < g_->n; ++v)
                for (Eigen::Index c = 0; c < width; ++c)
                    dhv(static_cast<Eigen::Index>(argmax_[v * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)]),
                        c) += dav(static_cast<Eigen::Index>(v), c);
        }
        return dh;
    }

    void collect(ParamList<T>& out) override { out.push_back(&w_); }
    Eigen::Index in_dim() const override { return w_.value.rows() / 2; }
    Eigen::Index out_dim() const override { return w_.value.cols(); }
    Aggregator aggregator() const { return agg_; }
    Param<T>& weight() { return w_; }

private:
    Param<T> w_;
    Aggregator agg_;
    const GraphOps<T>* g_ = nullptr;
    Mat<T> h_, agg_out_;
    std::vector<std::size_t> argmax_;
};

// ---------------------------------------------------------------------------
// GATv2, per head k: e_vu = a_k · LeakyReLU(W1_k h_v + W2_k h_u), α = softmax over u ∈ N(v),
// out_v,k = Σ_u α_vu W2_k h_u; heads concatenated.

template <typename T>
class Gatv2Layer final : public GnnLayer<T> {
public:
    Gatv2Layer(std::string name, Eigen::Index in, Eigen::Index head_dim, Eigen::Index heads, double attn_dropout = 0.0,
               double slope = 0.2)
        : w1_(name + ".w1", in, heads * head_dim), w2_(name + ".w2", in, heads * head_dim), a_(name + ".att", heads, head_dim),
          heads_(heads), head_dim_(head_dim), slope_(slope), dropout_(attn_dropout) {}

    void init(Rng& rng) override {
        glorot_uniform(w1_.value, rng);
        glorot_uniform(w2_.value, rng);
        glorot_uniform(a_.value, rng);
    }

    Mat<T> forward(const Mat<T>& h, const GraphOps<T>& g, std::size_t batch, bool train, Rng& rng) override {
        require(h.cols() == in_dim(), "gatv2 input width " + std::to_string(h.cols()));
        check_rows(h.rows(), g.n, batch);
        g_ = &g;
        batch_ = static_cast<Eigen::Index>(batch);
        h_ = h;
        p_ = h * w1_.value;
        q_ = h * w2_.value;
        const Mat<T> amat = attention_matrix();
        const auto entries = g.nbrs.size();
        lin_.assign(entries, {});
        alpha_.assign(entries, {});
        keep_.assign(entries, {});
        neg_.assign(entries, {});
        const bool drop = train && dropout_ > 0.0;
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        const T keep_scale = T(1.0 / (1.0 - dropout_));
        Mat<T> y = Mat<T>::Zero(h.rows(), out_dim());
        const auto B = batch_;
        for (std::size_t v = 0; v < g.n; ++v) {
            const auto rv = static_cast<Eigen::Index>(v) * B;
            Mat<T> mx = Mat<T>::Constant(B, heads_, -std::numeric_limits<T>::infinity());
            for (std::size_t e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
                const auto ru = static_cast<Eigen::Index>(g.nbrs[e]) * B;
                Mat<T> s = p_.middleRows(rv, B) + q_.middleRows(ru, B);
                pre_leaky_sign(s, e);
                alpha_[e] = lin_[e] * amat; // scores, B × heads
                mx = mx.cwiseMax(alpha_[e]);
            }
            Mat<T> denom = Mat<T>::Zero(B, heads_);
            for (std::size_t e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
                alpha_[e] = (alpha_[e] - mx).array().exp().matrix();
                denom += alpha_[e];
            }
            for (std::size_t e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
                alpha_[e] = alpha_[e].cwiseQuotient(denom);
                Mat<T> w = alpha_[e];
                if (drop) {
                    keep_[e].resize(B, heads_);
                    for (Eigen::Index i = 0; i < keep_[e].size(); ++i)
                        keep_[e].data()[i] = u01(rng) < dropout_ ? T(0) : keep_scale;
                    w = w.cwiseProduct(keep_[e]);
                }
                const auto ru = static_cast<Eigen::Index>(g.nbrs[e]) * B;
                for (Eigen::Index k = 0; k < heads_; ++k)
                    y.block(rv, k * head_dim_, B, head_dim_).noalias() +=
                        w.col(k).asDiagonal() * q_.block(ru, k * head_dim_, B, head_dim_);
            }
        }
        return y;
    }

    Mat<T> backward(const Mat<T>& dy) override {
        const auto& g = *g_;
        const auto B = batch_;
        const Mat<T> amat = attention_matrix();
        Mat<T> dp = Mat<T>::Zero(p_.rows(), p_.cols());
        Mat<T> dq = Mat<T>::Zero(q_.rows(), q_.cols());
        Mat<T> damat = Mat<T>::Zero(amat.rows(), amat.cols());
        std::vector<Mat<T>> dalpha(g.nbrs.size());
        for (std::size_t v = 0; v < g.n; ++v) {
            const auto rv = static_cast<Eigen::Index>(v) * B;
            Mat<T> weighted = Mat<T>::Zero(B, heads_);
            for (std::size_t e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
                const auto ru = static_cast<Eigen::Index>(g.nbrs[e]) * B;
                const bool dropped = keep_[e].size() > 0;
                Mat<T> w = dropped ? alpha_[e].cwiseProduct(keep_[e]) : alpha_[e];
                Mat<T> dw(B, heads_);
                for (Eigen::Index k = 0; k < heads_; ++k) {
                    auto dyk = dy.block(rv, k * head_dim_, B, head_dim_);
                    auto qk = q_.block(ru, k * head_dim_, B, head_dim_);
                    dw.col(k) = dyk.cwiseProduct(qk).rowwise().sum();
                    dq.block(ru, k * head_dim_, B, head_dim_).noalias() += w.col(k).asDiagonal() * dyk;
                }
                dalpha[e] = dropped ? dw.cwiseProduct(keep_[e]) : dw;
                weighted += alpha_[e].cwiseProduct(dalpha[e]);
            }
            for (std::size_t e = g.offsets[v]; e < g.offsets[v + 1]; ++e) {
                const auto ru = static_cast<Eigen::Index>(g.nbrs[e]) * B;
                Mat<T> de = alpha_[e].cwiseProduct(dalpha[e] - weighted);
                damat.noalias() += lin_[e].transpose() * de;
                Mat<T> ds = de * amat.transpose();
                ds = (neg_[e].array()).select(T(slope_) * ds.array(), ds.array()).matrix();
                dp.middleRows(rv, B) += ds;
                dq.middleRows(ru, B) += ds;
            }
        }
        for (Eigen::Index k = 0; k < heads_; ++k)
            a_.grad.row(k) += damat.block(k * head_dim_, k, head_dim_, 1).transpose();
        w1_.grad.noalias() += h_.transpose() * dp;
        w2_.grad.noalias() += h_.transpose() * dq;
        Mat<T> dh = dp * w1_.value.transpose();
        dh.noalias() += dq * w2_.value.transpose();
        return dh;
    }

    void collect(ParamList<T>& out) override {
        out.push_back(&w1_);
        out.push_back(&w2_);
        out.push_back(&a_);
    }
    Eigen::Index in_dim() const override { return w1_.value.rows(); }
    Eigen::Index out_dim() const override { return heads_ * head_dim_; }
    Eigen::Index heads() const { return heads_; }
    Eigen::Index head_dim() const { return head_dim_; }
    Param<T>& w1() { return w1_; }
    Param<T>& w2() { return w2_; }
    Param<T>& att() { return a_; }

    /// Attention coefficients of the last forward pass (before dropout): entry e of the graph's
    /// neighborhood CSR, B × heads.
    const std::vector<Mat<T>>& attention() const { return alpha_; }

private:
    // Block-diagonal (heads·d) × heads matrix holding a_k in column k.
    Mat<T> attention_matrix() const {
        Mat<T> m = Mat<T>::Zero(heads_ * head_dim_, heads_);
        for (Eigen::Index k = 0; k < heads_; ++k) m.block(k * head_dim_, k, head_dim_, 1) = a_.value.row(k).transpose();
        return m;
    }

    void pre_leaky_sign(const Mat<T>& s, std::size_t e) {
        neg_[e] = (s.array() < T(0));
        lin_[e] = (s.array() < T(0)).select(T(slope_) * s.array(), s.array()).matrix();
    }

    Param<T> w1_, w2_, a_;
    Eigen::Index heads_, head_dim_;
    double slope_, dropout_;
    const GraphOps<T>* g_ = nullptr;
    Eigen::Index batch_ = 1;
    Mat<T> h_, p_, q_;
    std::vector<Mat<T>> lin_, alpha_, keep_;
    std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> neg_;
};

} // namespace stgnn::nn
