#pragma once

// Minimal reverse-mode neural toolkit. Layers cache what their backward pass
// needs; activations are row-major with one row per sample (or per node).

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stgnn/errors.hpp"
#include "stgnn/util.hpp"

namespace stgnn::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

inline std::string dims(Eigen::Index r, Eigen::Index c) { return std::to_string(r) + "x" + std::to_string(c); }

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
void glorot_uniform(Mat<T>& w, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
}

/// Orthogonal square block via QR of a Gaussian matrix (sign-corrected).
template <typename T>
Mat<T> orthogonal(Eigen::Index n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < n; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    return q.cast<T>();
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T>
Mat<T> relu(const Mat<T>& x) {
    return x.cwiseMax(T(0));
}

/// dY masked by the sign of the ReLU output.
template <typename T>
Mat<T> relu_backward(const Mat<T>& y, const Mat<T>& dy) {
    return (y.array() > T(0)).select(dy, T(0));
}

// ---------------------------------------------------------------------------
// Dense: Y = X W + b

template <typename T>
class Dense {
public:
    Dense() = default;
    Dense(std::string name, Eigen::Index in, Eigen::Index out)
        : w_(name + ".weight", in, out), b_(name + ".bias", 1, out) {}

    void init(Rng& rng) {
        glorot_uniform(w_.value, rng);
        b_.value.setZero();
    }

    Eigen::Index in_dim() const { return w_.value.rows(); }
    Eigen::Index out_dim() const { return w_.value.cols(); }

    Mat<T> forward(const Mat<T>& x) {
        require(x.cols() == in_dim(), "dense input " + dims(x.rows(), x.cols()) + " vs weight " +
                                          dims(w_.value.rows(), w_.value.cols()));
        x_ = x;
        Mat<T> y = x * w_.value;
        y.rowwise() += b_.value.row(0);
        return y;
    }

    Mat<T> backward(const Mat<T>& dy) {
        w_.grad.noalias() += x_.transpose() * dy;
        b_.grad.row(0) += dy.colwise().sum();
        return dy * w_.value.transpose();
    }

    void collect(ParamList<T>& out) {
        out.push_back(&w_);
        out.push_back(&b_);
    }

    Param<T>& weight() { return w_; }
    Param<T>& bias() { return b_; }
    const Param<T>& weight() const { return w_; }
    const Param<T>& bias() const { return b_; }

private:
    Param<T> w_, b_;
    Mat<T> x_;
};

// ---------------------------------------------------------------------------
// GRU, gate order [reset | update | candidate]:
//   r = σ(x Wx_r + bx_r + h Wh_r + bh_r)
//   z = σ(x Wx_z + bx_z + h Wh_z + bh_z)
//   n = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n))
//   h' = (1 − z) ⊙ n + z ⊙ h

template <typename T>
class Gru {
public:
    Gru() = default;
    Gru(std::string name, Eigen::Index in, Eigen::Index hidden)
        : wx_(name + ".wx", in, 3 * hidden), wh_(name + ".wh", hidden, 3 * hidden), bx_(name + ".bx", 1, 3 * hidden),
          bh_(name + ".bh", 1, 3 * hidden) {}

    void init(Rng& rng) {
        glorot_uniform(wx_.value, rng);
        const auto z = hidden();
        for (int g = 0; g < 3; ++g) wh_.value.middleCols(g * z, z) = orthogonal<T>(z, rng);
        bx_.value.setZero();
        bh_.value.setZero();
    }

    Eigen::Index in_dim() const { return wx_.value.rows(); }
    Eigen::Index hidden() const { return wh_.value.rows(); }

    /// Runs the recurrence over steps (each M×F) from h0 (M×Z, zero when empty); returns the final state.
    Mat<T> forward(const std::vector<Mat<T>>& steps, const Mat<T>& h0 = {}) {
        require(!steps.empty(), "GRU needs at least one step");
        const auto m = steps.front().rows();
        const auto z = hidden();
        Mat<T> h = h0.size() ? h0 : Mat<T>::Zero(m, z);
        require(h.rows() == m && h.cols() == z, "GRU h0 " + dims(h.rows(), h.cols()));
        cache_.resize(steps.size());
        Mat<T> gx(m, 3 * z), gh(m, 3 * z);
        for (std::size_t t = 0; t < steps.size(); ++t) {
            const auto& x = steps[t];
            require(x.rows() == m && x.cols() == in_dim(), "GRU step input " + dims(x.rows(), x.cols()));
            Step& c = cache_[t];
            c.x = &x;
            c.h_prev = h;
            gx.noalias() = x * wx_.value;
            gx.rowwise() += bx_.value.row(0);
            gh.noalias() = h * wh_.value;
            gh.rowwise() += bh_.value.row(0);
            // gates [r | u] share one buffer
            c.ru = (gx.leftCols(2 * z) + gh.leftCols(2 * z)).array().logistic().matrix();
            c.hn = gh.rightCols(z);
            c.n = (gx.rightCols(z).array() + c.ru.leftCols(z).array() * c.hn.array()).tanh().matrix();
            const auto u = c.ru.rightCols(z).array();
            h = (c.n.array() + u * (h.array() - c.n.array())).matrix();
        }
        return h;
    }

    /// Backpropagates dL/dh_final through time; returns dL/dh0.
    Mat<T> backward(const Mat<T>& dh_final) {
        const auto z = hidden();
        const auto m = dh_final.rows();
        Mat<T> dh = dh_final;
        Mat<T> dgx(m, 3 * z), dgh(m, 3 * z), next(m, z);
        const auto one = T(1);
        for (std::size_t t = cache_.size(); t-- > 0;) {
            const Step& c = cache_[t];
            const auto r = c.ru.leftCols(z).array();
            const auto u = c.ru.rightCols(z).array();
            const auto n = c.n.array();
            // candidate pre-activation gradient
            dgx.rightCols(z) = (dh.array() * (one - u) * (one - n.square())).matrix();
            dgx.leftCols(z) = (dgx.rightCols(z).array() * c.hn.array() * r * (one - r)).matrix();
            dgx.middleCols(z, z) = (dh.array() * (c.h_prev.array() - n) * u * (one - u)).matrix();
            dgh.leftCols(2 * z) = dgx.leftCols(2 * z);
            dgh.rightCols(z) = (dgx.rightCols(z).array() * r).matrix();
            wx_.grad.noalias() += c.x->transpose() * dgx;
            bx_.grad.row(0) += dgx.colwise().sum();
            wh_.grad.noalias() += c.h_prev.transpose() * dgh;
            bh_.grad.row(0) += dgh.colwise().sum();
            next = (dh.array() * u).matrix();
            next.noalias() += dgh * wh_.value.transpose();
            dh.swap(next);
        }
        return dh;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&wx_);
        out.push_back(&wh_);
        out.push_back(&bx_);
        out.push_back(&bh_);
    }

    Param<T>& wx() { return wx_; }
    Param<T>& wh() { return wh_; }
    Param<T>& bx() { return bx_; }
    Param<T>& bh() { return bh_; }

private:
    struct Step {
        const Mat<T>* x = nullptr; // caller keeps step inputs alive until backward
        Mat<T> h_prev, ru, n, hn;
    };
    Param<T> wx_, wh_, bx_, bh_;
    std::vector<Step> cache_;
};

// ---------------------------------------------------------------------------
// Batch normalization over rows

template <typename T>
class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(std::string name, Eigen::Index features, double momentum = 0.1, double eps = 1e-5)
        : gamma_(name + ".weight", 1, features), beta_(name + ".bias", 1, features),
          running_mean_(Mat<T>::Zero(1, features)), running_var_(Mat<T>::Ones(1, features)), momentum_(momentum),
          eps_(eps) {
        gamma_.value.setOnes();
    }

    Mat<T> forward(const Mat<T>& x, bool train) {
        require(x.cols() == gamma_.value.cols(), "batchnorm input " + dims(x.rows(), x.cols()));
        train_ = train;
        if (!train) {
            inv_std_ = (running_var_.array() + T(eps_)).rsqrt().matrix();
            xhat_ = ((x.rowwise() - running_mean_.row(0)).array().rowwise() * inv_std_.row(0).array()).matrix();
        } else {
            if (x.rows() < 2) throw ShapeError("batchnorm in train mode needs at least 2 rows");
            const auto n = static_cast<T>(x.rows());
            Mat<T> mean = x.colwise().mean();
            Mat<T> centered = x.rowwise() - mean.row(0);
            Mat<T> var = centered.array().square().colwise().sum().matrix() / n;
            inv_std_ = (var.array() + T(eps_)).rsqrt().matrix();
            xhat_ = (centered.array().rowwise() * inv_std_.row(0).array()).matrix();
            const T m = T(momentum_);
            running_mean_ = (T(1) - m) * running_mean_ + m * mean;
            running_var_ = (T(1) - m) * running_var_ + m * (var * (n / (n - T(1))));
        }
        Mat<T> y = (xhat_.array().rowwise() * gamma_.value.row(0).array()).matrix();
        y.rowwise() += beta_.value.row(0);
        return y;
    }

    Mat<T> backward(const Mat<T>& dy) {
        gamma_.grad.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
        beta_.grad.row(0) += dy.colwise().sum();
        Mat<T> dxhat = (dy.array().rowwise() * gamma_.value.row(0).array()).matrix();
        if (!train_) return (dxhat.array().rowwise() * inv_std_.row(0).array()).matrix();
        const auto n = static_cast<T>(dy.rows());
        Mat<T> sum_d = dxhat.colwise().sum();
        Mat<T> sum_dx = (dxhat.array() * xhat_.array()).colwise().sum().matrix();
        Mat<T> dx = (n * dxhat.array()).matrix();
        dx.rowwise() -= sum_d.row(0);
        dx.array() -= xhat_.array().rowwise() * sum_dx.row(0).array();
        dx.array().rowwise() *= (inv_std_.row(0).array() / n);
        return dx;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    Param<T>& gamma() { return gamma_; }
    Param<T>& beta() { return beta_; }
    Mat<T>& running_mean() { return running_mean_; }
    Mat<T>& running_var() { return running_var_; }
    const Mat<T>& running_mean() const { return running_mean_; }
    const Mat<T>& running_var() const { return running_var_; }
    double momentum() const { return momentum_; }
    double eps() const { return eps_; }

private:
    Param<T> gamma_, beta_;
    Mat<T> running_mean_, running_var_;
    double momentum_ = 0.1, eps_ = 1e-5;
    bool train_ = false;
    Mat<T> xhat_, inv_std_;
};

// ---------------------------------------------------------------------------
// Inverted dropout

template <typename T>
class Dropout {
public:
    explicit Dropout(double rate = 0.0) : rate_(rate) {
        if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    }

    double rate() const { return rate_; }

    Mat<T> forward(const Mat<T>& x, bool train, Rng& rng) {
        active_ = train && rate_ > 0.0;
        if (!active_) return x;
        mask_.resize(x.rows(), x.cols());
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const T keep = T(1.0 / (1.0 - rate_));
        for (Eigen::Index i = 0; i < mask_.size(); ++i) mask_.data()[i] = u(rng) < rate_ ? T(0) : keep;
        return x.cwiseProduct(mask_);
    }

    Mat<T> backward(const Mat<T>& dy) const { return active_ ? dy.cwiseProduct(mask_) : dy; }

private:
    double rate_;
    bool active_ = false;
    Mat<T> mask_;
};

// ---------------------------------------------------------------------------
// Softmax and cross-entropy

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
    Mat<T> p = logits.colwise() - logits.rowwise().maxCoeff();
    p = p.array().exp().matrix();
    p.array().colwise() /= p.rowwise().sum().array();
    return p;
}

template <typename T>
T cross_entropy(const Eigen::Ref<const Mat<T>>& logits_row, int label) {
    if (label < 0 || label >= logits_row.cols()) throw std::out_of_range("label out of range");
    const T mx = logits_row.maxCoeff();
    const T lse = mx + std::log((logits_row.array() - mx).exp().sum());
    return lse - logits_row(0, label);
}

/// Mean cross-entropy over rows whose label is non-negative; fills dlogits (zero for masked rows).
template <typename T>
T masked_cross_entropy(const Mat<T>& logits, const std::vector<int>& labels, Mat<T>* dlogits = nullptr) {
    require(static_cast<std::size_t>(logits.rows()) == labels.size(), "label count does not match logits rows");
    std::size_t count = 0;
    for (int l : labels) count += l >= 0;
    if (count == 0) throw std::invalid_argument("no observed rows in loss");
    Mat<T> p = softmax_rows(logits);
    double loss = 0.0;
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    const T inv = T(1) / static_cast<T>(count);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        if (l < 0) continue;
        loss += static_cast<double>(cross_entropy<T>(logits.row(i), l));
        if (dlogits) {
            dlogits->row(i) = p.row(i) * inv;
            (*dlogits)(i, l) -= inv;
        }
    }
    return static_cast<T>(loss / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Adam with optional coupled L2 penalty (grad += λ·p).
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const ParamList<T>& params) {
        bind(params);
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            Mat<T> g = params[i]->grad;
            if (decoupled_) {
                params[i]->value *= T(1.0 - cfg_.lr * cfg_.weight_decay);
            } else if (cfg_.weight_decay != 0.0) {
                g += T(cfg_.weight_decay) * params[i]->value;
            }
            update(*params[i], g, i);
        }
    }

    std::uint64_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Mat<T>>& first_moments() const { return m_; }
    const std::vector<Mat<T>>& second_moments() const { return v_; }

protected:
    bool decoupled_ = false;

private:
    void bind(const ParamList<T>& params) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
                v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
            }
        }
        require(m_.size() == params.size(), "optimizer bound to a different parameter list");
        for (std::size_t i = 0; i < params.size(); ++i)
            require(m_[i].rows() == params[i]->value.rows() && m_[i].cols() == params[i]->value.cols() &&
                        params[i]->grad.rows() == params[i]->value.rows() &&
                        params[i]->grad.cols() == params[i]->value.cols(),
                    "optimizer moment shape mismatch for " + params[i]->name);
    }

    void update(Param<T>& p, const Mat<T>& g, std::size_t i) {
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
        m_[i] = b1 * m_[i] + (T(1) - b1) * g;
        v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
        const T c1 = T(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const T c2 = T(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        const T lr = T(cfg_.lr);
        p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + T(cfg_.eps));
    }

    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Mat<T>> m_, v_;
};

/// Adam with decoupled weight decay: p ← p·(1 − lr·λ) before the moment update.
template <typename T>
class AdamW : public Adam<T> {
public:
    explicit AdamW(AdamConfig cfg = {}) : Adam<T>(cfg) { this->decoupled_ = true; }
};

template <typename T>
void zero_grad(const ParamList<T>& params) {
    for (auto* p : params) p->zero_grad();
}

} // namespace stgnn::nn
