#pragma once

// Full models: the per-node GRU baseline and the GRU → GNN → dense STGNN, batch
// assembly from datasets, soft voting, prediction, and checkpoints.

#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgnn/datagen.hpp"
#include "stgnn/gnn.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/nn.hpp"

namespace stgnn {

enum class Arch { gru, rgcn, rsage_mean, rsage_max, rgatv2 };

inline constexpr std::array<Arch, 5> kAllArchs{Arch::gru, Arch::rgcn, Arch::rsage_mean, Arch::rsage_max, Arch::rgatv2};

inline std::string_view to_string(Arch a) {
    switch (a) {
        case Arch::gru: return "gru";
        case Arch::rgcn: return "rgcn";
        case Arch::rsage_mean: return "rsage-mean";
        case Arch::rsage_max: return "rsage-max";
        case Arch::rgatv2: return "rgatv2";
    }
    return "?";
}

inline std::optional<Arch> parse_arch(std::string_view s) {
    for (auto a : kAllArchs)
        if (to_string(a) == s) return a;
    return std::nullopt;
}

struct ModelConfig {
    Arch arch = Arch::rgcn;
    int features = static_cast<int>(kFeatures);
    int classes = static_cast<int>(kClasses);
    int gru_hidden = 128;
    int gnn_hidden = 64;
    int gnn_layers = 2;
    int heads = 4;
    double dropout = 0.35;
    double attn_dropout = 0.3;
    bool batchnorm = true;

    void validate() const {
        if (features <= 0 || classes <= 1 || gru_hidden <= 0 || gnn_hidden <= 0 || gnn_layers <= 0 || heads <= 0)
            throw std::invalid_argument("model dimensions must be positive");
        if (!(dropout >= 0 && dropout < 1) || !(attn_dropout >= 0 && attn_dropout < 1))
            throw std::invalid_argument("dropout rates must lie in [0, 1)");
        if (arch == Arch::rgatv2 && gnn_hidden % heads != 0)
            throw std::invalid_argument("gnn_hidden must be divisible by the head count");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"arch", to_string(c.arch)},     {"features", c.features},     {"classes", c.classes},
            {"gru_hidden", c.gru_hidden},    {"gnn_hidden", c.gnn_hidden}, {"gnn_layers", c.gnn_layers},
            {"heads", c.heads},              {"dropout", c.dropout},       {"attn_dropout", c.attn_dropout},
            {"batchnorm", c.batchnorm}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("arch")) {
        auto a = parse_arch(j.at("arch").get<std::string>());
        if (!a) throw std::invalid_argument("unknown architecture " + j.at("arch").get<std::string>());
        c.arch = *a;
    }
    c.features = j.value("features", c.features);
    c.classes = j.value("classes", c.classes);
    c.gru_hidden = j.value("gru_hidden", c.gru_hidden);
    c.gnn_hidden = j.value("gnn_hidden", c.gnn_hidden);
    c.gnn_layers = j.value("gnn_layers", c.gnn_layers);
    c.heads = j.value("heads", c.heads);
    c.dropout = j.value("dropout", c.dropout);
    c.attn_dropout = j.value("attn_dropout", c.attn_dropout);
    c.batchnorm = j.value("batchnorm", c.batchnorm);
    return c;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
class Model {
public:
    using Mat = nn::Mat<T>;

    Model(ModelConfig cfg, SensorGraph graph, std::uint64_t seed)
        : cfg_(cfg), graph_(std::move(graph)),
          ops_(std::make_shared<nn::GraphOps<T>>(nn::GraphOps<T>::from(graph_))) {
        cfg_.validate();
        gru_ = nn::Gru<T>("gru", cfg_.features, cfg_.gru_hidden);
        Eigen::Index width = cfg_.gru_hidden;
        if (cfg_.arch != Arch::gru) {
            for (int k = 0; k < cfg_.gnn_layers; ++k) {
                const std::string name = "gnn" + std::to_string(k);
                switch (cfg_.arch) {
                    case Arch::rgcn:
                        layers_.push_back(std::make_unique<nn::GcnLayer<T>>(name, width, cfg_.gnn_hidden));
                        break;
                    case Arch::rsage_mean:
                    case Arch::rsage_max:
                        layers_.push_back(std::make_unique<nn::SageLayer<T>>(
                            name, width, cfg_.gnn_hidden,
                            cfg_.arch == Arch::rsage_mean ? nn::Aggregator::mean : nn::Aggregator::max));
                        break;
                    case Arch::rgatv2:
                        layers_.push_back(std::make_unique<nn::Gatv2Layer<T>>(name, width, cfg_.gnn_hidden / cfg_.heads,
                                                                               cfg_.heads, cfg_.attn_dropout));
                        break;
                    case Arch::gru: break;
                }
                width = cfg_.gnn_hidden;
                if (k + 1 < cfg_.gnn_layers) {
                    if (cfg_.batchnorm) norms_.emplace_back("bn" + std::to_string(k), width);
                    drops_.emplace_back(cfg_.dropout);
                }
            }
        }
        head_ = nn::Dense<T>("head", width, cfg_.classes);
        relu_out_.resize(layers_.size());

        Rng rng(derive_seed(seed, 0x1417));
        gru_.init(rng);
        for (auto& l : layers_) l->init(rng);
        head_.init(rng);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    const SensorGraph& graph() const { return graph_; }
    const nn::GraphOps<T>& ops() const { return *ops_; }
    std::size_t node_count() const { return graph_.node_count(); }

    /// Steps are node-major (row = node * batch + window), each (N·batch) × F. Returns logits in the same row order.
    Mat forward(const std::vector<Mat>& steps, std::size_t batch, bool train, Rng& rng) {
        if (steps.empty()) throw ShapeError("window has no time steps");
        nn::check_rows(steps.front().rows(), node_count(), batch);
        Mat h = gru_.forward(steps);
        embedding_ = h;
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            Mat y = layers_[k]->forward(h, *ops_, batch, train, rng);
            const bool inner = k + 1 < layers_.size();
            if (inner && cfg_.batchnorm) y = norms_[k].forward(y, train);
            relu_out_[k] = nn::relu(y);
            h = inner ? drops_[k].forward(relu_out_[k], train, rng) : relu_out_[k];
        }
        return head_.forward(h);
    }

    void backward(const Mat& dlogits) {
        Mat dh = head_.backward(dlogits);
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const bool inner = k + 1 < layers_.size();
            if (inner) dh = drops_[k].backward(dh);
            dh = nn::relu_backward(relu_out_[k], dh);
            if (inner && cfg_.batchnorm) dh = norms_[k].backward(dh);
            dh = layers_[k]->backward(dh);
        }
        gru_.backward(dh);
    }

    /// Trainable parameters in declaration order.
    nn::ParamList<T> params() {
        nn::ParamList<T> out;
        gru_.collect(out);
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            layers_[k]->collect(out);
            if (k < norms_.size()) norms_[k].collect(out);
        }
        head_.collect(out);
        return out;
    }

    void zero_grad() { nn::zero_grad(params()); }

    nn::Gru<T>& gru() { return gru_; }
    nn::Dense<T>& head() { return head_; }
    std::vector<std::unique_ptr<nn::GnnLayer<T>>>& layers() { return layers_; }
    std::vector<nn::BatchNorm<T>>& norms() { return norms_; }
    const Mat& last_embedding() const { return embedding_; }

private:
    ModelConfig cfg_;
    SensorGraph graph_;
    std::shared_ptr<nn::GraphOps<T>> ops_;
    nn::Gru<T> gru_;
    std::vector<std::unique_ptr<nn::GnnLayer<T>>> layers_;
    std::vector<nn::BatchNorm<T>> norms_;
    std::vector<nn::Dropout<T>> drops_;
    nn::Dense<T> head_;
    std::vector<Mat> relu_out_;
    Mat embedding_;
};

// ---------------------------------------------------------------------------
// Batches

/// Graph node → dataset sensor index (unset for nodes without a measurement).
struct NodeBinding {
    std::vector<std::optional<std::size_t>> sensor;
};

inline NodeBinding bind_nodes(const SensorGraph& g, const SensorLayout& layout) {
    NodeBinding b;
    b.sensor.resize(g.node_count());
    std::size_t bound = 0;
    for (std::size_t m = 0; m < layout.size(); ++m) {
        auto node = g.find_node(layout.buses[m]);
        if (!node) throw ShapeError("graph/dataset mismatch: sensor bus " + layout.buses[m] + " is not a graph node");
        if (!g.node(*node).observed)
            throw ShapeError("graph/dataset mismatch: bus " + layout.buses[m] + " is measured but the graph marks it unobserved");
        b.sensor[*node] = m;
        ++bound;
    }
    if (bound != g.observed_count())
        throw ShapeError("graph/dataset mismatch: graph has " + std::to_string(g.observed_count()) +
                         " observed nodes, dataset has " + std::to_string(bound) + " sensors");
    return b;
}

template <typename T>
struct Batch {
    std::size_t size = 0;
    std::vector<nn::Mat<T>> steps;  // S entries of (N·size) × F, node-major rows
    std::vector<int> node_labels;   // per row; -1 for unobserved nodes
    std::vector<std::uint8_t> labels;
};

template <typename T>
Batch<T> assemble_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const SensorGraph& g,
                        const NodeBinding& binding) {
    Batch<T> b;
    b.size = indices.size();
    const std::size_t n = g.node_count();
    const auto rows = static_cast<Eigen::Index>(n * b.size);
    b.steps.assign(kWindow, nn::Mat<T>::Zero(rows, static_cast<Eigen::Index>(kFeatures)));
    b.node_labels.assign(n * b.size, -1);
    for (std::size_t w = 0; w < b.size; ++w) {
        const auto i = indices[w];
        const auto& s = ds.sample(i);
        const auto& run = ds.runs()[s.run];
        b.labels.push_back(s.label);
        for (std::size_t v = 0; v < n; ++v) {
            if (!binding.sensor[v]) continue;
            const auto m = *binding.sensor[v];
            const auto row = static_cast<Eigen::Index>(v * b.size + w);
            b.node_labels[static_cast<std::size_t>(row)] = s.label;
            for (std::size_t f = 0; f < kFeatures; ++f) {
                const float* trace = &run.traces[(m * kFeatures + f) * run.samples + s.start];
                for (std::size_t k = 0; k < kWindow; ++k)
                    b.steps[k](row, static_cast<Eigen::Index>(f)) = static_cast<T>(trace[k]);
            }
        }
    }
    return b;
}

/// Rows of one window out of node-major batch logits.
template <typename T>
nn::Mat<T> window_rows(const nn::Mat<T>& logits, std::size_t batch, std::size_t w) {
    const auto n = logits.rows() / static_cast<Eigen::Index>(batch);
    nn::Mat<T> out(n, logits.cols());
    for (Eigen::Index v = 0; v < n; ++v) out.row(v) = logits.row(v * static_cast<Eigen::Index>(batch) + static_cast<Eigen::Index>(w));
    return out;
}

// ---------------------------------------------------------------------------
// Soft voting

struct Vote {
    int label = 0;
    Eigen::VectorXd probabilities; // summed over observed nodes
};

/// Index of the largest entry; the lowest index wins ties.
inline int argmax_lowest(const Eigen::VectorXd& v) {
    int best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = static_cast<int>(i);
    return best;
}

template <typename Derived>
Vote soft_vote(const Eigen::MatrixBase<Derived>& node_logits, const std::vector<bool>& observed) {
    if (static_cast<std::size_t>(node_logits.rows()) != observed.size())
        throw ShapeError("mask length does not match node count");
    Vote v;
    v.probabilities = Eigen::VectorXd::Zero(node_logits.cols());
    bool any = false;
    for (Eigen::Index i = 0; i < node_logits.rows(); ++i) {
        if (!observed[static_cast<std::size_t>(i)]) continue;
        any = true;
        Eigen::RowVectorXd row = node_logits.row(i).template cast<double>();
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        v.probabilities += (row / row.sum()).transpose();
    }
    if (!any) throw std::invalid_argument("soft vote needs at least one observed node");
    v.label = argmax_lowest(v.probabilities);
    return v;
}

/// Eval-mode predictions for dataset windows, processed in chunks.
template <typename T>
std::vector<int> predict(Model<T>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                         std::size_t chunk = 64) {
    const auto binding = bind_nodes(model.graph(), ds.layout());
    const auto mask = model.graph().observed_mask();
    std::vector<int> out;
    out.reserve(indices.size());
    Rng unused(0);
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                      indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + chunk)));
        auto batch = assemble_batch<T>(ds, part, model.graph(), binding);
        auto logits = model.forward(batch.steps, batch.size, false, unused);
        for (std::size_t w = 0; w < batch.size; ++w) out.push_back(soft_vote(window_rows(logits, batch.size, w), mask).label);
    }
    return out;
}

template <typename T>
int predict(Model<T>& model, const Dataset& ds, std::size_t index) {
    return predict(model, ds, std::vector<std::size_t>{index}).front();
}

// ---------------------------------------------------------------------------
// Checkpoints: "STGM", u32 version, descriptor JSON (config + graph), u32 tensor count,
// then per tensor: name, u32 rows, u32 cols, f32 data. Batch-norm running statistics
// follow the trainable tensors.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::pair<std::string, nn::Mat<T>*>> checkpoint_tensors(Model<T>& m) {
    std::vector<std::pair<std::string, nn::Mat<T>*>> out;
    for (auto* p : m.params()) out.emplace_back(p->name, &p->value);
    for (std::size_t k = 0; k < m.norms().size(); ++k) {
        out.emplace_back("bn" + std::to_string(k) + ".running_mean", &m.norms()[k].running_mean());
        out.emplace_back("bn" + std::to_string(k) + ".running_var", &m.norms()[k].running_var());
    }
    return out;
}

template <typename T>
nlohmann::json checkpoint_descriptor(Model<T>& m) {
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& [name, mat] : checkpoint_tensors(m)) tensors.push_back({{"name", name}, {"shape", {mat->rows(), mat->cols()}}});
    return {{"format", "stgnn-checkpoint"},
            {"version", kCheckpointVersion},
            {"model", to_json(m.config())},
            {"graph", export_graph(m.graph())},
            {"tensors", tensors}};
}

template <typename T>
void save_checkpoint(Model<T>& m, std::ostream& out) {
    out.write("STGM", 4);
    io::put<std::uint32_t>(out, kCheckpointVersion);
    auto desc = checkpoint_descriptor(m);
    io::put_string(out, desc.dump());
    auto tensors = checkpoint_tensors(m);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (auto& [name, mat] : tensors) {
        io::put_string(out, name);
        io::put<std::uint32_t>(out, static_cast<std::uint32_t>(mat->rows()));
        io::put<std::uint32_t>(out, static_cast<std::uint32_t>(mat->cols()));
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = mat->template cast<float>();
        io::put_array(out, f.data(), static_cast<std::size_t>(f.size()));
    }
}

/// Writes the binary checkpoint and a readable JSON sidecar next to it.
template <typename T>
void save_checkpoint(Model<T>& m, const std::string& path, const nlohmann::json& extra = {}) {
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        save_checkpoint(m, out);
    }
    auto side = checkpoint_descriptor(m);
    side.erase("graph");
    side["graph_nodes"] = m.graph().node_count();
    side["graph_edges"] = m.graph().edges().size();
    if (!extra.is_null()) side["run"] = extra;
    std::ofstream js(path + ".json");
    js << side.dump(2) << '\n';
}

template <typename T = float>
Model<T> load_checkpoint(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::string_view(magic, 4) != "STGM") throw SchemaError("not a model checkpoint");
    if (auto v = io::get<std::uint32_t>(in); v != kCheckpointVersion)
        throw SchemaError("unsupported checkpoint version " + std::to_string(v));
    auto desc = nlohmann::json::parse(io::get_string(in));
    Model<T> m(model_config_from_json(desc.at("model")), parse_graph(desc.at("graph").get<std::string>()), 0);
    auto tensors = checkpoint_tensors(m);
    const auto count = io::get<std::uint32_t>(in);
    if (count != tensors.size()) throw SchemaError("checkpoint tensor count does not match architecture");
    for (auto& [name, mat] : tensors) {
        const auto stored = io::get_string(in);
        const auto rows = io::get<std::uint32_t>(in);
        const auto cols = io::get<std::uint32_t>(in);
        if (stored != name || rows != mat->rows() || cols != mat->cols())
            throw SchemaError("checkpoint tensor " + stored + " does not match expected " + name);
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(rows, cols);
        io::get_array(in, f.data(), static_cast<std::size_t>(f.size()));
        *mat = f.template cast<T>();
    }
    return m;
}

template <typename T = float>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return load_checkpoint<T>(in);
}

} // namespace stgnn
