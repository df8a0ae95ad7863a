#include "mela/embedding.hpp"

#include "mela/errors.hpp"
#include "mela/io.hpp"
#include "mela/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mela {

namespace {

constexpr int kModelFormatVersion = 1;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

Matrix with_ones(const Matrix& Z) {
    Matrix out(Z.rows(), Z.cols() + 1);
    out.leftCols(Z.cols()) = Z;
    out.col(Z.cols()).setOnes();
    return out;
}

void sgd_momentum_step(Vector& params, Vector& velocity, Vector grad, const TrainConfig& cfg, double rate) {
    grad += cfg.weight_decay * params;
    if (cfg.clip_norm > 0.0) {
        const double norm = grad.norm();
        if (norm > cfg.clip_norm) grad *= cfg.clip_norm / norm;
    }
    velocity = cfg.momentum * velocity + grad;
    params -= rate * velocity;
}

}  // namespace

std::string to_string(Arch arch) {
    switch (arch) {
        case Arch::Identity: return "identity";
        case Arch::Linear: return "linear";
        case Arch::Mlp1: return "mlp1";
    }
    return "unknown";
}

Arch arch_from_string(const std::string& name) {
    if (name == "identity") return Arch::Identity;
    if (name == "linear") return Arch::Linear;
    if (name == "mlp1") return Arch::Mlp1;
    throw ValidationError("unknown architecture '" + name + "'");
}

std::size_t EmbeddingModel::param_count(Arch arch, int in_dim, int out_dim, int hidden) {
    switch (arch) {
        case Arch::Identity: return 0;
        case Arch::Linear: return static_cast<std::size_t>(out_dim) * in_dim;
        case Arch::Mlp1:
            return static_cast<std::size_t>(hidden) * in_dim + hidden +
                   static_cast<std::size_t>(out_dim) * hidden + out_dim;
    }
    return 0;
}

EmbeddingModel EmbeddingModel::from_params(Arch arch, int in_dim, int out_dim, int hidden, Vector params) {
    if (in_dim < 1 || out_dim < 1) throw ValidationError("embedding: dimensions must be positive");
    if (arch == Arch::Identity && in_dim != out_dim) throw ValidationError("identity embedding needs d == m");
    if (arch == Arch::Mlp1 && hidden < 1) throw ValidationError("mlp1 embedding needs hidden >= 1");
    if (static_cast<std::size_t>(params.size()) != param_count(arch, in_dim, out_dim, hidden)) {
        throw ValidationError("embedding: expected " + std::to_string(param_count(arch, in_dim, out_dim, hidden)) +
                              " params for " + to_string(arch) + ", got " + std::to_string(params.size()));
    }
    if (!params.allFinite()) throw ValidationError("embedding: non-finite params");
    EmbeddingModel m;
    m.arch_ = arch;
    m.in_dim_ = in_dim;
    m.out_dim_ = out_dim;
    m.hidden_ = arch == Arch::Mlp1 ? hidden : 0;
    m.params_ = std::move(params);
    return m;
}

EmbeddingModel EmbeddingModel::identity(int dim) {
    return from_params(Arch::Identity, dim, dim, 0, Vector());
}

EmbeddingModel EmbeddingModel::linear(int in_dim, int out_dim, std::uint64_t seed) {
    if (in_dim < 1 || out_dim < 1) throw ValidationError("linear: dimensions must be >= 1");
    Rng rng = make_rng(seed, 10);
    std::normal_distribution<double> n(0.0, 1.0);
    const int tall = std::max(in_dim, out_dim);
    const int wide = std::min(in_dim, out_dim);
    Matrix G(tall, wide);
    for (Eigen::Index j = 0; j < G.cols(); ++j)
        for (Eigen::Index i = 0; i < G.rows(); ++i) G(i, j) = n(rng);
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(tall, wide);
    const Matrix R = qr.matrixQR().topRows(wide).triangularView<Eigen::Upper>();
    // Sign fix makes Q uniformly (Haar) distributed.
    for (int j = 0; j < wide; ++j) {
        if (R(j, j) < 0.0) Q.col(j) *= -1.0;
    }
    const Matrix W = out_dim <= in_dim ? Matrix(Q.transpose()) : Q;
    Vector p(static_cast<Eigen::Index>(W.size()));
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) p[k++] = W(i, j);
    return from_params(Arch::Linear, in_dim, out_dim, 0, std::move(p));
}

EmbeddingModel EmbeddingModel::mlp1(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
    Rng rng = make_rng(seed, 11);
    std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    std::normal_distribution<double> n2(0.0, 1.0 / std::sqrt(static_cast<double>(std::max(hidden, 1))));
    Vector p = Vector::Zero(static_cast<Eigen::Index>(param_count(Arch::Mlp1, in_dim, out_dim, hidden)));
    Eigen::Index k = 0;
    for (int i = 0; i < hidden * in_dim; ++i) p[k++] = n1(rng);
    k += hidden;  // b1 = 0
    for (int i = 0; i < out_dim * hidden; ++i) p[k++] = n2(rng);
    return from_params(Arch::Mlp1, in_dim, out_dim, hidden, std::move(p));
}

EmbeddingModel EmbeddingModel::make(Arch arch, int in_dim, int out_dim, int hidden, std::uint64_t seed) {
    switch (arch) {
        case Arch::Identity: return identity(in_dim);
        case Arch::Linear: return linear(in_dim, out_dim, seed);
        case Arch::Mlp1: return mlp1(in_dim, hidden, out_dim, seed);
    }
    throw ValidationError("unknown architecture");
}

Matrix EmbeddingModel::forward(const Matrix& X) const {
    if (X.cols() != in_dim_)
        throw ValidationError("embedding: input dimension " + std::to_string(X.cols()) + " != " +
                              std::to_string(in_dim_));
    switch (arch_) {
        case Arch::Identity: return X;
        case Arch::Linear: return X * ConstMap(params_.data(), out_dim_, in_dim_).transpose();
        case Arch::Mlp1: {
            const double* p = params_.data();
            ConstMap W1(p, hidden_, in_dim_);
            Eigen::Map<const Vector> b1(p + hidden_ * in_dim_, hidden_);
            ConstMap W2(p + hidden_ * in_dim_ + hidden_, out_dim_, hidden_);
            Eigen::Map<const Vector> b2(p + hidden_ * in_dim_ + hidden_ + out_dim_ * hidden_, out_dim_);
            Matrix H = X * W1.transpose();
            H.rowwise() += b1.transpose();
            H = H.array().tanh();
            Matrix Z = H * W2.transpose();
            Z.rowwise() += b2.transpose();
            return Z;
        }
    }
    return X;
}

Vector EmbeddingModel::embed(const Vector& x) const {
    return forward(x.transpose()).row(0).transpose();
}

Vector EmbeddingModel::backward(const Matrix& X, const Matrix& dZ) const {
    Vector grad = Vector::Zero(params_.size());
    switch (arch_) {
        case Arch::Identity: break;
        case Arch::Linear: MutMap(grad.data(), out_dim_, in_dim_) = dZ.transpose() * X; break;
        case Arch::Mlp1: {
            const double* p = params_.data();
            const Eigen::Index o_b1 = hidden_ * in_dim_;
            const Eigen::Index o_w2 = o_b1 + hidden_;
            const Eigen::Index o_b2 = o_w2 + out_dim_ * hidden_;
            ConstMap W1(p, hidden_, in_dim_);
            Eigen::Map<const Vector> b1(p + o_b1, hidden_);
            ConstMap W2(p + o_w2, out_dim_, hidden_);
            Matrix H = X * W1.transpose();
            H.rowwise() += b1.transpose();
            H = H.array().tanh();
            MutMap(grad.data() + o_w2, out_dim_, hidden_) = dZ.transpose() * H;
            grad.segment(o_b2, out_dim_) = dZ.colwise().sum().transpose();
            const Matrix dPre = ((dZ * W2).array() * (1.0 - H.array().square())).matrix();
            MutMap(grad.data(), hidden_, in_dim_) = dPre.transpose() * X;
            grad.segment(o_b1, hidden_) = dPre.colwise().sum().transpose();
            break;
        }
    }
    return grad;
}

bool EmbeddingModel::operator==(const EmbeddingModel& o) const {
    return arch_ == o.arch_ && in_dim_ == o.in_dim_ && out_dim_ == o.out_dim_ && hidden_ == o.hidden_ &&
           params_.size() == o.params_.size() && params_ == o.params_;
}

Matrix stack_inputs(std::span<const Sample> samples) {
    if (samples.empty()) return {};
    Matrix X(static_cast<Eigen::Index>(samples.size()), samples.front().x.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].x.size() != X.cols()) throw ValidationError("inconsistent input dimension");
        X.row(static_cast<Eigen::Index>(i)) = samples[i].x.transpose();
    }
    return X;
}

std::vector<int> local_labels(std::span<const Sample> samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.y_local);
    return out;
}

EmbeddedSet embed_set(const EmbeddingModel& model, std::span<const Sample> samples) {
    return {model.forward(stack_inputs(samples)), local_labels(samples)};
}

void FlatDataset::validate() const {
    if (num_classes < 2) throw ValidationError("flat dataset: need at least two classes");
    if (X.rows() == 0) throw ValidationError("flat dataset: empty");
    if (static_cast<std::size_t>(X.rows()) != labels.size())
        throw ValidationError("flat dataset: sample/label count mismatch");
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw ValidationError("flat dataset: label out of range");
    }
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("train: learning_rate must be > 0");
    if (!(decay_factor > 0.0)) throw ValidationError("train: decay_factor must be > 0");
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("train: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ValidationError("train: weight_decay must be >= 0");
    if (clip_norm < 0.0) throw ValidationError("train: clip_norm must be >= 0");
}

double TrainConfig::rate_at(int epoch) const {
    std::vector<int> at = decay_epochs;
    if (at.empty()) at = {(2 * epochs) / 3, (5 * epochs) / 6};
    double rate = learning_rate;
    for (int e : at) {
        if (e > 0 && epoch >= e) rate *= decay_factor;
    }
    return rate;
}

LossAndGrad meta_task_loss(const EmbeddingModel& model, const Task& task, const RidgeConfig& ridge) {
    const TaskSpec spec = infer_spec(task);
    const int K = spec.ways;
    const Matrix Xs = stack_inputs(task.support);
    const Matrix Xq = stack_inputs(task.query);
    const std::vector<int> ys = local_labels(task.support);
    const std::vector<int> yq = local_labels(task.query);

    const Matrix Zs = ridge.bias ? with_ones(model.forward(Xs)) : model.forward(Xs);
    const Matrix Zq = ridge.bias ? with_ones(model.forward(Xq)) : model.forward(Xq);
    const Matrix Ys = one_hot(ys, K);
    const auto ns = static_cast<double>(Zs.rows());
    const auto nq = static_cast<double>(Zq.rows());

    Matrix A = Zs.transpose() * Zs;
    A.diagonal().array() += ns * ridge.lambda1;
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) throw NumericalError("meta_task_loss: ridge factorisation failed");
    const Matrix Wt = llt.solve(Zs.transpose() * Ys);  // m x K

    const Matrix logits = Zq * Wt;
    LossAndGrad out;
    out.loss = mean_softmax_ce(logits, yq);

    const Matrix dLogits = (softmax_rows(logits) - one_hot(yq, K)) / nq;
    const Matrix dWt = Zq.transpose() * dLogits;
    const Matrix G = llt.solve(dWt);
    Matrix dZq = dLogits * Wt.transpose();
    Matrix dZs = Ys * G.transpose() - Zs * (G * Wt.transpose() + Wt * G.transpose());
    const Eigen::Index m = model.out_dim();
    out.grad = model.backward(Xs, dZs.leftCols(m)) + model.backward(Xq, dZq.leftCols(m));
    return out;
}

double meta_objective(const EmbeddingModel& model, std::span<const Task> tasks, const RidgeConfig& ridge) {
    if (tasks.empty()) throw ValidationError("meta_objective: no tasks");
    double total = 0.0;
    for (const auto& t : tasks) total += meta_task_loss(model, t, ridge).loss;
    return total / static_cast<double>(tasks.size());
}

MetaTrainResult train_meta_representation(const MetaTrainingSet& tasks, const EmbeddingModel& init,
                                          const RidgeConfig& ridge, const TrainConfig& cfg) {
    ridge.validate();
    cfg.validate();
    if (!init.trainable()) throw ValidationError("train_meta_representation: architecture is not trainable");
    if (tasks.tasks.empty()) throw ValidationError("train_meta_representation: no tasks");

    MetaTrainResult result{init, {}};
    Vector& params = result.model.mutable_params();
    Vector velocity = Vector::Zero(params.size());
    std::vector<std::size_t> order(tasks.tasks.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(cfg.seed, 20);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double rate = cfg.rate_at(epoch);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            double loss = 0.0;
            Vector grad = Vector::Zero(params.size());
            for (std::size_t i = start; i < end; ++i) {
                auto lg = meta_task_loss(result.model, tasks.tasks[order[i]], ridge);
                loss += lg.loss;
                grad += lg.grad;
            }
            const auto count = static_cast<double>(end - start);
            loss /= count;
            grad /= count;
            if (!std::isfinite(loss) || !grad.allFinite()) {
                throw NumericalError("train_meta_representation: diverged at epoch " + std::to_string(epoch) +
                                     ", step " + std::to_string(step));
            }
            sgd_momentum_step(params, velocity, std::move(grad), cfg, rate);
            epoch_loss += loss;
            ++batches;
            ++step;
        }
        result.loss_trace.push_back(epoch_loss / batches);
    }
    if (!params.allFinite()) throw NumericalError("train_meta_representation: non-finite parameters");
    return result;
}

LossAndGrad flat_loss(const EmbeddingModel& model, const Matrix& W, const FlatDataset& flat) {
    const Matrix Z = model.forward(flat.X);
    const Matrix logits = Z * W.transpose();
    LossAndGrad out;
    out.loss = mean_softmax_ce(logits, flat.labels);
    const Matrix dLogits =
        (softmax_rows(logits) - one_hot(flat.labels, flat.num_classes)) / static_cast<double>(Z.rows());
    const Vector gtheta = model.backward(flat.X, dLogits * W);
    RowMajor gW = dLogits.transpose() * Z;
    out.grad.resize(gtheta.size() + gW.size());
    out.grad.head(gtheta.size()) = gtheta;
    out.grad.tail(gW.size()) = Eigen::Map<const Vector>(gW.data(), gW.size());
    return out;
}

PretrainResult pretrain_flat(const FlatDataset& flat, const EmbeddingModel& init, const TrainConfig& cfg,
                             const PretrainCallback& on_epoch) {
    flat.validate();
    cfg.validate();
    if (!init.trainable()) throw ValidationError("pretrain_flat: architecture is not trainable");
    if (flat.X.cols() != init.in_dim()) throw ValidationError("pretrain_flat: input dimension mismatch");

    const Eigen::Index n_theta = init.params().size();
    const Eigen::Index n_w = static_cast<Eigen::Index>(flat.num_classes) * init.out_dim();
    EmbeddingModel model = init;
    Vector params(n_theta + n_w);
    params.head(n_theta) = init.params();
    params.tail(n_w).setZero();
    Vector velocity = Vector::Zero(params.size());

    const auto n = static_cast<std::size_t>(flat.X.rows());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(cfg.seed, 30);

    PretrainResult result;
    auto unpack = [&]() {
        model.mutable_params() = params.head(n_theta);
        return Matrix(ConstMap(params.data() + n_theta, flat.num_classes, init.out_dim()));
    };

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double rate = cfg.rate_at(epoch);
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            FlatDataset batch;
            batch.num_classes = flat.num_classes;
            batch.X.resize(static_cast<Eigen::Index>(end - start), flat.X.cols());
            for (std::size_t i = start; i < end; ++i) {
                batch.X.row(static_cast<Eigen::Index>(i - start)) = flat.X.row(static_cast<Eigen::Index>(order[i]));
                batch.labels.push_back(flat.labels[order[i]]);
            }
            const Matrix W = unpack();
            auto lg = flat_loss(model, W, batch);
            if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
                throw NumericalError("pretrain_flat: diverged at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step));
            }
            sgd_momentum_step(params, velocity, std::move(lg.grad), cfg, rate);
            ++step;
        }
        const Matrix W = unpack();
        const double full = mean_softmax_ce(model.forward(flat.X) * W.transpose(), flat.labels);
        if (!std::isfinite(full)) {
            throw NumericalError("pretrain_flat: non-finite loss after epoch " + std::to_string(epoch));
        }
        result.loss_trace.push_back(full);
        if (on_epoch) on_epoch(epoch, model, W, full);
    }
    result.classifier.W = unpack();
    result.model = model;
    return result;
}

void save_model(const EmbeddingModel& model, const std::filesystem::path& path) {
    json j;
    j["format_version"] = kModelFormatVersion;
    j["arch"] = to_string(model.arch());
    j["d"] = model.in_dim();
    j["m"] = model.out_dim();
    if (model.arch() == Arch::Mlp1) j["h"] = model.hidden();
    j["params"] = to_json(model.params());
    write_file(path, j.dump() + "\n");
}

EmbeddingModel load_model(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("model file " + path.string() + ": corrupt (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("format_version"))
        throw ValidationError("model file " + path.string() + ": missing format_version");
    if (j["format_version"] != kModelFormatVersion)
        throw ValidationError("model file " + path.string() + ": unsupported format_version " +
                              j["format_version"].dump());
    for (const char* key : {"arch", "d", "m", "params"}) {
        if (!j.contains(key)) throw ValidationError("model file " + path.string() + ": missing " + key);
    }
    return EmbeddingModel::from_params(arch_from_string(j["arch"].get<std::string>()), j["d"].get<int>(),
                                       j["m"].get<int>(), j.value("h", 0), vector_from_json(j["params"]));
}

void save_classifier(const LinearClassifier& classifier, const std::filesystem::path& path) {
    json j;
    j["format_version"] = kModelFormatVersion;
    j["classes"] = classifier.W.rows();
    j["m"] = classifier.W.cols();
    j["W"] = to_json(classifier.W);
    if (classifier.bias) j["bias"] = to_json(*classifier.bias);
    write_file(path, j.dump() + "\n");
}

LinearClassifier load_classifier(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("classifier file " + path.string() + ": corrupt (" + e.what() + ")");
    }
    if (j.value("format_version", 0) != kModelFormatVersion)
        throw ValidationError("classifier file " + path.string() + ": unsupported format_version");
    LinearClassifier c;
    c.W = matrix_from_json(j.at("W"));
    if (c.W.rows() != j.at("classes").get<Eigen::Index>() || c.W.cols() != j.at("m").get<Eigen::Index>())
        throw ValidationError("classifier file " + path.string() + ": shape mismatch");
    if (j.contains("bias")) c.bias = vector_from_json(j["bias"]);
    return c;
}

}  // namespace mela
