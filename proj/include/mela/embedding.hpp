#pragma once

// Embedding models psi_theta and their two training routes: episodic
// meta-representation learning through the closed-form ridge learner, and
// joint (theta, W) pre-training on a flat labelled dataset.

#include "mela/numeric.hpp"
#include "mela/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mela {

enum class Arch { Identity, Linear, Mlp1 };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& name);

class EmbeddingModel {
public:
    EmbeddingModel() = default;

    static EmbeddingModel identity(int dim);
    /// out_dim x in_dim map with orthonormal rows (or columns when
    /// out_dim > in_dim), drawn uniformly.
    static EmbeddingModel linear(int in_dim, int out_dim, std::uint64_t seed);
    /// z = W2 tanh(W1 x + b1) + b2.
    static EmbeddingModel mlp1(int in_dim, int hidden, int out_dim, std::uint64_t seed);
    static EmbeddingModel make(Arch arch, int in_dim, int out_dim, int hidden, std::uint64_t seed);
    /// Rebuilds a model from stored parameters; throws on shape mismatch.
    static EmbeddingModel from_params(Arch arch, int in_dim, int out_dim, int hidden, Vector params);

    Arch arch() const { return arch_; }
    int in_dim() const { return in_dim_; }
    int out_dim() const { return out_dim_; }
    int hidden() const { return hidden_; }
    const Vector& params() const { return params_; }
    Vector& mutable_params() { return params_; }
    bool trainable() const { return arch_ != Arch::Identity; }

    /// Rows of X (n x d) to rows of the result (n x m).
    Matrix forward(const Matrix& X) const;
    Vector embed(const Vector& x) const;
    /// Gradient with respect to params of sum_ij dZ_ij * Z_ij, Z = forward(X).
    Vector backward(const Matrix& X, const Matrix& dZ) const;

    bool operator==(const EmbeddingModel&) const;

private:
    static std::size_t param_count(Arch arch, int in_dim, int out_dim, int hidden);

    Arch arch_ = Arch::Identity;
    int in_dim_ = 0;
    int out_dim_ = 0;
    int hidden_ = 0;
    Vector params_;
};

/// Stacks the x vectors of `samples` as rows.
Matrix stack_inputs(std::span<const Sample> samples);
std::vector<int> local_labels(std::span<const Sample> samples);

/// psi(D): embedded rows plus the labels in their original order.
struct EmbeddedSet {
    Matrix Z;
    std::vector<int> labels;
};
EmbeddedSet embed_set(const EmbeddingModel& model, std::span<const Sample> samples);

struct FlatDataset {
    Matrix X;                 // N x d
    std::vector<int> labels;  // global labels in [0, num_classes)
    int num_classes = 0;

    void validate() const;
};

struct TrainConfig {
    double learning_rate = 0.05;
    double decay_factor = 0.1;
    std::vector<int> decay_epochs;  // empty: 2/3 and 5/6 of `epochs`
    int epochs = 30;
    int batch_size = 8;  // tasks per step (episodic) or samples per step (flat)
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
    std::uint64_t seed = 0;

    void validate() const;
    double rate_at(int epoch) const;
};

/// Query cross-entropy of the ridge classifier fit on the embedded support
/// set, and its gradient with respect to the model parameters.
struct LossAndGrad {
    double loss = 0.0;
    Vector grad;
};
LossAndGrad meta_task_loss(const EmbeddingModel& model, const Task& task, const RidgeConfig& ridge);

/// Mean of meta_task_loss over tasks (value only).
double meta_objective(const EmbeddingModel& model, std::span<const Task> tasks, const RidgeConfig& ridge);

struct MetaTrainResult {
    EmbeddingModel model;
    std::vector<double> loss_trace;  // mean batch loss per epoch
};

/// Minimises the mean episodic query loss by momentum SGD over task
/// batches. Throws NumericalError if the loss becomes non-finite.
MetaTrainResult train_meta_representation(const MetaTrainingSet& tasks, const EmbeddingModel& init,
                                          const RidgeConfig& ridge, const TrainConfig& cfg);

/// Mean CE of W psi(x) over a flat dataset and its gradient with respect
/// to (theta, W), flattened as [theta; vec_rowmajor(W)].
LossAndGrad flat_loss(const EmbeddingModel& model, const Matrix& W, const FlatDataset& flat);

struct PretrainResult {
    EmbeddingModel model;
    LinearClassifier classifier;     // num_classes x m, no bias
    std::vector<double> loss_trace;  // full-dataset mean CE after each epoch
};

/// Called after every epoch with (epoch, model, W, full-dataset CE).
using PretrainCallback =
    std::function<void(int, const EmbeddingModel&, const Matrix&, double)>;

/// Joint minimisation of the mean cross-entropy of W psi(x) by minibatch
/// momentum SGD. W starts at zero.
PretrainResult pretrain_flat(const FlatDataset& flat, const EmbeddingModel& init, const TrainConfig& cfg,
                             const PretrainCallback& on_epoch = {});

void save_model(const EmbeddingModel& model, const std::filesystem::path& path);
EmbeddingModel load_model(const std::filesystem::path& path);

void save_classifier(const LinearClassifier& classifier, const std::filesystem::path& path);
LinearClassifier load_classifier(const std::filesystem::path& path);

}  // namespace mela
