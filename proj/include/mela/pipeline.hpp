#pragma once

// End-to-end configuration and the stages shared by the CLI, the pipeline
// comparison and the sweeps: world -> tasks -> initial embedding -> labels
// -> pre-training.

#include "mela/embedding.hpp"
#include "mela/labeler.hpp"
#include "mela/numeric.hpp"
#include "mela/tasks.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mela {

enum class BaseLearner { LogReg, Ridge, NearestCentroid };

std::string to_string(BaseLearner learner);
BaseLearner base_learner_from_string(const std::string& name);

struct EvalConfig {
    int test_tasks = 200;
    int ways = 5;
    int shots = 5;
    int queries = 15;
    BaseLearner learner = BaseLearner::LogReg;
    std::uint64_t seed = 0;

    void validate() const;
    TaskSpec spec() const { return {ways, shots, queries}; }
};

struct PipelineConfig {
    SyntheticWorldConfig world;
    int test_classes = 10;
    TaskSpec task;
    int train_tasks = 500;
    bool replacement = true;

    Arch arch = Arch::Linear;
    int embed_dim = 16;  // m
    int hidden = 32;     // mlp1 only

    RidgeConfig ridge;
    LogRegConfig logreg;
    TrainConfig meta_train{0.05, 0.1, {}, 20, 8, 0.9, 5e-4, 0.0, 0};
    TrainConfig pretrain{0.05, 0.1, {}, 20, 64, 0.9, 5e-4, 5.0, 0};
    LabelerConfig labeler;
    int kmeans_k = 0;  // 0: world.num_classes
    EvalConfig eval;
    std::uint64_t seed = 0;

    /// Propagates `seed` into every stage config that carries one.
    void apply_seed(std::uint64_t master);
    void validate() const;
};

/// Built once per configuration and shared by all variants.
struct PipelineData {
    MetaTrainingSet train;        // with y_true, for metrics only
    MetaTrainingSet train_hidden; // y_true stripped; what the learners see
    MetaTrainingSet test;         // novel classes
};

PipelineData build_data(const PipelineConfig& cfg);

MetaTrainResult train_initial_embedding(const PipelineConfig& cfg, const MetaTrainingSet& tasks);

EmbeddingModel fresh_model(const PipelineConfig& cfg, std::uint64_t stream);

PretrainResult pretrain_on(const PipelineConfig& cfg, const FlatDataset& flat);

/// Flat dataset over every sample of every task, labelled by per-sample
/// cluster ids (support then query, task order).
FlatDataset flat_from_sample_labels(const MetaTrainingSet& tasks, std::span<const int> labels, int num_classes);

/// Flat dataset labelled by y_true (dense ranks), for the oracle variant.
FlatDataset flat_from_truth(const MetaTrainingSet& tasks);

}  // namespace mela
