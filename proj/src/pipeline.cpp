#include "mela/pipeline.hpp"

#include "mela/errors.hpp"
#include "mela/rng.hpp"

#include <algorithm>

namespace mela {

std::string to_string(BaseLearner learner) {
    switch (learner) {
        case BaseLearner::LogReg: return "logreg";
        case BaseLearner::Ridge: return "ridge";
        case BaseLearner::NearestCentroid: return "nearest_centroid";
    }
    return "unknown";
}

BaseLearner base_learner_from_string(const std::string& name) {
    if (name == "logreg") return BaseLearner::LogReg;
    if (name == "ridge") return BaseLearner::Ridge;
    if (name == "nearest_centroid") return BaseLearner::NearestCentroid;
    throw ValidationError("unknown base learner '" + name + "'");
}

void EvalConfig::validate() const {
    if (test_tasks < 1) throw ValidationError("eval: test_tasks must be >= 1");
    spec().validate();
}

void PipelineConfig::apply_seed(std::uint64_t master) {
    seed = master;
    world.seed = derive_seed(master, 100);
    meta_train.seed = derive_seed(master, 101);
    pretrain.seed = derive_seed(master, 102);
    labeler.seed = derive_seed(master, 103);
    eval.seed = derive_seed(master, 104);
}

void PipelineConfig::validate() const {
    world.validate();
    task.validate();
    if (world.num_classes < task.ways)
        throw ValidationError("world: num_classes must be >= task ways");
    if (test_classes < eval.ways) throw ValidationError("world: test_classes must be >= eval ways");
    if (train_tasks < 1) throw ValidationError("task: count must be >= 1");
    if (embed_dim < 1) throw ValidationError("embed: m must be >= 1");
    if (arch == Arch::Identity && embed_dim != world.dim) throw ValidationError("embed: identity needs m == d");
    ridge.validate();
    logreg.validate();
    meta_train.validate();
    pretrain.validate();
    labeler.validate(task.ways);
    if (kmeans_k < 0) throw ValidationError("kmeans: k must be >= 0");
    eval.validate();
}

PipelineData build_data(const PipelineConfig& cfg) {
    cfg.validate();
    SplitWorld world = generate_split_world(cfg.world, cfg.test_classes);
    PipelineData data;
    data.train = sample_tasks(world.train.pool, cfg.task, cfg.train_tasks, cfg.replacement,
                              derive_seed(cfg.seed, 110));
    data.train_hidden = data.train;
    hide_global(data.train_hidden);
    data.test = sample_tasks(world.test_pool, cfg.eval.spec(), cfg.eval.test_tasks, true,
                             derive_seed(cfg.seed, 111));
    return data;
}

EmbeddingModel fresh_model(const PipelineConfig& cfg, std::uint64_t stream) {
    return EmbeddingModel::make(cfg.arch, cfg.world.dim, cfg.embed_dim, cfg.hidden, derive_seed(cfg.seed, stream));
}

MetaTrainResult train_initial_embedding(const PipelineConfig& cfg, const MetaTrainingSet& tasks) {
    if (cfg.arch == Arch::Identity) return {EmbeddingModel::identity(cfg.world.dim), {}};
    return train_meta_representation(tasks, fresh_model(cfg, 120), cfg.ridge, cfg.meta_train);
}

PretrainResult pretrain_on(const PipelineConfig& cfg, const FlatDataset& flat) {
    return pretrain_flat(flat, fresh_model(cfg, 121), cfg.pretrain);
}

FlatDataset flat_from_sample_labels(const MetaTrainingSet& tasks, std::span<const int> labels, int num_classes) {
    FlatDataset flat;
    flat.num_classes = num_classes;
    std::size_t rows = 0;
    for (const auto& t : tasks.tasks) rows += t.support.size() + t.query.size();
    if (rows != labels.size()) throw ValidationError("flat_from_sample_labels: label count mismatch");
    flat.X.resize(static_cast<Eigen::Index>(rows), tasks.tasks.front().support.front().x.size());
    Eigen::Index r = 0;
    for (const auto& t : tasks.tasks) {
        for (const auto* part : {&t.support, &t.query}) {
            for (const auto& s : *part) flat.X.row(r++) = s.x.transpose();
        }
    }
    flat.labels.assign(labels.begin(), labels.end());
    return flat;
}

FlatDataset flat_from_truth(const MetaTrainingSet& tasks) {
    const std::vector<int> truths = per_sample_truths(tasks);
    std::vector<int> ids = truths;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::vector<int> ranks;
    ranks.reserve(truths.size());
    for (int y : truths) ranks.push_back(static_cast<int>(std::lower_bound(ids.begin(), ids.end(), y) - ids.begin()));
    return flat_from_sample_labels(tasks, ranks, static_cast<int>(ids.size()));
}

}  // namespace mela
