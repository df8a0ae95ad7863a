#pragma once

// Episodic data model: samples, K-way tasks, meta-training sets, synthetic
// worlds with known ground truth, task samplers and the JSONL task format.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mela {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct Sample {
    Vector x;
    int y_local = 0;
    std::optional<int> y_true;  // evaluation only

    bool operator==(const Sample& o) const {
        return x.size() == o.x.size() && x == o.x && y_local == o.y_local &&
               y_true == o.y_true;
    }
};

struct TaskSpec {
    int ways = 5;     // K
    int shots = 5;    // n_s, support samples per class
    int queries = 15; // n_q, query samples per class

    int group_size() const { return shots + queries; }
    void validate() const;
    bool operator==(const TaskSpec&) const = default;
};

struct Task {
    std::int64_t id = 0;
    std::vector<Sample> support;
    std::vector<Sample> query;

    bool operator==(const Task&) const = default;
};

struct MetaTrainingSet {
    std::vector<Task> tasks;
    bool replacement = true;
    TaskSpec spec;

    bool operator==(const MetaTrainingSet&) const = default;
};

struct SyntheticWorldConfig {
    int num_classes = 20;  // C_true
    int dim = 16;          // d
    double class_separation = 6.0;
    int samples_per_class = 600;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Class means plus the labelled pool drawn around them.
struct World {
    Matrix means;  // num_classes x d
    std::vector<Sample> pool;
};

/// Draws class means by rejection sampling in a hypercube of side
/// 10 * separation (centred at the origin) until every pair is at least
/// `class_separation` apart, then samples each class from N(mean, I).
/// Throws ValidationError when placement exhausts its retries.
World generate_world(const SyntheticWorldConfig& cfg);

/// Splits a world with `cfg.num_classes + test_classes` jointly placed
/// classes into a training pool (labels [0, C)) and a held-out pool with
/// novel classes (labels [C, C + test_classes)).
struct SplitWorld {
    World train;
    std::vector<Sample> test_pool;
};
SplitWorld generate_split_world(const SyntheticWorldConfig& cfg, int test_classes);

MetaTrainingSet sample_tasks(const std::vector<Sample>& pool, const TaskSpec& spec,
                             int num_tasks, bool replacement, std::uint64_t seed);

/// Checks every Task invariant. `where` prefixes the error message.
void validate_task(const Task& task, const TaskSpec& spec, const std::string& where = {});

/// Infers K, n_s and n_q from a task's local-label counts.
TaskSpec infer_spec(const Task& task);

/// Removes every y_true in place.
void hide_global(MetaTrainingSet& set);

/// True if no query x vector is shared between two tasks.
bool query_sets_disjoint(const MetaTrainingSet& set);

/// True if no x vector occurs in more than one task.
bool tasks_sample_disjoint(const MetaTrainingSet& set);

void save_tasks(const MetaTrainingSet& set, const std::filesystem::path& path);
MetaTrainingSet load_tasks(const std::filesystem::path& path, bool hide_global_labels = false);

}  // namespace mela
