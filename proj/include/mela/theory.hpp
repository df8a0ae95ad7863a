#pragma once

// Numerical checks relating flat pre-training to episodic meta-learning:
// the global base learner W[Y], the task-restricted cross-entropy upper
// bound, the support/query equality it induces, and tightness at zero loss.

#include "mela/embedding.hpp"
#include "mela/io.hpp"
#include "mela/tasks.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace mela {

constexpr double kInequalityTol = 1e-9;
constexpr double kIdentityTol = 1e-12;

/// C x m classifier whose row r scores global label class_ids[r].
struct GlobalClassifier {
    Matrix W;
    std::vector<int> class_ids;  // strictly ascending

    void validate() const;
    /// Classifier over labels 0..C-1.
    static GlobalClassifier dense(Matrix W);
};

/// W[Y]: rows of the classes present in Y, in ascending label order, plus
/// the global label -> local row map that goes with them.
struct TaskClassifier {
    Matrix W;
    std::vector<int> classes;        // sorted unique labels of Y
    std::map<int, int> row_of;       // global label -> row of W

    std::vector<int> local_rows(std::span<const int> global_labels) const;
};

/// Throws ValidationError for labels absent from the classifier or when Y
/// names fewer than two classes.
TaskClassifier submatrix_for(const GlobalClassifier& classifier, std::span<const int> labels);

/// The global base learner: depends on the label set of (X, Y) only.
TaskClassifier w_global(const GlobalClassifier& classifier, const Matrix& X, std::span<const int> labels);

/// Mean CE of a task classifier on embedded rows with global labels.
double task_ce(const TaskClassifier& task_classifier, const Matrix& Z, std::span<const int> labels);

/// Mean CE of the full classifier over rows with global labels.
double flat_ce(const GlobalClassifier& classifier, const Matrix& Z, std::span<const int> labels);

/// Embedded rows with global labels.
struct LabeledSet {
    Matrix Z;
    std::vector<int> labels;
};

struct BoundCheck {
    double lhs = 0.0;  // mean over tasks of task-restricted CE
    double rhs = 0.0;  // flat CE over the merged query sets
    double gap = 0.0;  // rhs - lhs
    bool pass = false;
};

/// Query sets must be pairwise disjoint (no shared row) and equally sized.
BoundCheck verify_upper_bound(const GlobalClassifier& classifier, std::span<const LabeledSet> queries);

/// Same, embedding the query sets of `tasks` (y_true required, raw query
/// inputs must be disjoint across tasks).
BoundCheck verify_upper_bound(const GlobalClassifier& classifier, const EmbeddingModel& model,
                              const MetaTrainingSet& tasks);

struct EmbeddedTask {
    LabeledSet support;
    LabeledSet query;
};

struct LemmaCheck {
    double lhs = 0.0;  // mean_t CE(w_global(S_t), psi(Q_t))
    double rhs = 0.0;  // mean_t CE(W[Y_t], psi(Q_t))
    double diff = 0.0;
    bool pass = false;
};

/// Throws ValidationError when a task's support and query label sets differ.
LemmaCheck verify_lemma_equality(const GlobalClassifier& classifier, std::span<const EmbeddedTask> tasks);
LemmaCheck verify_lemma_equality(const GlobalClassifier& classifier, const EmbeddingModel& model,
                                 const MetaTrainingSet& tasks);

// ---- random instances -------------------------------------------------------

struct BoundInstanceConfig {
    int num_classes = 20;
    int dim = 8;
    int tasks = 10;
    int ways = 5;
    int shots = 5;
    int queries = 15;  // per class
};

struct BoundInstance {
    GlobalClassifier classifier;
    std::vector<EmbeddedTask> tasks;  // disjoint query sets with global labels

    std::vector<LabeledSet> queries() const;
};

/// Random W and random embedded samples. Logit scales vary per instance.
BoundInstance random_bound_instance(const BoundInstanceConfig& cfg, std::uint64_t seed);

// ---- tightness ---------------------------------------------------------------

struct TightnessCheckpoint {
    int epoch = 0;
    double rhs = 0.0;
    double lhs = 0.0;
    double gap = 0.0;
    double train_loss = 0.0;  // flat CE recorded by pre-training
};

struct TightnessReport {
    std::vector<TightnessCheckpoint> checkpoints;
    std::vector<std::pair<double, int>> first_below;  // (threshold, checkpoint index or -1)
    bool gap_nonnegative = true;
    bool gap_below_rhs = true;
    double max_train_loss_mismatch = 0.0;
};

/// Pre-trains (theta, W) on the merged query sets of `tasks` (y_true
/// required, queries disjoint) and evaluates the bound after every epoch.
TightnessReport verify_tightness(const MetaTrainingSet& tasks, const EmbeddingModel& init, const TrainConfig& cfg,
                                 std::span<const double> thresholds);

/// Tasks with pairwise-disjoint query sets drawn without replacement from a
/// fresh world, for tightness runs.
MetaTrainingSet tightness_tasks(const SyntheticWorldConfig& world, const TaskSpec& spec, int num_tasks,
                                std::uint64_t seed);

/// `base` with weight decay off and a constant rate: any decay on W bounds
/// its norm and keeps the flat CE away from zero.
TrainConfig tightness_train_config(const TrainConfig& base, int epochs);

/// Flat dataset D(Q) with labels remapped to their rank among the sorted
/// unique y_true values; `class_ids` receives that sorted list.
FlatDataset merged_query_dataset(const MetaTrainingSet& tasks, std::vector<int>& class_ids);

json bound_report_entry(std::uint64_t seed, const BoundCheck& check);

}  // namespace mela
