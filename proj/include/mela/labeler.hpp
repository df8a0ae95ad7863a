#pragma once

// Constrained clustering of class groups into latent global labels.
//
// Every task contributes K class groups (its support and query samples
// sharing a local label). A group is matched to its nearest centroid; a task
// updates the matched centroids with a running average only when its K
// groups land on K distinct clusters. After each pass, clusters matched
// fewer times than a binomial lower bound are pruned. The loop ends once a
// pass leaves the cluster count unchanged.

#include "mela/embedding.hpp"
#include "mela/errors.hpp"
#include "mela/io.hpp"
#include "mela/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mela {

enum class PruneBasis { MatchCounts, SampleCounts };

std::string to_string(PruneBasis basis);
PruneBasis prune_basis_from_string(const std::string& name);

struct PruneConfig {
    double q = 6.5;
    PruneBasis basis = PruneBasis::MatchCounts;

    void validate() const;
};

struct LabelerConfig {
    int initial_clusters = 60;  // J_init
    PruneConfig prune;
    int max_epochs = 20;
    // Start each epoch with N_v = 1. Off keeps the running-average weights
    // across epochs (ablation only).
    bool reset_counts = true;
    std::uint64_t seed = 0;

    void validate(int ways) const;
};

struct ClusterState {
    Matrix centroids;                        // J x m
    std::vector<long long> sample_counts;    // N_v
    std::vector<long long> match_counts;     // M_v, reset every epoch

    int size() const { return static_cast<int>(centroids.rows()); }
    bool operator==(const ClusterState& o) const {
        return centroids.rows() == o.centroids.rows() && centroids.cols() == o.centroids.cols() &&
               centroids == o.centroids && sample_counts == o.sample_counts && match_counts == o.match_counts;
    }
};

/// Embedded class groups of one task: row k of `means` is the mean
/// embedding of local class k over S u Q; `sums` holds the plain sums.
struct TaskGroups {
    Matrix means;
    Matrix sums;
    std::vector<long long> sizes;
};
TaskGroups embed_groups(const EmbeddingModel& model, const Task& task);

/// Seeds J_init centroids with class-group means of ceil(J_init / K)
/// distinct tasks; surplus groups of the last task are dropped in local
/// label order. N_v = 1, M_v = 0.
ClusterState init_clusters(const EmbeddingModel& model, const MetaTrainingSet& tasks, const LabelerConfig& cfg);

/// Nearest centroid in squared Euclidean distance; ties go to the lowest
/// index.
int match_class_group(const ClusterState& state, const Eigen::Ref<const Vector>& group_mean);

struct Discarded {};
using TaskOutcome = std::variant<std::vector<int>, Discarded>;

/// Matches all K groups against the unmodified state. If they land on K
/// distinct clusters, each matched centroid becomes
/// (N g + sum psi(x)) / (N + I), N += I and M += 1; otherwise the state is
/// left untouched.
TaskOutcome process_task(ClusterState& state, const TaskGroups& groups);
TaskOutcome process_task(ClusterState& state, const EmbeddingModel& model, const Task& task);

/// Binomial pruning threshold for a pass over `tasks_in_epoch` tasks with
/// `clusters_at_start` clusters: T p - q sqrt(T p (1 - p)), p = K / J.
double prune_threshold(long long tasks_in_epoch, int ways, int clusters_at_start, double q);

/// Removes clusters below the threshold. With SampleCounts the threshold
/// is scaled by the group size I and compared against N_v.
ClusterState prune(const ClusterState& state, long long tasks_in_epoch, int ways, int clusters_at_start,
                   const PruneConfig& cfg, long long group_size = 1);

/// Final assignment of one task: the nearest cluster of every class group
/// and whether those K clusters are distinct.
struct TaskAssignment {
    std::int64_t task_id = 0;
    std::vector<int> clusters;  // per local label
    bool discarded = false;
};

struct LabeledTaskSet {
    std::vector<TaskAssignment> assignments;  // in task order
    int num_clusters = 0;
    double percent_clustered = 0.0;  // fraction of tasks with K distinct clusters
};

/// Pruning left fewer than K clusters. Carries the cluster counts seen so
/// far so sweeps can still report them.
class LabelerCollapse : public ContractError {
public:
    LabelerCollapse(const std::string& what, std::vector<int> trajectory)
        : ContractError(what), trajectory_(std::move(trajectory)) {}
    const std::vector<int>& trajectory() const { return trajectory_; }
    int clusters() const { return trajectory_.back(); }

private:
    std::vector<int> trajectory_;
};

struct LearnLabelerResult {
    ClusterState state;
    LabeledTaskSet labels;
    int epochs = 0;
    bool converged = false;
    std::vector<int> cluster_trajectory;  // |G| at the start and after each epoch
    std::vector<std::string> warnings;
};

/// Read-only assignment pass over all tasks with the given state.
LabeledTaskSet assign_tasks(const ClusterState& state, const EmbeddingModel& model, const MetaTrainingSet& tasks);

/// Full loop. Throws ContractError if pruning leaves fewer than K clusters.
LearnLabelerResult learn_labeler(const EmbeddingModel& model, const MetaTrainingSet& tasks,
                                 const LabelerConfig& cfg);

/// Retained tasks' samples under their inferred global labels.
FlatDataset inferred_flat_dataset(const MetaTrainingSet& tasks, const LabeledTaskSet& labels);

/// Per-sample cluster ids (support then query, task order) from group
/// assignments, including discarded tasks.
std::vector<int> per_sample_clusters(const MetaTrainingSet& tasks, const LabeledTaskSet& labels);

/// Per-sample y_true in the same order as per_sample_clusters.
std::vector<int> per_sample_truths(const MetaTrainingSet& tasks);

// ---- K-means baseline ------------------------------------------------------

struct KMeansResult {
    Matrix centroids;
    std::vector<int> labels;              // per row of the input
    std::vector<double> objective_trace;  // within-cluster SS after each assignment
    int iterations = 0;
    bool converged = false;
};

/// Lloyd's algorithm from k distinct random rows. Empty clusters are
/// re-seeded at the point farthest from its centroid.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 300);

/// K-means over every embedded sample of every task (support then query),
/// ignoring local labels.
KMeansResult kmeans_baseline(const EmbeddingModel& model, const MetaTrainingSet& tasks, int k,
                             std::uint64_t seed);

// ---- files -------------------------------------------------------------------

void save_cluster_state(const ClusterState& state, const std::filesystem::path& path,
                        const json& extra = json::object());
ClusterState load_cluster_state(const std::filesystem::path& path);

void save_assignments(const LabeledTaskSet& labels, const std::filesystem::path& path);
LabeledTaskSet load_assignments(const std::filesystem::path& path);

}  // namespace mela
