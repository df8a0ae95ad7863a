#pragma once

// Metrics: clustering accuracy under majority mapping, N-way K-shot
// episodic accuracy with a normal-approximation 95% interval, and the
// variant comparison table.

#include "mela/embedding.hpp"
#include "mela/io.hpp"
#include "mela/pipeline.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mela {

/// Each cluster predicts the most frequent truth among its members (ties to
/// the smaller label); returns the fraction of samples it gets right.
double clustering_accuracy(std::span<const int> assignments, std::span<const int> truths);

struct EpisodicResult {
    double mean = 0.0;
    double ci95 = 0.0;  // 1.96 * sample std / sqrt(n)
    std::vector<double> per_task;
    int nonconverged = 0;  // logistic fits that hit max_iter
};

/// Fits the configured base learner on each embedded support set and scores
/// the query set. `threads` only changes speed, never results.
EpisodicResult episodic_accuracy(const EmbeddingModel& model, const MetaTrainingSet& test_tasks,
                                 BaseLearner learner, const LogRegConfig& logreg, const RidgeConfig& ridge,
                                 int threads = 1);

double ci95_half_width(std::span<const double> values);

enum class Variant { Initial, Mela, KMeans, Oracle };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

struct MetricsReport {
    std::string variant;
    double accuracy = 0.0;
    double ci95 = 0.0;
    std::optional<double> clustering_accuracy;
    std::optional<double> percent_clustered;
    std::optional<int> cluster_count;
    std::string error;  // empty on success
    json metadata = json::object();
};

/// Runs each variant end to end on one seeded world and task set. A stage
/// failure is recorded in that row's `error`; other rows still run.
std::vector<MetricsReport> compare_pipelines(const PipelineConfig& cfg, std::span<const Variant> variants,
                                             int threads = 1);

struct SweepRow {
    std::string param;
    double value = 0.0;
    std::optional<int> cluster_count;  // on collapse: the count that ended the run
    std::optional<double> clustering_accuracy;
    std::optional<double> percent_clustered;
    std::optional<double> accuracy;  // episodic accuracy at `shots`
    std::optional<double> ci95;
    std::string error;
};

/// MeLa end to end for each value of `param` ("q" or "separation"), scored
/// on test tasks with `shots` support samples per class. Failures are
/// recorded per row.
std::vector<SweepRow> run_sweep(const PipelineConfig& base, const std::string& param,
                                std::span<const double> values, int shots, int threads = 1);

/// Columns: <param>,cluster_count,clustering_accuracy,accuracy,ci95,
/// percent_clustered,error
std::string sweep_to_csv(std::span<const SweepRow> rows);

json report_to_json(const MetricsReport& r);
/// Fixed column order: variant,accuracy,ci95,clustering_accuracy,
/// percent_clustered,cluster_count,error
std::string reports_to_csv(std::span<const MetricsReport> rows);

}  // namespace mela
