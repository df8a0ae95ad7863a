#include "mela/eval.hpp"

#include "mela/errors.hpp"
#include "mela/labeler.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <map>
#include <thread>

namespace mela {

double clustering_accuracy(std::span<const int> assignments, std::span<const int> truths) {
    if (assignments.empty()) throw ValidationError("clustering_accuracy: empty input");
    if (assignments.size() != truths.size()) throw ValidationError("clustering_accuracy: length mismatch");
    std::map<int, std::map<int, long long>> counts;
    for (std::size_t i = 0; i < assignments.size(); ++i) ++counts[assignments[i]][truths[i]];
    long long correct = 0;
    for (const auto& [cluster, by_truth] : counts) {
        long long best = 0;
        for (const auto& [truth, n] : by_truth) best = std::max(best, n);
        correct += best;
    }
    return static_cast<double>(correct) / static_cast<double>(assignments.size());
}

double ci95_half_width(std::span<const double> values) {
    if (values.size() < 2) return 0.0;
    const auto n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

EpisodicResult episodic_accuracy(const EmbeddingModel& model, const MetaTrainingSet& test_tasks,
                                 BaseLearner learner, const LogRegConfig& logreg, const RidgeConfig& ridge,
                                 int threads) {
    if (test_tasks.tasks.empty()) throw ValidationError("episodic_accuracy: no test tasks");
    const std::size_t n = test_tasks.tasks.size();
    std::vector<double> acc(n, 0.0);
    std::vector<char> nonconverged(n, 0);

    auto run_task = [&](std::size_t i) {
        const Task& task = test_tasks.tasks[i];
        const int K = infer_spec(task).ways;
        const EmbeddedSet support = embed_set(model, task.support);
        const EmbeddedSet query = embed_set(model, task.query);
        LinearClassifier clf;
        switch (learner) {
            case BaseLearner::LogReg: {
                auto fit = logreg_fit(support.Z, support.labels, K, logreg);
                nonconverged[i] = fit.converged ? 0 : 1;
                clf = std::move(fit.classifier);
                break;
            }
            case BaseLearner::Ridge: clf = ridge_fit(support.Z, support.labels, K, ridge); break;
            case BaseLearner::NearestCentroid: clf = nearest_centroid_fit(support.Z, support.labels, K); break;
        }
        const auto pred = clf.predict(query.Z);
        long long hits = 0;
        for (std::size_t j = 0; j < pred.size(); ++j) hits += pred[j] == query.labels[j] ? 1 : 0;
        acc[i] = static_cast<double>(hits) / static_cast<double>(pred.size());
    };

    const auto workers = static_cast<std::size_t>(std::clamp(threads, 1, 256));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) run_task(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < n; i = next++) run_task(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    EpisodicResult r;
    r.per_task = std::move(acc);
    for (double a : r.per_task) r.mean += a;
    r.mean /= static_cast<double>(n);
    r.ci95 = ci95_half_width(r.per_task);
    for (char c : nonconverged) r.nonconverged += c;
    return r;
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Initial: return "initial";
        case Variant::Mela: return "mela";
        case Variant::KMeans: return "kmeans";
        case Variant::Oracle: return "oracle";
    }
    return "unknown";
}

Variant variant_from_string(const std::string& name) {
    if (name == "initial") return Variant::Initial;
    if (name == "mela") return Variant::Mela;
    if (name == "kmeans") return Variant::KMeans;
    if (name == "oracle") return Variant::Oracle;
    throw ValidationError("unknown pipeline variant '" + name + "'");
}

std::vector<MetricsReport> compare_pipelines(const PipelineConfig& cfg, std::span<const Variant> variants,
                                             int threads) {
    const PipelineData data = build_data(cfg);
    const std::vector<int> truths = per_sample_truths(data.train);

    std::optional<MetaTrainResult> initial;
    std::string initial_error;
    try {
        initial = train_initial_embedding(cfg, data.train_hidden);
    } catch (const std::exception& e) {
        initial_error = e.what();
    }

    auto evaluate = [&](MetricsReport& row, const EmbeddingModel& model) {
        const auto r = episodic_accuracy(model, data.test, cfg.eval.learner, cfg.logreg, cfg.ridge, threads);
        row.accuracy = r.mean;
        row.ci95 = r.ci95;
        row.metadata["nonconverged_fits"] = r.nonconverged;
    };

    std::vector<MetricsReport> rows;
    for (Variant v : variants) {
        MetricsReport row;
        row.variant = to_string(v);
        row.metadata = {{"seed", cfg.seed},
                        {"world_seed", cfg.world.seed},
                        {"separation", cfg.world.class_separation},
                        {"train_tasks", cfg.train_tasks},
                        {"replacement", cfg.replacement},
                        {"q", cfg.labeler.prune.q},
                        {"initial_clusters", cfg.labeler.initial_clusters},
                        {"base_learner", to_string(cfg.eval.learner)},
                        {"shots", cfg.eval.shots}};
        try {
            if (!initial) throw NumericalError("initial embedding failed: " + initial_error);
            const EmbeddingModel& psi0 = initial->model;
            switch (v) {
                case Variant::Initial: evaluate(row, psi0); break;
                case Variant::Mela: {
                    const auto labeled = learn_labeler(psi0, data.train_hidden, cfg.labeler);
                    row.cluster_count = labeled.state.size();
                    row.percent_clustered = labeled.labels.percent_clustered;
                    row.clustering_accuracy =
                        clustering_accuracy(per_sample_clusters(data.train, labeled.labels), truths);
                    row.metadata["labeler_epochs"] = labeled.epochs;
                    const auto pre = pretrain_on(cfg, inferred_flat_dataset(data.train_hidden, labeled.labels));
                    evaluate(row, pre.model);
                    break;
                }
                case Variant::KMeans: {
                    const int k = cfg.kmeans_k > 0 ? cfg.kmeans_k : cfg.world.num_classes;
                    const auto km = kmeans_baseline(psi0, data.train_hidden, k, cfg.labeler.seed);
                    row.cluster_count = k;
                    row.clustering_accuracy = clustering_accuracy(km.labels, truths);
                    const auto pre = pretrain_on(cfg, flat_from_sample_labels(data.train_hidden, km.labels, k));
                    evaluate(row, pre.model);
                    break;
                }
                case Variant::Oracle: {
                    row.cluster_count = cfg.world.num_classes;
                    const auto pre = pretrain_on(cfg, flat_from_truth(data.train));
                    evaluate(row, pre.model);
                    break;
                }
            }
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<SweepRow> run_sweep(const PipelineConfig& base, const std::string& param,
                                std::span<const double> values, int shots, int threads) {
    if (param != "q" && param != "separation")
        throw ValidationError("sweep: param must be 'q' or 'separation', got '" + param + "'");
    if (values.empty()) throw ValidationError("sweep: no values");
    PipelineConfig cfg = base;
    cfg.eval.shots = shots;
    for (double v : values) {
        PipelineConfig c = cfg;
        if (param == "q") c.labeler.prune.q = v;
        else c.world.class_separation = v;
        c.validate();
    }

    // q only affects the labeler, so data and the initial embedding are shared.
    std::optional<PipelineData> shared;
    std::optional<MetaTrainResult> shared_init;
    std::vector<SweepRow> rows;
    for (double v : values) {
        SweepRow row;
        row.param = param;
        row.value = v;
        PipelineConfig c = cfg;
        if (param == "q") c.labeler.prune.q = v;
        else c.world.class_separation = v;
        try {
            std::optional<PipelineData> local;
            std::optional<MetaTrainResult> local_init;
            if (param == "q") {
                if (!shared) {
                    shared = build_data(c);
                    shared_init = train_initial_embedding(c, shared->train_hidden);
                }
            } else {
                local = build_data(c);
                local_init = train_initial_embedding(c, local->train_hidden);
            }
            const PipelineData& data = param == "q" ? *shared : *local;
            const EmbeddingModel& psi0 = param == "q" ? shared_init->model : local_init->model;
            try {
                const auto labeled = learn_labeler(psi0, data.train_hidden, c.labeler);
                row.cluster_count = labeled.state.size();
                row.percent_clustered = labeled.labels.percent_clustered;
                row.clustering_accuracy = clustering_accuracy(per_sample_clusters(data.train, labeled.labels),
                                                              per_sample_truths(data.train));
                const auto pre = pretrain_on(c, inferred_flat_dataset(data.train_hidden, labeled.labels));
                const auto r = episodic_accuracy(pre.model, data.test, c.eval.learner, c.logreg, c.ridge, threads);
                row.accuracy = r.mean;
                row.ci95 = r.ci95;
            } catch (const LabelerCollapse& e) {
                row.cluster_count = e.clusters();
                row.error = e.what();
            }
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

template <typename T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return ec == std::errc() ? std::string(buf, end) : std::string("nan");
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::string sweep_to_csv(std::span<const SweepRow> rows) {
    const std::string param = rows.empty() ? "value" : rows.front().param;
    std::string out = param + ",cluster_count,clustering_accuracy,accuracy,ci95,percent_clustered,error\n";
    for (const auto& r : rows) {
        out += format_double(r.value) + ",";
        out += (r.cluster_count ? std::to_string(*r.cluster_count) : "") + ",";
        out += (r.clustering_accuracy ? format_double(*r.clustering_accuracy) : "") + ",";
        out += (r.accuracy ? format_double(*r.accuracy) : "") + ",";
        out += (r.ci95 ? format_double(*r.ci95) : "") + ",";
        out += (r.percent_clustered ? format_double(*r.percent_clustered) : "") + ",";
        out += csv_escape(r.error) + "\n";
    }
    return out;
}

json report_to_json(const MetricsReport& r) {
    return {{"variant", r.variant},
            {"accuracy", r.accuracy},
            {"ci95", r.ci95},
            {"clustering_accuracy", optional_json(r.clustering_accuracy)},
            {"percent_clustered", optional_json(r.percent_clustered)},
            {"cluster_count", optional_json(r.cluster_count)},
            {"error", r.error.empty() ? json(nullptr) : json(r.error)},
            {"metadata", r.metadata}};
}

std::string reports_to_csv(std::span<const MetricsReport> rows) {
    std::string out = "variant,accuracy,ci95,clustering_accuracy,percent_clustered,cluster_count,error\n";
    for (const auto& r : rows) {
        out += csv_escape(r.variant) + "," + format_double(r.accuracy) + "," + format_double(r.ci95) + ",";
        out += (r.clustering_accuracy ? format_double(*r.clustering_accuracy) : "") + ",";
        out += (r.percent_clustered ? format_double(*r.percent_clustered) : "") + ",";
        out += (r.cluster_count ? std::to_string(*r.cluster_count) : "") + ",";
        out += csv_escape(r.error) + "\n";
    }
    return out;
}

}  // namespace mela
