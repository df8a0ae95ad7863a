#include "mela/labeler.hpp"

#include "mela/errors.hpp"
#include "mela/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace mela {

std::string to_string(PruneBasis basis) {
    return basis == PruneBasis::MatchCounts ? "match_counts" : "sample_counts";
}

PruneBasis prune_basis_from_string(const std::string& name) {
    if (name == "match_counts") return PruneBasis::MatchCounts;
    if (name == "sample_counts") return PruneBasis::SampleCounts;
    throw ValidationError("unknown prune basis '" + name + "'");
}

void PruneConfig::validate() const {
    if (!(q >= 0.0)) throw ValidationError("prune: q must be >= 0");
}

void LabelerConfig::validate(int ways) const {
    prune.validate();
    if (initial_clusters < ways)
        throw ValidationError("labeler: initial_clusters (" + std::to_string(initial_clusters) +
                              ") must be >= K (" + std::to_string(ways) + ")");
    if (max_epochs < 1) throw ValidationError("labeler: max_epochs must be >= 1");
}

TaskGroups embed_groups(const EmbeddingModel& model, const Task& task) {
    const int K = infer_spec(task).ways;
    TaskGroups g;
    g.sums = Matrix::Zero(K, model.out_dim());
    g.sizes.assign(static_cast<std::size_t>(K), 0);
    for (const auto* part : {&task.support, &task.query}) {
        const auto emb = embed_set(model, *part);
        for (Eigen::Index i = 0; i < emb.Z.rows(); ++i) {
            const int k = emb.labels[static_cast<std::size_t>(i)];
            g.sums.row(k) += emb.Z.row(i);
            ++g.sizes[static_cast<std::size_t>(k)];
        }
    }
    g.means = g.sums;
    for (int k = 0; k < K; ++k) g.means.row(k) /= static_cast<double>(g.sizes[static_cast<std::size_t>(k)]);
    return g;
}

namespace {

std::vector<TaskGroups> embed_all_groups(const EmbeddingModel& model, const MetaTrainingSet& tasks) {
    std::vector<TaskGroups> out;
    out.reserve(tasks.tasks.size());
    for (const auto& t : tasks.tasks) out.push_back(embed_groups(model, t));
    return out;
}

ClusterState init_from_groups(const std::vector<TaskGroups>& groups, int ways, const LabelerConfig& cfg) {
    const int J = cfg.initial_clusters;
    const auto needed = static_cast<std::size_t>((J + ways - 1) / ways);
    if (groups.size() < needed)
        throw ValidationError("init_clusters: need " + std::to_string(needed) + " tasks for " + std::to_string(J) +
                              " clusters, have " + std::to_string(groups.size()));
    std::vector<std::size_t> all(groups.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::size_t> drawn;
    Rng rng = make_rng(cfg.seed, 40);
    std::sample(all.begin(), all.end(), std::back_inserter(drawn), static_cast<std::ptrdiff_t>(needed), rng);
    std::shuffle(drawn.begin(), drawn.end(), rng);

    ClusterState state;
    state.centroids.resize(J, groups.front().means.cols());
    int v = 0;
    for (std::size_t t : drawn) {
        for (Eigen::Index k = 0; k < groups[t].means.rows() && v < J; ++k) {
            state.centroids.row(v++) = groups[t].means.row(k);
        }
    }
    state.sample_counts.assign(static_cast<std::size_t>(J), 1);
    state.match_counts.assign(static_cast<std::size_t>(J), 0);
    return state;
}

std::vector<int> nearest_clusters(const ClusterState& state, const TaskGroups& groups) {
    std::vector<int> matched(static_cast<std::size_t>(groups.means.rows()));
    for (Eigen::Index k = 0; k < groups.means.rows(); ++k) {
        matched[static_cast<std::size_t>(k)] = match_class_group(state, groups.means.row(k).transpose());
    }
    return matched;
}

bool all_distinct(const std::vector<int>& v) {
    return std::set<int>(v.begin(), v.end()).size() == v.size();
}

LabeledTaskSet assign_groups(const ClusterState& state, const std::vector<TaskGroups>& groups,
                             const MetaTrainingSet& tasks) {
    LabeledTaskSet out;
    out.num_clusters = state.size();
    std::size_t kept = 0;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        TaskAssignment a;
        a.task_id = tasks.tasks[t].id;
        a.clusters = nearest_clusters(state, groups[t]);
        a.discarded = !all_distinct(a.clusters);
        kept += a.discarded ? 0 : 1;
        out.assignments.push_back(std::move(a));
    }
    out.percent_clustered = groups.empty() ? 0.0 : static_cast<double>(kept) / static_cast<double>(groups.size());
    return out;
}

}  // namespace

ClusterState init_clusters(const EmbeddingModel& model, const MetaTrainingSet& tasks, const LabelerConfig& cfg) {
    cfg.validate(tasks.spec.ways);
    const int ways = tasks.spec.ways;
    const auto needed = static_cast<std::size_t>((cfg.initial_clusters + ways - 1) / ways);
    if (tasks.tasks.size() < needed)
        throw ValidationError("init_clusters: need " + std::to_string(needed) + " tasks, have " +
                              std::to_string(tasks.tasks.size()));
    return init_from_groups(embed_all_groups(model, tasks), ways, cfg);
}

int match_class_group(const ClusterState& state, const Eigen::Ref<const Vector>& group_mean) {
    if (state.size() == 0) throw ValidationError("match_class_group: empty cluster state");
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int v = 0; v < state.size(); ++v) {
        const double d = (state.centroids.row(v).transpose() - group_mean).squaredNorm();
        if (d < best_dist) {
            best_dist = d;
            best = v;
        }
    }
    return best;
}

TaskOutcome process_task(ClusterState& state, const TaskGroups& groups) {
    std::vector<int> matched = nearest_clusters(state, groups);
    if (!all_distinct(matched)) return Discarded{};
    for (std::size_t k = 0; k < matched.size(); ++k) {
        const auto v = static_cast<std::size_t>(matched[k]);
        const auto n = static_cast<double>(state.sample_counts[v]);
        const auto size = groups.sizes[k];
        state.centroids.row(matched[k]) =
            (n * state.centroids.row(matched[k]) + groups.sums.row(static_cast<Eigen::Index>(k))) /
            (n + static_cast<double>(size));
        state.sample_counts[v] += size;
        state.match_counts[v] += 1;
    }
    return matched;
}

TaskOutcome process_task(ClusterState& state, const EmbeddingModel& model, const Task& task) {
    return process_task(state, embed_groups(model, task));
}

double prune_threshold(long long tasks_in_epoch, int ways, int clusters_at_start, double q) {
    const double p = static_cast<double>(ways) / static_cast<double>(clusters_at_start);
    const double mean = static_cast<double>(tasks_in_epoch) * p;
    const double var = static_cast<double>(tasks_in_epoch) * p * (1.0 - p);
    return mean - q * std::sqrt(std::max(var, 0.0));
}

ClusterState prune(const ClusterState& state, long long tasks_in_epoch, int ways, int clusters_at_start,
                   const PruneConfig& cfg, long long group_size) {
    cfg.validate();
    const double threshold = prune_threshold(tasks_in_epoch, ways, clusters_at_start, cfg.q);
    std::vector<int> keep;
    for (int v = 0; v < state.size(); ++v) {
        const auto sv = static_cast<std::size_t>(v);
        const bool survives = cfg.basis == PruneBasis::MatchCounts
                                  ? static_cast<double>(state.match_counts[sv]) >= threshold
                                  : static_cast<double>(state.sample_counts[sv]) >=
                                        static_cast<double>(group_size) * threshold;
        if (survives) keep.push_back(v);
    }
    ClusterState out;
    out.centroids.resize(static_cast<Eigen::Index>(keep.size()), state.centroids.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.centroids.row(static_cast<Eigen::Index>(i)) = state.centroids.row(keep[i]);
        out.sample_counts.push_back(state.sample_counts[static_cast<std::size_t>(keep[i])]);
        out.match_counts.push_back(state.match_counts[static_cast<std::size_t>(keep[i])]);
    }
    return out;
}

LabeledTaskSet assign_tasks(const ClusterState& state, const EmbeddingModel& model, const MetaTrainingSet& tasks) {
    return assign_groups(state, embed_all_groups(model, tasks), tasks);
}

LearnLabelerResult learn_labeler(const EmbeddingModel& model, const MetaTrainingSet& tasks,
                                 const LabelerConfig& cfg) {
    const int ways = tasks.spec.ways;
    cfg.validate(ways);
    if (tasks.tasks.empty()) throw ValidationError("learn_labeler: no tasks");
    const auto groups = embed_all_groups(model, tasks);
    const long long group_size = tasks.spec.group_size();

    LearnLabelerResult result;
    ClusterState state = init_from_groups(groups, ways, cfg);
    result.cluster_trajectory.push_back(state.size());

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const int at_start = state.size();
        if (cfg.reset_counts) std::fill(state.sample_counts.begin(), state.sample_counts.end(), 1);
        std::fill(state.match_counts.begin(), state.match_counts.end(), 0);
        for (const auto& g : groups) process_task(state, g);
        ClusterState pruned = prune(state, static_cast<long long>(groups.size()), ways, at_start, cfg.prune,
                                    group_size);
        ++result.epochs;
        result.cluster_trajectory.push_back(pruned.size());
        if (pruned.size() < ways) {
            throw LabelerCollapse("learn_labeler: pruning left " + std::to_string(pruned.size()) +
                                      " clusters after epoch " + std::to_string(epoch + 1) + ", fewer than K=" +
                                      std::to_string(ways) + "; increase prune.q or labeler.initial_clusters",
                                  result.cluster_trajectory);
        }
        state = std::move(pruned);
        if (state.size() == at_start) {
            result.converged = true;
            break;
        }
    }
    if (!result.converged) {
        result.warnings.push_back("learn_labeler: cluster count still changing after " +
                                  std::to_string(cfg.max_epochs) + " epochs");
    }
    result.labels = assign_groups(state, groups, tasks);
    result.state = std::move(state);
    return result;
}

FlatDataset inferred_flat_dataset(const MetaTrainingSet& tasks, const LabeledTaskSet& labels) {
    if (labels.assignments.size() != tasks.tasks.size())
        throw ValidationError("inferred_flat_dataset: assignment count does not match task count");
    FlatDataset flat;
    flat.num_classes = labels.num_clusters;
    std::size_t rows = 0;
    for (std::size_t t = 0; t < tasks.tasks.size(); ++t) {
        if (labels.assignments[t].discarded) continue;
        rows += tasks.tasks[t].support.size() + tasks.tasks[t].query.size();
    }
    if (rows == 0) throw ContractError("inferred_flat_dataset: every task was discarded");
    const Eigen::Index dim = tasks.tasks.front().support.front().x.size();
    flat.X.resize(static_cast<Eigen::Index>(rows), dim);
    Eigen::Index r = 0;
    for (std::size_t t = 0; t < tasks.tasks.size(); ++t) {
        const auto& a = labels.assignments[t];
        if (a.task_id != tasks.tasks[t].id)
            throw ValidationError("inferred_flat_dataset: assignment for task " + std::to_string(a.task_id) +
                                  " out of order");
        if (a.discarded) continue;
        for (const auto* part : {&tasks.tasks[t].support, &tasks.tasks[t].query}) {
            for (const auto& s : *part) {
                flat.X.row(r++) = s.x.transpose();
                flat.labels.push_back(a.clusters[static_cast<std::size_t>(s.y_local)]);
            }
        }
    }
    return flat;
}

std::vector<int> per_sample_clusters(const MetaTrainingSet& tasks, const LabeledTaskSet& labels) {
    std::vector<int> out;
    for (std::size_t t = 0; t < tasks.tasks.size(); ++t) {
        const auto& a = labels.assignments.at(t);
        for (const auto* part : {&tasks.tasks[t].support, &tasks.tasks[t].query}) {
            for (const auto& s : *part) out.push_back(a.clusters.at(static_cast<std::size_t>(s.y_local)));
        }
    }
    return out;
}

std::vector<int> per_sample_truths(const MetaTrainingSet& tasks) {
    std::vector<int> out;
    for (const auto& t : tasks.tasks) {
        for (const auto* part : {&t.support, &t.query}) {
            for (const auto& s : *part) {
                if (!s.y_true) throw ValidationError("per_sample_truths: task " + std::to_string(t.id) +
                                                     " has no y_true");
                out.push_back(*s.y_true);
            }
        }
    }
    return out;
}

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter) {
    const Eigen::Index n = points.rows();
    if (k < 1) throw ValidationError("kmeans: k must be >= 1");
    if (n < k) throw ValidationError("kmeans: fewer points than clusters");

    std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    std::vector<Eigen::Index> init;
    Rng rng = make_rng(seed, 50);
    std::sample(all.begin(), all.end(), std::back_inserter(init), k, rng);
    std::shuffle(init.begin(), init.end(), rng);

    KMeansResult r;
    r.centroids.resize(k, points.cols());
    for (int c = 0; c < k; ++c) r.centroids.row(c) = points.row(init[static_cast<std::size_t>(c)]);
    r.labels.assign(static_cast<std::size_t>(n), -1);
    std::vector<double> dist(static_cast<std::size_t>(n));

    for (int iter = 0; iter < max_iter; ++iter) {
        long long changed = 0;
        double objective = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = 0;
            const double d = (r.centroids.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
            if (r.labels[static_cast<std::size_t>(i)] != static_cast<int>(best)) ++changed;
            r.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
            dist[static_cast<std::size_t>(i)] = d;
            objective += d;
        }
        r.objective_trace.push_back(objective);
        r.iterations = iter + 1;
        if (changed == 0) {
            r.converged = true;
            break;
        }

        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<long long> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(r.labels[static_cast<std::size_t>(i)]) += points.row(i);
            ++counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                r.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
                continue;
            }
            const auto far = std::distance(dist.begin(), std::max_element(dist.begin(), dist.end()));
            r.centroids.row(c) = points.row(far);
            dist[static_cast<std::size_t>(far)] = 0.0;
        }
    }
    return r;
}

KMeansResult kmeans_baseline(const EmbeddingModel& model, const MetaTrainingSet& tasks, int k,
                             std::uint64_t seed) {
    std::size_t rows = 0;
    for (const auto& t : tasks.tasks) rows += t.support.size() + t.query.size();
    Matrix Z(static_cast<Eigen::Index>(rows), model.out_dim());
    Eigen::Index r = 0;
    for (const auto& t : tasks.tasks) {
        for (const auto* part : {&t.support, &t.query}) {
            const Matrix E = model.forward(stack_inputs(*part));
            Z.middleRows(r, E.rows()) = E;
            r += E.rows();
        }
    }
    return kmeans(Z, k, seed);
}

void save_cluster_state(const ClusterState& state, const std::filesystem::path& path, const json& extra) {
    json j = extra.is_object() ? extra : json::object();
    j["m"] = state.centroids.cols();
    j["centroids"] = to_json(state.centroids);
    j["sample_counts"] = state.sample_counts;
    j["match_counts"] = state.match_counts;
    write_file(path, j.dump(2) + "\n");
}

ClusterState load_cluster_state(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("cluster file " + path.string() + ": corrupt (" + e.what() + ")");
    }
    ClusterState s;
    s.centroids = matrix_from_json(j.at("centroids"));
    s.sample_counts = j.at("sample_counts").get<std::vector<long long>>();
    s.match_counts = j.at("match_counts").get<std::vector<long long>>();
    const auto J = static_cast<std::size_t>(s.centroids.rows());
    if (s.sample_counts.size() != J || s.match_counts.size() != J)
        throw ValidationError("cluster file " + path.string() + ": count arrays do not match centroids");
    if (J > 0 && s.centroids.cols() != j.at("m").get<Eigen::Index>())
        throw ValidationError("cluster file " + path.string() + ": centroid width != m");
    return s;
}

void save_assignments(const LabeledTaskSet& labels, const std::filesystem::path& path) {
    std::string out;
    for (const auto& a : labels.assignments) {
        json j;
        j["task_id"] = a.task_id;
        if (a.discarded) {
            j["assignment"] = "discarded";
            j["nearest"] = a.clusters;
        } else {
            j["assignment"] = a.clusters;
        }
        out += j.dump() + "\n";
    }
    write_file(path, out);
}

LabeledTaskSet load_assignments(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open assignment file " + path.string());
    LabeledTaskSet out;
    std::string line;
    int max_cluster = -1;
    std::size_t kept = 0;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.filename().string() + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.contains("task_id") || !j.contains("assignment"))
            throw ValidationError(where + ": record needs task_id and assignment");
        TaskAssignment a;
        a.task_id = j["task_id"].get<std::int64_t>();
        if (j["assignment"].is_string()) {
            if (j["assignment"] != "discarded") throw ValidationError(where + ": unknown assignment marker");
            a.discarded = true;
            if (j.contains("nearest")) a.clusters = j["nearest"].get<std::vector<int>>();
        } else {
            a.clusters = j["assignment"].get<std::vector<int>>();
            ++kept;
        }
        for (int c : a.clusters) {
            if (c < 0) throw ValidationError(where + ": negative cluster id");
            max_cluster = std::max(max_cluster, c);
        }
        out.assignments.push_back(std::move(a));
    }
    out.num_clusters = max_cluster + 1;
    out.percent_clustered =
        out.assignments.empty() ? 0.0 : static_cast<double>(kept) / static_cast<double>(out.assignments.size());
    return out;
}

}  // namespace mela
