#include "mela/theory.hpp"

#include "mela/errors.hpp"
#include "mela/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <unordered_set>

namespace mela {

namespace {

std::vector<int> sorted_unique(std::span<const int> labels) {
    std::vector<int> out(labels.begin(), labels.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::string row_key(const Matrix& Z, Eigen::Index r) {
    const Vector row = Z.row(r).transpose();
    return {reinterpret_cast<const char*>(row.data()), static_cast<std::size_t>(row.size()) * sizeof(double)};
}

std::vector<int> global_labels(std::span<const Sample> samples, std::int64_t task_id) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.y_true) throw ValidationError("task " + std::to_string(task_id) + ": missing global labels");
        out.push_back(*s.y_true);
    }
    return out;
}

}  // namespace

void GlobalClassifier::validate() const {
    if (static_cast<std::size_t>(W.rows()) != class_ids.size())
        throw ValidationError("global classifier: row count != class id count");
    for (std::size_t i = 1; i < class_ids.size(); ++i) {
        if (class_ids[i] <= class_ids[i - 1]) throw ValidationError("global classifier: class ids must ascend");
    }
    if (!W.allFinite()) throw ValidationError("global classifier: non-finite weights");
}

GlobalClassifier GlobalClassifier::dense(Matrix W) {
    GlobalClassifier g;
    g.class_ids.resize(static_cast<std::size_t>(W.rows()));
    for (std::size_t i = 0; i < g.class_ids.size(); ++i) g.class_ids[i] = static_cast<int>(i);
    g.W = std::move(W);
    return g;
}

std::vector<int> TaskClassifier::local_rows(std::span<const int> global_labels) const {
    std::vector<int> out;
    out.reserve(global_labels.size());
    for (int y : global_labels) {
        auto it = row_of.find(y);
        if (it == row_of.end())
            throw ValidationError("label " + std::to_string(y) + " is not among the task classifier's classes");
        out.push_back(it->second);
    }
    return out;
}

TaskClassifier submatrix_for(const GlobalClassifier& classifier, std::span<const int> labels) {
    TaskClassifier t;
    t.classes = sorted_unique(labels);
    if (t.classes.size() < 2) throw ValidationError("submatrix_for: need at least two classes");
    t.W.resize(static_cast<Eigen::Index>(t.classes.size()), classifier.W.cols());
    for (std::size_t r = 0; r < t.classes.size(); ++r) {
        auto it = std::lower_bound(classifier.class_ids.begin(), classifier.class_ids.end(), t.classes[r]);
        if (it == classifier.class_ids.end() || *it != t.classes[r])
            throw ValidationError("submatrix_for: unknown label " + std::to_string(t.classes[r]));
        t.W.row(static_cast<Eigen::Index>(r)) = classifier.W.row(it - classifier.class_ids.begin());
        t.row_of[t.classes[r]] = static_cast<int>(r);
    }
    return t;
}

TaskClassifier w_global(const GlobalClassifier& classifier, const Matrix& /*X*/, std::span<const int> labels) {
    return submatrix_for(classifier, labels);
}

double task_ce(const TaskClassifier& task_classifier, const Matrix& Z, std::span<const int> labels) {
    const std::vector<int> rows = task_classifier.local_rows(labels);
    return mean_softmax_ce(Z * task_classifier.W.transpose(), rows);
}

double flat_ce(const GlobalClassifier& classifier, const Matrix& Z, std::span<const int> labels) {
    std::vector<int> rows;
    rows.reserve(labels.size());
    for (int y : labels) {
        auto it = std::lower_bound(classifier.class_ids.begin(), classifier.class_ids.end(), y);
        if (it == classifier.class_ids.end() || *it != y)
            throw ValidationError("flat_ce: unknown label " + std::to_string(y));
        rows.push_back(static_cast<int>(it - classifier.class_ids.begin()));
    }
    return mean_softmax_ce(Z * classifier.W.transpose(), rows);
}

BoundCheck verify_upper_bound(const GlobalClassifier& classifier, std::span<const LabeledSet> queries) {
    classifier.validate();
    if (queries.empty()) throw ValidationError("verify_upper_bound: no query sets");
    const Eigen::Index size = queries.front().Z.rows();
    std::unordered_set<std::string> seen;
    Eigen::Index total = 0;
    for (std::size_t t = 0; t < queries.size(); ++t) {
        const auto& q = queries[t];
        if (q.Z.rows() != size || q.Z.rows() == 0)
            throw ValidationError("verify_upper_bound: query sets must be non-empty and equally sized");
        if (static_cast<std::size_t>(q.Z.rows()) != q.labels.size())
            throw ValidationError("verify_upper_bound: missing global labels");
        std::unordered_set<std::string> local;
        for (Eigen::Index r = 0; r < q.Z.rows(); ++r) local.insert(row_key(q.Z, r));
        for (const auto& k : local) {
            if (!seen.insert(k).second)
                throw ValidationError("verify_upper_bound: query set " + std::to_string(t) +
                                      " shares a sample with an earlier query set");
        }
        total += q.Z.rows();
    }

    BoundCheck out;
    Matrix merged(total, queries.front().Z.cols());
    std::vector<int> merged_labels;
    Eigen::Index r = 0;
    for (const auto& q : queries) {
        out.lhs += task_ce(submatrix_for(classifier, q.labels), q.Z, q.labels);
        merged.middleRows(r, q.Z.rows()) = q.Z;
        r += q.Z.rows();
        merged_labels.insert(merged_labels.end(), q.labels.begin(), q.labels.end());
    }
    out.lhs /= static_cast<double>(queries.size());
    out.rhs = flat_ce(classifier, merged, merged_labels);
    out.gap = out.rhs - out.lhs;
    out.pass = out.lhs <= out.rhs + kInequalityTol;
    return out;
}

BoundCheck verify_upper_bound(const GlobalClassifier& classifier, const EmbeddingModel& model,
                              const MetaTrainingSet& tasks) {
    if (!query_sets_disjoint(tasks)) throw ValidationError("verify_upper_bound: query sets are not disjoint");
    std::vector<LabeledSet> queries;
    for (const auto& t : tasks.tasks) {
        queries.push_back({model.forward(stack_inputs(t.query)), global_labels(t.query, t.id)});
    }
    return verify_upper_bound(classifier, queries);
}

LemmaCheck verify_lemma_equality(const GlobalClassifier& classifier, std::span<const EmbeddedTask> tasks) {
    classifier.validate();
    if (tasks.empty()) throw ValidationError("verify_lemma_equality: no tasks");
    LemmaCheck out;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& task = tasks[t];
        if (sorted_unique(task.support.labels) != sorted_unique(task.query.labels))
            throw ValidationError("verify_lemma_equality: task " + std::to_string(t) +
                                  " has different support and query label sets");
        // Left: learner fit on the support set, scored on the query set.
        const TaskClassifier from_support = w_global(classifier, task.support.Z, task.support.labels);
        out.lhs += task_ce(from_support, task.query.Z, task.query.labels);
        // Right: submatrix indexed by the query labels directly.
        const TaskClassifier from_query = submatrix_for(classifier, task.query.labels);
        out.rhs += task_ce(from_query, task.query.Z, task.query.labels);
    }
    out.lhs /= static_cast<double>(tasks.size());
    out.rhs /= static_cast<double>(tasks.size());
    out.diff = std::abs(out.lhs - out.rhs);
    out.pass = out.diff <= kIdentityTol;
    return out;
}

LemmaCheck verify_lemma_equality(const GlobalClassifier& classifier, const EmbeddingModel& model,
                                 const MetaTrainingSet& tasks) {
    std::vector<EmbeddedTask> embedded;
    for (const auto& t : tasks.tasks) {
        embedded.push_back({{model.forward(stack_inputs(t.support)), global_labels(t.support, t.id)},
                            {model.forward(stack_inputs(t.query)), global_labels(t.query, t.id)}});
    }
    return verify_lemma_equality(classifier, embedded);
}

std::vector<LabeledSet> BoundInstance::queries() const {
    std::vector<LabeledSet> out;
    out.reserve(tasks.size());
    for (const auto& t : tasks) out.push_back(t.query);
    return out;
}

BoundInstance random_bound_instance(const BoundInstanceConfig& cfg, std::uint64_t seed) {
    if (cfg.ways < 2 || cfg.num_classes < cfg.ways || cfg.tasks < 1 || cfg.dim < 1 || cfg.shots < 1 ||
        cfg.queries < 1)
        throw ValidationError("random_bound_instance: invalid configuration");
    Rng rng = make_rng(seed, 60);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> log_scale(std::log(0.1), std::log(10.0));

    BoundInstance inst;
    const double w_scale = std::exp(log_scale(rng));
    Matrix W(cfg.num_classes, cfg.dim);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = w_scale * normal(rng);
    inst.classifier = GlobalClassifier::dense(std::move(W));

    std::vector<int> classes(static_cast<std::size_t>(cfg.num_classes));
    for (int c = 0; c < cfg.num_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
    auto draw_set = [&](const std::vector<int>& chosen, int per_class) {
        LabeledSet s;
        s.Z.resize(static_cast<Eigen::Index>(chosen.size()) * per_class, cfg.dim);
        Eigen::Index r = 0;
        for (int c : chosen) {
            for (int i = 0; i < per_class; ++i) {
                for (int k = 0; k < cfg.dim; ++k) s.Z(r, k) = normal(rng);
                s.labels.push_back(c);
                ++r;
            }
        }
        return s;
    };
    for (int t = 0; t < cfg.tasks; ++t) {
        std::vector<int> chosen;
        std::sample(classes.begin(), classes.end(), std::back_inserter(chosen), cfg.ways, rng);
        std::shuffle(chosen.begin(), chosen.end(), rng);
        EmbeddedTask task;
        task.support = draw_set(chosen, cfg.shots);
        task.query = draw_set(chosen, cfg.queries);
        inst.tasks.push_back(std::move(task));
    }
    return inst;
}

FlatDataset merged_query_dataset(const MetaTrainingSet& tasks, std::vector<int>& class_ids) {
    std::vector<int> all;
    std::vector<const Sample*> samples;
    for (const auto& t : tasks.tasks) {
        const auto labels = global_labels(t.query, t.id);
        all.insert(all.end(), labels.begin(), labels.end());
        for (const auto& s : t.query) samples.push_back(&s);
    }
    class_ids = sorted_unique(all);
    FlatDataset flat;
    flat.num_classes = static_cast<int>(class_ids.size());
    flat.X.resize(static_cast<Eigen::Index>(samples.size()), samples.empty() ? 0 : samples.front()->x.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        flat.X.row(static_cast<Eigen::Index>(i)) = samples[i]->x.transpose();
        flat.labels.push_back(static_cast<int>(std::lower_bound(class_ids.begin(), class_ids.end(), all[i]) -
                                               class_ids.begin()));
    }
    return flat;
}

MetaTrainingSet tightness_tasks(const SyntheticWorldConfig& world, const TaskSpec& spec, int num_tasks,
                                std::uint64_t seed) {
    SyntheticWorldConfig w = world;
    w.seed = derive_seed(seed, 1);
    const World generated = generate_world(w);
    return sample_tasks(generated.pool, spec, num_tasks, false, derive_seed(seed, 2));
}

TrainConfig tightness_train_config(const TrainConfig& base, int epochs) {
    TrainConfig cfg = base;
    cfg.epochs = epochs;
    cfg.weight_decay = 0.0;
    cfg.decay_factor = 1.0;
    cfg.decay_epochs.clear();
    return cfg;
}

TightnessReport verify_tightness(const MetaTrainingSet& tasks, const EmbeddingModel& init, const TrainConfig& cfg,
                                 std::span<const double> thresholds) {
    if (!query_sets_disjoint(tasks)) throw ValidationError("verify_tightness: query sets are not disjoint");
    std::vector<int> class_ids;
    const FlatDataset flat = merged_query_dataset(tasks, class_ids);

    TightnessReport report;
    pretrain_flat(flat, init, cfg, [&](int epoch, const EmbeddingModel& model, const Matrix& W, double loss) {
        GlobalClassifier gc{W, class_ids};
        const BoundCheck b = verify_upper_bound(gc, model, tasks);
        report.checkpoints.push_back({epoch, b.rhs, b.lhs, b.gap, loss});
        report.gap_nonnegative &= b.gap >= -kInequalityTol;
        report.gap_below_rhs &= b.gap <= b.rhs + kInequalityTol;
        report.max_train_loss_mismatch = std::max(report.max_train_loss_mismatch, std::abs(loss - b.rhs));
    });
    for (double threshold : thresholds) {
        int index = -1;
        for (std::size_t i = 0; i < report.checkpoints.size(); ++i) {
            if (report.checkpoints[i].rhs < threshold) {
                index = static_cast<int>(i);
                break;
            }
        }
        report.first_below.emplace_back(threshold, index);
    }
    return report;
}

json bound_report_entry(std::uint64_t seed, const BoundCheck& check) {
    return {{"instance_seed", seed}, {"lhs", check.lhs}, {"rhs", check.rhs}, {"gap", check.gap}, {"pass", check.pass}};
}

}  // namespace mela
