#include "mela/tasks.hpp"

#include "mela/errors.hpp"
#include "mela/io.hpp"
#include "mela/rng.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string_view>
#include <unordered_set>

namespace mela {

namespace {

constexpr int kMaxPlacementRetries = 10000;
constexpr int kTaskFormatVersion = 1;

std::string vector_key(const Vector& x) {
    return {reinterpret_cast<const char*>(x.data()), static_cast<std::size_t>(x.size()) * sizeof(double)};
}

std::map<int, std::vector<std::size_t>> indices_by_class(const std::vector<Sample>& pool) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!pool[i].y_true) throw ValidationError("sample_tasks: pool sample without y_true");
        by_class[*pool[i].y_true].push_back(i);
    }
    return by_class;
}

// Builds one task from K groups of pool indices (one group per chosen class).
Task assemble_task(const std::vector<Sample>& pool, const std::vector<std::vector<std::size_t>>& groups,
                   const TaskSpec& spec, std::int64_t id, Rng& rng) {
    std::vector<int> local(groups.size());
    std::iota(local.begin(), local.end(), 0);
    std::shuffle(local.begin(), local.end(), rng);

    Task task;
    task.id = id;
    task.support.reserve(static_cast<std::size_t>(spec.ways * spec.shots));
    task.query.reserve(static_cast<std::size_t>(spec.ways * spec.queries));
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t j = 0; j < groups[g].size(); ++j) {
            Sample s = pool[groups[g][j]];
            s.y_local = local[g];
            (static_cast<int>(j) < spec.shots ? task.support : task.query).push_back(std::move(s));
        }
    }
    const auto by_local = [](const Sample& a, const Sample& b) { return a.y_local < b.y_local; };
    std::stable_sort(task.support.begin(), task.support.end(), by_local);
    std::stable_sort(task.query.begin(), task.query.end(), by_local);
    return task;
}

// Whether `remaining_tasks` more K-way tasks can still be cut from the given
// per-class group budgets.
bool feasible(const std::vector<int>& groups_left, int ways, int remaining_tasks) {
    long long capacity = 0;
    for (int g : groups_left) capacity += std::min(g, remaining_tasks);
    return capacity >= static_cast<long long>(ways) * remaining_tasks;
}

json sample_to_json(const Sample& s) {
    json j;
    j["x"] = to_json(s.x);
    j["y_local"] = s.y_local;
    if (s.y_true) j["y_true"] = *s.y_true;
    return j;
}

Sample sample_from_json(const json& j, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + ": sample is not an object");
    if (!j.contains("x")) throw ValidationError(where + ": sample missing x");
    if (!j.contains("y_local") || !j["y_local"].is_number_integer())
        throw ValidationError(where + ": sample missing y_local");
    Sample s;
    s.x = vector_from_json(j["x"]);
    s.y_local = j["y_local"].get<int>();
    if (j.contains("y_true")) {
        if (!j["y_true"].is_number_integer() || j["y_true"].get<long long>() < 0)
            throw ValidationError(where + ": y_true must be a non-negative integer");
        s.y_true = j["y_true"].get<int>();
    }
    return s;
}

}  // namespace

void TaskSpec::validate() const {
    if (ways < 2) throw ValidationError("task spec: ways must be >= 2");
    if (shots < 1) throw ValidationError("task spec: shots must be >= 1");
    if (queries < 1) throw ValidationError("task spec: queries must be >= 1");
}

void SyntheticWorldConfig::validate() const {
    if (num_classes < 1) throw ValidationError("world: num_classes must be >= 1");
    if (dim < 1) throw ValidationError("world: dim must be >= 1");
    if (!(class_separation >= 0.0)) throw ValidationError("world: class_separation must be >= 0");
    if (samples_per_class < 1) throw ValidationError("world: samples_per_class must be >= 1");
}

World generate_world(const SyntheticWorldConfig& cfg) {
    cfg.validate();
    Rng rng = make_rng(cfg.seed, 1);
    const double half = 5.0 * cfg.class_separation;
    std::uniform_real_distribution<double> coord(-half, half);
    std::normal_distribution<double> noise(0.0, 1.0);

    World world;
    world.means.resize(cfg.num_classes, cfg.dim);
    int retries = 0;
    for (int c = 0; c < cfg.num_classes;) {
        Vector candidate(cfg.dim);
        for (int k = 0; k < cfg.dim; ++k) candidate[k] = coord(rng);
        bool ok = true;
        for (int o = 0; o < c && ok; ++o) {
            ok = (world.means.row(o).transpose() - candidate).norm() >= cfg.class_separation;
        }
        if (ok) {
            world.means.row(c++) = candidate.transpose();
        } else if (++retries > kMaxPlacementRetries) {
            throw ValidationError("generate_world: cannot place " + std::to_string(cfg.num_classes) +
                                  " means at separation " + std::to_string(cfg.class_separation) +
                                  " in dimension " + std::to_string(cfg.dim));
        }
    }

    world.pool.reserve(static_cast<std::size_t>(cfg.num_classes) * cfg.samples_per_class);
    for (int c = 0; c < cfg.num_classes; ++c) {
        for (int i = 0; i < cfg.samples_per_class; ++i) {
            Sample s;
            s.x = world.means.row(c).transpose();
            for (int k = 0; k < cfg.dim; ++k) s.x[k] += noise(rng);
            s.y_true = c;
            world.pool.push_back(std::move(s));
        }
    }
    return world;
}

SplitWorld generate_split_world(const SyntheticWorldConfig& cfg, int test_classes) {
    if (test_classes < 0) throw ValidationError("world: test_classes must be >= 0");
    SyntheticWorldConfig full = cfg;
    full.num_classes = cfg.num_classes + test_classes;
    World world = generate_world(full);

    SplitWorld split;
    split.train.means = world.means.topRows(cfg.num_classes);
    for (auto& s : world.pool) {
        (*s.y_true < cfg.num_classes ? split.train.pool : split.test_pool).push_back(std::move(s));
    }
    return split;
}

MetaTrainingSet sample_tasks(const std::vector<Sample>& pool, const TaskSpec& spec, int num_tasks,
                             bool replacement, std::uint64_t seed) {
    spec.validate();
    if (num_tasks < 0) throw ValidationError("sample_tasks: negative task count");
    const int group = spec.group_size();

    auto by_class = indices_by_class(pool);
    std::vector<int> classes;
    for (auto& [label, idx] : by_class) {
        if (static_cast<int>(idx.size()) >= group) classes.push_back(label);
    }
    if (static_cast<int>(classes.size()) < spec.ways) {
        throw ValidationError("sample_tasks: pool has " + std::to_string(classes.size()) +
                              " classes with >= " + std::to_string(group) + " samples, need " +
                              std::to_string(spec.ways));
    }

    MetaTrainingSet set;
    set.replacement = replacement;
    set.spec = spec;
    set.tasks.reserve(static_cast<std::size_t>(num_tasks));
    Rng rng = make_rng(seed, 2);

    if (replacement) {
        for (int t = 0; t < num_tasks; ++t) {
            std::vector<int> chosen;
            std::sample(classes.begin(), classes.end(), std::back_inserter(chosen), spec.ways, rng);
            std::vector<std::vector<std::size_t>> groups;
            for (int c : chosen) {
                std::vector<std::size_t> picked;
                const auto& idx = by_class[c];
                std::sample(idx.begin(), idx.end(), std::back_inserter(picked), group, rng);
                std::shuffle(picked.begin(), picked.end(), rng);
                groups.push_back(std::move(picked));
            }
            set.tasks.push_back(assemble_task(pool, groups, spec, t, rng));
        }
        return set;
    }

    const long long needed = static_cast<long long>(num_tasks) * spec.ways * group;
    if (static_cast<long long>(pool.size()) < needed) {
        throw ValidationError("sample_tasks: insufficient pool for sampling without replacement (" +
                              std::to_string(pool.size()) + " samples, need " + std::to_string(needed) + ")");
    }
    // Each class's pool is shuffled once and consumed front to back.
    std::vector<std::vector<std::size_t>> order;
    std::vector<int> groups_left;
    std::vector<std::size_t> cursor(classes.size(), 0);
    for (int c : classes) {
        auto idx = by_class[c];
        std::shuffle(idx.begin(), idx.end(), rng);
        groups_left.push_back(static_cast<int>(idx.size()) / group);
        order.push_back(std::move(idx));
    }
    if (!feasible(groups_left, spec.ways, num_tasks)) {
        throw ValidationError("sample_tasks: insufficient pool for " + std::to_string(num_tasks) +
                              " tasks without replacement");
    }

    std::vector<std::size_t> candidates;
    for (int t = 0; t < num_tasks; ++t) {
        candidates.clear();
        for (std::size_t c = 0; c < classes.size(); ++c) {
            if (groups_left[c] > 0) candidates.push_back(c);
        }
        std::vector<std::size_t> chosen;
        constexpr int kAttempts = 64;
        for (int attempt = 0; attempt < kAttempts && chosen.empty(); ++attempt) {
            std::vector<std::size_t> draw;
            std::sample(candidates.begin(), candidates.end(), std::back_inserter(draw), spec.ways, rng);
            for (auto c : draw) --groups_left[c];
            if (feasible(groups_left, spec.ways, num_tasks - t - 1)) chosen = draw;
            for (auto c : draw) ++groups_left[c];
        }
        if (chosen.empty()) {
            // Largest remaining budgets first always preserves feasibility.
            std::stable_sort(candidates.begin(), candidates.end(),
                             [&](std::size_t a, std::size_t b) { return groups_left[a] > groups_left[b]; });
            chosen.assign(candidates.begin(), candidates.begin() + spec.ways);
            std::shuffle(chosen.begin(), chosen.end(), rng);
        }
        std::vector<std::vector<std::size_t>> groups;
        for (auto c : chosen) {
            groups.emplace_back(order[c].begin() + static_cast<std::ptrdiff_t>(cursor[c]),
                                order[c].begin() + static_cast<std::ptrdiff_t>(cursor[c] + group));
            cursor[c] += static_cast<std::size_t>(group);
            --groups_left[c];
        }
        set.tasks.push_back(assemble_task(pool, groups, spec, t, rng));
    }
    return set;
}

TaskSpec infer_spec(const Task& task) {
    std::set<int> labels;
    for (const auto& s : task.support) labels.insert(s.y_local);
    TaskSpec spec;
    spec.ways = static_cast<int>(labels.size());
    if (spec.ways == 0) throw ValidationError("task " + std::to_string(task.id) + ": empty support set");
    spec.shots = static_cast<int>(task.support.size()) / spec.ways;
    spec.queries = static_cast<int>(task.query.size()) / spec.ways;
    return spec;
}

void validate_task(const Task& task, const TaskSpec& spec, const std::string& where) {
    const std::string prefix = (where.empty() ? std::string{} : where + ": ") + "task " + std::to_string(task.id);
    if (task.support.size() != static_cast<std::size_t>(spec.ways * spec.shots))
        throw ValidationError(prefix + ": support size " + std::to_string(task.support.size()) + " != K*n_s");
    if (task.query.size() != static_cast<std::size_t>(spec.ways * spec.queries))
        throw ValidationError(prefix + ": query size " + std::to_string(task.query.size()) + " != K*n_q");

    const Eigen::Index dim = task.support.front().x.size();
    std::vector<int> support_counts(static_cast<std::size_t>(spec.ways), 0);
    std::vector<int> query_counts(static_cast<std::size_t>(spec.ways), 0);
    std::map<int, std::optional<int>> truth_of_local;
    bool any_truth = false;
    bool all_truth = true;

    auto check = [&](const std::vector<Sample>& samples, std::vector<int>& counts) {
        for (const auto& s : samples) {
            if (s.x.size() != dim) throw ValidationError(prefix + ": inconsistent x dimension");
            if (!s.x.allFinite()) throw ValidationError(prefix + ": non-finite x");
            if (s.y_local < 0 || s.y_local >= spec.ways)
                throw ValidationError(prefix + ": y_local " + std::to_string(s.y_local) + " out of range");
            ++counts[static_cast<std::size_t>(s.y_local)];
            any_truth |= s.y_true.has_value();
            all_truth &= s.y_true.has_value();
            auto [it, inserted] = truth_of_local.emplace(s.y_local, s.y_true);
            if (!inserted && it->second != s.y_true)
                throw ValidationError(prefix + ": local class " + std::to_string(s.y_local) +
                                      " has inconsistent y_true");
        }
    };
    check(task.support, support_counts);
    check(task.query, query_counts);

    for (int k = 0; k < spec.ways; ++k) {
        if (support_counts[static_cast<std::size_t>(k)] != spec.shots)
            throw ValidationError(prefix + ": support class " + std::to_string(k) + " has wrong count");
        if (query_counts[static_cast<std::size_t>(k)] != spec.queries)
            throw ValidationError(prefix + ": query class " + std::to_string(k) + " has wrong count");
    }
    if (any_truth && !all_truth) throw ValidationError(prefix + ": y_true present on some samples only");
    if (all_truth) {
        std::set<int> truths;
        for (auto& [local, truth] : truth_of_local) truths.insert(*truth);
        if (static_cast<int>(truths.size()) != spec.ways)
            throw ValidationError(prefix + ": distinct local classes share a y_true");
    }
}

void hide_global(MetaTrainingSet& set) {
    for (auto& t : set.tasks) {
        for (auto& s : t.support) s.y_true.reset();
        for (auto& s : t.query) s.y_true.reset();
    }
}

bool query_sets_disjoint(const MetaTrainingSet& set) {
    std::unordered_set<std::string> seen;
    for (const auto& t : set.tasks) {
        std::unordered_set<std::string> local;
        for (const auto& s : t.query) local.insert(vector_key(s.x));
        for (const auto& k : local) {
            if (!seen.insert(k).second) return false;
        }
    }
    return true;
}

bool tasks_sample_disjoint(const MetaTrainingSet& set) {
    std::unordered_set<std::string> seen;
    for (const auto& t : set.tasks) {
        std::unordered_set<std::string> local;
        for (const auto& s : t.support) local.insert(vector_key(s.x));
        for (const auto& s : t.query) local.insert(vector_key(s.x));
        for (const auto& k : local) {
            if (!seen.insert(k).second) return false;
        }
    }
    return true;
}

void save_tasks(const MetaTrainingSet& set, const std::filesystem::path& path) {
    std::string out;
    json header;
    header["meta"] = {{"format", "mela-tasks"},
                      {"version", kTaskFormatVersion},
                      {"replacement", set.replacement},
                      {"ways", set.spec.ways},
                      {"shots", set.spec.shots},
                      {"queries", set.spec.queries}};
    out += header.dump() + "\n";
    for (const auto& t : set.tasks) {
        json j;
        j["id"] = t.id;
        j["support"] = json::array();
        for (const auto& s : t.support) j["support"].push_back(sample_to_json(s));
        j["query"] = json::array();
        for (const auto& s : t.query) j["query"].push_back(sample_to_json(s));
        out += j.dump() + "\n";
    }
    write_file(path, out);
}

MetaTrainingSet load_tasks(const std::filesystem::path& path, bool hide_global_labels) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open task file " + path.string());

    MetaTrainingSet set;
    bool have_spec = false;
    Eigen::Index dim = -1;
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.filename().string() + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (j.contains("meta")) {
            const auto& m = j["meta"];
            if (m.value("version", 0) != kTaskFormatVersion)
                throw ValidationError(where + ": unsupported task file version");
            set.replacement = m.value("replacement", true);
            set.spec = TaskSpec{m.at("ways").get<int>(), m.at("shots").get<int>(), m.at("queries").get<int>()};
            set.spec.validate();
            have_spec = true;
            continue;
        }
        if (!j.contains("id") || !j["id"].is_number_integer()) throw ValidationError(where + ": record missing id");
        if (!j.contains("support") || !j["support"].is_array() || !j.contains("query") || !j["query"].is_array())
            throw ValidationError(where + ": record missing support/query arrays");

        Task task;
        task.id = j["id"].get<std::int64_t>();
        const std::string twhere = where + " (task " + std::to_string(task.id) + ")";
        for (const auto& s : j["support"]) task.support.push_back(sample_from_json(s, twhere));
        for (const auto& s : j["query"]) task.query.push_back(sample_from_json(s, twhere));
        if (task.support.empty()) throw ValidationError(twhere + ": empty support set");

        for (const auto* part : {&task.support, &task.query}) {
            for (const auto& s : *part) {
                if (dim < 0) dim = s.x.size();
                if (s.x.size() != dim)
                    throw ValidationError(twhere + ": x has dimension " + std::to_string(s.x.size()) +
                                          ", expected " + std::to_string(dim));
            }
        }
        if (!have_spec) {
            set.spec = infer_spec(task);
            set.spec.validate();
            have_spec = true;
        }
        validate_task(task, set.spec, where);
        if (hide_global_labels) {
            for (auto& s : task.support) s.y_true.reset();
            for (auto& s : task.query) s.y_true.reset();
        }
        set.tasks.push_back(std::move(task));
    }
    return set;
}

}  // namespace mela
