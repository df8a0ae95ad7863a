#include "mela/config.hpp"

#include "mela/errors.hpp"
#include "mela/io.hpp"

#include <charconv>
#include <functional>
#include <sstream>

namespace mela {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end)
        throw ValidationError("config: " + key + ": expected a number, got '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ValidationError("config: " + key + ": expected true or false, got '" + value + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
    std::vector<T> out;
    if (trim(value).empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
    return out;
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&, const std::filesystem::path&)> set;
    std::function<json(const RunConfig&)> get;
};

#define MELA_INT(name, expr)                                                                        \
    Field {                                                                                         \
        name, [](RunConfig& c, const std::string& v, const auto&) { c.expr = parse_number<int>(name, v); }, \
            [](const RunConfig& c) { return json(c.expr); }                                        \
    }
#define MELA_DOUBLE(name, expr)                                                                        \
    Field {                                                                                            \
        name, [](RunConfig& c, const std::string& v, const auto&) { c.expr = parse_number<double>(name, v); }, \
            [](const RunConfig& c) { return json(c.expr); }                                           \
    }
#define MELA_BOOL(name, expr)                                                                   \
    Field {                                                                                     \
        name, [](RunConfig& c, const std::string& v, const auto&) { c.expr = parse_bool(name, v); }, \
            [](const RunConfig& c) { return json(c.expr); }                                    \
    }

std::vector<Field> train_fields(const std::string& section, TrainConfig PipelineConfig::*member) {
    auto t = [member](RunConfig& c) -> TrainConfig& { return c.pipeline.*member; };
    auto ct = [member](const RunConfig& c) -> const TrainConfig& { return c.pipeline.*member; };
    const std::string p = section + ".";
    return {
        {p + "learning_rate", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).learning_rate = parse_number<double>(p + "learning_rate", v); },
         [ct](const RunConfig& c) { return json(ct(c).learning_rate); }},
        {p + "decay_factor", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).decay_factor = parse_number<double>(p + "decay_factor", v); },
         [ct](const RunConfig& c) { return json(ct(c).decay_factor); }},
        {p + "decay_epochs", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).decay_epochs = parse_list<int>(p + "decay_epochs", v); },
         [ct](const RunConfig& c) { return json(ct(c).decay_epochs); }},
        {p + "epochs", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).epochs = parse_number<int>(p + "epochs", v); },
         [ct](const RunConfig& c) { return json(ct(c).epochs); }},
        {p + "batch_size", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).batch_size = parse_number<int>(p + "batch_size", v); },
         [ct](const RunConfig& c) { return json(ct(c).batch_size); }},
        {p + "momentum", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).momentum = parse_number<double>(p + "momentum", v); },
         [ct](const RunConfig& c) { return json(ct(c).momentum); }},
        {p + "weight_decay", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).weight_decay = parse_number<double>(p + "weight_decay", v); },
         [ct](const RunConfig& c) { return json(ct(c).weight_decay); }},
        {p + "clip_norm", [t, p](RunConfig& c, const std::string& v, const auto&) { t(c).clip_norm = parse_number<double>(p + "clip_norm", v); },
         [ct](const RunConfig& c) { return json(ct(c).clip_norm); }},
    };
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f = {
            MELA_INT("world.classes", pipeline.world.num_classes),
            MELA_INT("world.dim", pipeline.world.dim),
            MELA_DOUBLE("world.separation", pipeline.world.class_separation),
            MELA_INT("world.samples_per_class", pipeline.world.samples_per_class),
            MELA_INT("world.test_classes", pipeline.test_classes),
            MELA_INT("task.ways", pipeline.task.ways),
            MELA_INT("task.shots", pipeline.task.shots),
            MELA_INT("task.queries", pipeline.task.queries),
            MELA_INT("task.count", pipeline.train_tasks),
            MELA_BOOL("task.replacement", pipeline.replacement),
            Field{"embed.arch",
                  [](RunConfig& c, const std::string& v, const auto&) { c.pipeline.arch = arch_from_string(v); },
                  [](const RunConfig& c) { return json(to_string(c.pipeline.arch)); }},
            MELA_INT("embed.m", pipeline.embed_dim),
            MELA_INT("embed.hidden", pipeline.hidden),
            MELA_DOUBLE("ridge.lambda1", pipeline.ridge.lambda1),
            MELA_BOOL("ridge.bias", pipeline.ridge.bias),
            MELA_DOUBLE("logreg.lambda2", pipeline.logreg.lambda2),
            MELA_INT("logreg.max_iter", pipeline.logreg.max_iter),
            MELA_DOUBLE("logreg.tol", pipeline.logreg.tol),
            MELA_BOOL("logreg.bias", pipeline.logreg.bias),
        };
        for (auto& x : train_fields("train", &PipelineConfig::meta_train)) f.push_back(std::move(x));
        for (auto& x : train_fields("pretrain", &PipelineConfig::pretrain)) f.push_back(std::move(x));
        const std::vector<Field> rest = {
            MELA_INT("labeler.initial_clusters", pipeline.labeler.initial_clusters),
            MELA_INT("labeler.max_epochs", pipeline.labeler.max_epochs),
            MELA_BOOL("labeler.reset_counts", pipeline.labeler.reset_counts),
            MELA_DOUBLE("prune.q", pipeline.labeler.prune.q),
            Field{"prune.basis",
                  [](RunConfig& c, const std::string& v, const auto&) {
                      c.pipeline.labeler.prune.basis = prune_basis_from_string(v);
                  },
                  [](const RunConfig& c) { return json(to_string(c.pipeline.labeler.prune.basis)); }},
            MELA_INT("kmeans.k", pipeline.kmeans_k),
            MELA_INT("eval.test_tasks", pipeline.eval.test_tasks),
            MELA_INT("eval.ways", pipeline.eval.ways),
            MELA_INT("eval.shots", pipeline.eval.shots),
            MELA_INT("eval.queries", pipeline.eval.queries),
            Field{"eval.learner",
                  [](RunConfig& c, const std::string& v, const auto&) {
                      c.pipeline.eval.learner = base_learner_from_string(v);
                  },
                  [](const RunConfig& c) { return json(to_string(c.pipeline.eval.learner)); }},
            MELA_INT("verify.bound_instances", verify.bound_instances),
            MELA_INT("verify.lemma_instances", verify.lemma_instances),
            MELA_INT("verify.classes", verify.instance.num_classes),
            MELA_INT("verify.dim", verify.instance.dim),
            MELA_INT("verify.tasks", verify.instance.tasks),
            MELA_INT("verify.ways", verify.instance.ways),
            MELA_INT("verify.shots", verify.instance.shots),
            MELA_INT("verify.queries", verify.instance.queries),
            MELA_BOOL("verify.tightness", verify.tightness),
            MELA_INT("verify.tightness_tasks", verify.tightness_tasks),
            MELA_INT("verify.tightness_epochs", verify.tightness_epochs),
            Field{"verify.thresholds",
                  [](RunConfig& c, const std::string& v, const auto&) {
                      c.verify.thresholds = parse_list<double>("verify.thresholds", v);
                  },
                  [](const RunConfig& c) { return json(c.verify.thresholds); }},
            Field{"run.seed",
                  [](RunConfig& c, const std::string& v, const auto&) {
                      c.pipeline.apply_seed(parse_number<std::uint64_t>("run.seed", v));
                  },
                  [](const RunConfig& c) { return json(c.pipeline.seed); }},
            Field{"run.out",
                  [](RunConfig& c, const std::string& v, const std::filesystem::path& base) {
                      const std::filesystem::path p(v);
                      c.out_dir = p.is_absolute() || base.empty() ? p : base / p;
                  },
                  [](const RunConfig& c) { return json(c.out_dir.generic_string()); }},
            MELA_INT("run.threads", threads),
            MELA_INT("run.sweep_shots", sweep_shots),
        };
        for (const auto& x : rest) f.push_back(x);
        return f;
    }();
    return table;
}

#undef MELA_INT
#undef MELA_DOUBLE
#undef MELA_BOOL

}  // namespace

void RunConfig::validate() const {
    pipeline.validate();
    if (threads < 1) throw ValidationError("run: threads must be >= 1");
    if (sweep_shots < 1) throw ValidationError("run: sweep_shots must be >= 1");
    if (verify.bound_instances < 1 || verify.lemma_instances < 1)
        throw ValidationError("verify: instance counts must be >= 1");
    if (verify.instance.ways < 2 || verify.instance.ways > verify.instance.num_classes)
        throw ValidationError("verify: need 2 <= ways <= classes");
    if (verify.instance.tasks < 1 || verify.instance.dim < 1 || verify.instance.shots < 1 ||
        verify.instance.queries < 1)
        throw ValidationError("verify: counts must be >= 1");
    if (verify.tightness_tasks < 1) throw ValidationError("verify: tightness_tasks must be >= 1");
    if (verify.tightness_epochs < 1) throw ValidationError("verify: tightness_epochs must be >= 1");
    for (double t : verify.thresholds) {
        if (!(t > 0.0)) throw ValidationError("verify: thresholds must be > 0");
    }
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : fields()) k.push_back(f.key);
        return k;
    }();
    return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value,
                   const std::filesystem::path& base) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(cfg, value, base);
            return;
        }
    }
    throw ValidationError("config: unknown key '" + key + "'");
}

RunConfig parse_config(const std::string& text, const std::filesystem::path& base, const std::string& origin) {
    RunConfig cfg;
    cfg.out_dir = base.empty() ? std::filesystem::path("out") : base / "out";
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw ValidationError(where + "expected 'section.key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.find('.') == std::string::npos) throw ValidationError(where + "key '" + key + "' has no section");
        try {
            apply_setting(cfg, key, value, base);
        } catch (const ValidationError& e) {
            throw ValidationError(where + e.what());
        }
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    const auto abs = std::filesystem::absolute(path);
    return parse_config(read_file(abs), abs.parent_path(), path.string());
}

json config_to_json(const RunConfig& cfg) {
    json out = json::object();
    for (const auto& f : fields()) {
        // Output location and worker count never change results.
        if (f.key == "run.out" || f.key == "run.threads") continue;
        out[f.key] = f.get(cfg);
    }
    return out;
}

}  // namespace mela
