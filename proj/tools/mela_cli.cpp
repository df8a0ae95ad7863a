// mela: staged command-line front end. Each stage reads the previous
// stage's artifacts from the output directory and writes its own artifact
// plus <stage>.manifest.json.

#include "mela/config.hpp"
#include "mela/errors.hpp"
#include "mela/eval.hpp"
#include "mela/io.hpp"
#include "mela/labeler.hpp"
#include "mela/rng.hpp"
#include "mela/theory.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mela;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool hide_global = false;
    std::optional<int> threads;
    std::vector<std::string> sets;

    std::string tasks;
    std::string test_tasks;
    std::string init_model;
    std::string model;
    std::string clusters;
    std::string labels;

    std::string param = "q";
    std::string values;
    std::string variants = "initial,mela,kmeans,oracle";
};

struct Paths {
    fs::path out;
    fs::path tasks, test_tasks, init_model, model, clusters, labels;
};

RunConfig resolve_config(const Options& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
        auto trim = [](std::string v) {
            v.erase(0, v.find_first_not_of(" \t"));
            v.erase(v.find_last_not_of(" \t") + 1);
            return v;
        };
        apply_setting(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), fs::current_path());
    }
    if (o.seed) cfg.pipeline.apply_seed(*o.seed);
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (o.threads) cfg.threads = *o.threads;
    cfg.validate();
    return cfg;
}

Paths resolve_paths(const Options& o, const RunConfig& cfg) {
    Paths p;
    p.out = cfg.out_dir;
    auto pick = [&](const std::string& flag, const char* name) { return flag.empty() ? p.out / name : fs::path(flag); };
    p.tasks = pick(o.tasks, "tasks.jsonl");
    p.test_tasks = pick(o.test_tasks, "test_tasks.jsonl");
    p.init_model = pick(o.init_model, "embed0.model");
    p.model = pick(o.model, "embed_star.model");
    p.clusters = pick(o.clusters, "clusters.json");
    p.labels = pick(o.labels, "labels.jsonl");
    return p;
}

void require(const fs::path& path, const char* what) {
    if (!fs::exists(path)) throw ValidationError(std::string("missing ") + what + ": " + path.string());
}

class Manifest {
public:
    Manifest(std::string stage, const RunConfig& cfg) : start_(std::chrono::steady_clock::now()) {
        const auto& p = cfg.pipeline;
        j_ = {{"stage", stage},
              {"version", kVersion},
              {"seed", p.seed},
              {"stage_seeds",
               {{"world", p.world.seed},
                {"meta_train", p.meta_train.seed},
                {"pretrain", p.pretrain.seed},
                {"labeler", p.labeler.seed},
                {"eval", p.eval.seed}}},
              {"config", config_to_json(cfg)},
              {"inputs", json::object()},
              {"outputs", json::object()},
              {"global_labels_read", false},
              {"metrics", json::object()}};
        stage_ = std::move(stage);
    }

    void input(const std::string& name, const fs::path& path) {
        j_["inputs"][name] = {{"path", path.generic_string()}, {"sha256", sha256_file(path)}};
    }
    void output(const std::string& name, const fs::path& path) {
        j_["outputs"][name] = {{"path", path.generic_string()}, {"sha256", sha256_file(path)}};
    }
    json& metrics() { return j_["metrics"]; }
    json& at(const std::string& key) { return j_[key]; }

    void write(const fs::path& out_dir) {
        j_["wall_time_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file(out_dir / (stage_ + ".manifest.json"), j_.dump(2) + "\n");
    }

private:
    std::string stage_;
    json j_;
    std::chrono::steady_clock::time_point start_;
};

void gen_tasks(const Options& o, const RunConfig& cfg, const Paths& p) {
    Manifest m("gen-tasks", cfg);
    PipelineData data = build_data(cfg.pipeline);
    if (o.hide_global) hide_global(data.train);
    save_tasks(data.train, p.tasks);
    save_tasks(data.test, p.test_tasks);
    m.output("tasks", p.tasks);
    m.output("test_tasks", p.test_tasks);
    m.metrics() = {{"train_tasks", data.train.tasks.size()},
                   {"test_tasks", data.test.tasks.size()},
                   {"train_query_sets_disjoint", query_sets_disjoint(data.train)},
                   {"global_labels_written", !o.hide_global}};
    m.write(p.out);
    std::cout << "wrote " << p.tasks.string() << " (" << data.train.tasks.size() << " tasks) and "
              << p.test_tasks.string() << " (" << data.test.tasks.size() << " tasks)\n";
}

void train_embed(const Options&, const RunConfig& cfg, const Paths& p) {
    require(p.tasks, "task file");
    Manifest m("train-embed", cfg);
    const MetaTrainingSet tasks = load_tasks(p.tasks, true);
    m.input("tasks", p.tasks);
    const MetaTrainResult res = train_initial_embedding(cfg.pipeline, tasks);
    save_model(res.model, p.init_model);
    m.output("model", p.init_model);
    m.metrics() = {{"loss_trace", res.loss_trace}};
    m.write(p.out);
    std::cout << "wrote " << p.init_model.string();
    if (!res.loss_trace.empty())
        std::cout << " (episodic loss " << res.loss_trace.front() << " -> " << res.loss_trace.back() << ")";
    std::cout << "\n";
}

void infer_labels(const Options& o, const RunConfig& cfg, const Paths& p) {
    require(p.tasks, "task file");
    require(p.init_model, "initial embedding");
    Manifest m("infer-labels", cfg);
    const MetaTrainingSet hidden = load_tasks(p.tasks, true);
    const EmbeddingModel model = load_model(p.init_model);
    m.input("tasks", p.tasks);
    m.input("model", p.init_model);
    const LearnLabelerResult res = learn_labeler(model, hidden, cfg.pipeline.labeler);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    save_cluster_state(res.state, p.clusters);
    save_assignments(res.labels, p.labels);
    m.output("clusters", p.clusters);
    m.output("labels", p.labels);
    m.metrics() = {{"cluster_count", res.state.size()},
                   {"percent_clustered", res.labels.percent_clustered},
                   {"epochs", res.epochs},
                   {"converged", res.converged},
                   {"cluster_trajectory", res.cluster_trajectory},
                   {"warnings", res.warnings}};
    std::cout << "clusters " << res.state.size() << ", tasks clustered " << res.labels.percent_clustered;
    if (!o.hide_global) {
        // Ground truth is read after labelling, for the metric only.
        const MetaTrainingSet full = load_tasks(p.tasks, false);
        const bool has_truth = !full.tasks.empty() && full.tasks.front().support.front().y_true.has_value();
        if (has_truth) {
            const double acc =
                clustering_accuracy(per_sample_clusters(full, res.labels), per_sample_truths(full));
            m.metrics()["clustering_accuracy"] = acc;
            m.at("global_labels_read_for_metrics") = true;
            std::cout << ", clustering accuracy " << acc;
        }
    }
    std::cout << "\n";
    m.write(p.out);
}

void pretrain(const Options&, const RunConfig& cfg, const Paths& p) {
    require(p.tasks, "task file");
    require(p.labels, "label file");
    require(p.clusters, "cluster file");
    Manifest m("pretrain", cfg);
    const MetaTrainingSet hidden = load_tasks(p.tasks, true);
    LabeledTaskSet labels = load_assignments(p.labels);
    const ClusterState state = load_cluster_state(p.clusters);
    if (labels.num_clusters > state.size())
        throw ValidationError("label file names cluster " + std::to_string(labels.num_clusters - 1) +
                              " but the cluster file has " + std::to_string(state.size()));
    labels.num_clusters = state.size();
    m.input("tasks", p.tasks);
    m.input("labels", p.labels);
    m.input("clusters", p.clusters);
    m.at("label_source") = "labels";
    const PretrainResult res = pretrain_on(cfg.pipeline, inferred_flat_dataset(hidden, labels));
    save_model(res.model, p.model);
    const fs::path classifier = p.out / "classifier.json";
    save_classifier(res.classifier, classifier);
    m.output("model", p.model);
    m.output("classifier", classifier);
    m.metrics() = {{"loss_trace", res.loss_trace}, {"num_classes", state.size()}};
    m.write(p.out);
    std::cout << "wrote " << p.model.string() << " (flat loss "
              << (res.loss_trace.empty() ? 0.0 : res.loss_trace.back()) << ")\n";
}

bool has_truth(const MetaTrainingSet& set) {
    return !set.tasks.empty() && set.tasks.front().support.front().y_true.has_value();
}

void eval(const Options& o, const RunConfig& cfg, const Paths& p) {
    require(p.test_tasks, "test task file");
    require(p.model, "pre-trained embedding");
    Manifest m("eval", cfg);
    const MetaTrainingSet test = load_tasks(p.test_tasks, false);
    m.input("test_tasks", p.test_tasks);
    const auto& pc = cfg.pipeline;

    std::vector<MetricsReport> rows;
    auto score = [&](const std::string& variant, const fs::path& model_path) {
        m.input(variant + "_model", model_path);
        const auto r = episodic_accuracy(load_model(model_path), test, pc.eval.learner, pc.logreg, pc.ridge,
                                         cfg.threads);
        MetricsReport row;
        row.variant = variant;
        row.accuracy = r.mean;
        row.ci95 = r.ci95;
        row.metadata = {{"nonconverged_fits", r.nonconverged}, {"test_tasks", test.tasks.size()}};
        return row;
    };
    if (fs::exists(p.init_model)) rows.push_back(score("initial", p.init_model));
    MetricsReport mela = score("mela", p.model);
    if (fs::exists(p.clusters)) mela.cluster_count = load_cluster_state(p.clusters).size();
    if (fs::exists(p.labels)) {
        const LabeledTaskSet labels = load_assignments(p.labels);
        mela.percent_clustered = labels.percent_clustered;
        if (!o.hide_global && fs::exists(p.tasks)) {
            const MetaTrainingSet train = load_tasks(p.tasks, false);
            if (has_truth(train)) {
                mela.clustering_accuracy =
                    clustering_accuracy(per_sample_clusters(train, labels), per_sample_truths(train));
                const auto train_truth = per_sample_truths(train);
                const std::set<int> seen(train_truth.begin(), train_truth.end());
                bool novel = true;
                if (has_truth(test)) {
                    for (int y : per_sample_truths(test)) novel &= !seen.contains(y);
                }
                mela.metadata["test_classes_novel"] = novel;
            }
        }
    }
    rows.push_back(std::move(mela));

    json report = {{"version", kVersion}, {"config", config_to_json(cfg)}, {"rows", json::array()}};
    for (const auto& r : rows) report["rows"].push_back(report_to_json(r));
    const fs::path json_path = p.out / "report.json";
    const fs::path csv_path = p.out / "report.csv";
    write_file(json_path, report.dump(2) + "\n");
    write_file(csv_path, reports_to_csv(rows));
    m.output("report", json_path);
    m.output("report_csv", csv_path);
    m.write(p.out);
    std::cout << reports_to_csv(rows);
}

int verify_bounds(const Options&, const RunConfig& cfg, const Paths& p) {
    Manifest m("verify-bounds", cfg);
    const auto& v = cfg.verify;
    const std::uint64_t master = cfg.pipeline.seed;

    json bounds = json::array();
    int bound_pass = 0;
    double min_gap = std::numeric_limits<double>::infinity();
    for (int i = 0; i < v.bound_instances; ++i) {
        const std::uint64_t seed = derive_seed(master, 200, static_cast<std::uint64_t>(i));
        const BoundInstance inst = random_bound_instance(v.instance, seed);
        const BoundCheck c = verify_upper_bound(inst.classifier, inst.queries());
        bound_pass += c.pass ? 1 : 0;
        min_gap = std::min(min_gap, c.gap);
        bounds.push_back(bound_report_entry(seed, c));
    }

    json lemma = json::array();
    int lemma_pass = 0;
    double max_diff = 0.0;
    for (int i = 0; i < v.lemma_instances; ++i) {
        const std::uint64_t seed = derive_seed(master, 201, static_cast<std::uint64_t>(i));
        const BoundInstance inst = random_bound_instance(v.instance, seed);
        const LemmaCheck c = verify_lemma_equality(inst.classifier, inst.tasks);
        lemma_pass += c.pass ? 1 : 0;
        max_diff = std::max(max_diff, c.diff);
        lemma.push_back({{"instance_seed", seed}, {"lhs", c.lhs}, {"rhs", c.rhs}, {"diff", c.diff}, {"pass", c.pass}});
    }

    const fs::path bounds_path = p.out / "bounds.json";
    const fs::path lemma_path = p.out / "lemma.json";
    write_file(bounds_path, bounds.dump(2) + "\n");
    write_file(lemma_path, lemma.dump(2) + "\n");
    m.output("bounds", bounds_path);
    m.output("lemma", lemma_path);
    m.metrics() = {{"bound_pass", bound_pass},
                   {"bound_instances", v.bound_instances},
                   {"min_gap", min_gap},
                   {"lemma_pass", lemma_pass},
                   {"lemma_instances", v.lemma_instances},
                   {"max_lemma_diff", max_diff}};
    std::cout << "upper bound: " << bound_pass << "/" << v.bound_instances << " pass (min gap " << min_gap
              << ")\nlemma equality: " << lemma_pass << "/" << v.lemma_instances << " pass (max diff " << max_diff
              << ")\n";

    bool ok = bound_pass == v.bound_instances && lemma_pass == v.lemma_instances;
    if (v.tightness) {
        const auto& pc = cfg.pipeline;
        const MetaTrainingSet tasks =
            tightness_tasks(pc.world, pc.task, v.tightness_tasks, derive_seed(master, 202));
        const TightnessReport t = verify_tightness(tasks, fresh_model(pc, 203),
                                                   tightness_train_config(pc.pretrain, v.tightness_epochs),
                                                   v.thresholds);
        json cps = json::array();
        for (const auto& c : t.checkpoints)
            cps.push_back({{"epoch", c.epoch}, {"rhs", c.rhs}, {"lhs", c.lhs}, {"gap", c.gap}, {"train_loss", c.train_loss}});
        json below = json::array();
        for (const auto& [threshold, index] : t.first_below)
            below.push_back({{"threshold", threshold}, {"first_checkpoint", index < 0 ? json(nullptr) : json(index)}});
        const json tj = {{"checkpoints", cps},
                         {"first_below", below},
                         {"gap_nonnegative", t.gap_nonnegative},
                         {"gap_below_rhs", t.gap_below_rhs},
                         {"max_train_loss_mismatch", t.max_train_loss_mismatch}};
        const fs::path tight_path = p.out / "tightness.json";
        write_file(tight_path, tj.dump(2) + "\n");
        m.output("tightness", tight_path);
        m.metrics()["tightness"] = {{"gap_nonnegative", t.gap_nonnegative},
                                    {"gap_below_rhs", t.gap_below_rhs},
                                    {"final_rhs", t.checkpoints.empty() ? 0.0 : t.checkpoints.back().rhs},
                                    {"final_gap", t.checkpoints.empty() ? 0.0 : t.checkpoints.back().gap}};
        ok &= t.gap_nonnegative && t.gap_below_rhs;
        std::cout << "tightness: gap >= 0 " << (t.gap_nonnegative ? "holds" : "FAILS") << ", gap <= rhs "
                  << (t.gap_below_rhs ? "holds" : "FAILS");
        if (!t.checkpoints.empty())
            std::cout << " (final rhs " << t.checkpoints.back().rhs << ", gap " << t.checkpoints.back().gap << ")";
        std::cout << "\n";
        for (const auto& [threshold, index] : t.first_below) {
            if (index < 0) std::cout << "  note: rhs never fell below " << threshold << "\n";
        }
    }
    m.write(p.out);
    return ok ? 0 : 2;
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ValidationError("--values: cannot parse '" + item + "'");
        }
    }
    if (out.empty()) throw ValidationError("--values: empty list");
    return out;
}

void sweep(const Options& o, const RunConfig& cfg, const Paths& p) {
    Manifest m("sweep", cfg);
    const std::vector<double> values = parse_values(o.values);
    const auto rows = run_sweep(cfg.pipeline, o.param, values, cfg.sweep_shots, cfg.threads);
    const fs::path csv = p.out / ("sweep_" + o.param + ".csv");
    write_file(csv, sweep_to_csv(rows));
    m.output("sweep", csv);
    m.at("global_labels_read_for_metrics") = true;
    m.metrics() = {{"param", o.param}, {"values", values}, {"shots", cfg.sweep_shots}};
    m.write(p.out);
    std::cout << sweep_to_csv(rows);
}

void compare(const Options& o, const RunConfig& cfg, const Paths& p) {
    Manifest m("compare", cfg);
    std::vector<Variant> variants;
    std::stringstream ss(o.variants);
    std::string item;
    while (std::getline(ss, item, ',')) variants.push_back(variant_from_string(item));
    if (variants.empty()) throw ValidationError("--variants: empty list");
    const auto rows = compare_pipelines(cfg.pipeline, variants, cfg.threads);
    json report = {{"version", kVersion}, {"config", config_to_json(cfg)}, {"rows", json::array()}};
    for (const auto& r : rows) report["rows"].push_back(report_to_json(r));
    const fs::path json_path = p.out / "compare.json";
    const fs::path csv_path = p.out / "compare.csv";
    write_file(json_path, report.dump(2) + "\n");
    write_file(csv_path, reports_to_csv(rows));
    m.output("compare", json_path);
    m.output("compare_csv", csv_path);
    m.at("global_labels_read_for_metrics") = true;
    m.write(p.out);
    std::cout << reports_to_csv(rows);
}

int run_stage(const std::string& name, const Options& o) {
    const RunConfig cfg = resolve_config(o);
    const Paths p = resolve_paths(o, cfg);
    fs::create_directories(p.out);
    if (name == "gen-tasks") gen_tasks(o, cfg, p);
    else if (name == "train-embed") train_embed(o, cfg, p);
    else if (name == "infer-labels") infer_labels(o, cfg, p);
    else if (name == "pretrain") pretrain(o, cfg, p);
    else if (name == "eval") eval(o, cfg, p);
    else if (name == "verify-bounds") return verify_bounds(o, cfg, p);
    else if (name == "sweep") sweep(o, cfg, p);
    else if (name == "compare") compare(o, cfg, p);
    else if (name == "run") {
        gen_tasks(o, cfg, p);
        train_embed(o, cfg, p);
        infer_labels(o, cfg, p);
        pretrain(o, cfg, p);
        eval(o, cfg, p);
    } else if (name == "show-config") {
        std::cout << config_to_json(cfg).dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Infer global labels from locally labelled few-shot tasks and pre-train on them."};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    app.fallthrough();

    Options o;
    app.add_option("--config", o.config, "Config file of section.key = value lines");
    app.add_option("--seed", o.seed, "Master seed (overrides run.seed)");
    app.add_option("--out", o.out, "Output directory (overrides run.out)");
    app.add_flag("--hide-global", o.hide_global, "Never read ground-truth global labels");
    app.add_option("--threads", o.threads, "Worker threads for evaluation")->check(CLI::PositiveNumber);
    app.add_option("--set", o.sets, "Override a config key: section.key=value (repeatable)");

    auto inputs = [&o](CLI::App* sub) {
        sub->add_option("--tasks", o.tasks, "Meta-training task file (default <out>/tasks.jsonl)");
        sub->add_option("--test-tasks", o.test_tasks, "Test task file (default <out>/test_tasks.jsonl)");
        sub->add_option("--init-model", o.init_model, "Initial embedding (default <out>/embed0.model)");
        sub->add_option("--model", o.model, "Pre-trained embedding (default <out>/embed_star.model)");
        sub->add_option("--clusters", o.clusters, "Cluster state (default <out>/clusters.json)");
        sub->add_option("--labels", o.labels, "Label assignments (default <out>/labels.jsonl)");
    };
    const std::vector<std::pair<std::string, std::string>> stages = {
        {"gen-tasks", "Generate a synthetic world and sample meta-training and test tasks"},
        {"train-embed", "Train the initial embedding episodically through the ridge learner"},
        {"infer-labels", "Cluster class groups into inferred global labels"},
        {"pretrain", "Pre-train embedding and classifier on the inferred labels"},
        {"eval", "Episodic accuracy on novel-class test tasks; writes report.json/csv"},
        {"verify-bounds", "Check the flat-loss upper bound, the support/query equality and tightness"},
        {"sweep", "Run the pipeline over a grid of q or class separation values"},
        {"compare", "Compare initial, MeLa, K-means and oracle-label pipelines"},
        {"run", "gen-tasks, train-embed, infer-labels, pretrain and eval in sequence"},
        {"show-config", "Print the resolved configuration"},
    };
    for (const auto& [name, help] : stages) {
        CLI::App* sub = app.add_subcommand(name, help);
        inputs(sub);
        if (name == "sweep") {
            sub->add_option("--param", o.param, "q or separation")->check(CLI::IsMember({"q", "separation"}));
            sub->add_option("--values", o.values, "Comma-separated values")->required();
        }
        if (name == "compare") sub->add_option("--variants", o.variants, "Comma-separated variants");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        return run_stage(name, o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "pipeline contract violation: " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed input: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
