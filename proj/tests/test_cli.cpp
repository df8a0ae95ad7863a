#include "mela/io.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using mela::json;

namespace {

const char* env(const char* name) {
    const char* v = std::getenv(name);
    REQUIRE_MESSAGE(v != nullptr, name << " must be set");
    return v;
}

// Small enough to run every stage in a few seconds.
const std::string kFast =
    " --set world.samples_per_class=200 --set task.count=120 --set train.epochs=2"
    " --set pretrain.epochs=3 --set labeler.initial_clusters=30 --set eval.test_tasks=20"
    " --set verify.bound_instances=50 --set verify.lemma_instances=10 --set verify.tightness_tasks=4"
    " --set verify.tightness_epochs=5";

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mela_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_mela(const std::string& args, const fs::path& out, const std::string& extra = kFast) {
    const fs::path log = out / "log.txt";
    const std::string cmd = std::string(env("MELA_BIN")) + " --config " + env("MELA_CONFIG") + " --out " +
                            out.string() + extra + " " + args + " >>" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json manifest(const fs::path& out, const std::string& stage) {
    return json::parse(slurp(out / (stage + ".manifest.json")));
}

}  // namespace

TEST_CASE("stage-by-stage run writes artifacts and chained manifests") {
    const fs::path out = fresh_dir("stages");
    for (const char* stage : {"gen-tasks", "train-embed", "infer-labels", "pretrain", "eval"}) {
        INFO(stage << "\n" << slurp(out / "log.txt"));
        REQUIRE(run_mela(stage, out) == 0);
        CHECK(fs::exists(out / (std::string(stage) + ".manifest.json")));
    }
    for (const char* f : {"tasks.jsonl", "test_tasks.jsonl", "embed0.model", "clusters.json", "labels.jsonl",
                          "embed_star.model", "classifier.json", "report.json", "report.csv"})
        CHECK_MESSAGE(fs::exists(out / f), f);

    const json gen = manifest(out, "gen-tasks");
    const json train = manifest(out, "train-embed");
    const json infer = manifest(out, "infer-labels");
    const json pre = manifest(out, "pretrain");
    // Each stage records the digest of what the previous one wrote.
    CHECK(train.at("inputs").at("tasks").at("sha256") == gen.at("outputs").at("tasks").at("sha256"));
    CHECK(infer.at("inputs").at("model").at("sha256") == train.at("outputs").at("model").at("sha256"));
    CHECK(pre.at("inputs").at("labels").at("sha256") == infer.at("outputs").at("labels").at("sha256"));
    CHECK(gen.at("outputs").at("tasks").at("sha256").get<std::string>().size() == 64);

    for (const json* m : {&train, &infer, &pre}) {
        CHECK(m->at("global_labels_read") == false);
        CHECK(m->at("seed") == 0);
        CHECK(m->at("version") == "0.1.0");
        CHECK(m->contains("wall_time_seconds"));
        CHECK(m->at("config").at("world.classes") == 20);
    }
    CHECK(pre.at("label_source") == "labels");

    const json report = json::parse(slurp(out / "report.json"));
    REQUIRE(report.at("rows").is_array());
    CHECK(report.at("rows").size() == 2);  // initial and mela
    std::ifstream csv(out / "report.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "variant,accuracy,ci95,clustering_accuracy,percent_clustered,cluster_count,error");
}

TEST_CASE("hiding global labels does not change the inferred labels") {
    const fs::path out = fresh_dir("hide");
    REQUIRE(run_mela("gen-tasks", out) == 0);
    REQUIRE(run_mela("train-embed", out) == 0);
    REQUIRE(run_mela("infer-labels", out) == 0);
    const std::string with_truth = slurp(out / "labels.jsonl");
    CHECK(manifest(out, "infer-labels").value("global_labels_read_for_metrics", false));
    REQUIRE(run_mela("--hide-global infer-labels", out) == 0);
    CHECK(slurp(out / "labels.jsonl") == with_truth);
    CHECK_FALSE(manifest(out, "infer-labels").value("global_labels_read_for_metrics", false));
}

TEST_CASE("two identical end-to-end runs give byte-identical reports") {
    const fs::path a = fresh_dir("det_a");
    const fs::path b = fresh_dir("det_b");
    REQUIRE(run_mela("run", a) == 0);
    REQUIRE(run_mela("--threads 2 run", b) == 0);
    const std::string ra = slurp(a / "report.json");
    CHECK_FALSE(ra.empty());
    CHECK(ra == slurp(b / "report.json"));
    CHECK(slurp(a / "labels.jsonl") == slurp(b / "labels.jsonl"));
}

TEST_CASE("a different seed changes the report") {
    const fs::path a = fresh_dir("seed_a");
    const fs::path b = fresh_dir("seed_b");
    REQUIRE(run_mela("run", a) == 0);
    REQUIRE(run_mela("--seed 1 run", b) == 0);
    CHECK(slurp(a / "tasks.jsonl") != slurp(b / "tasks.jsonl"));
}

TEST_CASE("exit codes separate bad input from contract failures") {
    const fs::path out = fresh_dir("codes");
    CHECK(run_mela("--set world.colour=red show-config", out) == 1);
    CHECK(run_mela("--set world.classes=many show-config", out) == 1);
    CHECK(run_mela("train-embed", out) == 1);  // no task file yet
    CHECK(run_mela("no-such-command", out) == 1);

    REQUIRE(run_mela("gen-tasks", out) == 0);
    REQUIRE(run_mela("train-embed", out) == 0);
    CHECK(run_mela("--set prune.q=0 infer-labels", out) == 3);

    std::ofstream(out / "broken.jsonl") << "{\"id\":0,\"support\":[{\"x\":[1]}]}\n";
    CHECK(run_mela("train-embed --tasks " + (out / "broken.jsonl").string(), out) == 1);
    const std::string log = slurp(out / "log.txt");
    CHECK(log.find("broken.jsonl:1") != std::string::npos);
}

TEST_CASE("verify-bounds passes and reports every instance") {
    const fs::path out = fresh_dir("verify");
    REQUIRE(run_mela("verify-bounds", out) == 0);
    const json bounds = json::parse(slurp(out / "bounds.json"));
    const json& entries = bounds.is_array() ? bounds : bounds.at("instances");
    CHECK(entries.size() == 50);
    for (const auto& e : entries) CHECK(e.at("pass") == true);
    CHECK(fs::exists(out / "lemma.json"));
    CHECK(fs::exists(out / "tightness.json"));
}

TEST_CASE("sweep writes one csv row per value") {
    const fs::path out = fresh_dir("sweep");
    REQUIRE(run_mela("sweep --param q --values 3,4,5,6.5", out) == 0);
    std::ifstream csv(out / "sweep_q.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line.rfind("q,cluster_count,", 0) == 0);
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);
}

TEST_CASE("show-config prints the resolved keys") {
    const fs::path out = fresh_dir("show");
    REQUIRE(run_mela("--set prune.q=4.5 show-config", out) == 0);
    const std::string log = slurp(out / "log.txt");
    CHECK(log.find("prune.q") != std::string::npos);
    CHECK(log.find("4.5") != std::string::npos);
}
