#include "mela/errors.hpp"
#include "mela/eval.hpp"
#include "mela/rng.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <random>
#include <sstream>

using namespace mela;

namespace {

std::vector<Sample> one_hot_pool(int classes, int per_class) {
    std::vector<Sample> pool;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) pool.push_back({Vector::Unit(classes, c), 0, c});
    return pool;
}

std::vector<Sample> noise_pool(int classes, int per_class, int dim, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Sample> pool;
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            Vector x(dim);
            for (int k = 0; k < dim; ++k) x[k] = g(rng);
            pool.push_back({x, 0, c});
        }
    }
    return pool;
}

MetaTrainingSet world_tasks(int num_tasks, std::uint64_t seed, double separation = 3.0) {
    SyntheticWorldConfig cfg;
    cfg.num_classes = 10;
    cfg.dim = 6;
    cfg.class_separation = separation;
    cfg.samples_per_class = 80;
    cfg.seed = seed;
    return sample_tasks(generate_world(cfg).pool, {5, 5, 15}, num_tasks, true, seed + 1);
}

PipelineConfig small_pipeline() {
    PipelineConfig cfg;
    cfg.world.num_classes = 10;
    cfg.world.dim = 8;
    cfg.world.samples_per_class = 200;
    cfg.test_classes = 5;
    cfg.train_tasks = 120;
    cfg.embed_dim = 8;
    cfg.meta_train.epochs = 2;
    cfg.pretrain.epochs = 3;
    cfg.labeler.initial_clusters = 30;
    cfg.eval.test_tasks = 20;
    cfg.apply_seed(3);
    return cfg;
}

}  // namespace

TEST_CASE("clustering accuracy by majority mapping") {
    CHECK(clustering_accuracy(std::vector<int>{0, 0, 0, 1, 1}, std::vector<int>{1, 1, 2, 2, 2}) ==
          doctest::Approx(0.8));
    CHECK(clustering_accuracy(std::vector<int>{4, 4, 7, 7}, std::vector<int>{0, 0, 1, 1}) == 1.0);
    CHECK(clustering_accuracy(std::vector<int>{0, 0, 0, 0}, std::vector<int>{0, 1, 0, 1}) == 0.5);
    CHECK_THROWS_AS(clustering_accuracy(std::vector<int>{}, std::vector<int>{}), ValidationError);
    CHECK_THROWS_AS(clustering_accuracy(std::vector<int>{0}, std::vector<int>{0, 1}), ValidationError);
}

TEST_CASE("clustering accuracy matches the count-table oracle and ignores id permutations") {
    Rng rng = make_rng(1);
    std::uniform_int_distribution<int> cl(0, 9), tr(0, 6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> a(200), t(200);
        for (auto& v : a) v = cl(rng);
        for (auto& v : t) v = tr(rng);
        const double acc = clustering_accuracy(a, t);
        CHECK(acc == doctest::Approx(oracle::clustering_accuracy(a, t)).epsilon(1e-15));

        std::vector<int> pa(10), pt(7);
        std::iota(pa.begin(), pa.end(), 100);
        std::iota(pt.begin(), pt.end(), 50);
        std::shuffle(pa.begin(), pa.end(), rng);
        std::shuffle(pt.begin(), pt.end(), rng);
        std::vector<int> a2, t2;
        for (int v : a) a2.push_back(pa[static_cast<std::size_t>(v)]);
        for (int v : t) t2.push_back(pt[static_cast<std::size_t>(v)]);
        CHECK(clustering_accuracy(a2, t2) == doctest::Approx(acc).epsilon(1e-15));
    }
}

TEST_CASE("one-hot class embeddings are classified perfectly") {
    const MetaTrainingSet tasks = sample_tasks(one_hot_pool(8, 40), {5, 5, 15}, 20, true, 2);
    for (BaseLearner learner : {BaseLearner::LogReg, BaseLearner::Ridge, BaseLearner::NearestCentroid}) {
        const EpisodicResult r = episodic_accuracy(EmbeddingModel::identity(8), tasks, learner, {}, {});
        CHECK(r.mean == 1.0);
        CHECK(r.ci95 == 0.0);
        CHECK(r.per_task.size() == 20);
    }
}

TEST_CASE("class-independent inputs score at chance") {
    const MetaTrainingSet tasks = sample_tasks(noise_pool(10, 200, 6, 3), {5, 5, 15}, 300, true, 4);
    const EpisodicResult r =
        episodic_accuracy(EmbeddingModel::identity(6), tasks, BaseLearner::NearestCentroid, {}, {});
    CHECK(std::abs(r.mean - 0.2) <= std::max(0.03, 2.0 * r.ci95));
}

TEST_CASE("episodic accuracy does not depend on the thread count") {
    const MetaTrainingSet tasks = world_tasks(40, 5, 2.0);
    const auto model = EmbeddingModel::linear(6, 4, 6);
    const EpisodicResult one = episodic_accuracy(model, tasks, BaseLearner::LogReg, {}, {}, 1);
    const EpisodicResult many = episodic_accuracy(model, tasks, BaseLearner::LogReg, {}, {}, 3);
    CHECK(one.per_task == many.per_task);
    CHECK(one.mean == many.mean);
    CHECK(one.ci95 == many.ci95);
}

TEST_CASE("nearest-centroid accuracy is invariant to rotations of the embedding") {
    const MetaTrainingSet tasks = sample_tasks(noise_pool(10, 100, 6, 7), {5, 5, 15}, 60, true, 8);
    const EmbeddingModel rotation = EmbeddingModel::linear(6, 6, 8);
    const EpisodicResult base =
        episodic_accuracy(EmbeddingModel::identity(6), tasks, BaseLearner::NearestCentroid, {}, {});
    const EpisodicResult rotated = episodic_accuracy(rotation, tasks, BaseLearner::NearestCentroid, {}, {});
    CHECK(base.mean < 1.0);
    CHECK(rotated.per_task == base.per_task);
}

TEST_CASE("ridge and logistic heads run on the same embedded tasks") {
    const MetaTrainingSet tasks = world_tasks(30, 9, 2.0);
    const auto model = EmbeddingModel::linear(6, 6, 10);
    const EpisodicResult lr = episodic_accuracy(model, tasks, BaseLearner::LogReg, {}, {});
    const EpisodicResult rr = episodic_accuracy(model, tasks, BaseLearner::Ridge, {}, {});
    CHECK(lr.per_task.size() == rr.per_task.size());
    for (double a : lr.per_task) CHECK((a >= 0.0 && a <= 1.0));
    for (double a : rr.per_task) CHECK((a >= 0.0 && a <= 1.0));
}

TEST_CASE("confidence half-width follows the normal approximation") {
    const std::vector<double> v{0.2, 0.4, 0.6, 0.8};
    const double sd = std::sqrt((0.09 + 0.01 + 0.01 + 0.09) / 3.0);
    CHECK(ci95_half_width(v) == doctest::Approx(1.96 * sd / 2.0).epsilon(1e-14));
    CHECK(ci95_half_width(std::vector<double>{0.5}) == 0.0);
}

TEST_CASE("quadrupling the task count roughly halves the interval") {
    const auto pool = noise_pool(10, 400, 4, 11);
    double ratio_sum = 0.0;
    for (std::uint64_t rep = 0; rep < 5; ++rep) {
        const auto small = sample_tasks(pool, {5, 1, 3}, 100, true, 20 + rep);
        const auto large = sample_tasks(pool, {5, 1, 3}, 400, true, 40 + rep);
        const auto model = EmbeddingModel::identity(4);
        const double a = episodic_accuracy(model, small, BaseLearner::NearestCentroid, {}, {}).ci95;
        const double b = episodic_accuracy(model, large, BaseLearner::NearestCentroid, {}, {}).ci95;
        ratio_sum += a / b;
    }
    CHECK(ratio_sum / 5.0 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("variant names round-trip") {
    for (Variant v : {Variant::Initial, Variant::Mela, Variant::KMeans, Variant::Oracle})
        CHECK(variant_from_string(to_string(v)) == v);
    CHECK_THROWS_AS(variant_from_string("nope"), ValidationError);
}

TEST_CASE("a single-variant comparison yields one complete row") {
    const std::vector<Variant> variants{Variant::Initial};
    const auto rows = compare_pipelines(small_pipeline(), variants);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].variant == "initial");
    CHECK(rows[0].error.empty());
    CHECK((rows[0].accuracy > 0.2 && rows[0].accuracy <= 1.0));
    CHECK(rows[0].metadata.at("seed") == 3);
}

TEST_CASE("comparison rows carry clustering metrics and serialise with fixed columns") {
    const std::vector<Variant> variants{Variant::Mela, Variant::KMeans};
    const auto rows = compare_pipelines(small_pipeline(), variants);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        INFO(r.variant << ": " << r.error);
        CHECK(r.error.empty());
        REQUIRE(r.clustering_accuracy.has_value());
        CHECK((*r.clustering_accuracy >= 0.0 && *r.clustering_accuracy <= 1.0));
        REQUIRE(r.cluster_count.has_value());
    }
    CHECK(rows[0].percent_clustered.has_value());

    const std::string csv = reports_to_csv(rows);
    std::istringstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "variant,accuracy,ci95,clustering_accuracy,percent_clustered,cluster_count,error");
    int lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == 2);

    const json j = report_to_json(rows[1]);
    for (const char* key :
         {"variant", "accuracy", "ci95", "clustering_accuracy", "percent_clustered", "cluster_count", "error",
          "metadata"})
        CHECK(j.contains(key));
    CHECK(j.at("error").is_null());
}

TEST_CASE("a failing stage is recorded in its row") {
    PipelineConfig cfg = small_pipeline();
    cfg.labeler.prune.q = 0.0;
    const std::vector<Variant> variants{Variant::Mela, Variant::Oracle};
    const auto rows = compare_pipelines(cfg, variants);
    REQUIRE(rows.size() == 2);
    CHECK_FALSE(rows[0].error.empty());
    CHECK(rows[1].error.empty());
}

TEST_CASE("q sweep writes one row per value") {
    PipelineConfig cfg = small_pipeline();
    const std::vector<double> qs{0.0, 6.5};
    const auto rows = run_sweep(cfg, "q", qs, 1);
    REQUIRE(rows.size() == 2);
    CHECK_FALSE(rows[0].error.empty());
    REQUIRE(rows[0].cluster_count.has_value());
    CHECK(*rows[0].cluster_count < 5);
    CHECK(rows[1].error.empty());
    CHECK(rows[1].accuracy.has_value());

    const std::string csv = sweep_to_csv(rows);
    CHECK(csv.rfind("q,cluster_count,clustering_accuracy,accuracy,ci95,percent_clustered,error\n", 0) == 0);
    CHECK_THROWS_AS(run_sweep(cfg, "lambda", qs, 1), ValidationError);
}
