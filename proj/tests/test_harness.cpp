#include <doctest.h>

#include "condserv/harness.hpp"

using namespace condserv;
namespace fsys = std::filesystem;

namespace {

fsys::path work_dir(const char* name) {
    fsys::path p = fsys::temp_directory_path() / "condserv_test" / name;
    fsys::remove_all(p);
    fsys::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("record_demos writes loadable bundles with states") {
    SimConfig cfg = standard3_config();
    cfg.seed = 31;
    auto dir = work_dir("record");
    auto dirs = record_demos(cfg, dir);
    CHECK(dirs.size() == 3);

    auto bundles = load_demo_bundles(dir, cfg);
    REQUIRE(bundles.size() == 3);
    for (const DemoBundle& b : bundles) {
        CHECK(b.states.size() == b.demo.frames.size());
        CHECK(b.demo.frames.front().mask.count() > 0);
        int idx = detail::shape_index_for_demo(cfg, b.demo.id);
        REQUIRE(idx >= 0);
        CHECK(b.states.back().objects[static_cast<size_t>(idx)].status ==
              ObjectStatus::Inserted);
    }
    CHECK(fsys::exists(dir / "scenario.json"));
}

TEST_CASE("generate_dataset yields finite rows split 2:1") {
    SimConfig cfg = standard3_config();
    cfg.seed = 31;
    auto dir = work_dir("dataset");
    record_demos(cfg, dir);
    auto bundles = load_demo_bundles(dir, cfg);

    ExperimentConfig exp;
    exp.scenario = cfg;
    exp.master_seed = 9;
    exp.servo.estimator = "oracle";
    exp.threads = 2;
    DatasetSplit split = generate_dataset(exp, bundles, 6);

    CHECK(split.all.size() >= 6);  // at least one selection per episode
    for (const auto& row : split.all.features)
        for (double v : row) CHECK(std::isfinite(v));
    CHECK(split.train.size() + split.test.size() == split.all.size());
    long diff = static_cast<long>(split.train.size()) - 2 * static_cast<long>(split.test.size());
    CHECK(std::abs(diff) <= 2);
}

TEST_CASE("evaluate is fair, deterministic, and partitions outcomes") {
    SimConfig cfg = standard3_config();
    cfg.seed = 31;
    auto dir = work_dir("evaluate");
    record_demos(cfg, dir / "demos");
    auto bundles = load_demo_bundles(dir / "demos", cfg);

    ExperimentConfig exp;
    exp.scenario = cfg;
    exp.master_seed = 4;
    exp.episodes_per_object = 2;  // 6 episodes
    exp.strategies = {SelectionStrategy::Reprojection, SelectionStrategy::UniformRandom};
    exp.servo.estimator = "oracle";
    exp.out_dir = dir / "run1";
    exp.threads = 2;
    exp.record_steps = false;

    ResultTable t1 = evaluate(exp, bundles);
    REQUIRE(t1.rows.size() == 2);
    for (const StrategyResult& row : t1.rows) {
        CHECK(row.episodes == 6);
        CHECK(row.first_rate() >= 0.0);
        CHECK(row.first_rate() <= 1.0);
        // every episode lands in exactly one bucket
        CHECK(row.all_success + row.failures() == row.episodes);
    }

    exp.out_dir = dir / "run2";
    ResultTable t2 = evaluate(exp, bundles);
    CHECK(detail::read_bytes(dir / "run1" / "result_table.json") ==
          detail::read_bytes(dir / "run2" / "result_table.json"));
    CHECK(detail::read_bytes(dir / "run1" / "traces_reprojection.jsonl") ==
          detail::read_bytes(dir / "run2" / "traces_reprojection.jsonl"));
    CHECK(detail::read_bytes(dir / "run1" / "traces_uniform_random.jsonl") ==
          detail::read_bytes(dir / "run2" / "traces_uniform_random.jsonl"));

    // the Mlp strategy requires a model
    exp.strategies = {SelectionStrategy::Mlp};
    CHECK_THROWS(evaluate(exp, bundles));
}

TEST_CASE("result table json round trips losslessly") {
    ResultTable t;
    StrategyResult r;
    r.strategy = "reprojection";
    r.episodes = 300;
    r.first_success = 243;
    r.all_success = 189;
    r.fail_undecided_flow = 4;
    r.fail_wrong_object = 17;
    r.fail_incorrect_flow = 80;
    r.fail_other = 10;
    t.rows.push_back(r);

    json j = t;
    ResultTable back = j.get<ResultTable>();
    json j2 = back;
    CHECK(j.dump() == j2.dump());
    CHECK(back.rows[0].first_success == 243);
    CHECK(back.rows[0].failures() == 111);

    std::string text = result_table_text(t);
    CHECK(text.find("reprojection") != std::string::npos);
}

TEST_CASE("failure taxonomy rules") {
    EpisodeTrace t;
    t.success_all = true;
    CHECK(classify_failure(t) == FailureBucket::None);

    t.success_all = false;
    CHECK(classify_failure(t) == FailureBucket::Other);

    t.any_timeout = true;
    CHECK(classify_failure(t) == FailureBucket::IncorrectFlow);

    t.wrong_grasp = true;
    CHECK(classify_failure(t) == FailureBucket::WrongObject);

    // three consecutive changes of the selected id dominate everything
    t.selected_sequence = {"a", "b", "c", "a"};
    CHECK(classify_failure(t) == FailureBucket::UndecidedFlow);

    t.selected_sequence = {"a", "a", "b", "b", "c"};  // never 3 changes in a row
    CHECK(classify_failure(t) == FailureBucket::WrongObject);
}

TEST_CASE("evaluate_recovery compares both modes on shared seeds") {
    SimConfig cfg = standard3_config();
    cfg.seed = 31;
    auto dir = work_dir("recovery");
    record_demos(cfg, dir / "demos");
    auto bundles = load_demo_bundles(dir / "demos", cfg);

    ExperimentConfig exp;
    exp.scenario = cfg;
    exp.master_seed = 10;
    exp.drop_p = 0.25;
    exp.servo.estimator = "oracle";
    exp.out_dir = dir / "out";
    exp.threads = 2;
    exp.record_steps = false;

    RecoveryResult r = evaluate_recovery(exp, bundles, 8);
    CHECK(r.reselect.episodes == 8);
    CHECK(r.retrack.episodes == 8);
    CHECK(r.drop_p == 0.25);
    CHECK(fsys::exists(dir / "out" / "recovery_table.json"));
    CHECK(fsys::exists(dir / "out" / "recovery_table.txt"));

    // with no drops the two modes produce identical traces
    exp.drop_p = 0.0;
    exp.out_dir = dir / "out0";
    RecoveryResult r0 = evaluate_recovery(exp, bundles, 4);
    CHECK(detail::read_bytes(dir / "out0" / "traces_reselect.jsonl") ==
          detail::read_bytes(dir / "out0" / "traces_retrack.jsonl"));
}

TEST_CASE("parallel_for covers every index once and propagates errors") {
    std::vector<std::atomic<int>> hits(64);
    parallel_for(64, 4, [&](int i) { hits[static_cast<size_t>(i)]++; });
    for (auto& h : hits) CHECK(h.load() == 1);

    CHECK_THROWS_AS(parallel_for(8, 3,
                                 [](int i) {
                                     if (i == 5) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
}
