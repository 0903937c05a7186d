#pragma once

// Batch experiment machinery: demo recording, dataset generation, strategy
// evaluation and the gripper-drop recovery comparison. Episodes within a run
// execute concurrently; every per-episode RNG stream derives from the master
// seed and the episode index, so results do not depend on scheduling and
// reruns are byte-identical.

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>

#include "condserv/servo.hpp"

namespace condserv {

struct ExperimentConfig {
    SimConfig scenario;
    std::vector<SelectionStrategy> strategies{SelectionStrategy::Reprojection};
    int episodes_per_object = 100;
    std::uint64_t master_seed = 1;
    double drop_p = 0.0;
    RecoveryMode recovery = RecoveryMode::Reselect;
    fs::path out_dir;
    ServoConfig servo;
    std::optional<MlpModel> model;
    int threads = 0;  // 0 = auto
    bool record_steps = true;

    int episodes() const {
        return episodes_per_object * static_cast<int>(scenario.shapes.size());
    }

    void validate() const {
        if (episodes_per_object < 1)
            throw std::invalid_argument("ExperimentConfig: episodes >= 1");
        scenario.validate();
    }
};

// ---------------------------------------------------------------------------
// Parallel episode execution

inline int worker_count(int requested, int jobs) {
    int n = requested > 0 ? requested
                          : static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CONDSERV_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0) n = std::min(n > 0 ? n : cap, cap);
    }
    return std::max(1, std::min(n, jobs));
}

inline void parallel_for(int jobs, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, std::min(threads, jobs));
    if (threads <= 1) {
        for (int i = 0; i < jobs; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            while (true) {
                int i = next.fetch_add(1);
                if (i >= jobs) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

inline std::uint64_t episode_seed(std::uint64_t master, int episode_index) {
    return derive_seed(master, static_cast<std::uint64_t>(episode_index), 0x455049ULL);
}

// ---------------------------------------------------------------------------
// Demo recording and loading

// One demonstration per shape kind, each from its own seeded arrangement.
// Alongside the demo format files each directory gets a states.json with the
// recording-time simulator states so the oracle flow estimator can replay
// exact correspondences.
inline std::vector<fs::path> record_demos(const SimConfig& config, const fs::path& out_dir) {
    config.validate();
    fs::create_directories(out_dir);
    std::vector<fs::path> dirs;
    for (size_t i = 0; i < config.shapes.size(); ++i) {
        std::uint64_t scene_seed = derive_seed(config.seed, i, 0x44454D4FULL);
        RecordedDemo rec;
        try {
            rec = record_demonstration(config, scene_seed, static_cast<int>(i));
        } catch (const std::exception& e) {
            throw PolicyError(std::string("recording failed for shape ") +
                              to_string(config.shapes[i].kind) + ": " + e.what());
        }
        fs::path dir = out_dir / rec.demo.id;
        save_demo(rec.demo, dir);
        json states = json::array();
        for (const SimState& s : rec.states) states.push_back(s);
        detail::write_bytes(dir / "states.json",
                            json{{"version", "1"}, {"states", states}}.dump() + "\n");
        dirs.push_back(dir);
    }
    {
        json j = config;
        detail::write_bytes(out_dir / "scenario.json", j.dump(2) + "\n");
    }
    return dirs;
}

inline std::vector<DemoBundle> load_demo_bundles(const fs::path& demos_dir,
                                                 const SimConfig& config) {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(demos_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "meta.json"))
            dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw std::runtime_error("no demo directories under " + demos_dir.string());

    std::vector<DemoBundle> bundles;
    for (const fs::path& dir : dirs) {
        DemoBundle b;
        b.demo = load_demo(dir);
        b.config = &config;
        fs::path states_path = dir / "states.json";
        if (fs::exists(states_path)) {
            json j = json::parse(detail::read_bytes(states_path));
            for (const auto& sj : j.at("states")) b.states.push_back(sj.get<SimState>());
            if (b.states.size() != b.demo.frames.size())
                throw std::runtime_error("states.json frame count mismatch in " + dir.string());
        }
        bundles.push_back(std::move(b));
    }
    DemoSet::make([&] {
        std::vector<Demonstration> ds;
        for (const auto& b : bundles) ds.push_back(b.demo);
        return ds;
    }());  // id uniqueness / non-emptiness checks
    return bundles;
}

// ---------------------------------------------------------------------------
// Failure taxonomy

enum class FailureBucket { None, UndecidedFlow, WrongObject, IncorrectFlow, Other };

// Applied to episodes that failed the all-objects criterion, first match wins:
//   undecided flow — the selected demo changed on >= 3 consecutive selections
//   wrong object   — a grasped object's kind differed from the followed demo
//   incorrect flow — a demo timed out or lost registration
inline FailureBucket classify_failure(const EpisodeTrace& trace) {
    if (trace.success_all) return FailureBucket::None;
    int changes = 0, longest = 0;
    for (size_t i = 1; i < trace.selected_sequence.size(); ++i) {
        if (trace.selected_sequence[i] != trace.selected_sequence[i - 1])
            ++changes;
        else
            changes = 0;
        longest = std::max(longest, changes);
    }
    if (longest >= 3) return FailureBucket::UndecidedFlow;
    if (trace.wrong_grasp) return FailureBucket::WrongObject;
    if (trace.any_timeout || trace.any_registration_lost) return FailureBucket::IncorrectFlow;
    return FailureBucket::Other;
}

// ---------------------------------------------------------------------------
// Result tables

struct StrategyResult {
    std::string strategy;
    int episodes = 0;
    int first_success = 0;
    int all_success = 0;
    int fail_undecided_flow = 0;
    int fail_wrong_object = 0;
    int fail_incorrect_flow = 0;
    int fail_other = 0;

    double first_rate() const {
        return episodes ? static_cast<double>(first_success) / episodes : 0.0;
    }
    double all_rate() const {
        return episodes ? static_cast<double>(all_success) / episodes : 0.0;
    }
    int failures() const {
        return fail_undecided_flow + fail_wrong_object + fail_incorrect_flow + fail_other;
    }
};

struct ResultTable {
    std::vector<StrategyResult> rows;

    const StrategyResult& row(SelectionStrategy s) const {
        for (const auto& r : rows)
            if (r.strategy == to_string(s)) return r;
        throw std::out_of_range("no such strategy row");
    }
};

inline void to_json(json& j, const StrategyResult& r) {
    j = json{{"strategy", r.strategy},
             {"episodes", r.episodes},
             {"first_object_rate", r.first_rate()},
             {"all_objects_rate", r.all_rate()},
             {"first_success", r.first_success},
             {"all_success", r.all_success},
             {"failures",
              {{"undecided_flow", r.fail_undecided_flow},
               {"wrong_object", r.fail_wrong_object},
               {"incorrect_flow", r.fail_incorrect_flow},
               {"other", r.fail_other}}}};
}

inline void from_json(const json& j, StrategyResult& r) {
    r.strategy = j.at("strategy").get<std::string>();
    r.episodes = j.at("episodes").get<int>();
    r.first_success = j.at("first_success").get<int>();
    r.all_success = j.at("all_success").get<int>();
    r.fail_undecided_flow = j.at("failures").at("undecided_flow").get<int>();
    r.fail_wrong_object = j.at("failures").at("wrong_object").get<int>();
    r.fail_incorrect_flow = j.at("failures").at("incorrect_flow").get<int>();
    r.fail_other = j.at("failures").at("other").get<int>();
}

inline void to_json(json& j, const ResultTable& t) { j = json{{"strategies", t.rows}}; }

inline void from_json(const json& j, ResultTable& t) {
    t.rows = j.at("strategies").get<std::vector<StrategyResult>>();
}

inline std::string result_table_text(const ResultTable& t) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-16s %9s %12s %11s  %s\n", "strategy", "episodes",
                  "first_object", "all_objects", "failures (undecided/wrong/flow/other)");
    out += buf;
    for (const StrategyResult& r : t.rows) {
        std::snprintf(buf, sizeof(buf), "%-16s %9d %11.1f%% %10.1f%%  %d/%d/%d/%d\n",
                      r.strategy.c_str(), r.episodes, 100.0 * r.first_rate(),
                      100.0 * r.all_rate(), r.fail_undecided_flow, r.fail_wrong_object,
                      r.fail_incorrect_flow, r.fail_other);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluate

namespace detail {

inline void write_traces(const fs::path& path, const std::vector<EpisodeTrace>& traces) {
    std::string out;
    for (const EpisodeTrace& t : traces)
        for (const json& ev : t.events) out += ev.dump() + "\n";
    write_bytes(path, out);
}

inline StrategyResult aggregate(const std::string& name,
                                const std::vector<EpisodeTrace>& traces) {
    StrategyResult r;
    r.strategy = name;
    r.episodes = static_cast<int>(traces.size());
    for (const EpisodeTrace& t : traces) {
        r.first_success += t.success_first;
        r.all_success += t.success_all;
        switch (classify_failure(t)) {
            case FailureBucket::UndecidedFlow: ++r.fail_undecided_flow; break;
            case FailureBucket::WrongObject: ++r.fail_wrong_object; break;
            case FailureBucket::IncorrectFlow: ++r.fail_incorrect_flow; break;
            case FailureBucket::Other: ++r.fail_other; break;
            case FailureBucket::None: break;
        }
    }
    return r;
}

}  // namespace detail

// Runs every strategy over the same seeded initial configurations. Episode i
// starts from a bit-identical SimState for each strategy.
inline ResultTable evaluate(const ExperimentConfig& cfg,
                            const std::vector<DemoBundle>& demos) {
    cfg.validate();
    for (SelectionStrategy s : cfg.strategies)
        if (s == SelectionStrategy::Mlp && !cfg.model)
            throw std::runtime_error("evaluate: Mlp strategy requires a model (MissingModel)");

    const int n = cfg.episodes();
    ResultTable table;
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

    for (SelectionStrategy strategy : cfg.strategies) {
        ServoConfig servo = cfg.servo;
        servo.strategy = strategy;

        std::vector<EpisodeTrace> traces(static_cast<size_t>(n));
        parallel_for(n, worker_count(cfg.threads, n), [&](int i) {
            SimState initial = reset(cfg.scenario, episode_seed(cfg.master_seed, i));
            EpisodeParams params;
            params.seed = episode_seed(cfg.master_seed, i);
            params.drop_p = cfg.drop_p;
            params.recovery = cfg.recovery;
            params.episode_index = i;
            params.record_steps = cfg.record_steps;
            params.model = cfg.model ? &*cfg.model : nullptr;
            traces[static_cast<size_t>(i)] =
                run_episode(initial, cfg.scenario, demos, servo, params);
        });

        table.rows.push_back(detail::aggregate(to_string(strategy), traces));
        if (!cfg.out_dir.empty())
            detail::write_traces(
                cfg.out_dir / (std::string("traces_") + to_string(strategy) + ".jsonl"),
                traces);
    }

    if (!cfg.out_dir.empty()) {
        json j = table;
        detail::write_bytes(cfg.out_dir / "result_table.json", j.dump(2) + "\n");
        detail::write_bytes(cfg.out_dir / "result_table.txt", result_table_text(table));
    }
    return table;
}

// ---------------------------------------------------------------------------
// dataset generation

struct DatasetSplit {
    Dataset all, train, test;
};

// Uniform-random selection episodes; each selection event contributes one row
// (selected demo's three distances, labeled by whether the followed demo's
// object ended up inserted when the demo terminated). Split 2:1 train/test.
inline DatasetSplit generate_dataset(const ExperimentConfig& cfg,
                                     const std::vector<DemoBundle>& demos, int n_runs) {
    cfg.validate();
    ServoConfig servo = cfg.servo;
    servo.strategy = SelectionStrategy::UniformRandom;

    std::vector<std::vector<DatasetRow>> rows(static_cast<size_t>(n_runs));
    parallel_for(n_runs, worker_count(cfg.threads, n_runs), [&](int i) {
        SimState initial = reset(cfg.scenario, episode_seed(cfg.master_seed, i));
        EpisodeParams params;
        params.seed = episode_seed(cfg.master_seed, i);
        params.episode_index = i;
        params.collect_dataset_rows = true;
        params.record_steps = false;
        EpisodeTrace trace = run_episode(initial, cfg.scenario, demos, servo, params);
        rows[static_cast<size_t>(i)] = trace.dataset_rows;
    });

    DatasetSplit split;
    for (const auto& episode_rows : rows)
        for (const DatasetRow& r : episode_rows) split.all.add_row(r.features, r.label);

    std::vector<size_t> order(split.all.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    RandomStream rng(derive_seed(cfg.master_seed, 0, 0x53504C4954ULL));
    rng.shuffle(order);
    size_t train_n = (split.all.size() * 2 + 1) / 3;
    for (size_t k = 0; k < order.size(); ++k) {
        Dataset& dst = k < train_n ? split.train : split.test;
        dst.add_row(split.all.features[order[k]], split.all.labels[order[k]]);
    }
    return split;
}

// ---------------------------------------------------------------------------
// recovery experiment

struct RecoveryResult {
    StrategyResult reselect, retrack;
    double drop_p = 0.25;
};

inline void to_json(json& j, const RecoveryResult& r) {
    j = json{{"drop_p", r.drop_p}, {"reselect", r.reselect}, {"retrack", r.retrack}};
}

inline std::string recovery_table_text(const RecoveryResult& r) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "recovery comparison at drop_p = %.2f\n", r.drop_p);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-10s %9s %12s %11s\n", "mode", "episodes",
                  "first_object", "all_objects");
    out += buf;
    for (const StrategyResult* row : {&r.reselect, &r.retrack}) {
        std::snprintf(buf, sizeof(buf), "%-10s %9d %11.1f%% %10.1f%%\n",
                      row->strategy.c_str(), row->episodes, 100.0 * row->first_rate(),
                      100.0 * row->all_rate());
        out += buf;
    }
    return out;
}

// Same seeded episodes under both recovery modes with gripper-drop injection.
inline RecoveryResult evaluate_recovery(const ExperimentConfig& cfg,
                                        const std::vector<DemoBundle>& demos,
                                        int n_episodes) {
    cfg.validate();
    RecoveryResult result;
    result.drop_p = cfg.drop_p;
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

    for (RecoveryMode mode : {RecoveryMode::Reselect, RecoveryMode::Retrack}) {
        std::vector<EpisodeTrace> traces(static_cast<size_t>(n_episodes));
        parallel_for(n_episodes, worker_count(cfg.threads, n_episodes), [&](int i) {
            SimState initial = reset(cfg.scenario, episode_seed(cfg.master_seed, i));
            EpisodeParams params;
            params.seed = episode_seed(cfg.master_seed, i);
            params.drop_p = cfg.drop_p;
            params.recovery = mode;
            params.episode_index = i;
            params.record_steps = cfg.record_steps;
            params.model = cfg.model ? &*cfg.model : nullptr;
            traces[static_cast<size_t>(i)] =
                run_episode(initial, cfg.scenario, demos, cfg.servo, params);
        });
        StrategyResult agg = detail::aggregate(to_string(mode), traces);
        (mode == RecoveryMode::Reselect ? result.reselect : result.retrack) = agg;
        if (!cfg.out_dir.empty())
            detail::write_traces(
                cfg.out_dir / (std::string("traces_") + to_string(mode) + ".jsonl"), traces);
    }

    if (!cfg.out_dir.empty()) {
        json j = result;
        detail::write_bytes(cfg.out_dir / "recovery_table.json", j.dump(2) + "\n");
        detail::write_bytes(cfg.out_dir / "recovery_table.txt", recovery_table_text(result));
    }
    return result;
}

}  // namespace condserv
