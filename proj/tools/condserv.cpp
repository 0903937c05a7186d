// Command-line front end: demo recording, dataset generation, classifier
// training, scoring, and the batch evaluations.

#include <CLI11.hpp>

#include "condserv/harness.hpp"

using namespace condserv;

namespace {

SimConfig scenario_or_default(const std::string& path) {
    if (path.empty()) return standard3_config();
    return load_scenario(path);
}

std::vector<SelectionStrategy> parse_strategies(const std::string& list) {
    std::vector<SelectionStrategy> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(strategy_from_string(item));
    }
    if (out.empty()) throw std::invalid_argument("empty strategy list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional servoing on a synthetic shape-sorting benchmark"};
    app.require_subcommand(1);

    std::string scenario_path, demos_dir, out_path, model_path, live_path, data_path;
    std::string strategies = "uniform_random,point_quality,color_quality,reprojection";
    std::string estimator = "blockmatch";
    std::uint64_t seed = 1;
    int runs = 150;
    int episodes_per_object = 100;
    int episodes = 200;
    int threads = 0;
    double drop_p = 0.25;
    std::string recovery = "reselect";
    bool no_step_trace = false;

    auto* record = app.add_subcommand("record", "record one scripted demo per shape");
    record->add_option("--scenario", scenario_path, "scenario json (default standard3)");
    record->add_option("--out", out_path, "output directory")->required();

    auto* dataset = app.add_subcommand("dataset", "collect selection features and labels");
    dataset->add_option("--scenario", scenario_path);
    dataset->add_option("--demos", demos_dir)->required();
    dataset->add_option("--runs", runs, "episode count (default 150)");
    dataset->add_option("--out", out_path, "dataset csv path")->required();
    dataset->add_option("--seed", seed);
    dataset->add_option("--estimator", estimator, "oracle | blockmatch");
    dataset->add_option("--threads", threads);

    auto* train_cmd = app.add_subcommand("train-mlp", "train the success classifier");
    train_cmd->add_option("--data", data_path, "training csv")->required();
    train_cmd->add_option("--out", model_path, "model json path")->required();
    train_cmd->add_option("--seed", seed);

    auto* score_cmd = app.add_subcommand("score", "score every demo against a live frame");
    score_cmd->add_option("--live", live_path, "demo-format directory; frame 0 is the live view")
        ->required();
    score_cmd->add_option("--demos", demos_dir)->required();
    score_cmd->add_option("--scenario", scenario_path);
    score_cmd->add_option("--model", model_path, "mlp model json (optional)");
    score_cmd->add_option("--estimator", estimator);

    auto* eval_cmd = app.add_subcommand("eval", "success-rate comparison across strategies");
    eval_cmd->add_option("--scenario", scenario_path);
    eval_cmd->add_option("--demos", demos_dir)->required();
    eval_cmd->add_option("--strategies", strategies, "comma-separated list");
    eval_cmd->add_option("--model", model_path, "mlp model json (needed for mlp)");
    eval_cmd->add_option("--seed", seed);
    eval_cmd->add_option("--episodes-per-object", episodes_per_object);
    eval_cmd->add_option("--estimator", estimator);
    eval_cmd->add_option("--out", out_path, "output directory")->required();
    eval_cmd->add_option("--threads", threads);
    eval_cmd->add_flag("--no-step-trace", no_step_trace, "omit per-step trace events");

    auto* recov_cmd = app.add_subcommand("eval-recovery", "reselect vs retrack after drops");
    recov_cmd->add_option("--scenario", scenario_path);
    recov_cmd->add_option("--demos", demos_dir)->required();
    recov_cmd->add_option("--drop-p", drop_p, "per-carry drop probability (default 0.25)");
    recov_cmd->add_option("--episodes", episodes, "episodes per mode (default 200)");
    recov_cmd->add_option("--seed", seed);
    recov_cmd->add_option("--estimator", estimator);
    recov_cmd->add_option("--out", out_path)->required();
    recov_cmd->add_option("--threads", threads);
    recov_cmd->add_flag("--no-step-trace", no_step_trace);

    CLI11_PARSE(app, argc, argv);

    try {
        if (record->parsed()) {
            SimConfig cfg = scenario_or_default(scenario_path);
            auto dirs = record_demos(cfg, out_path);
            for (const auto& d : dirs) std::printf("recorded %s\n", d.string().c_str());
            return 0;
        }

        if (dataset->parsed()) {
            SimConfig cfg = scenario_or_default(scenario_path);
            auto bundles = load_demo_bundles(demos_dir, cfg);
            ExperimentConfig exp;
            exp.scenario = cfg;
            exp.master_seed = seed;
            exp.servo.estimator = estimator;
            exp.threads = threads;
            DatasetSplit split = generate_dataset(exp, bundles, runs);
            fs::path base(out_path);
            save_dataset_csv(split.all, base);
            save_dataset_csv(split.train, base.string() + ".train");
            save_dataset_csv(split.test, base.string() + ".test");
            std::printf("rows: %zu total, %zu train, %zu test\n", split.all.size(),
                        split.train.size(), split.test.size());
            return 0;
        }

        if (train_cmd->parsed()) {
            Dataset data = load_dataset_csv(data_path);
            TrainConfig cfg;
            cfg.seed = seed;
            TrainResult result = train(data, cfg);
            save_model(result.model, model_path);
            std::printf("trained on %zu rows, final batch loss %.4f, train accuracy %.3f\n",
                        data.size(), result.loss_curve.back(), accuracy(result.model, data));
            fs::path test_path = data_path + std::string(".test");
            if (data_path.size() > 6 &&
                data_path.compare(data_path.size() - 6, 6, ".train") == 0) {
                test_path = data_path.substr(0, data_path.size() - 6) + ".test";
            }
            if (fs::exists(test_path)) {
                Dataset test = load_dataset_csv(test_path);
                if (test.size() > 0)
                    std::printf("test accuracy %.3f on %zu rows\n",
                                accuracy(result.model, test), test.size());
            }
            return 0;
        }

        if (score_cmd->parsed()) {
            SimConfig cfg = scenario_or_default(scenario_path);
            auto bundles = load_demo_bundles(demos_dir, cfg);
            Demonstration live_demo = load_demo(live_path);
            std::optional<MlpModel> model;
            if (!model_path.empty()) model = load_model(model_path);

            std::vector<SimState> live_states;
            fs::path states_path = fs::path(live_path) / "states.json";
            if (fs::exists(states_path)) {
                json j = json::parse(detail::read_bytes(states_path));
                for (const auto& sj : j.at("states")) live_states.push_back(sj.get<SimState>());
            }
            FrameRef live_ref = live_states.empty()
                                    ? FrameRef(live_demo.frames[0])
                                    : FrameRef(live_demo.frames[0], live_states[0], cfg);

            ServoConfig servo;
            servo.estimator = estimator;
            auto est = servo.make_flow_estimator();
            auto reports =
                score_all(live_ref, bundles, *est, model ? &*model : nullptr);
            for (const ScoreReport& r : reports)
                std::printf("%s\n", score_report_to_json(r).dump().c_str());
            return 0;
        }

        if (eval_cmd->parsed()) {
            SimConfig cfg = scenario_or_default(scenario_path);
            auto bundles = load_demo_bundles(demos_dir, cfg);
            ExperimentConfig exp;
            exp.scenario = cfg;
            exp.master_seed = seed;
            exp.strategies = parse_strategies(strategies);
            exp.episodes_per_object = episodes_per_object;
            exp.servo.estimator = estimator;
            exp.out_dir = out_path;
            exp.threads = threads;
            exp.record_steps = !no_step_trace;
            if (!model_path.empty()) exp.model = load_model(model_path);
            ResultTable table = evaluate(exp, bundles);
            std::printf("%s", result_table_text(table).c_str());
            return 0;
        }

        if (recov_cmd->parsed()) {
            SimConfig cfg = scenario_or_default(scenario_path);
            auto bundles = load_demo_bundles(demos_dir, cfg);
            ExperimentConfig exp;
            exp.scenario = cfg;
            exp.master_seed = seed;
            exp.drop_p = drop_p;
            exp.servo.estimator = estimator;
            exp.out_dir = out_path;
            exp.threads = threads;
            exp.record_steps = !no_step_trace;
            RecoveryResult result = evaluate_recovery(exp, bundles, episodes);
            std::printf("%s", recovery_table_text(result).c_str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
