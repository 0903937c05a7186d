#pragma once

// Inner servo loop (frame alignment + sequence tracking) and the outer
// conditional-selection loop around it.
//
// One servo step: estimate flow from the current demo frame to the live
// view, unproject to 3D, fit the rigid transform, convert to an action. When
// the fitted motion is small enough the loop advances to the next demo frame
// and the demo frame's recorded gripper command is issued (gripper commands
// fire only on frame advances, so approach steps cannot grasp early).
//
// Episodes repeat selection over the not-yet-completed demos until the task
// succeeds, every demo is consumed, or the step budget runs out. A demo that
// times out or loses registration stays in the pool; the robot re-homes and
// selection runs again.

#include <set>

#include "condserv/scoring.hpp"

namespace condserv {

enum class SelectionStrategy { UniformRandom, PointQuality, ColorQuality, Reprojection, Mlp };

inline const char* to_string(SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::UniformRandom: return "uniform_random";
        case SelectionStrategy::PointQuality: return "point_quality";
        case SelectionStrategy::ColorQuality: return "color_quality";
        case SelectionStrategy::Reprojection: return "reprojection";
        default: return "mlp";
    }
}

inline SelectionStrategy strategy_from_string(const std::string& s) {
    if (s == "uniform_random" || s == "random") return SelectionStrategy::UniformRandom;
    if (s == "point_quality" || s == "pq") return SelectionStrategy::PointQuality;
    if (s == "color_quality" || s == "cq") return SelectionStrategy::ColorQuality;
    if (s == "reprojection" || s == "rp") return SelectionStrategy::Reprojection;
    if (s == "mlp") return SelectionStrategy::Mlp;
    throw std::invalid_argument("unknown selection strategy: " + s);
}

struct ServoConfig {
    double eps_pos = 0.003;  // meters; frame advances when ||t|| is below this
    double eps_rot = 0.05;   // radians
    int max_frame_steps = 50;
    int max_demo_steps = 600;
    int global_step_cap = 2500;
    int max_registration_failures = 5;
    int max_attempts_per_demo = 2;  // timeout/lost demos stay selectable this many times
    double rise_on_failure = 0.02;   // climb when registration fails; widens the view
    std::string estimator = "blockmatch";
    int bm_patch = 9;
    int bm_search = 16;
    double bm_tau = 3.0;  // harness-level rejection threshold
    SelectionStrategy strategy = SelectionStrategy::Reprojection;

    void validate() const {
        if (!(eps_pos > 0) || !(eps_rot > 0))
            throw std::invalid_argument("ServoConfig: thresholds must be positive");
    }

    std::unique_ptr<FlowEstimator> make_flow_estimator() const {
        if (estimator == "blockmatch")
            return std::make_unique<BlockMatchingEstimator>(
                BlockMatchParams{bm_patch, bm_search, bm_tau});
        return make_estimator(estimator);
    }
};

enum class ServoOutcome { Running, DemoComplete, Timeout, RegistrationLost };

inline const char* to_string(ServoOutcome o) {
    switch (o) {
        case ServoOutcome::Running: return "running";
        case ServoOutcome::DemoComplete: return "demo_complete";
        case ServoOutcome::Timeout: return "timeout";
        default: return "registration_lost";
    }
}

struct ServoStatus {
    std::string demo_id;
    size_t frame_index = 0;
    int step_count = 0;        // steps spent on this demo
    int steps_in_frame = 0;
    int consecutive_failures = 0;
    double last_residual = 0.0;  // mean inlier residual of the last registration
    ServoOutcome outcome = ServoOutcome::Running;
};

// ---------------------------------------------------------------------------
// servo_step

inline std::pair<Action, ServoStatus> servo_step(const FrameRef& live, const DemoBundle& demo,
                                                 const ServoStatus& status_in,
                                                 const FlowEstimator& estimator,
                                                 const ServoConfig& cfg,
                                                 const ActionLimits& limits) {
    if (status_in.outcome != ServoOutcome::Running)
        throw std::logic_error("servo_step: demo already terminal");
    ServoStatus status = status_in;
    const Frame& target = demo.demo.frames[status.frame_index];

    Action action;  // zero motion unless registration succeeds
    action.gripper = live.frame->gripper;

    bool advanced = false;
    try {
        if (target.mask.count() == 0) throw EmptyMaskError("servo: empty demo mask");
        FlowField flow = estimator.estimate(demo.frame_ref(status.frame_index), live);
        PointCloudPair pair = unproject(target, flow, *live.frame);
        Registration reg = register_clouds(pair);

        status.consecutive_failures = 0;
        status.last_residual = reg.mean_residual;
        action = transform_to_action(reg, target.gripper, limits);

        bool aligned = reg.transform.t.norm() <= cfg.eps_pos &&
                       std::abs(yaw_of(reg.transform.R)) <= cfg.eps_rot;
        if (aligned) {
            // Advance. The gripper command of the frame being advanced to is
            // issued now, at the aligned pose: the next frame's image already
            // shows that gripper state, so actuation must precede alignment.
            advanced = true;
            if (status.frame_index + 1 >= demo.demo.frames.size()) {
                status.outcome = ServoOutcome::DemoComplete;
                action.gripper = target.gripper;
            } else {
                ++status.frame_index;
                status.steps_in_frame = 0;
                action.gripper = demo.demo.frames[status.frame_index].gripper;
            }
        } else {
            action.gripper = live.frame->gripper;  // hold the current command
        }
    } catch (const RegistrationError&) {
        ++status.consecutive_failures;
        action.dz = cfg.rise_on_failure;  // rise to bring the anchor back in view
    } catch (const EmptyMaskError&) {
        ++status.consecutive_failures;
    }

    ++status.step_count;
    ++status.steps_in_frame;

    if (status.outcome == ServoOutcome::Running) {
        if (status.consecutive_failures >= cfg.max_registration_failures)
            status.outcome = ServoOutcome::RegistrationLost;
        else if (!advanced && status.steps_in_frame >= cfg.max_frame_steps)
            status.outcome = ServoOutcome::Timeout;
        else if (status.step_count >= cfg.max_demo_steps)
            status.outcome = ServoOutcome::Timeout;
    }
    return {action, status};
}

// ---------------------------------------------------------------------------
// select_demo

struct SelectionResult {
    int index = -1;  // into the bundle list
    std::vector<ScoreReport> reports;
    bool fallback_random = false;
};

inline std::optional<double> strategy_score(const ScoreReport& r, SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::PointQuality: return r.d_pq;
        case SelectionStrategy::ColorQuality: return r.d_cq;
        case SelectionStrategy::Reprojection: return r.d_rp;
        case SelectionStrategy::Mlp: return r.d_mlp;
        default: return std::nullopt;
    }
}

// Argmin of the chosen distance over scorable reports, ties broken by demo
// id; returns -1 when nothing is scorable.
inline int argmin_scorable(const std::vector<ScoreReport>& reports,
                           SelectionStrategy strategy) {
    int best = -1;
    double best_score = 0;
    for (size_t k = 0; k < reports.size(); ++k) {
        auto score = strategy_score(reports[k], strategy);
        if (!score) continue;
        if (best < 0 || *score < best_score ||
            (*score == best_score &&
             reports[k].demo_id < reports[static_cast<size_t>(best)].demo_id)) {
            best = static_cast<int>(k);
            best_score = *score;
        }
    }
    return best;
}

// Scores the non-consumed candidates and takes the argmin; unscorable demos
// are excluded and a uniform random draw is the fallback when nothing is
// scorable (and the whole rule for the UniformRandom strategy).
inline SelectionResult select_demo(const FrameRef& live, const std::vector<DemoBundle>& demos,
                                   const std::set<int>& consumed, SelectionStrategy strategy,
                                   const FlowEstimator& estimator, const MlpModel* model,
                                   RandomStream& rng) {
    std::vector<int> candidates;
    for (size_t i = 0; i < demos.size(); ++i)
        if (!consumed.count(static_cast<int>(i))) candidates.push_back(static_cast<int>(i));
    if (candidates.empty()) throw std::logic_error("select_demo: no candidates");

    SelectionResult out;
    if (strategy == SelectionStrategy::UniformRandom) {
        out.index = candidates[static_cast<size_t>(rng.uniform_int(candidates.size()))];
        return out;
    }

    for (int idx : candidates) {
        const DemoBundle& b = demos[static_cast<size_t>(idx)];
        out.reports.push_back(score_demo(live, b.demo, b.first_ref(), estimator, model));
    }

    int best = argmin_scorable(out.reports, strategy);
    if (best < 0) {
        out.fallback_random = true;
        out.index = candidates[static_cast<size_t>(rng.uniform_int(candidates.size()))];
    } else {
        out.index = candidates[static_cast<size_t>(best)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// run_episode

enum class RecoveryMode { Reselect, Retrack };

inline const char* to_string(RecoveryMode m) {
    return m == RecoveryMode::Reselect ? "reselect" : "retrack";
}

struct DatasetRow {
    std::array<double, 3> features{};
    int label = 0;
};

struct EpisodeTrace {
    std::vector<json> events;
    bool success_all = false;
    bool success_first = false;
    int total_steps = 0;
    int selections = 0;
    int inserted = 0;
    std::vector<std::string> selected_sequence;
    bool any_timeout = false;
    bool any_registration_lost = false;
    bool wrong_grasp = false;
    std::vector<DatasetRow> dataset_rows;
};

struct EpisodeParams {
    std::uint64_t seed = 0;      // per-episode seed; drives selection + drop streams
    double drop_p = 0.0;
    RecoveryMode recovery = RecoveryMode::Reselect;
    bool collect_dataset_rows = false;
    bool record_steps = true;    // per-step trace events
    int episode_index = 0;
    const MlpModel* model = nullptr;  // required for the Mlp strategy
};

namespace detail {

inline int shape_index_for_demo(const SimConfig& config, const std::string& demo_id) {
    for (size_t i = 0; i < config.shapes.size(); ++i)
        if (to_string(config.shapes[i].kind) == demo_id) return static_cast<int>(i);
    return -1;
}

inline int count_inserted(const SimState& s) {
    int n = 0;
    for (const ObjectState& o : s.objects) n += o.status == ObjectStatus::Inserted;
    return n;
}

inline json action_event(int global_step, const std::string& demo_id, size_t frame,
                         const Action& a, const ServoStatus& st) {
    return json{{"ev", "step"},    {"n", global_step},
                {"demo", demo_id}, {"f", frame},
                {"dx", a.dx},      {"dy", a.dy},
                {"dz", a.dz},      {"dth", a.dtheta},
                {"grip", to_string(a.gripper)}, {"res", st.last_residual},
                {"out", to_string(st.outcome)}};
}

// Drive straight back to the home pose between demos so selection always
// observes the scene from the demos' first-frame viewpoint.
inline int rehome(SimState& state, const SimConfig& config, int max_steps) {
    int steps = 0;
    const ToolPose& home = config.home;
    while (steps < max_steps) {
        Vec2 delta{home.x - state.tool.x, home.y - state.tool.y};
        double dz = home.z - state.tool.z;
        double dyaw = angle_diff(home.theta, state.tool.theta);
        if (delta.norm() < 1e-9 && std::abs(dz) < 1e-9 && std::abs(dyaw) < 1e-9) break;
        Action a;
        a.dx = delta.dot(tool_x_axis(state.tool.theta));
        a.dy = delta.dot(tool_y_axis(state.tool.theta));
        a.dz = dz;
        a.dtheta = dyaw;
        a.gripper = state.gripper;
        state = step(state, a, config);
        ++steps;
    }
    return steps;
}

}  // namespace detail

inline EpisodeTrace run_episode(const SimState& initial, const SimConfig& config,
                                const std::vector<DemoBundle>& demos, const ServoConfig& servo,
                                const EpisodeParams& params) {
    servo.validate();
    if (demos.empty()) throw std::invalid_argument("run_episode: no demos");

    EpisodeTrace trace;
    {
        json start{{"ev", "start"},
                   {"episode", params.episode_index},
                   {"seed", params.seed},
                   {"strategy", to_string(servo.strategy)},
                   {"estimator", servo.estimator},
                   {"drop_p", params.drop_p}};
        if (params.drop_p > 0.0) start["recovery"] = to_string(params.recovery);
        trace.events.push_back(start);
    }

    std::unique_ptr<FlowEstimator> estimator = servo.make_flow_estimator();
    RandomStream rng_select(derive_seed(params.seed, 1, 0x53454CULL));
    RandomStream rng_drop(derive_seed(params.seed, 2, 0x44524FULL));
    const MlpModel* model = params.model;
    if (servo.strategy == SelectionStrategy::Mlp && !model)
        throw std::invalid_argument("run_episode: Mlp strategy requires a trained model");

    SimState state = initial;
    std::set<int> consumed;  // completed or retry-exhausted, excluded from selection
    std::vector<int> failed_attempts(demos.size(), 0);
    int global_steps = 0;
    bool first_attempt_done = false;

    // Failure injection is one Bernoulli trial per carry: when a grasp
    // succeeds, the carry is doomed with probability drop_p and the gripper
    // forced open at a random moment while the object is held.
    bool carry_doomed = false;
    int carry_held_steps = 0;
    int carry_drop_at = 0;

    auto track_transitions = [&](int prev_held, int prev_inserted, const std::string& demo_id) {
        if (state.held >= 0 && prev_held < 0) {
            const char* kind = to_string(config.shapes[static_cast<size_t>(state.held)].kind);
            trace.events.push_back(json{{"ev", "grasp"}, {"object", kind}, {"demo", demo_id}});
            if (demo_id != kind) trace.wrong_grasp = true;
        }
        int ins = detail::count_inserted(state);
        if (ins > prev_inserted)
            trace.events.push_back(json{{"ev", "insert"}, {"count", ins}});
    };

    while (global_steps < servo.global_step_cap) {
        if (task_success(state)) break;
        if (static_cast<int>(consumed.size()) == static_cast<int>(demos.size())) break;

        int rehome_steps =
            detail::rehome(state, config, servo.global_step_cap - global_steps);
        global_steps += rehome_steps;
        if (rehome_steps > 0)
            trace.events.push_back(json{{"ev", "rehome"}, {"steps", rehome_steps}});
        if (state.held >= 0) {
            // a demo died mid-carry; set the piece down before re-observing
            int prev_ins = detail::count_inserted(state);
            Action open;
            open.gripper = GripperCmd::Open;
            state = step(state, open, config);
            ++global_steps;
            trace.events.push_back(json{{"ev", "deposit"}});
            if (detail::count_inserted(state) > prev_ins)
                trace.events.push_back(json{{"ev", "insert"}, {"count", prev_ins + 1}});
        }
        if (global_steps >= servo.global_step_cap) break;

        Frame live = render(state, config);
        FrameRef live_ref(live, state, config);
        SelectionResult sel = select_demo(live_ref, demos, consumed, servo.strategy,
                                          *estimator, model, rng_select);
        const DemoBundle& bundle = demos[static_cast<size_t>(sel.index)];
        ++trace.selections;
        trace.selected_sequence.push_back(bundle.demo.id);
        {
            json ev{{"ev", "select"}, {"demo", bundle.demo.id},
                    {"fallback_random", sel.fallback_random}};
            json scores = json::array();
            for (const ScoreReport& r : sel.reports) scores.push_back(score_report_to_json(r));
            ev["scores"] = scores;
            trace.events.push_back(ev);
        }

        // dataset row: the selected demo's distances, labeled at termination
        std::optional<std::array<double, 3>> pending_features;
        if (params.collect_dataset_rows) {
            const ScoreReport* rep = nullptr;
            for (size_t k = 0, c = 0; k < demos.size() && !rep; ++k) {
                if (consumed.count(static_cast<int>(k))) continue;
                if (static_cast<int>(k) == sel.index && c < sel.reports.size())
                    rep = &sel.reports[c];
                ++c;
            }
            ScoreReport computed;
            if (!rep) {
                computed = score_demo(live_ref, bundle.demo, bundle.first_ref(), *estimator,
                                      model);
                rep = &computed;
            }
            if (rep->d_pq && rep->d_cq && rep->d_rp)
                pending_features = std::array<double, 3>{*rep->d_pq, *rep->d_cq, *rep->d_rp};
        }

        ServoStatus status;
        status.demo_id = bundle.demo.id;
        bool aborted_by_drop = false;

        while (status.outcome == ServoOutcome::Running &&
               global_steps < servo.global_step_cap) {
            Frame live_now = render(state, config);
            FrameRef now_ref(live_now, state, config);
            auto [action, next_status] =
                servo_step(now_ref, bundle, status, *estimator, servo, config.limits);
            status = next_status;

            int prev_held = state.held;
            int prev_ins = detail::count_inserted(state);
            state = step(state, action, config);
            ++global_steps;
            if (params.record_steps)
                trace.events.push_back(detail::action_event(global_steps, bundle.demo.id,
                                                            status.frame_index, action, status));
            track_transitions(prev_held, prev_ins, bundle.demo.id);

            if (params.drop_p > 0.0) {
                if (state.held >= 0 && prev_held < 0) {
                    carry_doomed = rng_drop.bernoulli(params.drop_p);
                    carry_drop_at = 1 + static_cast<int>(rng_drop.uniform_int(10));
                    carry_held_steps = 0;
                }
                if (state.held >= 0 && ++carry_held_steps >= carry_drop_at && carry_doomed) {
                    state = inject_drop(state, rng_drop, 1.0, config).state;
                    carry_doomed = false;
                    trace.events.push_back(json{{"ev", "drop"}, {"n", global_steps}});
                    if (params.recovery == RecoveryMode::Reselect) {
                        aborted_by_drop = true;
                        break;  // back to selection; demo stays available
                    }
                    // Retrack: keep following the current demo frames
                }
            }
        }

        if (status.outcome == ServoOutcome::Timeout) trace.any_timeout = true;
        if (status.outcome == ServoOutcome::RegistrationLost)
            trace.any_registration_lost = true;
        if (status.outcome == ServoOutcome::DemoComplete) {
            consumed.insert(sel.index);
        } else if (!aborted_by_drop) {
            // a failed demo stays selectable for a bounded number of retries
            if (++failed_attempts[static_cast<size_t>(sel.index)] >=
                servo.max_attempts_per_demo)
                consumed.insert(sel.index);
        }

        trace.events.push_back(json{{"ev", "demo_end"},
                                    {"demo", bundle.demo.id},
                                    {"outcome", aborted_by_drop ? "aborted_drop"
                                                                : to_string(status.outcome)},
                                    {"steps", status.step_count},
                                    {"consumed", status.outcome == ServoOutcome::DemoComplete}});

        if (pending_features) {
            int shape_idx = detail::shape_index_for_demo(config, bundle.demo.id);
            int label = shape_idx >= 0 && task_success(state, shape_idx) ? 1 : 0;
            trace.dataset_rows.push_back(DatasetRow{*pending_features, label});
        }

        // "first object": outcome of the first insertion attempt. Drop-aborts
        // under Reselect extend the attempt across re-selections.
        if (!first_attempt_done && !aborted_by_drop) {
            first_attempt_done = true;
            trace.success_first = detail::count_inserted(state) > 0;
        }
    }

    if (!first_attempt_done) trace.success_first = detail::count_inserted(state) > 0;
    trace.success_all = task_success(state);
    trace.inserted = detail::count_inserted(state);
    trace.total_steps = global_steps;
    trace.events.push_back(json{{"ev", "end"},
                                {"steps", global_steps},
                                {"success_first", trace.success_first},
                                {"success_all", trace.success_all},
                                {"inserted", trace.inserted}});
    return trace;
}

}  // namespace condserv
