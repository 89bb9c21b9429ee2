#include "psqd/cli.hpp"

#include "psqd/baselines.hpp"
#include "psqd/config.hpp"
#include "psqd/env.hpp"
#include "psqd/lexi.hpp"
#include "psqd/softq_io.hpp"
#include "psqd/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace psqd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "0.1.0";

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int log_level() {
    const char* lv = std::getenv("PSQD_LOG_LEVEL");
    if (!lv) return 1;
    const std::string s = lv;
    if (s == "quiet" || s == "0") return 0;
    if (s == "debug" || s == "2") return 2;
    return 1;
}

void info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[psqd] " << msg << "\n";
}

/// Collects outputs and writes the run manifest atomically at the end.
struct RunContext {
    std::string command;
    Config cfg;
    std::uint64_t seed = 0;
    fs::path out_dir;
    std::vector<std::string> outputs;
    double start_time = now_seconds();

    std::string path(const std::string& name) {
        const fs::path p = out_dir / name;
        fs::create_directories(p.parent_path());
        return p.string();
    }

    void note_output(const std::string& p) { outputs.push_back(p); }

    void write_text(const std::string& name, const std::string& text) {
        const std::string p = path(name);
        std::ofstream out(p, std::ios::binary);
        if (!out) throw RuntimeAbort("cannot open " + p + " for writing");
        out << text;
        if (!out) throw RuntimeAbort("write failed: " + p);
        note_output(p);
    }

    void finish() {
        json manifest;
        manifest["command"] = command;
        manifest["version"] = kVersion;
        manifest["seed"] = seed;
        json cfg_json = json::object();
        for (const auto& [k, v] : cfg.entries()) cfg_json[k] = v;
        manifest["config"] = cfg_json;
        manifest["outputs"] = outputs;
        manifest["wall_time_s"] = now_seconds() - start_time;
        const std::string final_path = path("manifest.json");
        const std::string tmp_path = final_path + ".tmp";
        {
            std::ofstream out(tmp_path, std::ios::binary);
            if (!out) throw RuntimeAbort("cannot open " + tmp_path + " for writing");
            out << manifest.dump(2) << "\n";
        }
        fs::rename(tmp_path, final_path);
        info("wrote " + final_path);
    }
};

/// --config accepts either the key = value format or a previously written
/// manifest.json, whose config echo reproduces the run.
Config load_config_file(const std::string& file, const std::string& expected_command) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file: " + file);
    char first = 0;
    in >> first;
    in.close();
    if (first != '{') return Config::parse_file(file);
    std::ifstream jin(file);
    json manifest;
    try {
        jin >> manifest;
    } catch (const json::exception& e) {
        throw ConfigError(file + ": invalid manifest: " + std::string(e.what()));
    }
    if (manifest.contains("command") && manifest["command"].get<std::string>() != expected_command)
        throw ConfigError(file + ": manifest was produced by command '" +
                          manifest["command"].get<std::string>() + "', not '" + expected_command +
                          "'");
    Config cfg;
    if (!manifest.contains("config") || !manifest["config"].is_object())
        throw ConfigError(file + ": manifest has no config object");
    for (const auto& [k, v] : manifest["config"].items()) cfg.set(k, v.get<std::string>());
    return cfg;
}

std::unique_ptr<Env> make_env(const Config& cfg) {
    if (!cfg.has("env.kind")) throw ConfigError("missing required config key: env.kind");
    const std::string kind = cfg.get_string("env.kind");
    if (kind == "nav2d") {
        Nav2dConfig c;
        c.bound = cfg.get_double("env.bound", c.bound);
        c.sigma = cfg.get_double("env.sigma", c.sigma);
        c.length_scale = cfg.get_double("env.length_scale", c.length_scale);
        c.beta = cfg.get_double("env.beta", c.beta);
        c.delta = cfg.get_double("env.delta", c.delta);
        c.step_scale = cfg.get_double("env.step_scale", c.step_scale);
        c.horizon = static_cast<int>(cfg.get_int("env.horizon", c.horizon));
        c.goal_x = cfg.get_double("env.goal_x", c.goal_x);
        c.goal_y = cfg.get_double("env.goal_y", c.goal_y);
        c.start_margin = cfg.get_double("env.start_margin", c.start_margin);
        if (cfg.has("env.obstacle")) {
            c.obstacle.clear();
            // Rectangles as "x0:y0:x1:y1" items, comma separated.
            for (const auto& rect_text : cfg.get_string_list("env.obstacle")) {
                Rect r{};
                char s1 = 0, s2 = 0, s3 = 0;
                std::istringstream in(rect_text);
                if (!(in >> r.x0 >> s1 >> r.y0 >> s2 >> r.x1 >> s3 >> r.y1) || s1 != ':' ||
                    s2 != ':' || s3 != ':')
                    throw ConfigError("env.obstacle: expected 'x0:y0:x1:y1' rectangles");
                c.obstacle.push_back(r);
            }
        }
        return std::make_unique<Nav2dEnv>(c);
    }
    if (kind == "gridworld") {
        GridworldConfig c;
        c.width = static_cast<int>(cfg.get_int("env.width", c.width));
        c.height = static_cast<int>(cfg.get_int("env.height", c.height));
        c.horizon = static_cast<int>(cfg.get_int("env.horizon", c.horizon));
        if (cfg.has("env.obstacles")) c.obstacles = cfg.get_int_pairs("env.obstacles");
        if (cfg.has("env.goals")) c.goals = cfg.get_int_pairs("env.goals");
        return std::make_unique<Gridworld>(c);
    }
    if (kind == "highdim") {
        HighDimConfig c;
        c.dim = static_cast<int>(cfg.get_int("env.dim", c.dim));
        c.step_scale = cfg.get_double("env.step_scale", c.step_scale);
        c.horizon = static_cast<int>(cfg.get_int("env.horizon", c.horizon));
        return std::make_unique<HighDimPointEnv>(c);
    }
    throw ConfigError("env.kind: unknown environment '" + kind + "'");
}

TrainConfig make_train_config(const Config& cfg) {
    TrainConfig t;
    t.steps = cfg.get_int("train.steps", t.steps);
    t.batch = static_cast<int>(cfg.get_int("train.batch", t.batch));
    t.learn_rate = cfg.get_double("train.learn_rate", t.learn_rate);
    t.tau = cfg.get_double("train.tau", t.tau);
    t.gamma = cfg.get_double("train.gamma", t.gamma);
    t.eval_interval = cfg.get_int("train.eval_interval", t.eval_interval);
    t.eval_episodes = static_cast<int>(cfg.get_int("train.eval_episodes", t.eval_episodes));
    t.seed = cfg.get_u64("train.seed", t.seed);
    t.buffer_capacity = static_cast<std::size_t>(
        cfg.get_int("train.buffer_capacity", static_cast<long>(t.buffer_capacity)));
    t.min_buffer = cfg.get_int("train.min_buffer", t.min_buffer);
    t.update_every = static_cast<int>(cfg.get_int("train.update_every", t.update_every));
    t.value_candidates =
        static_cast<int>(cfg.get_int("train.value_candidates", t.value_candidates));
    t.arbiter_batch = static_cast<int>(cfg.get_int("sampler.batch", t.arbiter_batch));
    t.rejection_cap = static_cast<int>(cfg.get_int("sampler.rejection_cap", t.rejection_cap));
    t.grid_nx = static_cast<int>(cfg.get_int("model.grid_nx", t.grid_nx));
    t.grid_ny = static_cast<int>(cfg.get_int("model.grid_ny", t.grid_ny));
    t.grid_bins = static_cast<int>(cfg.get_int("model.grid_bins", t.grid_bins));
    if (cfg.has("model.mlp_hidden")) t.mlp_hidden = cfg.get_int_list("model.mlp_hidden");
    t.validate();
    return t;
}

/// Action set used for exact constraint evaluation and finite-set policies;
/// empty for action spaces without a canonical finite discretization.
std::vector<ActionVec> action_set_for(const Env& env, const SoftQ* q_hint, const Config& cfg) {
    if (env.descriptor().action_kind == ActionKind::DiscreteSet) return Gridworld::action_set();
    if (env.descriptor().action_dim == 2) {
        if (const auto* g = dynamic_cast<const GridQ*>(q_hint)) return g->bin_actions();
        return angular_action_bins(static_cast<int>(cfg.get_int("model.grid_bins", 64)));
    }
    return {};
}

struct StackBundle {
    ConstraintStack stack;
    std::vector<std::shared_ptr<const SoftQ>> snapshots; // keeps constraint Qs alive
};

std::shared_ptr<const SoftQ> load_shared(const std::string& path) {
    return std::shared_ptr<const SoftQ>(load_snapshot(path));
}

StackBundle make_stack(const Config& cfg, const Env& env) {
    StackBundle bundle;
    if (!cfg.has("stack.snapshots")) return bundle;
    const auto paths = cfg.get_string_list("stack.snapshots");
    const auto epsilons = cfg.get_double_list("stack.epsilons");
    if (paths.size() != epsilons.size())
        throw ConfigError("stack.snapshots and stack.epsilons must have the same length");
    const int max_candidates = static_cast<int>(cfg.get_int("sampler.max_candidates", 256));
    std::vector<IndifferenceConstraint> constraints;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        std::shared_ptr<const SoftQ> q = load_shared(paths[i]);
        if (!(q->descriptor() == env.descriptor()))
            throw ConfigError("stack snapshot " + paths[i] +
                              " does not match the environment descriptor");
        bundle.snapshots.push_back(q);
        const auto set = action_set_for(env, q.get(), cfg);
        MaxEstimator est =
            set.empty() ? MaxEstimator::sample_max(max_candidates) : MaxEstimator::exact(set);
        constraints.emplace_back(q, epsilons[i], std::move(est));
    }
    bundle.stack = ConstraintStack(std::move(constraints));
    return bundle;
}

struct PolicyBundle {
    std::unique_ptr<Policy> policy;
    std::vector<std::shared_ptr<const SoftQ>> snapshots;
    StackBundle stack;
};

PolicyBundle make_policy(const Config& cfg, const Env& env) {
    PolicyBundle b;
    const std::string kind = cfg.get_string("policy.kind", "arbiter");
    const int candidates = static_cast<int>(cfg.get_int("sampler.batch", 256));
    if (kind == "uniform") {
        auto set = action_set_for(env, nullptr, cfg);
        if (set.empty())
            throw ConfigError("policy.kind uniform needs a finite action set");
        b.policy = std::make_unique<UniformSetPolicy>(std::move(set));
        return b;
    }

    std::shared_ptr<const SoftQ> q_low;
    if (cfg.has("policy.q_list")) {
        std::vector<std::shared_ptr<const SoftQ>> parts;
        for (const auto& p : cfg.get_string_list("policy.q_list")) {
            parts.push_back(load_shared(p));
            b.snapshots.push_back(parts.back());
        }
        q_low = sql_comp_compose(std::move(parts));
    } else {
        q_low = load_shared(cfg.get_string("policy.q"));
        if (!(q_low->descriptor() == env.descriptor()))
            throw ConfigError("policy snapshot does not match the environment descriptor");
    }
    b.snapshots.push_back(q_low);

    const auto set = action_set_for(env, q_low.get(), cfg);
    if (kind == "boltzmann") {
        if (!set.empty()) {
            b.policy = std::make_unique<BoltzmannSetPolicy>(q_low, set);
        } else {
            auto prop = std::make_shared<UniformSphereProposal>(env.descriptor().action_dim);
            b.policy = std::make_unique<BoltzmannSampledPolicy>(q_low, prop, candidates);
        }
        return b;
    }
    if (kind == "greedy") {
        if (set.empty()) throw ConfigError("policy.kind greedy needs a finite action set");
        b.policy = std::make_unique<GreedySetPolicy>(q_low, set);
        return b;
    }
    if (kind == "arbiter") {
        b.stack = make_stack(cfg, env);
        ArbiterOptions opt;
        opt.batch_size = static_cast<int>(cfg.get_int("sampler.batch", opt.batch_size));
        opt.rejection_cap =
            static_cast<int>(cfg.get_int("sampler.rejection_cap", opt.rejection_cap));
        std::shared_ptr<const ProposalSampler> proposal;
        if (env.descriptor().action_kind == ActionKind::DiscreteSet) {
            opt.exact_set = set;
        } else if (!set.empty()) {
            proposal = make_arbiter_proposal(b.stack.stack, q_low, set);
        } else {
            proposal = std::make_shared<UniformSphereProposal>(env.descriptor().action_dim);
        }
        b.policy = std::make_unique<ArbiterPolicy>(ComposedQ(b.stack.stack, q_low), proposal, opt);
        return b;
    }
    throw ConfigError("policy.kind: unknown policy '" + kind + "'");
}

std::string eval_report_csv(const EvalReport& report, int subtask_count) {
    std::ostringstream out;
    out << "episode";
    for (int i = 1; i <= subtask_count; ++i) out << ",return_" << i;
    out << ",goal_reached,violations,collisions";
    for (int i = 1; i <= subtask_count; ++i) out << ",first_hit_" << i;
    out << "\n";
    for (std::size_t e = 0; e < report.episodes.size(); ++e) {
        const auto& ep = report.episodes[e];
        out << e;
        for (double r : ep.returns) out << "," << format_number(r);
        out << "," << (ep.goal_reached ? 1 : 0) << "," << ep.violations << "," << ep.collisions;
        for (int h : ep.first_hit) out << "," << h;
        out << "\n";
    }
    return out.str();
}

std::string indifference_dump_json(const ConstraintStack& stack, const SoftQ* q_low,
                                   const StateVec& state, const std::vector<ActionVec>& bins) {
    json j;
    j["state"] = state;
    json angles = json::array();
    for (const auto& a : bins) angles.push_back(std::atan2(a[1], a[0]));
    j["bin_angles"] = angles;
    json per_constraint = json::array();
    std::vector<char> mask(bins.size());
    std::vector<char> global(bins.size(), 1);
    for (std::size_t i = 0; i < stack.size(); ++i) {
        ConstraintStack single(std::vector<IndifferenceConstraint>{stack.at(i)});
        single.mask(state, bins, mask);
        json bits = json::array();
        for (std::size_t k = 0; k < bins.size(); ++k) {
            bits.push_back(static_cast<int>(mask[k]));
            if (!mask[k]) global[k] = 0;
        }
        per_constraint.push_back(bits);
    }
    j["indicator_bits"] = per_constraint;
    json gbits = json::array();
    for (char c : global) gbits.push_back(static_cast<int>(c));
    j["global_bits"] = gbits;
    if (q_low) {
        std::vector<double> qs(bins.size());
        q_low->values(state, bins, qs);
        j["q_low"] = qs;
    }
    return j.dump();
}

int cmd_pretrain(RunContext& ctx) {
    auto env = make_env(ctx.cfg);
    TrainConfig tcfg = make_train_config(ctx.cfg);
    tcfg.seed = ctx.seed;
    const int subtask = static_cast<int>(ctx.cfg.get_int("task.subtask"));
    info("pretraining subtask " + std::to_string(subtask));
    PretrainResult result = pretrain_subtask(*env, subtask, tcfg);
    const std::string qpath = ctx.path("q_" + std::to_string(subtask) + ".qsnap");
    save_snapshot(*result.q, qpath);
    ctx.note_output(qpath);
    const std::string bpath = ctx.path("buffer_" + std::to_string(subtask) + ".psqdbuf");
    save_buffer(result.buffer, bpath);
    ctx.note_output(bpath);
    ctx.write_text("report.csv", result.report.csv(env->descriptor().subtask_count));
    ctx.finish();
    return 0;
}

int cmd_compose(RunContext& ctx) {
    auto env = make_env(ctx.cfg);
    Config& cfg = ctx.cfg;
    if (!cfg.has("policy.kind")) cfg.set("policy.kind", "arbiter");
    PolicyBundle b = make_policy(cfg, *env);
    EvalOptions opts;
    opts.check_stack = &b.stack.stack;
    opts.goal_subtask = static_cast<int>(cfg.get_int("eval.goal_subtask", 0));
    opts.parallel = static_cast<int>(cfg.get_int("eval.parallel", 1));
    const int episodes = static_cast<int>(cfg.get_int("eval.episodes", 100));
    EvalReport report = evaluate(*env, *b.policy, episodes, ctx.seed, opts);
    ctx.write_text("report.csv", eval_report_csv(report, env->descriptor().subtask_count));
    info("zero-shot eval: reach=" + format_number(report.goal_reach_fraction) +
         " violations=" + std::to_string(report.violations));

    if (cfg.has("dump.states")) {
        const SoftQ* q_low = b.snapshots.empty() ? nullptr : b.snapshots.back().get();
        const auto bins = action_set_for(*env, q_low, cfg);
        int idx = 0;
        for (const auto& [x, y] : cfg.get_int_pairs("dump.states")) {
            const StateVec s = {static_cast<double>(x), static_cast<double>(y)};
            ctx.write_text("dumps/indifference_" + std::to_string(idx++) + ".json",
                           indifference_dump_json(b.stack.stack, q_low, s, bins));
        }
    }
    ctx.finish();
    return 0;
}

int cmd_adapt(RunContext& ctx) {
    auto env = make_env(ctx.cfg);
    Config& cfg = ctx.cfg;
    TrainConfig tcfg = make_train_config(cfg);
    tcfg.seed = ctx.seed;
    const int subtask = static_cast<int>(cfg.get_int("task.subtask"));
    const std::string mode_text = cfg.get_string("task.mode", "online");
    AdaptMode mode;
    if (mode_text == "online")
        mode = AdaptMode::Online;
    else if (mode_text == "offline")
        mode = AdaptMode::Offline;
    else
        throw ConfigError("task.mode: expected online or offline, got '" + mode_text + "'");

    StackBundle stack = make_stack(cfg, *env);
    std::shared_ptr<const SoftQ> pretrained;
    if (cfg.has("task.q")) {
        pretrained = load_shared(cfg.get_string("task.q"));
        if (!(pretrained->descriptor() == env->descriptor()))
            throw ConfigError("task.q snapshot does not match the environment descriptor");
    } else {
        // No snapshot: learn from scratch under the constraints.
        if (env->descriptor().action_kind == ActionKind::DiscreteSet) {
            const auto* grid = dynamic_cast<const Gridworld*>(env.get());
            pretrained = std::make_shared<TabularQ>(*grid, tcfg.gamma);
        } else if (env->descriptor().state_dim == 2) {
            pretrained = std::make_shared<GridQ>(env->descriptor(), tcfg.grid_nx, tcfg.grid_ny,
                                                 tcfg.grid_bins, tcfg.gamma);
        } else {
            Rng init = Rng(tcfg.seed).fork(0);
            pretrained =
                std::make_shared<MlpQ>(env->descriptor(), tcfg.mlp_hidden, tcfg.gamma, init);
        }
    }
    ReplayBuffer buffer = cfg.has("task.buffer")
                              ? load_buffer(cfg.get_string("task.buffer"))
                              : ReplayBuffer(env->descriptor(), tcfg.buffer_capacity, subtask);
    if (cfg.has("task.buffer") && !(buffer.descriptor() == env->descriptor()))
        throw ConfigError("task.buffer does not match the environment descriptor");
    if (mode == AdaptMode::Offline && buffer.size() == 0)
        throw ConfigError("task.mode = offline requires a non-empty task.buffer");

    info("adapting subtask " + std::to_string(subtask) + " (" + mode_text + ")");
    AdaptResult result = adapt_subtask(*env, stack.stack, subtask, *pretrained, buffer, tcfg, mode);
    const std::string qpath = ctx.path("q_" + std::to_string(subtask) + "_adapted.qsnap");
    save_snapshot(*result.q, qpath);
    ctx.note_output(qpath);
    ctx.write_text("report.csv", result.report.csv(env->descriptor().subtask_count));
    info("environment steps: " + std::to_string(result.report.env_steps));
    ctx.finish();
    return 0;
}

int cmd_eval(RunContext& ctx) {
    auto env = make_env(ctx.cfg);
    PolicyBundle b = make_policy(ctx.cfg, *env);
    EvalOptions opts;
    if (!b.stack.stack.empty()) opts.check_stack = &b.stack.stack;
    opts.goal_subtask = static_cast<int>(ctx.cfg.get_int("eval.goal_subtask", 0));
    opts.parallel = static_cast<int>(ctx.cfg.get_int("eval.parallel", 1));
    const int episodes = static_cast<int>(ctx.cfg.get_int("eval.episodes", 100));
    EvalReport report = evaluate(*env, *b.policy, episodes, ctx.seed, opts);
    ctx.write_text("report.csv", eval_report_csv(report, env->descriptor().subtask_count));
    std::ostringstream sum;
    sum << "episodes=" << episodes << " reach=" << format_number(report.goal_reach_fraction)
        << " violations=" << report.violations << " collisions=" << report.collisions;
    info(sum.str());
    ctx.finish();
    return 0;
}

int cmd_ablate_epsilon(RunContext& ctx) {
    auto env_ptr = make_env(ctx.cfg);
    const auto* env = dynamic_cast<const Nav2dEnv*>(env_ptr.get());
    if (!env) throw ConfigError("ablate-epsilon runs on env.kind = nav2d");
    Config& cfg = ctx.cfg;
    const auto epsilons = cfg.get_double_list("sweep.epsilons");
    if (epsilons.empty()) throw ConfigError("sweep.epsilons must list at least one value");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        if (epsilons[i] < 0.0) throw ConfigError("sweep.epsilons: values must be >= 0");
        if (i > 0 && epsilons[i] < epsilons[i - 1])
            throw ConfigError("sweep.epsilons: values must be sorted ascending");
    }
    auto q1 = load_shared(cfg.get_string("sweep.q1"));
    if (!(q1->descriptor() == env->descriptor()))
        throw ConfigError("sweep.q1 snapshot does not match the environment descriptor");
    TrainConfig tcfg = make_train_config(cfg);
    tcfg.seed = ctx.seed;
    const int subtask = static_cast<int>(cfg.get_int("sweep.subtask", 2));
    const int eval_episodes = static_cast<int>(cfg.get_int("eval.episodes", 100));
    std::vector<std::pair<int, int>> probes = {{0, 1}, {-6, -6}, {0, -4}, {6, 6}};
    if (cfg.has("sweep.probe_states")) probes = cfg.get_int_pairs("sweep.probe_states");

    const auto set = action_set_for(*env, q1.get(), cfg);
    std::ostringstream sweep_csv;
    sweep_csv << "epsilon,return_1,return_" << subtask
              << ",reach_fraction,violations,collisions\n";
    std::ostringstream measure_csv;
    measure_csv << "epsilon,probe,x,y,measure\n";

    for (const double eps : epsilons) {
        ConstraintStack stack({IndifferenceConstraint(q1, eps, MaxEstimator::exact(set))});
        for (std::size_t p = 0; p < probes.size(); ++p) {
            const StateVec s = {static_cast<double>(probes[p].first),
                                static_cast<double>(probes[p].second)};
            measure_csv << format_number(eps) << "," << p << "," << s[0] << "," << s[1] << ","
                        << format_number(global_indifference_measure(stack, s, set)) << "\n";
        }

        // Learn the low-priority task from scratch under this threshold.
        GridQ fresh(env->descriptor(), tcfg.grid_nx, tcfg.grid_ny, tcfg.grid_bins, tcfg.gamma);
        ReplayBuffer empty(env->descriptor(), tcfg.buffer_capacity, subtask);
        AdaptResult adapted =
            adapt_subtask(*env, stack, subtask, fresh, empty, tcfg, AdaptMode::Online);

        auto q_adapted = std::shared_ptr<const SoftQ>(std::move(adapted.q));
        auto proposal = make_arbiter_proposal(stack, q_adapted, set);
        ArbiterOptions aopt;
        aopt.batch_size = tcfg.arbiter_batch;
        aopt.rejection_cap = tcfg.rejection_cap;
        ArbiterPolicy policy(ComposedQ(stack, q_adapted), proposal, aopt);
        EvalOptions eopts;
        eopts.check_stack = &stack;
        eopts.goal_subtask = subtask;
        EvalReport ev = evaluate(*env, policy, eval_episodes, ctx.seed ^ 0xABull, eopts);

        sweep_csv << format_number(eps) << "," << format_number(ev.mean_returns[0]) << ","
                  << format_number(ev.mean_returns[subtask - 1]) << ","
                  << format_number(ev.goal_reach_fraction) << ","
                  << (adapted.report.total_violations + ev.violations) << ","
                  << (adapted.report.total_collisions + ev.collisions) << "\n";
        info("epsilon " + format_number(eps) + " done");
    }
    ctx.write_text("sweep.csv", sweep_csv.str());
    ctx.write_text("measures.csv", measure_csv.str());
    ctx.finish();
    return 0;
}

int cmd_baseline(RunContext& ctx) {
    auto env = make_env(ctx.cfg);
    Config& cfg = ctx.cfg;
    const std::string kind = cfg.get_string("baseline.kind");
    if (kind == "sqd") {
        if (const auto* grid = dynamic_cast<const Gridworld*>(env.get())) {
            const double tol = cfg.get_double("baseline.tol", 1e-10);
            SqdTabularResult r = sqd_tabular(*grid, cfg.get_double("train.gamma", 0.99), tol);
            for (std::size_t i = 0; i < r.qs.size(); ++i) {
                const std::string p = ctx.path("sqd_q_" + std::to_string(i + 1) + ".qsnap");
                save_snapshot(r.qs[i], p);
                ctx.note_output(p);
            }
            info("sqd converged in " + std::to_string(r.sweeps) + " sweeps");
        } else {
            TrainConfig tcfg = make_train_config(cfg);
            tcfg.seed = ctx.seed;
            SqdTrainResult r = sqd_train(*env, tcfg);
            for (std::size_t i = 0; i < r.qs.size(); ++i) {
                const std::string p = ctx.path("sqd_q_" + std::to_string(i + 1) + ".qsnap");
                save_snapshot(*r.qs[i], p);
                ctx.note_output(p);
            }
            ctx.write_text("report.csv", r.report.csv(env->descriptor().subtask_count));
        }
        ctx.finish();
        return 0;
    }
    if (kind == "sql_comp") {
        std::vector<std::shared_ptr<const SoftQ>> parts;
        for (const auto& p : cfg.get_string_list("baseline.snapshots"))
            parts.push_back(load_shared(p));
        auto sum = sql_comp_compose(std::move(parts));
        StackBundle check = make_stack(cfg, *env);
        const auto set = action_set_for(*env, sum.get(), cfg);
        if (set.empty()) throw ConfigError("sql_comp baseline needs a finite action set");
        BoltzmannSetPolicy policy(sum, set);
        EvalOptions opts;
        if (!check.stack.empty()) opts.check_stack = &check.stack;
        opts.goal_subtask = static_cast<int>(cfg.get_int("eval.goal_subtask", 0));
        const int episodes = static_cast<int>(cfg.get_int("eval.episodes", 100));
        EvalReport report = evaluate(*env, policy, episodes, ctx.seed, opts);
        ctx.write_text("report.csv", eval_report_csv(report, env->descriptor().subtask_count));
        info("sql_comp violations=" + std::to_string(report.violations));
        ctx.finish();
        return 0;
    }
    if (kind == "penalty") {
        StackBundle stack = make_stack(cfg, *env);
        TrainConfig tcfg = make_train_config(cfg);
        tcfg.seed = ctx.seed;
        const double penalty = cfg.get_double("baseline.penalty", 100.0);
        const int subtask = static_cast<int>(cfg.get_int("baseline.subtask", 2));
        PenaltyTrainResult r = penalty_ablation_train(*env, stack.stack, penalty, subtask, tcfg);
        const std::string p = ctx.path("penalty_q.qsnap");
        save_snapshot(*r.q, p);
        ctx.note_output(p);
        ctx.write_text("report.csv", r.report.csv(env->descriptor().subtask_count));
        info("penalty ablation violations=" + std::to_string(r.report.total_violations));
        ctx.finish();
        return 0;
    }
    if (kind == "oracle") {
        const int goal_subtask =
            static_cast<int>(cfg.get_int("eval.goal_subtask", env->descriptor().subtask_count));
        std::unique_ptr<GridOracle> oracle;
        if (const auto* nav = dynamic_cast<const Nav2dEnv*>(env.get())) {
            oracle = std::make_unique<GridOracle>(GridOracle::for_nav2d(
                *nav, static_cast<int>(cfg.get_int("baseline.resolution", 200)),
                static_cast<int>(cfg.get_int("baseline.bins", 64)), goal_subtask));
        } else if (const auto* grid = dynamic_cast<const Gridworld*>(env.get())) {
            oracle = std::make_unique<GridOracle>(GridOracle::for_gridworld(*grid));
        } else {
            throw ConfigError("baseline.kind oracle supports nav2d and gridworld");
        }
        const int episodes = static_cast<int>(cfg.get_int("eval.episodes", 100));
        std::ostringstream csv;
        csv << "episode,steps,reachable,optimal_return\n";
        for (int e = 0; e < episodes; ++e) {
            Rng rng(ctx.seed ^ static_cast<std::uint64_t>(e));
            const StateVec start = env->sample_start(rng);
            const OracleQuery q = oracle->query(start);
            csv << e << "," << q.steps << "," << (q.reachable ? 1 : 0) << ","
                << format_number(q.optimal_return) << "\n";
        }
        ctx.write_text("oracle.csv", csv.str());
        ctx.finish();
        return 0;
    }
    throw ConfigError("baseline.kind: unknown baseline '" + kind + "'");
}

int cmd_export(RunContext& ctx) {
    Config& cfg = ctx.cfg;
    const std::string format = cfg.get_string("export.format");
    if (format == "grid-json") {
        auto q = load_snapshot(cfg.get_string("export.artifact"));
        const auto* g = dynamic_cast<const GridQ*>(q.get());
        if (!g) throw ConfigError("export.format grid-json requires a grid snapshot");
        ctx.write_text("dumps/grid.json", grid_value_json(*g));
        ctx.finish();
        return 0;
    }
    if (format == "trajectory-csv") {
        auto env = make_env(cfg);
        PolicyBundle b = make_policy(cfg, *env);
        const int episodes = static_cast<int>(cfg.get_int("export.episodes", 1));
        std::ostringstream csv;
        csv << "episode,t,x,y,action_angle_bin\n";
        for (int e = 0; e < episodes; ++e) {
            Rng rng(ctx.seed ^ static_cast<std::uint64_t>(e));
            StateVec s = env->sample_start(rng);
            for (int t = 0; t < env->descriptor().horizon; ++t) {
                const ActionVec a = b.policy->act(s, rng);
                double th = std::atan2(a[1], a[0]);
                if (th < 0) th += 2.0 * M_PI;
                const int bin = static_cast<int>(th / (2.0 * M_PI) * 16.0) % 16;
                csv << e << "," << t << "," << format_number(s[0]) << "," << format_number(s[1])
                    << "," << bin << "\n";
                StepResult sr = env->step(s, a, t);
                s = std::move(sr.next);
                if (sr.done) break;
            }
        }
        ctx.write_text("dumps/trajectory.csv", csv.str());
        ctx.finish();
        return 0;
    }
    if (format == "indifference-json") {
        auto env = make_env(cfg);
        StackBundle stack = make_stack(cfg, *env);
        std::shared_ptr<const SoftQ> q_low;
        if (cfg.has("policy.q")) q_low = load_shared(cfg.get_string("policy.q"));
        const auto bins = action_set_for(*env, q_low.get(), cfg);
        if (bins.empty()) throw ConfigError("indifference-json needs a finite action set");
        int idx = 0;
        for (const auto& [x, y] : cfg.get_int_pairs("dump.states")) {
            const StateVec s = {static_cast<double>(x), static_cast<double>(y)};
            ctx.write_text("dumps/indifference_" + std::to_string(idx++) + ".json",
                           indifference_dump_json(stack.stack, q_low.get(), s, bins));
        }
        ctx.finish();
        return 0;
    }
    throw ConfigError("export.format: unknown format '" + format + "'");
}

} // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Prioritized soft Q-decomposition: learning, composing, and adapting "
                 "maximum-entropy subtask solutions under lexicographic priorities"};
    app.require_subcommand(1);

    struct CommonArgs {
        std::string config_file;
        std::vector<std::string> overrides;
        std::string out_dir;
        std::uint64_t seed = 0;
        bool seed_set = false;
        int parallel_eval = 0;
    };

    std::map<std::string, CommonArgs> args;
    const std::vector<std::string> commands = {"pretrain",       "compose",  "adapt", "eval",
                                               "ablate-epsilon", "baseline", "export"};
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name);
        auto& a = args[name];
        sub->add_option("--config", a.config_file, "run configuration file (key = value)");
        sub->add_option("--set", a.overrides, "override a config key, e.g. --set train.steps=500");
        sub->add_option("--out", a.out_dir, "run output directory");
        sub->add_option("--seed", a.seed, "root RNG seed")->each([&a](const std::string&) {
            a.seed_set = true;
        });
        sub->add_option("--parallel-eval", a.parallel_eval,
                        "fan evaluation episodes across N workers");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    const CommonArgs& a = args[command];

    try {
        RunContext ctx;
        ctx.command = command;
        if (!a.config_file.empty()) ctx.cfg = load_config_file(a.config_file, command);
        for (const auto& o : a.overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects key=value, got '" + o + "'");
            ctx.cfg.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (a.seed_set) ctx.cfg.set("train.seed", std::to_string(a.seed));
        if (a.parallel_eval > 0) ctx.cfg.set("eval.parallel", std::to_string(a.parallel_eval));
        ctx.seed = ctx.cfg.get_u64("train.seed", 1);

        const char* out_root = std::getenv("PSQD_OUT_ROOT");
        ctx.out_dir = a.out_dir.empty()
                          ? fs::path(out_root ? out_root : ".") / ("run-" + command)
                          : fs::path(a.out_dir);

        if (command == "pretrain") return cmd_pretrain(ctx);
        if (command == "compose") return cmd_compose(ctx);
        if (command == "adapt") return cmd_adapt(ctx);
        if (command == "eval") return cmd_eval(ctx);
        if (command == "ablate-epsilon") return cmd_ablate_epsilon(ctx);
        if (command == "baseline") return cmd_baseline(ctx);
        if (command == "export") return cmd_export(ctx);
        throw ConfigError("unknown command: " + command);
    } catch (const ConfigError& e) {
        std::cerr << "psqd: configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "psqd: " << e.what() << "\n";
        return 3;
    }
}

} // namespace psqd
