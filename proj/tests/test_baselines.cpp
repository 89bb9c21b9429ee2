#include "psqd/baselines.hpp"

#include "psqd/config.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace psqd;
using namespace psqd::testing;

namespace {

GridworldConfig cap_world_config() {
    // 7x7 with a cap-shaped obstacle and the goal along the top row.
    GridworldConfig cfg;
    cfg.width = 7;
    cfg.height = 7;
    cfg.obstacles = {{2, 2}, {2, 3}, {2, 4}, {4, 2}, {4, 3}, {4, 4}, {3, 4}};
    for (int x = 0; x < 7; ++x) cfg.goals.emplace_back(x, 6);
    return cfg;
}

std::vector<ActionVec> index_actions(int n) {
    std::vector<ActionVec> out;
    for (int a = 0; a < n; ++a) out.push_back({static_cast<double>(a)});
    return out;
}

RewardTable reward_table_of(const Gridworld& env, int subtask) {
    RewardTable r(static_cast<std::size_t>(env.n_states()) * 4);
    for (int s = 0; s < env.n_states(); ++s)
        for (int a = 0; a < 4; ++a) r[s * 4 + a] = env.reward_sa(subtask, s, a);
    return r;
}

} // namespace

TEST_CASE("tabular soft Q-decomposition") {
    Gridworld env(cap_world_config());
    const TabularDyn dyn = TabularDyn::from(env);
    const double gamma = 0.9;

    SUBCASE("a single subtask degenerates to plain soft Q-learning") {
        const auto sqd = sqd_tabular(env, gamma, 1e-11, {2});
        const auto plain = soft_value_iteration(dyn, reward_table_of(env, 2), {}, gamma, 1e-12);
        CHECK(sup_diff(sqd.qs[0].raw(), plain.q.raw()) <= 1e-8);
    }

    SUBCASE("a zero-reward summand leaves the arbiter at the other subtask") {
        std::vector<RewardTable> rewards = {reward_table_of(env, 1),
                                            RewardTable(dyn.next.size(), 0.0)};
        const auto sqd = sqd_tabular(dyn, rewards, gamma, 1e-11);
        const auto solo = soft_value_iteration(dyn, rewards[0], {}, gamma, 1e-12);
        // Sum of the decomposed Qs equals the single-task Q, so the arbiter
        // (Boltzmann in the sum) is the subtask-1 agent.
        std::vector<double> sum(dyn.next.size());
        for (std::size_t i = 0; i < sum.size(); ++i)
            sum[i] = sqd.qs[0].raw()[i] + sqd.qs[1].raw()[i];
        CHECK(sup_diff(sum, solo.q.raw()) <= 1e-8);
    }

    SUBCASE("two-subtask decomposition sums to the scalarized fixed point") {
        const auto sqd = sqd_tabular(env, gamma, 1e-11);
        RewardTable sum_reward = reward_table_of(env, 1);
        const RewardTable r2 = reward_table_of(env, 2);
        for (std::size_t i = 0; i < sum_reward.size(); ++i) sum_reward[i] += r2[i];
        const auto scalarized =
            oracle_soft_vi(dyn.n_states, 4, dyn.next, sum_reward, {}, gamma, 800);
        std::vector<double> sum(dyn.next.size());
        for (std::size_t i = 0; i < sum.size(); ++i)
            sum[i] = sqd.qs[0].raw()[i] + sqd.qs[1].raw()[i];
        CHECK(sup_diff(sum, scalarized) <= 1e-8);
    }
}

TEST_CASE("summed-Q composition") {
    Gridworld env(cap_world_config());
    const double gamma = 0.9;
    auto q1 = std::make_shared<TabularQ>(prioritized_soft_vi(env, {}, 1, gamma, 1e-10).q);
    auto q2 = std::make_shared<TabularQ>(prioritized_soft_vi(env, {}, 2, gamma, 1e-10).q);

    SUBCASE("doubling a Q preserves its argmax sets") {
        auto sum = sql_comp_compose({q2, q2});
        for (int s = 0; s < env.n_states(); ++s) {
            int best_single = 0, best_double = 0;
            for (int a = 1; a < 4; ++a) {
                if (q2->at(s, a) > q2->at(s, best_single)) best_single = a;
                const StateVec st = env.state_of(s);
                if (sum->value(st, {static_cast<double>(a)}) >
                    sum->value(st, {static_cast<double>(best_double)}))
                    best_double = a;
            }
            CHECK(best_single == best_double);
        }
    }

    SUBCASE("adding a constant component preserves the Boltzmann law") {
        auto flat = std::make_shared<TabularQ>(env, gamma);
        for (auto& v : flat->raw()) v = 3.7;
        auto sum = sql_comp_compose({q2, flat});
        BoltzmannSetProposal p_sum(sum, index_actions(4));
        BoltzmannSetProposal p_single(q2, index_actions(4));
        for (int s = 0; s < env.n_states(); s += 5) {
            const StateVec st = env.state_of(s);
            for (int a = 0; a < 4; ++a) {
                const ActionVec act = {static_cast<double>(a)};
                CHECK(p_sum.density(st, act) ==
                      doctest::Approx(p_single.density(st, act)).epsilon(1e-12));
            }
        }
    }

    SUBCASE("descriptor mismatch is a composition error") {
        Gridworld other(GridworldConfig{4, 4, {}, {{0, 3}}, 50});
        auto q_other = std::make_shared<TabularQ>(other, gamma);
        CHECK_THROWS_AS(sql_comp_compose({q1, q_other}), DomainError);
    }
}

TEST_CASE("penalty ablation in the navigation world") {
    Nav2dConfig ecfg;
    ecfg.horizon = 40;
    Nav2dEnv env(ecfg);

    TrainConfig tcfg;
    tcfg.steps = 1500;
    tcfg.batch = 32;
    tcfg.min_buffer = 64;
    tcfg.grid_nx = 24;
    tcfg.grid_ny = 24;
    tcfg.grid_bins = 16;
    tcfg.seed = 5;
    tcfg.eval_interval = 1500;
    tcfg.eval_episodes = 0;

    // Constraint from a hand-built Q that dislikes moving up anywhere near
    // the obstacle row; enough structure for the violation counter.
    const auto desc = env.descriptor();
    auto q1 = std::make_shared<LinearActionQ>(desc, std::vector<double>{0.0, -2.0});
    const auto bins = angular_action_bins(tcfg.grid_bins);
    ConstraintStack stack({IndifferenceConstraint(q1, 0.5, MaxEstimator::exact(bins))});

    SUBCASE("unconstrained exploration records violations") {
        const auto r = penalty_ablation_train(env, stack, 100.0, 2, tcfg);
        CHECK(r.report.total_violations > 0);
    }

    SUBCASE("zero penalty reproduces plain pretraining bitwise") {
        const auto plain = pretrain_subtask(env, 2, tcfg);
        const auto ablated = penalty_ablation_train(env, ConstraintStack(), 0.0, 2, tcfg);
        const auto* qa = dynamic_cast<const GridQ*>(plain.q.get());
        const auto* qb = dynamic_cast<const GridQ*>(ablated.q.get());
        REQUIRE(qa);
        REQUIRE(qb);
        bool equal = true;
        for (int ix = 0; ix < qa->nx() && equal; ++ix)
            for (int iy = 0; iy < qa->ny() && equal; ++iy)
                for (int b = 0; b < qa->n_bins(); ++b)
                    if (qa->node(ix, iy, b) != qb->node(ix, iy, b)) {
                        equal = false;
                        break;
                    }
        CHECK(equal);
    }

    SUBCASE("negative penalty is rejected") {
        CHECK_THROWS_AS(penalty_ablation_train(env, stack, -1.0, 2, tcfg), ConfigError);
    }
}

TEST_CASE("shortest-path oracle") {
    SUBCASE("empty grid, goal adjacent to start") {
        GridworldConfig cfg;
        cfg.width = 5;
        cfg.height = 5;
        cfg.goals = {{0, 1}};
        Gridworld env(cfg);
        const auto oracle = GridOracle::for_gridworld(env);
        const auto q = oracle.query({0.0, 0.0});
        CHECK(q.reachable);
        CHECK(q.steps == 1);
        CHECK(q.optimal_return == doctest::Approx(-5.0));
    }

    SUBCASE("start inside the goal region") {
        GridworldConfig cfg;
        cfg.width = 4;
        cfg.height = 4;
        cfg.goals = {{2, 2}};
        Gridworld env(cfg);
        const auto q = GridOracle::for_gridworld(env).query({2.0, 2.0});
        CHECK(q.steps == 0);
        CHECK(q.optimal_return == 0.0);
    }

    SUBCASE("cross-check against the reference BFS") {
        Gridworld env(cap_world_config());
        const auto oracle = GridOracle::for_gridworld(env);
        std::vector<char> blocked(env.n_states(), 0);
        std::vector<char> goal(env.n_states(), 0);
        for (int s = 0; s < env.n_states(); ++s) {
            blocked[s] = env.is_obstacle(s) ? 1 : 0;
            goal[s] = env.is_goal(s) ? 1 : 0;
        }
        const auto expect = bfs_steps(7, 7, blocked, goal);
        for (int s = 0; s < env.n_states(); ++s) {
            if (env.is_obstacle(s)) continue;
            CHECK(oracle.query(env.state_of(s)).steps == expect[s]);
        }
    }

    SUBCASE("escaping the cap detours around the legs") {
        Nav2dEnv env;
        const auto oracle = GridOracle::for_nav2d(env, 200, 64, 2);
        // From inside the cup the detour is much longer than the straight
        // line to the goal region.
        const auto inside = oracle.query({0.0, 1.0});
        CHECK(inside.reachable);
        const double straight_steps = (7.0 - 1.0) / env.config().step_scale;
        CHECK(inside.steps > straight_steps + 4);
        // From open space the path length is near the straight line.
        const auto open = oracle.query({-8.0, 0.0});
        CHECK(open.reachable);
        CHECK(open.steps <= (7.0 - 0.0) / env.config().step_scale + 4);
        CHECK(open.steps < inside.steps);
    }

    SUBCASE("unreachable starts are reported, not thrown") {
        GridworldConfig cfg;
        cfg.width = 5;
        cfg.height = 3;
        cfg.obstacles = {{2, 0}, {2, 1}, {2, 2}};
        cfg.goals = {{4, 1}};
        Gridworld env(cfg);
        const auto q = GridOracle::for_gridworld(env).query({0.0, 0.0});
        CHECK_FALSE(q.reachable);
        CHECK(q.steps == -1);
        CHECK(q.optimal_return == doctest::Approx(-5.0 * env.descriptor().horizon));
    }
}
