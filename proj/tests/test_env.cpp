#include "psqd/env.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace psqd;

TEST_CASE("nav2d reward formulas") {
    Nav2dEnv env;

    SUBCASE("goal subtask branches") {
        CHECK(env.reward(2, {0.0, 8.0}) == 0.0);
        CHECK(env.reward(2, {0.0, 0.0}) == -5.0);
        CHECK(env.reward(3, {8.0, 0.0}) == 0.0);
        CHECK(env.reward(3, {0.0, 0.0}) == -5.0);
    }

    SUBCASE("collision branch on the obstacle surface") {
        // (2.5, 0) lies exactly on the inner face of the right leg: d = 0.
        CHECK(env.obstacle_distance({2.5, 0.0}) == doctest::Approx(0.0));
        CHECK(env.reward(1, {2.5, 0.0}) == doctest::Approx(-11.0));
    }

    SUBCASE("proximity penalty far from the obstacle") {
        // Custom single-rectangle geometry puts a state exactly 10 away.
        Nav2dConfig cfg;
        cfg.obstacle = {{-1.0, -1.0, 1.0, 0.0}};
        Nav2dEnv custom(cfg);
        CHECK(custom.obstacle_distance({0.0, 10.0}) == doctest::Approx(10.0));
        CHECK(custom.reward(1, {0.0, 10.0}) == doctest::Approx(-std::exp(-50.0)));
    }

    SUBCASE("unknown subtask") {
        CHECK_THROWS_AS(env.reward(4, {0.0, 0.0}), DomainError);
        CHECK_THROWS_AS(env.reward(0, {0.0, 0.0}), DomainError);
    }
}

TEST_CASE("nav2d step dynamics") {
    Nav2dConfig cfg;
    cfg.step_scale = 1.0;
    Nav2dEnv env(cfg);

    SUBCASE("additive dynamics") {
        const auto r = env.step({0.0, 0.0}, {0.0, 1.0});
        CHECK(r.next[0] == doctest::Approx(0.0));
        CHECK(r.next[1] == doctest::Approx(1.0));
        CHECK(r.reward.size() == 3);
    }

    SUBCASE("clipping at the boundary") {
        const auto r = env.step({0.0, 10.0}, {0.0, 1.0});
        CHECK(r.next[1] == doctest::Approx(10.0));
    }

    SUBCASE("partial clip") {
        const auto r = env.step({9.5, 0.0}, {1.0, 0.0});
        CHECK(r.next[0] == doctest::Approx(10.0));
    }

    SUBCASE("non-unit action rejected") {
        CHECK_THROWS_AS(env.step({0.0, 0.0}, {0.5, 0.0}), DomainError);
        CHECK_THROWS_AS(env.step({0.0, 0.0}, {1.0, 1.0}), DomainError);
    }

    SUBCASE("unit norm within tolerance accepted") {
        const double c = std::cos(0.3), s = std::sin(0.3);
        CHECK_NOTHROW(env.step({0.0, 0.0}, {c, s}));
    }

    SUBCASE("horizon sets done") {
        CHECK_FALSE(env.step({0.0, 0.0}, {0.0, 1.0}, 0).done);
        CHECK(env.step({0.0, 0.0}, {0.0, 1.0}, cfg.horizon - 1).done);
    }
}

TEST_CASE("nav2d invariants") {
    Nav2dEnv env;
    Rng rng(11);

    SUBCASE("reward bounds over random states") {
        for (int i = 0; i < 2000; ++i) {
            const StateVec s = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
            const double r1 = env.reward(1, s);
            CHECK(r1 <= 0.0);
            CHECK(r1 >= -11.0);
            const double r2 = env.reward(2, s);
            CHECK((r2 == 0.0 || r2 == -5.0));
            const double r3 = env.reward(3, s);
            CHECK((r3 == 0.0 || r3 == -5.0));
        }
    }

    SUBCASE("dynamics determinism") {
        for (int i = 0; i < 100; ++i) {
            const StateVec s = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
            const ActionVec a = rng.unit_vector(2);
            const auto r1 = env.step(s, a);
            const auto r2 = env.step(s, a);
            CHECK(r1.next == r2.next);
            CHECK(r1.reward == r2.reward);
        }
    }

    SUBCASE("clipping idempotence on the boundary") {
        const auto top = env.step({3.0, 10.0}, {0.0, 1.0});
        CHECK(top.next == StateVec{3.0, 10.0});
        const auto right = env.step({10.0, -2.0}, {1.0, 0.0});
        CHECK(right.next == StateVec{10.0, -2.0});
    }

    SUBCASE("start states respect the margin") {
        for (int i = 0; i < 200; ++i) {
            const StateVec s = env.sample_start(rng);
            CHECK(env.obstacle_distance(s) >= env.config().start_margin);
        }
    }
}

TEST_CASE("gridworld construction and rewards") {
    SUBCASE("5x5 with goal top row") {
        GridworldConfig cfg;
        cfg.width = 5;
        cfg.height = 5;
        for (int x = 0; x < 5; ++x) cfg.goals.emplace_back(x, 4);
        Gridworld env(cfg);
        CHECK(env.n_states() == 25);
        CHECK(Gridworld::n_actions() == 4);
    }

    SUBCASE("3x3 center obstacle collision value") {
        GridworldConfig cfg;
        cfg.width = 3;
        cfg.height = 3;
        cfg.obstacles = {{1, 1}};
        cfg.goals = {{1, 2}};
        Gridworld env(cfg);
        // Entering the center from below (action 0 = +y).
        CHECK(env.reward_sa(1, env.index_of(1, 0), 0) == doctest::Approx(-11.0));
        // Moving along the edge does not collide.
        CHECK(env.reward_sa(1, env.index_of(0, 0), 0) == doctest::Approx(0.0));
    }

    SUBCASE("2x2 goal rewards") {
        GridworldConfig cfg;
        cfg.width = 2;
        cfg.height = 2;
        cfg.goals = {{1, 1}};
        Gridworld env(cfg);
        CHECK(env.reward(2, {1.0, 1.0}) == 0.0);
        CHECK(env.reward(2, {0.0, 0.0}) == -5.0);
        CHECK(env.reward(2, {1.0, 0.0}) == -5.0);
    }

    SUBCASE("goal overlapping an obstacle is rejected") {
        GridworldConfig cfg;
        cfg.width = 3;
        cfg.height = 3;
        cfg.obstacles = {{1, 1}};
        cfg.goals = {{1, 1}};
        CHECK_THROWS_AS(Gridworld{cfg}, DomainError);
    }

    SUBCASE("dimensions below 2 are rejected") {
        GridworldConfig cfg;
        cfg.width = 1;
        cfg.height = 5;
        CHECK_THROWS_AS(Gridworld{cfg}, DomainError);
    }

    SUBCASE("moves off the grid stay put") {
        GridworldConfig cfg;
        cfg.width = 3;
        cfg.height = 3;
        cfg.goals = {{2, 2}};
        Gridworld env(cfg);
        CHECK(env.next_index(env.index_of(0, 0), 3) == env.index_of(0, 0));
        CHECK(env.next_index(env.index_of(0, 0), 2) == env.index_of(0, 0));
        CHECK(env.next_index(env.index_of(0, 0), 1) == env.index_of(1, 0));
    }
}

TEST_CASE("high-dimensional point environment") {
    SUBCASE("distance reward at the target") {
        HighDimConfig cfg;
        cfg.dim = 2;
        HighDimPointEnv env(cfg);
        CHECK(env.reward(2, env.target()) == doctest::Approx(0.0));
    }

    SUBCASE("box penalty inside and outside, d = 9") {
        HighDimConfig cfg;
        cfg.dim = 9;
        HighDimPointEnv env(cfg);
        StateVec inside(9, 0.0);
        inside[0] = inside[1] = inside[2] = 0.5;
        CHECK(env.reward(1, inside) == doctest::Approx(-10.0));
        CHECK(env.collision(inside));
        StateVec outside(9, 0.0);
        CHECK(env.reward(1, outside) == doctest::Approx(0.0));
        CHECK_FALSE(env.collision(outside));
    }

    SUBCASE("dimension range is enforced") {
        HighDimConfig low;
        low.dim = 1;
        CHECK_THROWS_AS(HighDimPointEnv{low}, DomainError);
        HighDimConfig high;
        high.dim = 17;
        CHECK_THROWS_AS(HighDimPointEnv{high}, DomainError);
    }

    SUBCASE("starts avoid the box") {
        HighDimConfig cfg;
        cfg.dim = 9;
        HighDimPointEnv env(cfg);
        Rng rng(3);
        for (int i = 0; i < 100; ++i) CHECK_FALSE(env.inside_box(env.sample_start(rng)));
    }
}
