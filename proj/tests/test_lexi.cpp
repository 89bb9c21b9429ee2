#include "psqd/lexi.hpp"

#include "psqd/env.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <memory>
#include <set>

using namespace psqd;
using namespace psqd::testing;

namespace {

std::shared_ptr<TabularQ> row_q(std::vector<double> row) {
    auto q = std::make_shared<TabularQ>(1, static_cast<int>(row.size()), 0.9);
    for (std::size_t a = 0; a < row.size(); ++a) q->at(0, static_cast<int>(a)) = row[a];
    return q;
}

std::vector<ActionVec> index_actions(int n) {
    std::vector<ActionVec> out;
    for (int a = 0; a < n; ++a) out.push_back({static_cast<double>(a)});
    return out;
}

GridworldConfig goal_top_config(int w, int h) {
    GridworldConfig cfg;
    cfg.width = w;
    cfg.height = h;
    for (int x = 0; x < w; ++x) cfg.goals.emplace_back(x, h - 1);
    return cfg;
}

} // namespace

TEST_CASE("constraint indicator") {
    SUBCASE("huge epsilon permits everything") {
        auto q = row_q({5.0, -3.0, 0.0});
        IndifferenceConstraint c(q, 1e9, MaxEstimator::exact(index_actions(3)));
        for (int a = 0; a < 3; ++a) CHECK(c.indicator({0.0}, {static_cast<double>(a)}));
    }

    SUBCASE("epsilon zero keeps exactly the argmax set, ties included") {
        auto q = row_q({3.0, 1.0, 3.0});
        IndifferenceConstraint c(q, 0.0, MaxEstimator::exact(index_actions(3)));
        CHECK(c.indicator({0.0}, {0.0}));
        CHECK_FALSE(c.indicator({0.0}, {1.0}));
        CHECK(c.indicator({0.0}, {2.0}));
    }

    SUBCASE("boundary is non-strict") {
        auto q = row_q({1.0, 0.0});
        IndifferenceConstraint c(q, 1.0, MaxEstimator::exact(index_actions(2)));
        CHECK(c.indicator({0.0}, {1.0})); // gap exactly epsilon
    }

    SUBCASE("negative epsilon is rejected") {
        auto q = row_q({0.0, 0.0});
        CHECK_THROWS_AS(IndifferenceConstraint(q, -0.1, MaxEstimator::exact(index_actions(2))),
                        DomainError);
    }
}

TEST_CASE("indifference sets") {
    SUBCASE("constant Q keeps the full candidate set") {
        auto q = row_q({2.0, 2.0, 2.0, 2.0});
        IndifferenceConstraint c(q, 0.0, MaxEstimator::exact(index_actions(4)));
        const auto set = indifference_set(c, {0.0}, index_actions(4));
        CHECK(set.size() == 4);
    }

    SUBCASE("epsilon monotonicity as set inclusion") {
        Rng rng(7);
        for (int trial = 0; trial < 25; ++trial) {
            std::vector<double> row(6);
            for (auto& v : row) v = rng.uniform(-3.0, 3.0);
            auto q = row_q(row);
            IndifferenceConstraint tight(q, 0.1, MaxEstimator::exact(index_actions(6)));
            IndifferenceConstraint loose(q, 1.0, MaxEstimator::exact(index_actions(6)));
            const auto small = indifference_set(tight, {0.0}, index_actions(6));
            const auto large = indifference_set(loose, {0.0}, index_actions(6));
            std::set<double> large_ids;
            for (const auto& a : large) large_ids.insert(a[0]);
            for (const auto& a : small) CHECK(large_ids.count(a[0]) == 1);
        }
    }

    SUBCASE("gridworld set matches exhaustive enumeration") {
        Gridworld env(goal_top_config(5, 5));
        const auto vi = prioritized_soft_vi(env, ConstraintStack(), 2, 0.99, 1e-10);
        auto q = std::make_shared<TabularQ>(vi.q);
        const double eps = 0.63;
        IndifferenceConstraint c(q, eps, MaxEstimator::exact(index_actions(4)));
        for (int s = 0; s < env.n_states(); ++s) {
            const StateVec state = env.state_of(s);
            const auto set = indifference_set(c, state, index_actions(4));
            std::set<int> got;
            for (const auto& a : set) got.insert(static_cast<int>(a[0]));
            // Direct four-action check.
            double mx = -1e300;
            for (int a = 0; a < 4; ++a) mx = std::max(mx, q->at(s, a));
            for (int a = 0; a < 4; ++a) {
                const bool expect = mx - q->at(s, a) <= eps;
                CHECK(got.count(a) == (expect ? 1u : 0u));
            }
        }
    }
}

TEST_CASE("constant shift invariance of constraints") {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> row(5);
        for (auto& v : row) v = rng.uniform(-4.0, 4.0);
        auto q = row_q(row);
        std::vector<double> shifted_row = row;
        for (auto& v : shifted_row) v += 57.5;
        auto q_shift = row_q(shifted_row);
        const double eps = rng.uniform(0.0, 2.0);
        IndifferenceConstraint a(q, eps, MaxEstimator::exact(index_actions(5)));
        IndifferenceConstraint b(q_shift, eps, MaxEstimator::exact(index_actions(5)));
        for (int act = 0; act < 5; ++act)
            CHECK(a.indicator({0.0}, {static_cast<double>(act)}) ==
                  b.indicator({0.0}, {static_cast<double>(act)}));
    }
}

TEST_CASE("zero-shot composition") {
    SUBCASE("empty stack is the identity composition") {
        auto q = row_q({1.0, -2.0, 0.5});
        ComposedQ composed = compose_zero_shot(ConstraintStack(), q);
        for (int a = 0; a < 3; ++a) {
            const auto v = composed.evaluate({0.0}, {static_cast<double>(a)});
            CHECK(v.permitted);
            CHECK(v.value == q->at(0, a));
        }
    }

    SUBCASE("forbidden wherever some indicator is zero, Q_n exactly otherwise") {
        auto q_high = row_q({3.0, 0.0, 3.0});
        auto q_low = row_q({-1.0, 7.0, 2.0});
        ConstraintStack stack(
            {IndifferenceConstraint(q_high, 0.5, MaxEstimator::exact(index_actions(3)))});
        ComposedQ composed = compose_zero_shot(stack, q_low);
        const auto v0 = composed.evaluate({0.0}, {0.0});
        CHECK(v0.permitted);
        CHECK(v0.value == doctest::Approx(-1.0));
        const auto v1 = composed.evaluate({0.0}, {1.0});
        CHECK_FALSE(v1.permitted);
        const auto v2 = composed.evaluate({0.0}, {2.0});
        CHECK(v2.permitted);
        CHECK(v2.value == doctest::Approx(2.0));
    }
}

TEST_CASE("arbiter sampling") {
    Rng rng(19);

    SUBCASE("no constraints, uniform Q: uniform over the set") {
        auto q = row_q({0.0, 0.0, 0.0, 0.0});
        ArbiterOptions opt;
        opt.exact_set = index_actions(4);
        ArbiterPolicy policy(ComposedQ(ConstraintStack(), q), nullptr, opt);
        std::vector<int> counts(4, 0);
        const int n = 10000;
        for (int i = 0; i < n; ++i) ++counts[static_cast<int>(policy.act({0.0}, rng)[0])];
        const double sigma = std::sqrt(n * 0.25 * 0.75);
        for (int c : counts) CHECK(std::abs(c - n / 4.0) <= 3.0 * sigma);
    }

    SUBCASE("half-plane constraint with uniform target") {
        // Constraint Q grows with a_x; the threshold sits just above the
        // half-plane gap so exactly a_x >= 0 stays permitted.
        const auto desc = continuous_2d_descriptor();
        auto q1 = std::make_shared<LinearActionQ>(desc, std::vector<double>{4.0, 0.0});
        auto q_low = std::make_shared<ConstantQ>(desc, 0.0);
        const auto bins = angular_action_bins(64);
        const double eps = 4.0001;
        ConstraintStack stack({IndifferenceConstraint(q1, eps, MaxEstimator::exact(bins))});

        std::vector<char> mask(bins.size());
        stack.mask({0.0, 0.0}, bins, mask);
        std::size_t permitted = 0;
        for (std::size_t k = 0; k < bins.size(); ++k) {
            const bool expect_bit = 4.0 * (1.0 - bins[k][0]) <= eps;
            CHECK(static_cast<bool>(mask[k]) == expect_bit);
            permitted += mask[k];
        }
        CHECK(permitted == 33); // 31 strictly right of the axis plus the two axis bins

        auto proposal = std::make_shared<UniformSetProposal>(bins);
        ArbiterOptions opt;
        opt.batch_size = 128;
        opt.rejection_cap = 4096;
        ArbiterPolicy policy(ComposedQ(stack, q_low), proposal, opt);

        const int n = 10000;
        std::vector<long> counts(bins.size(), 0);
        for (int i = 0; i < n; ++i) {
            const ActionVec a = policy.act({0.0, 0.0}, rng);
            CHECK(4.0 * (1.0 - a[0]) <= eps); // never a forbidden action
            double th = std::atan2(a[1], a[0]);
            if (th < 0) th += 2.0 * M_PI;
            // Emitted actions are bin vectors; round to the nearest bin.
            ++counts[static_cast<std::size_t>(std::lround(th / (2.0 * M_PI) * 64.0)) % 64];
        }
        // Uniform over the permitted bins: chi-square against the flat law.
        const double expect = static_cast<double>(n) / static_cast<double>(permitted);
        double stat = 0.0;
        for (std::size_t k = 0; k < bins.size(); ++k) {
            if (!mask[k]) {
                CHECK(counts[k] == 0);
                continue;
            }
            stat += (counts[k] - expect) * (counts[k] - expect) / expect;
        }
        // 0.999 quantile of chi-square with 32 dof is about 62.5.
        CHECK(stat < 62.5);
    }

    SUBCASE("conflicting constraints raise infeasibility with counts") {
        auto qa = row_q({1.0, 0.0});
        auto qb = row_q({0.0, 1.0});
        ConstraintStack stack({
            IndifferenceConstraint(qa, 0.0, MaxEstimator::exact(index_actions(2))),
            IndifferenceConstraint(qb, 0.0, MaxEstimator::exact(index_actions(2))),
        });
        auto q_low = row_q({0.0, 0.0});
        ArbiterOptions opt;
        opt.exact_set = index_actions(2);
        ArbiterPolicy policy(ComposedQ(stack, q_low), nullptr, opt);
        try {
            policy.act({0.0}, rng);
            CHECK(false);
        } catch (const InfeasibilityError& e) {
            REQUIRE(e.rejections.size() == 2);
            CHECK(e.rejections[0] == 1); // action 1 rejected by the first constraint
            CHECK(e.rejections[1] == 1); // action 0 passed it, rejected by the second
        }
    }
}

TEST_CASE("prioritized backup operator") {
    Gridworld env(goal_top_config(5, 5));
    const TabularDyn dyn = TabularDyn::from(env);
    Rng rng(29);

    SUBCASE("full mask reduces to the plain soft backup") {
        TabularQ q(env, 0.9);
        for (auto& v : q.raw()) v = rng.uniform(-5.0, 5.0);
        RewardTable reward(dyn.next.size());
        for (int s = 0; s < dyn.n_states; ++s)
            for (int a = 0; a < 4; ++a) reward[s * 4 + a] = env.reward_sa(2, s, a);
        const TabularQ via_stack = prioritized_backup(q, env, ConstraintStack(), 2);
        const TabularQ plain = soft_backup(q, dyn, reward, {});
        CHECK(sup_diff(via_stack.raw(), plain.raw()) == 0.0);
    }

    SUBCASE("single-action mask removes the entropy term") {
        // Constraint Q strongly prefers action 2 everywhere, epsilon 0.
        auto q_c = std::make_shared<TabularQ>(env, 0.9);
        for (int s = 0; s < env.n_states(); ++s) q_c->at(s, 2) = 10.0;
        ConstraintStack stack(
            {IndifferenceConstraint(q_c, 0.0, MaxEstimator::exact(index_actions(4)))});

        TabularQ q(env, 0.9);
        for (auto& v : q.raw()) v = rng.uniform(-5.0, 5.0);
        const TabularQ out = prioritized_backup(q, env, stack, 2);
        for (int s = 0; s < env.n_states(); ++s) {
            for (int a = 0; a < 4; ++a) {
                const int ns = dyn.next_of(s, a);
                const double expect = env.reward_sa(2, s, a) + 0.9 * q.at(ns, 2);
                CHECK(out.at(s, a) == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }

    SUBCASE("fixed point equals the restricted-MDP oracle") {
        GridworldConfig cfg = goal_top_config(5, 5);
        cfg.obstacles = {{2, 2}};
        cfg.goals.clear();
        for (int x = 0; x < 5; ++x)
            if (x != 2) cfg.goals.emplace_back(x, 4);
        cfg.goals.emplace_back(2, 4);
        Gridworld world(cfg);
        const TabularDyn wdyn = TabularDyn::from(world);

        // Converged high-priority Q from collision rewards.
        auto q1 = std::make_shared<TabularQ>(prioritized_soft_vi(world, {}, 1, 0.99, 1e-12).q);
        ConstraintStack stack(
            {IndifferenceConstraint(q1, 0.63, MaxEstimator::exact(index_actions(4)))});

        const auto fixed = prioritized_soft_vi(world, stack, 2, 0.99, 1e-12);

        const Mask mask = stack_mask(world, stack);
        RewardTable r2(wdyn.next.size());
        for (int s = 0; s < wdyn.n_states; ++s)
            for (int a = 0; a < 4; ++a) r2[s * 4 + a] = world.reward_sa(2, s, a);
        const auto oracle =
            oracle_soft_vi(wdyn.n_states, 4, wdyn.next, r2, mask, 0.99, 6000);
        CHECK(sup_diff(fixed.q.raw(), oracle) <= 1e-9);

        // Scalarization consistency: through the composition the fixed point
        // is Q_n on permitted pairs and forbidden elsewhere.
        auto q_fixed = std::make_shared<TabularQ>(fixed.q);
        ComposedQ composed = compose_zero_shot(stack, q_fixed);
        for (int s = 0; s < world.n_states(); ++s) {
            for (int a = 0; a < 4; ++a) {
                const auto v = composed.evaluate(world.state_of(s), {static_cast<double>(a)});
                CHECK(v.permitted == static_cast<bool>(mask[s * 4 + a]));
                if (v.permitted) CHECK(v.value == doctest::Approx(fixed.q.at(s, a)));
            }
        }
    }

    SUBCASE("empty mask raises infeasibility") {
        auto qa = std::make_shared<TabularQ>(env, 0.9);
        auto qb = std::make_shared<TabularQ>(env, 0.9);
        for (int s = 0; s < env.n_states(); ++s) {
            qa->at(s, 0) = 5.0;
            qb->at(s, 1) = 5.0;
        }
        ConstraintStack stack({
            IndifferenceConstraint(qa, 0.0, MaxEstimator::exact(index_actions(4))),
            IndifferenceConstraint(qb, 0.0, MaxEstimator::exact(index_actions(4))),
        });
        TabularQ q(env, 0.9);
        CHECK_THROWS_AS(prioritized_backup(q, env, stack, 2), InfeasibilityError);
    }
}

TEST_CASE("arbiter-view consistency on tabular instances") {
    // The masked optimality fixed point, re-evaluated on-policy under its
    // own Boltzmann arbiter, reproduces itself.
    GridworldConfig cfg = goal_top_config(4, 4);
    cfg.obstacles = {{1, 1}};
    cfg.goals = {{3, 3}};
    Gridworld env(cfg);
    const TabularDyn dyn = TabularDyn::from(env);

    auto q1 = std::make_shared<TabularQ>(prioritized_soft_vi(env, {}, 1, 0.9, 1e-13).q);
    ConstraintStack stack({IndifferenceConstraint(q1, 1.0, MaxEstimator::exact(index_actions(4)))});
    const Mask mask = stack_mask(env, stack);

    const auto fixed = prioritized_soft_vi(env, stack, 2, 0.9, 1e-13);

    RewardTable r2(dyn.next.size());
    for (int s = 0; s < dyn.n_states; ++s)
        for (int a = 0; a < 4; ++a) r2[s * 4 + a] = env.reward_sa(2, s, a);
    const auto pi = masked_softmax_policy(fixed.q.raw(), dyn.n_states, 4, mask);
    const auto on_policy = oracle_policy_eval(dyn.n_states, 4, dyn.next, r2, pi, 0.9, 2000);

    // Compare on mask-permitted pairs; the on-policy recurrence never
    // consults forbidden actions.
    double diff = 0.0;
    for (int s = 0; s < dyn.n_states; ++s)
        for (int a = 0; a < 4; ++a)
            if (mask[s * 4 + a])
                diff = std::max(diff, std::abs(on_policy[s * 4 + a] - fixed.q.at(s, a)));
    CHECK(diff <= 1e-8);
}

TEST_CASE("global indifference measure") {
    const auto bins = angular_action_bins(64);
    SUBCASE("no constraints: full measure") {
        CHECK(global_indifference_measure(ConstraintStack(), {0.0, 0.0}, bins) == 1.0);
    }

    SUBCASE("epsilon 0 on a strictly concave profile keeps one bin") {
        // Q peaks at a single bin direction.
        const auto desc = continuous_2d_descriptor();
        auto q = std::make_shared<LinearActionQ>(desc, std::vector<double>{0.0, 3.0});
        ConstraintStack stack({IndifferenceConstraint(q, 0.0, MaxEstimator::exact(bins))});
        CHECK(global_indifference_measure(stack, {0.0, 0.0}, bins) ==
              doctest::Approx(1.0 / 64.0));
    }

    SUBCASE("measure is non-decreasing in epsilon") {
        const auto desc = continuous_2d_descriptor();
        auto q = std::make_shared<LinearActionQ>(desc, std::vector<double>{1.3, -0.4});
        double prev = -1.0;
        for (const double eps : {0.0, 0.1, 0.25, 0.63, 1.58, 3.98, 10.0, 100.0}) {
            ConstraintStack stack({IndifferenceConstraint(q, eps, MaxEstimator::exact(bins))});
            const double m = global_indifference_measure(stack, {1.0, 2.0}, bins);
            CHECK(m >= prev);
            prev = m;
        }
        CHECK(prev == 1.0);
    }
}

TEST_CASE("sample-max estimation is deterministic per state and conservative") {
    const auto desc = continuous_2d_descriptor();
    auto q = std::make_shared<LinearActionQ>(desc, std::vector<double>{2.0, 1.0});
    const MaxEstimator est = MaxEstimator::sample_max(256, 99);
    const StateVec s = {1.0, -2.0};
    const double m1 = est.max_value(*q, s);
    const double m2 = est.max_value(*q, s);
    CHECK(m1 == m2);
    // True max over the unit circle is |w|; the sample max cannot exceed it.
    const double true_max = std::sqrt(2.0 * 2.0 + 1.0 * 1.0);
    CHECK(m1 <= true_max + 1e-12);
    CHECK(m1 > 0.9 * true_max);
}
