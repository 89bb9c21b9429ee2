#include "psqd/softq.hpp"

#include "psqd/env.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace psqd;
using namespace psqd::testing;

TEST_CASE("log_sum_exp basics and stability") {
    CHECK(log_sum_exp(std::vector<double>{0.0, 0.0}) == doctest::Approx(std::log(2.0)));
    CHECK(log_sum_exp(std::vector<double>{5.0}) == doctest::Approx(5.0));
    CHECK(log_sum_exp(std::vector<double>{1000.0, 1000.0}) ==
          doctest::Approx(1000.0 + std::log(2.0)));
    CHECK(log_sum_exp(std::vector<double>{-700.0, -700.0}) ==
          doctest::Approx(-700.0 + std::log(2.0)));
    CHECK_THROWS_AS(log_sum_exp(std::vector<double>{}), DomainError);
}

TEST_CASE("soft_value over discrete and sampled action sets") {
    SUBCASE("exact log-sum-exp over a Q row") {
        TabularQ q(1, 2, 0.9);
        q.at(0, 0) = 0.0;
        q.at(0, 1) = 0.0;
        const auto set = ActionSampleSet::exact({{0.0}, {1.0}});
        CHECK(soft_value(q, {0.0}, set) == doctest::Approx(std::log(2.0)));

        TabularQ single(1, 1, 0.9);
        single.at(0, 0) = 5.0;
        CHECK(soft_value(single, {0.0}, ActionSampleSet::exact({{0.0}})) == doctest::Approx(5.0));

        TabularQ big(1, 2, 0.9);
        big.at(0, 0) = 1000.0;
        big.at(0, 1) = 1000.0;
        CHECK(soft_value(big, {0.0}, set) == doctest::Approx(1000.0 + std::log(2.0)));
    }

    SUBCASE("importance estimate of the circle integral of a constant") {
        ConstantQ q(continuous_2d_descriptor(), 3.25);
        Rng rng(5);
        ActionSampleSet set;
        for (int i = 0; i < 512; ++i) {
            set.actions.push_back(rng.unit_vector(2));
            set.densities.push_back(1.0 / (2.0 * M_PI));
        }
        // For a constant integrand the estimator has zero variance.
        CHECK(soft_value(q, {0.0, 0.0}, set) ==
              doctest::Approx(3.25 + std::log(2.0 * M_PI)).epsilon(1e-12));
    }

    SUBCASE("empty candidate set") {
        TabularQ q(1, 2, 0.9);
        ActionSampleSet empty;
        CHECK_THROWS_AS(soft_value(q, {0.0}, empty), DomainError);
    }
}

TEST_CASE("soft value iteration fixed points") {
    SUBCASE("single state, single action") {
        TabularDyn dyn{1, 1, {0}};
        const auto res = soft_value_iteration(dyn, {1.0}, {}, 0.5, 1e-12);
        CHECK(res.q.at(0, 0) == doctest::Approx(2.0).epsilon(1e-9));
    }

    SUBCASE("single state, two zero-reward actions") {
        // Fixed point of q = gamma * (ln 2 + q) with gamma = 1/2 is ln 2.
        TabularDyn dyn{1, 2, {0, 0}};
        const auto res = soft_value_iteration(dyn, {0.0, 0.0}, {}, 0.5, 1e-12);
        CHECK(res.q.at(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
        CHECK(res.q.at(0, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }

    SUBCASE("masked iteration equals the restricted-MDP oracle") {
        GridworldConfig cfg;
        cfg.width = 5;
        cfg.height = 5;
        for (int x = 0; x < 5; ++x) cfg.goals.emplace_back(x, 4);
        Gridworld env(cfg);
        const TabularDyn dyn = TabularDyn::from(env);
        RewardTable reward(dyn.next.size());
        for (int s = 0; s < dyn.n_states; ++s)
            for (int a = 0; a < dyn.n_actions; ++a)
                reward[s * 4 + a] = env.reward_sa(2, s, a);

        // Remove action 3 everywhere.
        Mask mask(dyn.next.size(), 1);
        for (int s = 0; s < dyn.n_states; ++s) mask[s * 4 + 3] = 0;
        const auto masked = soft_value_iteration(dyn, reward, mask, 0.9, 1e-12);

        // Independent oracle on the explicit 3-action MDP.
        std::vector<int> next3(static_cast<std::size_t>(dyn.n_states) * 3);
        std::vector<double> reward3(next3.size());
        for (int s = 0; s < dyn.n_states; ++s) {
            for (int a = 0; a < 3; ++a) {
                next3[s * 3 + a] = dyn.next_of(s, a);
                reward3[s * 3 + a] = reward[s * 4 + a];
            }
        }
        const auto oracle = oracle_soft_vi(dyn.n_states, 3, next3, reward3, {}, 0.9, 600);
        double diff = 0.0;
        for (int s = 0; s < dyn.n_states; ++s)
            for (int a = 0; a < 3; ++a)
                diff = std::max(diff, std::abs(masked.q.at(s, a) - oracle[s * 3 + a]));
        CHECK(diff <= 1e-9);
    }

    SUBCASE("empty allowed set names the state") {
        TabularDyn dyn{2, 2, {0, 1, 0, 1}};
        Mask mask = {1, 1, 0, 0};
        try {
            soft_value_iteration(dyn, {0, 0, 0, 0}, mask, 0.9, 1e-9);
            CHECK(false);
        } catch (const InfeasibilityError& e) {
            CHECK(std::string(e.what()).find("1") != std::string::npos);
        }
    }
}

TEST_CASE("soft backup is a gamma-contraction and iterates monotonically") {
    Rng rng(17);
    GridworldConfig cfg;
    cfg.width = 4;
    cfg.height = 4;
    cfg.goals = {{3, 3}};
    Gridworld env(cfg);
    const TabularDyn dyn = TabularDyn::from(env);
    RewardTable reward(dyn.next.size());
    for (std::size_t i = 0; i < reward.size(); ++i) reward[i] = rng.uniform(-5.0, 5.0);

    for (const double gamma : {0.5, 0.9, 0.99}) {
        for (int trial = 0; trial < 100; ++trial) {
            Mask mask(dyn.next.size(), 0);
            for (int s = 0; s < dyn.n_states; ++s) {
                int count = 0;
                for (int a = 0; a < 4; ++a) {
                    mask[s * 4 + a] = rng.uniform() < 0.6 ? 1 : 0;
                    count += mask[s * 4 + a];
                }
                if (count == 0) mask[s * 4 + rng.uniform_int(4)] = 1;
            }
            TabularQ q1(dyn.n_states, dyn.n_actions, gamma);
            TabularQ q2(dyn.n_states, dyn.n_actions, gamma);
            for (std::size_t i = 0; i < q1.raw().size(); ++i) {
                q1.raw()[i] = rng.uniform(-20.0, 20.0);
                q2.raw()[i] = rng.uniform(-20.0, 20.0);
            }
            const TabularQ t1 = soft_backup(q1, dyn, reward, mask);
            const TabularQ t2 = soft_backup(q2, dyn, reward, mask);
            const double before = sup_diff(q1.raw(), q2.raw());
            const double after = sup_diff(t1.raw(), t2.raw());
            CHECK(after <= gamma * before * (1.0 + 1e-12) + 1e-12);
        }
    }

    SUBCASE("successive residuals shrink by gamma") {
        TabularQ q(dyn.n_states, dyn.n_actions, 0.9);
        TabularQ prev = q;
        double prev_resid = -1.0;
        for (int it = 0; it < 40; ++it) {
            TabularQ next = soft_backup(q, dyn, reward, {});
            const double resid = sup_diff(next.raw(), q.raw());
            if (prev_resid >= 0.0) CHECK(resid <= 0.9 * prev_resid + 1e-12);
            prev_resid = resid;
            q = next;
        }
    }
}

TEST_CASE("soft value bounds the max") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + rng.uniform_int(16);
        TabularQ q(1, n, 0.9);
        std::vector<ActionVec> set;
        double max_q = -1e300;
        for (int a = 0; a < n; ++a) {
            q.at(0, a) = rng.uniform(-50.0, 50.0);
            max_q = std::max(max_q, q.at(0, a));
            set.push_back({static_cast<double>(a)});
        }
        const double v = soft_value(q, {0.0}, ActionSampleSet::exact(set));
        CHECK(v >= max_q);
        CHECK(v <= max_q + std::log(static_cast<double>(n)) + 1e-12);
    }
}

namespace {

GridQ zero_grid(double gamma = 0.99, int nx = 8, int ny = 8, int bins = 8) {
    return GridQ(continuous_2d_descriptor(), nx, ny, bins, gamma);
}

Transition make_transition(const StateVec& s, const ActionVec& a, double r, const StateVec& next) {
    Transition t;
    t.state = s;
    t.action = a;
    t.reward = {r, 0.0, 0.0};
    t.next_state = next;
    return t;
}

} // namespace

TEST_CASE("td_update on the grid representation") {
    Rng rng(31);

    SUBCASE("zero residual leaves weights unchanged") {
        GridQ q = zero_grid(0.0); // gamma 0: target is the raw reward
        const auto before = q.clone();
        ValueEstimator est(q.bin_actions());
        std::vector<Transition> batch = {
            make_transition({0.0, 0.0}, {1.0, 0.0}, 0.0, {0.5, 0.0})};
        const double loss = q.td_update(batch, est, 0.1, rng);
        CHECK(loss == 0.0);
        CHECK(q.value({0.0, 0.0}, {1.0, 0.0}) ==
              before->value({0.0, 0.0}, {1.0, 0.0}));
        CHECK(q.value({3.3, -2.0}, {0.0, 1.0}) == before->value({3.3, -2.0}, {0.0, 1.0}));
    }

    SUBCASE("one gradient step shrinks the residual") {
        GridQ q = zero_grid();
        ValueEstimator est(q.bin_actions());
        std::vector<Transition> batch = {
            make_transition({1.0, 1.0}, {0.0, 1.0}, -5.0, {1.0, 1.5})};
        auto resid = [&]() {
            Rng r2(1);
            const double target = -5.0 + q.gamma() * est.target_value(q, {1.0, 1.5}, r2);
            return q.value({1.0, 1.0}, {0.0, 1.0}) - target;
        };
        const double before = resid();
        q.td_update(batch, est, 1.0, rng);
        const double after = resid();
        CHECK(std::abs(after) < std::abs(before));
    }

    SUBCASE("fixed batch descends monotonically after warmup") {
        GridQ q = zero_grid();
        ValueEstimator est(q.bin_actions());
        std::vector<Transition> batch;
        for (int i = 0; i < 16; ++i) {
            const StateVec s = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
            batch.push_back(make_transition(s, rng.unit_vector(2), rng.uniform(-5, 0),
                                            {rng.uniform(-10, 10), rng.uniform(-10, 10)}));
        }
        std::vector<double> losses;
        for (int step = 0; step < 200; ++step)
            losses.push_back(q.td_update(batch, est, 1e-2, rng));
        for (std::size_t i = 10; i + 1 < losses.size(); ++i) CHECK(losses[i + 1] <= losses[i]);
    }

    SUBCASE("non-finite target raises a training error") {
        GridQ q = zero_grid();
        ValueEstimator est(q.bin_actions());
        std::vector<Transition> batch = {make_transition(
            {0.0, 0.0}, {1.0, 0.0}, std::numeric_limits<double>::quiet_NaN(), {0.5, 0.0})};
        CHECK_THROWS_AS(q.td_update(batch, est, 0.1, rng), RuntimeAbort);
    }

    SUBCASE("empty batch is rejected") {
        GridQ q = zero_grid();
        ValueEstimator est(q.bin_actions());
        CHECK_THROWS_AS(q.td_update({}, est, 0.1, rng), DomainError);
    }
}

TEST_CASE("polyak target updates") {
    GridQ q = zero_grid();
    for (int ix = 0; ix < q.nx(); ++ix)
        for (int iy = 0; iy < q.ny(); ++iy)
            for (int b = 0; b < q.n_bins(); ++b) q.node(ix, iy, b) = 2.0;

    SUBCASE("tau = 1 copies the online weights") {
        q.polyak_update(1.0);
        CHECK(q.value_target({0.0, 0.0}, {1.0, 0.0}) == doctest::Approx(2.0));
    }

    SUBCASE("tau = 1/2 is the midpoint") {
        q.polyak_update(0.5);
        CHECK(q.value_target({0.0, 0.0}, {1.0, 0.0}) == doctest::Approx(1.0));
    }

    SUBCASE("repeated small tau converges geometrically") {
        double prev_gap = 2.0;
        for (int i = 0; i < 20; ++i) {
            q.polyak_update(0.1);
            const double gap = 2.0 - q.value_target({0.0, 0.0}, {1.0, 0.0});
            CHECK(gap == doctest::Approx(0.9 * prev_gap).epsilon(1e-9));
            prev_gap = gap;
        }
    }

    SUBCASE("tau outside (0, 1] is rejected") {
        CHECK_THROWS_AS(q.polyak_update(0.0), DomainError);
        CHECK_THROWS_AS(q.polyak_update(1.5), DomainError);
    }
}

TEST_CASE("boltzmann sampling matches the target distribution") {
    Rng rng(41);

    SUBCASE("uniform Q over four discrete actions") {
        TabularQ q(1, 4, 0.9);
        UniformSetProposal prop({{0.0}, {1.0}, {2.0}, {3.0}});
        std::vector<int> counts(4, 0);
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            const ActionVec a = boltzmann_sample(q, {0.0}, prop, rng, 64);
            ++counts[static_cast<int>(a[0])];
        }
        const double expect = n / 4.0;
        const double sigma = std::sqrt(n * 0.25 * 0.75);
        for (int c : counts) CHECK(std::abs(c - expect) <= 3.0 * sigma);
    }

    SUBCASE("ln 3 gap gives a 3:1 ratio") {
        TabularQ q(1, 2, 0.9);
        q.at(0, 0) = std::log(3.0);
        q.at(0, 1) = 0.0;
        UniformSetProposal prop({{0.0}, {1.0}});
        int first = 0;
        const int n = 10000;
        for (int i = 0; i < n; ++i)
            if (boltzmann_sample(q, {0.0}, prop, rng, 64)[0] == 0.0) ++first;
        const double sigma = std::sqrt(n * 0.75 * 0.25);
        CHECK(std::abs(first - 0.75 * n) <= 3.0 * sigma);
    }

    SUBCASE("continuous circle density proportional to exp(k sin theta)") {
        const double k = 2.0;
        LinearActionQ q(continuous_2d_descriptor(), {0.0, k});
        UniformSphereProposal prop(2);
        const int bins = 16;
        const int n = 20000;
        std::vector<long> counts(bins, 0);
        for (int i = 0; i < n; ++i) {
            const ActionVec a = boltzmann_sample(q, {0.0, 0.0}, prop, rng, 512);
            double th = std::atan2(a[1], a[0]);
            if (th < 0) th += 2.0 * M_PI;
            ++counts[static_cast<int>(th / (2.0 * M_PI) * bins) % bins];
        }
        // Reference: direct normalization of exp(k sin) on a 4096-point grid.
        std::vector<double> expected(bins, 0.0);
        double z = 0.0;
        for (int g = 0; g < 4096; ++g) {
            const double th = 2.0 * M_PI * (g + 0.5) / 4096.0;
            const double w = std::exp(k * std::sin(th));
            expected[static_cast<int>(th / (2.0 * M_PI) * bins) % bins] += w;
            z += w;
        }
        double mean_x = 0.0, mean_y = 0.0;
        for (int b = 0; b < bins; ++b) {
            const double p = expected[b] / z;
            const double emp = static_cast<double>(counts[b]) / n;
            const double sigma = std::sqrt(std::max(p * (1 - p) / n, 1e-12));
            CHECK(std::abs(emp - p) <= 5.0 * sigma + 5e-3);
        }
        for (int i = 0; i < 2000; ++i) {
            const ActionVec a = boltzmann_sample(q, {0.0, 0.0}, prop, rng, 512);
            mean_x += a[0];
            mean_y += a[1];
        }
        CHECK(mean_y / 2000.0 > 0.5);
        CHECK(std::abs(mean_x / 2000.0) < 0.1);
    }

    SUBCASE("constant shift leaves the sampling distribution unchanged") {
        TabularQ q(1, 4, 0.9);
        for (int a = 0; a < 4; ++a) q.at(0, a) = 0.3 * a;
        TabularQ shifted = q;
        for (int a = 0; a < 4; ++a) shifted.at(0, a) += 123.0;

        UniformSetProposal prop({{0.0}, {1.0}, {2.0}, {3.0}});
        // Exact Boltzmann masses for the expected counts.
        std::vector<double> p(4);
        double z = 0.0;
        for (int a = 0; a < 4; ++a) {
            p[a] = std::exp(0.3 * a);
            z += p[a];
        }
        for (auto& v : p) v /= z;

        const int n = 10000;
        auto chi_square = [&](const SoftQ& qq, Rng& r) {
            std::vector<int> counts(4, 0);
            for (int i = 0; i < n; ++i)
                ++counts[static_cast<int>(boltzmann_sample(qq, {0.0}, prop, r, 128)[0])];
            double stat = 0.0;
            for (int a = 0; a < 4; ++a) {
                const double e = n * p[a];
                stat += (counts[a] - e) * (counts[a] - e) / e;
            }
            return stat;
        };
        Rng r1(77), r2(77);
        // 0.999 quantile of chi-square with 3 dof is about 16.3.
        CHECK(chi_square(q, r1) < 16.3);
        CHECK(chi_square(shifted, r2) < 16.3);
    }

    SUBCASE("degenerate proposals are an error") {
        TabularQ q(1, 2, 0.9);
        UniformSetProposal prop({{0.0}, {1.0}});
        CHECK_THROWS_AS(boltzmann_sample(q, {0.0}, prop, rng, 0), DomainError);
    }
}

TEST_CASE("mlp gradients match central finite differences") {
    Rng rng(53);
    for (int trial = 0; trial < 20; ++trial) {
        EnvDescriptor desc;
        desc.state_dim = 2 + rng.uniform_int(4);
        desc.action_dim = 1 + rng.uniform_int(4);
        desc.subtask_count = 1;
        desc.horizon = 10;
        desc.bounds_lo.assign(desc.state_dim, -1.0);
        desc.bounds_hi.assign(desc.state_dim, 1.0);
        const std::vector<int> hidden = {4 + rng.uniform_int(8), 4 + rng.uniform_int(8)};
        MlpQ q(desc, hidden, 0.99, rng);

        StateVec s(desc.state_dim);
        for (auto& x : s) x = rng.uniform(-1, 1);
        ActionVec a(desc.action_dim);
        for (auto& x : a) x = rng.uniform(-1, 1);

        std::vector<double> grad(q.parameters().size());
        q.value_gradient(s, a, grad);

        const double eps = 1e-6;
        for (int probe = 0; probe < 24; ++probe) {
            const std::size_t i =
                static_cast<std::size_t>(rng.uniform_int(static_cast<int>(grad.size())));
            const double orig = q.parameters()[i];
            q.parameters()[i] = orig + eps;
            const double up = q.value(s, a);
            q.parameters()[i] = orig - eps;
            const double down = q.value(s, a);
            q.parameters()[i] = orig;
            const double fd = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
            CHECK(std::abs(fd - grad[i]) / denom <= 1e-5);
        }
    }
}

TEST_CASE("mlp td step reduces residual on a fixed batch") {
    Rng rng(59);
    EnvDescriptor desc;
    desc.state_dim = 3;
    desc.action_dim = 3;
    desc.subtask_count = 1;
    desc.horizon = 10;
    desc.bounds_lo.assign(3, -1.0);
    desc.bounds_hi.assign(3, 1.0);
    MlpQ q(desc, {16, 16}, 0.0, rng); // gamma 0 keeps the target fixed
    auto proposal = std::make_shared<UniformSphereProposal>(3);
    ValueEstimator est(proposal, 8);

    std::vector<Transition> batch;
    for (int i = 0; i < 8; ++i) {
        Transition t;
        t.state = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        t.action = rng.unit_vector(3);
        t.reward = {rng.uniform(-1, 1)};
        t.next_state = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        batch.push_back(std::move(t));
    }
    double prev = 1e300;
    for (int step = 0; step < 50; ++step) {
        const double loss = q.td_update(batch, est, 1e-2, rng);
        if (step > 5) CHECK(loss <= prev * (1.0 + 1e-9));
        prev = loss;
    }
}

TEST_CASE("rng streams are reproducible and forkable") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng f1 = Rng(9).fork(1), f2 = Rng(9).fork(2);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ |= f1.next_u64() != f2.next_u64();
    CHECK(differ);
    Rng u(7);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}
